#include "cotvla/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cotvla/error.hpp"

namespace cotvla {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_action_values(std::span<const double> values) {
  if (values.size() != kActionDims) {
    throw Error("data", "action length " + std::to_string(values.size()) + " != 7");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (!std::isfinite(v) || v < -1.0 || v > 1.0) {
      std::ostringstream os;
      os << "action component " << i << " = " << v << " outside [-1, 1]";
      throw Error("data", os.str());
    }
  }
}

json image_to_json(const ImageGrid& image) {
  json rows = json::array();
  for (int y = 0; y < image.size; ++y) {
    json row = json::array();
    for (int x = 0; x < image.size; ++x) row.push_back(image.at(x, y));
    rows.push_back(std::move(row));
  }
  return rows;
}

ImageGrid image_from_json(const json& rows, const std::string& where) {
  if (!rows.is_array() || rows.empty()) throw Error("data", where + ": image must be a non-empty array of rows");
  ImageGrid image = ImageGrid::blank(static_cast<int>(rows.size()));
  for (int y = 0; y < image.size; ++y) {
    const json& row = rows[static_cast<std::size_t>(y)];
    if (!row.is_array() || static_cast<int>(row.size()) != image.size) {
      throw Error("data", where + ": image row " + std::to_string(y) + " is not a square-grid row");
    }
    for (int x = 0; x < image.size; ++x) {
      const json& v = row[static_cast<std::size_t>(x)];
      if (!v.is_number_integer() || v.get<int>() < 0 || v.get<int>() > 255) {
        throw Error("data", where + ": image cell must be an integer in [0, 255]");
      }
      image.set(x, y, static_cast<std::uint8_t>(v.get<int>()));
    }
  }
  return image;
}

const json& require(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw Error("data", where + ": missing field '" + key + "'");
  return *it;
}

std::string require_string(const json& j, const char* key, const std::string& where) {
  const json& v = require(j, key, where);
  if (!v.is_string()) throw Error("data", where + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace

ContinuousAction::ContinuousAction(const std::array<double, kActionDims>& values) : values_(values) {
  check_action_values(values_);
}

ContinuousAction ContinuousAction::from_values(std::span<const double> values) {
  check_action_values(values);
  std::array<double, kActionDims> a{};
  std::copy(values.begin(), values.end(), a.begin());
  return ContinuousAction(a);
}

double ContinuousAction::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

ImageGrid ImageGrid::blank(int size) {
  ImageGrid g;
  g.size = size;
  g.cells.assign(static_cast<std::size_t>(size * size), 0);
  return g;
}

bool Episode::enriched() const {
  return !steps.empty() &&
         std::all_of(steps.begin(), steps.end(), [](const Step& s) { return s.trace.has_value(); });
}

void validate_episode(const Episode& episode) {
  const std::string who = "episode '" + episode.episode_id + "'";
  auto fail = [&](const std::string& what) { throw Error("data", who + ": " + what); };
  if (episode.episode_id.empty()) throw Error("data", "episode with empty episode_id");
  if (episode.steps.empty()) fail("has no steps");
  const std::string& instruction = episode.steps.front().observation.instruction;
  if (instruction.empty()) fail("empty instruction");
  const bool has_trace = episode.steps.front().trace.has_value();
  const int grid = episode.steps.front().observation.images.empty()
                       ? 0
                       : episode.steps.front().observation.images.front().size;
  for (std::size_t t = 0; t < episode.steps.size(); ++t) {
    const Step& step = episode.steps[t];
    const std::string at = "step " + std::to_string(t) + ": ";
    if (step.observation.images.empty()) fail(at + "observation has no images");
    for (const ImageGrid& img : step.observation.images) {
      if (img.size != grid || img.cells.size() != static_cast<std::size_t>(grid * grid)) {
        fail(at + "images do not share one grid size");
      }
    }
    if (step.observation.instruction != instruction) fail(at + "instruction differs from step 0");
    if (step.trace.has_value() != has_trace) fail(at + "traces must be present on every step or on none");
    try {
      check_action_values(step.action.values());
    } catch (const Error& e) {
      fail(at + e.what());
    }
  }
}

json trace_to_json(const ReasoningTrace& trace) {
  return json{{"observation", trace.observation},
              {"situation_analysis", trace.situation_analysis},
              {"spatial_reasoning", trace.spatial_reasoning},
              {"task_planning", trace.task_planning},
              {"logical_steps", trace.logical_steps},
              {"sub_action", trace.sub_action}};
}

ReasoningTrace trace_from_json(const json& j) {
  const std::string where = "trace";
  if (!j.is_object()) throw Error("data", "trace entry must be an object");
  ReasoningTrace t;
  t.observation = require_string(j, "observation", where);
  t.situation_analysis = require_string(j, "situation_analysis", where);
  t.spatial_reasoning = require_string(j, "spatial_reasoning", where);
  t.task_planning = require_string(j, "task_planning", where);
  t.sub_action = require_string(j, "sub_action", where);
  const json& steps = require(j, "logical_steps", where);
  if (!steps.is_array()) throw Error("data", "trace: 'logical_steps' must be an array");
  for (const json& s : steps) {
    if (!s.is_string()) throw Error("data", "trace: logical step must be a string");
    t.logical_steps.push_back(s.get<std::string>());
  }
  return t;
}

json episode_to_json(const Episode& episode) {
  json steps = json::array();
  for (const Step& step : episode.steps) {
    json images = json::array();
    for (const ImageGrid& img : step.observation.images) images.push_back(image_to_json(img));
    json s{{"images", std::move(images)}, {"action", step.action.values()}};
    if (step.trace) s["trace"] = trace_to_json(*step.trace);
    steps.push_back(std::move(s));
  }
  return json{{"episode_id", episode.episode_id},
              {"task_name", episode.task_name},
              {"instruction", episode.steps.empty() ? std::string() : episode.instruction()},
              {"steps", std::move(steps)},
              {"metadata", episode.metadata}};
}

Episode episode_from_json(const json& j, const std::string& context) {
  if (!j.is_object()) throw Error("data", context + ": record must be a JSON object");
  Episode ep;
  ep.episode_id = require_string(j, "episode_id", context);
  ep.task_name = require_string(j, "task_name", context);
  const std::string instruction = require_string(j, "instruction", context);
  if (auto it = j.find("metadata"); it != j.end()) {
    if (!it->is_object()) throw Error("data", context + ": field 'metadata' must be an object");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_string()) throw Error("data", context + ": metadata value '" + k + "' must be a string");
      ep.metadata[k] = v.get<std::string>();
    }
  }
  const json& steps = require(j, "steps", context);
  if (!steps.is_array()) throw Error("data", context + ": field 'steps' must be an array");
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const json& s = steps[t];
    const std::string where = context + ": episode '" + ep.episode_id + "' step " + std::to_string(t);
    if (!s.is_object()) throw Error("data", where + ": step must be an object");
    Step step;
    step.observation.instruction = instruction;
    const json& images = require(s, "images", where);
    if (!images.is_array()) throw Error("data", where + ": field 'images' must be an array");
    for (const json& img : images) step.observation.images.push_back(image_from_json(img, where));
    const json& action = require(s, "action", where);
    if (!action.is_array()) throw Error("data", where + ": field 'action' must be an array");
    std::vector<double> values;
    for (const json& v : action) {
      if (!v.is_number()) throw Error("data", where + ": field 'action' must hold numbers");
      values.push_back(v.get<double>());
    }
    try {
      step.action = ContinuousAction::from_values(values);
    } catch (const Error& e) {
      throw Error("data", where + ": " + e.what());
    }
    if (auto it = s.find("trace"); it != s.end() && !it->is_null()) {
      try {
        step.trace = trace_from_json(*it);
      } catch (const Error& e) {
        throw Error("data", where + ": " + e.what());
      }
    }
    ep.steps.push_back(std::move(step));
  }
  return ep;
}

std::vector<Episode> load_episodes(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("data", "cannot open episode file " + path.string());
  std::vector<Episode> episodes;
  std::set<std::string> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string context = path.filename().string() + " line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error("data", context + ": malformed JSON: " + e.what());
    }
    Episode ep = episode_from_json(j, context);
    validate_episode(ep);
    if (!ids.insert(ep.episode_id).second) {
      throw Error("data", context + ": duplicate episode_id '" + ep.episode_id + "'");
    }
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

void save_episodes(const fs::path& path, std::span<const Episode> episodes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io", "cannot write episode file " + path.string());
  for (const Episode& ep : episodes) {
    validate_episode(ep);
    out << episode_to_json(ep).dump() << '\n';
  }
  if (!out) throw Error("io", "write failed for " + path.string());
}

fs::path trace_file_path(const fs::path& traces_dir, const std::string& episode_id) {
  return traces_dir / (episode_id + ".json");
}

std::vector<TraceEntry> load_trace_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("data", "missing trace file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("data", path.string() + ": malformed JSON: " + e.what());
  }
  if (!j.is_array()) throw Error("data", path.string() + ": trace file must hold a JSON array");
  std::vector<TraceEntry> entries;
  for (std::size_t t = 0; t < j.size(); ++t) {
    const json& e = j[t];
    TraceEntry entry;
    if (e.is_object() && e.contains("raw")) {
      if (!e["raw"].is_string()) throw Error("data", path.string() + ": entry " + std::to_string(t) + " raw must be a string");
      entry.raw = e["raw"].get<std::string>();
    } else {
      try {
        entry.trace = trace_from_json(e);
      } catch (const Error& err) {
        throw Error("data", path.string() + ": entry " + std::to_string(t) + ": " + err.what());
      }
    }
    entries.push_back(std::move(entry));
  }
  return entries;
}

void save_trace_file(const fs::path& path, std::span<const TraceEntry> entries) {
  json j = json::array();
  for (const TraceEntry& e : entries) {
    j.push_back(e.trace ? trace_to_json(*e.trace) : json{{"raw", e.raw}});
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("io", "cannot write trace file " + tmp.string());
    out << j.dump(1) << '\n';
    if (!out) throw Error("io", "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

AttachResult attach_traces(std::span<const Episode> episodes, const fs::path& traces_dir,
                           const AttachOptions& options) {
  AttachResult result;
  for (const Episode& ep : episodes) {
    const fs::path file = trace_file_path(traces_dir, ep.episode_id);
    if (!fs::exists(file)) throw Error("data", "missing trace file for episode '" + ep.episode_id + "'");
    std::vector<TraceEntry> entries = load_trace_file(file);
    if (entries.size() != ep.steps.size()) {
      throw Error("data", "episode '" + ep.episode_id + "': step-count mismatch (" +
                              std::to_string(ep.steps.size()) + " steps, " +
                              std::to_string(entries.size()) + " traces)");
    }
    auto bad = std::find_if(entries.begin(), entries.end(), [](const TraceEntry& e) { return !e.ok(); });
    if (bad != entries.end()) {
      if (options.skip_unparsed) {
        result.skipped_episode_ids.push_back(ep.episode_id);
        continue;
      }
      throw Error("data", "episode '" + ep.episode_id + "': unparseable trace entry at step " +
                              std::to_string(bad - entries.begin()));
    }
    Episode enriched = ep;
    for (std::size_t t = 0; t < entries.size(); ++t) enriched.steps[t].trace = entries[t].trace;
    result.episodes.push_back(std::move(enriched));
  }
  return result;
}

std::vector<Episode> attach_traces(std::span<const Episode> episodes, const fs::path& traces_dir) {
  return attach_traces(episodes, traces_dir, AttachOptions{}).episodes;
}

std::vector<Episode> strip_traces(std::span<const Episode> episodes) {
  std::vector<Episode> out(episodes.begin(), episodes.end());
  for (Episode& ep : out) {
    for (Step& s : ep.steps) s.trace.reset();
  }
  return out;
}

}  // namespace cotvla
