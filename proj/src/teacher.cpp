#include "cotvla/teacher.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <thread>

#include "httplib.h"

namespace cotvla::teacher {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Drops markdown emphasis and LaTeX-escaped underscores.
std::string normalize_markup(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '*' || c == '`') continue;
    if (c == '\\' && i + 1 < text.size() && text[i + 1] == '_') continue;
    if (c == '_' && i + 1 < text.size() && text[i + 1] == '_') {
      ++i;
      continue;
    }
    out.push_back(c);
  }
  return out;
}

// Section body cleanup: leading ':' / '-', trailing "#N" question markers.
std::string clean_section(std::string_view body) {
  std::string s = trim(body);
  while (!s.empty() && (s.front() == ':' || s.front() == '-')) s = trim(std::string_view(s).substr(1));
  static const std::regex trailing_marker(R"((\s*#\s*\d*\s*)+$)");
  s = std::regex_replace(s, trailing_marker, "");
  return trim(s);
}

struct TagMatch {
  std::size_t begin = std::string::npos;
  std::size_t end = std::string::npos;
};

TagMatch find_tag(const std::string& text, const std::regex& re) {
  std::smatch m;
  if (!std::regex_search(text, m, re)) return {};
  return {static_cast<std::size_t>(m.position(0)), static_cast<std::size_t>(m.position(0) + m.length(0))};
}

const std::regex& section_regex(int i) {
  static const std::regex res[4] = {
      std::regex(R"(<\s*observation\s*>)", std::regex::icase),
      std::regex(R"(<\s*situation[\s_]*analysis\s*>)", std::regex::icase),
      std::regex(R"(<\s*spatial[\s_]*reasoning\s*>)", std::regex::icase),
      std::regex(R"(<\s*task[\s_]*planning\s*>)", std::regex::icase),
  };
  return res[i];
}

void split_planning(const std::string& body, ReasoningTrace& trace) {
  static const std::regex steps_tag(R"(<\s*/?\s*logical[\s_]*steps\s*>)", std::regex::icase);
  static const std::regex sub_tag(R"(<\s*sub[\s_]*action\s*>)", std::regex::icase);
  static const std::regex close_tags(R"(<\s*/\s*(logical[\s_]*steps|sub[\s_]*action)\s*>)", std::regex::icase);
  static const std::regex item_tag(R"(<\s*(\d+)\s*>)");

  const TagMatch steps = find_tag(body, steps_tag);
  const TagMatch sub = find_tag(body, sub_tag);
  std::size_t prose_end = std::min(steps.begin, sub.begin);
  if (prose_end == std::string::npos) prose_end = body.size();
  std::string prose = clean_section(body.substr(0, prose_end));
  while (!prose.empty() && prose.back() == ':') prose = trim(std::string_view(prose).substr(0, prose.size() - 1));

  if (steps.begin != std::string::npos) {
    const std::size_t list_end = (sub.begin != std::string::npos && sub.begin > steps.end) ? sub.begin : body.size();
    const std::string list = std::regex_replace(body.substr(steps.end, list_end - steps.end), close_tags, " ");
    std::vector<std::pair<std::size_t, std::size_t>> items;  // (tag begin, tag end)
    for (auto it = std::sregex_iterator(list.begin(), list.end(), item_tag); it != std::sregex_iterator(); ++it) {
      items.emplace_back(static_cast<std::size_t>(it->position(0)),
                         static_cast<std::size_t>(it->position(0) + it->length(0)));
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
      const std::size_t from = items[i].second;
      const std::size_t to = i + 1 < items.size() ? items[i + 1].first : list.size();
      std::string item = trim(std::string_view(list).substr(from, to - from));
      if (!item.empty()) trace.logical_steps.push_back(std::move(item));
    }
  }
  if (sub.begin != std::string::npos) {
    trace.sub_action = trim(std::regex_replace(body.substr(sub.end), close_tags, " "));
  }
  if (prose.empty() && !trace.logical_steps.empty()) {
    for (std::size_t i = 0; i < trace.logical_steps.size(); ++i) {
      if (i > 0) prose += "; ";
      prose += trace.logical_steps[i];
    }
  }
  trace.task_planning = std::move(prose);
}

}  // namespace

std::string build_prompt(std::string_view instruction) {
  if (trim(instruction).empty()) throw Error("teacher", "empty instruction");
  std::string p;
  p += "You are a robot. Given the images from different angles and instructions, observe the scene and reason "
       "step-by-step about what you see, what each object is, and what actions might be possible.\n";
  p += "Instruction: ";
  p += instruction;
  p += "\n";
  p += "Now think carefully and describe:\n";
  p += "#1 <Observation>: What do you see in the image?\n";
  p += "#2 <Situation Analysis>: What is happening in the scene, and what is the task?\n";
  p += "#3 <Spatial Reasoning>: How are the objects arranged, and what spatial relationships matter for completing "
       "the task?\n";
  p += "#4 <Task Planning>: What are the logical steps to achieve the task, and what should be the robot's next "
       "action?\n";
  return p;
}

ReasoningTrace parse_trace(std::string_view teacher_text) {
  const std::string text = normalize_markup(teacher_text);
  std::array<TagMatch, 4> tags;
  for (int i = 0; i < 4; ++i) {
    tags[static_cast<std::size_t>(i)] = find_tag(text, section_regex(i));
    if (tags[static_cast<std::size_t>(i)].begin == std::string::npos) {
      throw TraceParseError("missing <" + std::string(kSectionHeaders[i]) + "> section", std::string(teacher_text));
    }
  }
  std::array<int, 4> order = {0, 1, 2, 3};
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return tags[static_cast<std::size_t>(a)].begin < tags[static_cast<std::size_t>(b)].begin;
  });
  std::array<std::string, 4> bodies;
  for (std::size_t k = 0; k < 4; ++k) {
    const TagMatch& t = tags[static_cast<std::size_t>(order[k])];
    const std::size_t end = k + 1 < 4 ? tags[static_cast<std::size_t>(order[k + 1])].begin : text.size();
    bodies[static_cast<std::size_t>(order[k])] = text.substr(t.end, end - t.end);
  }

  ReasoningTrace trace;
  trace.observation = clean_section(bodies[0]);
  trace.situation_analysis = clean_section(bodies[1]);
  trace.spatial_reasoning = clean_section(bodies[2]);
  split_planning(clean_section(bodies[3]), trace);

  const std::array<const std::string*, 4> fields = {&trace.observation, &trace.situation_analysis,
                                                    &trace.spatial_reasoning, &trace.task_planning};
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (fields[i]->empty()) {
      throw TraceParseError("empty <" + std::string(kSectionHeaders[i]) + "> section", std::string(teacher_text));
    }
  }
  return trace;
}

std::string render_trace_text(const ReasoningTrace& trace) {
  std::string out = "<Reasoning>\n";
  out += "<Observation>: " + trace.observation + "\n";
  out += "<Situation Analysis>: " + trace.situation_analysis + "\n";
  out += "<Spatial Reasoning>: " + trace.spatial_reasoning + "\n";
  out += "<Task Planning>: " + trace.task_planning;
  if (!trace.logical_steps.empty()) {
    out += " <logical_steps>";
    for (std::size_t i = 0; i < trace.logical_steps.size(); ++i) {
      out += "<" + std::to_string(i + 1) + "> " + trace.logical_steps[i] + " ";
    }
  }
  if (!trace.sub_action.empty()) out += "<sub_action> " + trace.sub_action;
  out += "\n";
  return out;
}

std::string rule_based_generate(const sim::WorldState& world, const sim::TaskSpec& task) {
  sim::check_task(world, task);
  return render_trace_text(sim::ground_truth_trace(world, task));
}

std::string RuleBasedTeacher::generate(std::span<const ImageGrid> images, std::string_view instruction,
                                       std::string_view /*prompt*/) {
  if (images.empty()) throw Error("teacher", "no images for the rule-based teacher");
  auto [world, task] = sim::perceive(images.front(), instruction);
  return rule_based_generate(world, task);
}

RemoteTeacherConfig RemoteTeacherConfig::from_env() {
  RemoteTeacherConfig c;
  if (const char* url = std::getenv("TEACHER_URL")) c.url = url;
  if (const char* key = std::getenv("TEACHER_API_KEY")) c.api_key = key;
  if (const char* t = std::getenv("TEACHER_TIMEOUT_S")) {
    try {
      c.timeout_s = std::stod(t);
    } catch (const std::exception&) {
      throw Error("teacher", "TEACHER_TIMEOUT_S is not a number");
    }
  }
  return c;
}

RemoteTeacher::RemoteTeacher(RemoteTeacherConfig config) : config_(std::move(config)) {
  if (config_.url.empty()) throw Error("teacher", "remote teacher needs TEACHER_URL");
  std::string base = config_.url;
  while (!base.empty() && base.back() == '/') base.pop_back();
  if (base.ends_with("/generate")) base.resize(base.size() - std::string_view("/generate").size());
  if (base.find("://") == std::string::npos) base = "http://" + base;
  if (!base.starts_with("http://")) throw Error("teacher", "only http:// teacher URLs are supported");
  scheme_host_port_ = base;
  if (config_.max_retries < 0) throw Error("teacher", "max_retries must be >= 0");
}

std::string RemoteTeacher::request_body(std::span<const ImageGrid> images, std::string_view instruction,
                                        std::string_view prompt) {
  json encoded = json::array();
  for (const ImageGrid& img : images) {
    const std::string bytes(img.cells.begin(), img.cells.end());
    encoded.push_back(httplib::detail::base64_encode(bytes));
  }
  return json{{"prompt", prompt}, {"images", encoded}, {"instruction", instruction}}.dump();
}

std::string RemoteTeacher::generate(std::span<const ImageGrid> images, std::string_view instruction,
                                    std::string_view prompt) {
  const std::string body = request_body(images, instruction, prompt);
  const auto timeout = std::chrono::duration<double>(config_.timeout_s);
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(config_.backoff * (1LL << (attempt - 1)));
    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    if (!config_.api_key.empty()) client.set_bearer_token_auth(config_.api_key);
    auto res = client.Post("/generate", body, "application/json");
    if (!res || res->status != 200) continue;
    try {
      const json reply = json::parse(res->body);
      if (reply.is_object() && reply.contains("text") && reply["text"].is_string()) {
        return reply["text"].get<std::string>();
      }
    } catch (const json::exception&) {
    }
  }
  return {};
}

json AnnotationReport::to_json() const {
  json f = json::array();
  for (const AnnotationFailure& x : failures) {
    f.push_back(json{{"episode_id", x.episode_id}, {"step", x.step_index}, {"reason", x.reason}});
  }
  return json{{"episodes_total", episodes_total}, {"steps_total", steps_total},
              {"steps_annotated", steps_annotated}, {"steps_failed", steps_failed},
              {"steps_skipped", steps_skipped}, {"backend_calls", backend_calls},
              {"failures", f}};
}

AnnotationReport annotate_dataset(TeacherBackend& backend, std::span<const Episode> episodes,
                                  const fs::path& out_dir, int workers) {
  if (workers < 1) throw Error("teacher", "workers must be >= 1");
  try {
    fs::create_directories(out_dir);
    const fs::path probe = out_dir / ".write_probe";
    std::ofstream(probe) << "ok";
    if (!fs::exists(probe)) throw Error("io", "unwritable");
    fs::remove(probe);
  } catch (const std::exception&) {
    throw Error("io", "output directory is not writable: " + out_dir.string());
  }

  struct EpisodeWork {
    std::vector<TraceEntry> entries;
    std::atomic<int> remaining{0};
  };
  struct Job {
    std::size_t episode;
    std::size_t step;
  };

  AnnotationReport report;
  report.episodes_total = static_cast<int>(episodes.size());
  std::vector<EpisodeWork> work(episodes.size());
  std::vector<Job> jobs;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Episode& ep = episodes[e];
    report.steps_total += static_cast<int>(ep.steps.size());
    work[e].entries.assign(ep.steps.size(), TraceEntry{});
    std::vector<bool> done(ep.steps.size(), false);
    const fs::path file = trace_file_path(out_dir, ep.episode_id);
    if (fs::exists(file)) {
      try {
        std::vector<TraceEntry> existing = load_trace_file(file);
        if (existing.size() == ep.steps.size()) {
          for (std::size_t t = 0; t < existing.size(); ++t) {
            if (existing[t].ok()) {
              work[e].entries[t] = std::move(existing[t]);
              done[t] = true;
              ++report.steps_skipped;
            }
          }
        }
      } catch (const Error&) {
        // Unreadable leftovers are re-annotated from scratch.
      }
    }
    int pending = 0;
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      if (!done[t]) {
        jobs.push_back(Job{e, t});
        ++pending;
      }
    }
    work[e].remaining.store(pending);
  }

  std::mutex report_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<int> calls{0};
  std::vector<AnnotationFailure> failures;
  std::exception_ptr write_error;

  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      const Job job = jobs[i];
      const Episode& ep = episodes[job.episode];
      const Step& step = ep.steps[job.step];
      TraceEntry entry;
      std::string failure;
      std::string text;
      try {
        const std::string prompt = build_prompt(step.observation.instruction);
        calls.fetch_add(1);
        text = backend.generate(step.observation.images, step.observation.instruction, prompt);
      } catch (const std::exception& e) {
        failure = std::string("backend error: ") + e.what();
      }
      if (failure.empty()) {
        if (text.empty()) {
          failure = "teacher returned empty text";
        } else {
          try {
            entry.trace = parse_trace(text);
          } catch (const TraceParseError& e) {
            failure = e.what();
          }
        }
      }
      if (!entry.trace) entry.raw = text;
      work[job.episode].entries[job.step] = std::move(entry);
      if (!failure.empty()) {
        std::lock_guard lock(report_mutex);
        failures.push_back(AnnotationFailure{ep.episode_id, static_cast<int>(job.step), failure});
      }
      if (work[job.episode].remaining.fetch_sub(1) == 1) {
        try {
          save_trace_file(trace_file_path(out_dir, ep.episode_id), work[job.episode].entries);
        } catch (...) {
          std::lock_guard lock(report_mutex);
          if (!write_error) write_error = std::current_exception();
        }
      }
    }
  };

  {
    std::vector<std::jthread> pool;
    const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
    for (int w = 0; w < n; ++w) pool.emplace_back(worker);
  }
  if (write_error) std::rethrow_exception(write_error);

  std::map<std::string, std::size_t> index_of;
  for (std::size_t e = 0; e < episodes.size(); ++e) index_of[episodes[e].episode_id] = e;
  std::sort(failures.begin(), failures.end(), [&](const AnnotationFailure& a, const AnnotationFailure& b) {
    const std::size_t ia = index_of[a.episode_id];
    const std::size_t ib = index_of[b.episode_id];
    return ia != ib ? ia < ib : a.step_index < b.step_index;
  });
  report.failures = std::move(failures);
  report.steps_failed = static_cast<int>(report.failures.size());
  report.steps_annotated = report.steps_total - report.steps_failed;
  report.backend_calls = calls.load();
  return report;
}

}  // namespace cotvla::teacher
