#include "cotvla/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "cotvla/error.hpp"

namespace cotvla {

using nlohmann::json;

std::string_view segment_name(Segment s) {
  switch (s) {
    case Segment::Special: return "special";
    case Segment::Image: return "image";
    case Segment::Instruction: return "instruction";
    case Segment::Reasoning: return "reasoning";
    case Segment::Action: return "action";
  }
  return "?";
}

Vocabulary Vocabulary::build(int bins_per_dim, std::vector<std::string> words, int action_dims) {
  if (bins_per_dim < 2) throw Error("vocab", "bins_per_dim must be >= 2");
  if (action_dims < 1) throw Error("vocab", "action_dims must be >= 1");
  if (words.empty()) throw Error("vocab", "text vocabulary is empty");
  Vocabulary v;
  v.bins_ = bins_per_dim;
  v.action_dims_ = action_dims;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i].empty()) throw Error("vocab", "empty word in vocabulary");
    const int id = kSpecialCount + static_cast<int>(i);
    if (!v.ids_.emplace(words[i], id).second) throw Error("vocab", "duplicate word '" + words[i] + "'");
    if (words[i] == kUnkWord) v.unk_ = id;
  }
  v.words_ = std::move(words);
  v.action_begin_ = kSpecialCount + static_cast<int>(v.words_.size());
  return v;
}

int Vocabulary::action_dim(int id) const {
  if (!is_action(id)) return -1;
  return (id - action_begin_) / bins_;
}

std::optional<int> Vocabulary::word_id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::string Vocabulary::token_text(int id) const {
  switch (id) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kImg: return "<img>";
    default: break;
  }
  if (is_text(id)) return words_[static_cast<std::size_t>(id - kSpecialCount)];
  if (is_action(id)) {
    const int rel = id - action_begin_;
    return "<act:" + std::to_string(rel / bins_) + ":" + std::to_string(rel % bins_) + ">";
  }
  return "<?" + std::to_string(id) + ">";
}

json Vocabulary::to_json() const {
  return json{{"words", words_},
              {"bins_per_dim", bins_},
              {"action_dims", action_dims_},
              {"ranges",
               {{"special", {0, kSpecialCount - 1}},
                {"text", {text_begin(), text_end() - 1}},
                {"action", {translation_token_start_idx(), gripper_token_end_idx()}}}}};
}

Vocabulary Vocabulary::from_json(const json& j) {
  try {
    Vocabulary v = build(j.at("bins_per_dim").get<int>(), j.at("words").get<std::vector<std::string>>(),
                         j.at("action_dims").get<int>());
    if (j.contains("ranges")) {
      const auto action = j["ranges"].at("action").get<std::vector<int>>();
      if (action.size() != 2 || action[0] != v.translation_token_start_idx() || action[1] != v.gripper_token_end_idx()) {
        throw Error("vocab", "vocabulary ranges disagree with the word list");
      }
    }
    return v;
  } catch (const json::exception& e) {
    throw Error("vocab", std::string("malformed vocabulary JSON: ") + e.what());
  }
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json().dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c) || c == '_' || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      out.emplace_back(1, ch);
    }
  }
  flush();
  return out;
}

std::string render_trace_for_tokens(const ReasoningTrace& trace) {
  std::string out = "observation: " + trace.observation + " situation: " + trace.situation_analysis +
                    " spatial: " + trace.spatial_reasoning + " plan: " + trace.task_planning;
  for (std::size_t i = 0; i < trace.logical_steps.size(); ++i) {
    out += " " + std::to_string(i + 1) + " " + trace.logical_steps[i];
  }
  out += " next: " + trace.sub_action;
  return out;
}

std::vector<std::string> corpus_words(std::span<const Episode> episodes) {
  std::set<std::string> seen;
  auto add = [&](std::string_view text) {
    for (std::string& w : split_words(text)) seen.insert(std::move(w));
  };
  add(render_trace_for_tokens(ReasoningTrace{}));
  for (const Episode& ep : episodes) {
    for (const Step& s : ep.steps) {
      add(s.observation.instruction);
      if (s.trace) add(render_trace_for_tokens(*s.trace));
    }
  }
  seen.erase(kUnkWord);
  std::vector<std::string> words{kUnkWord};
  words.insert(words.end(), seen.begin(), seen.end());
  return words;
}

int action_bin(double value, int bins) {
  const double scaled = (value + 1.0) * 0.5 * bins;
  const int bin = static_cast<int>(std::floor(scaled));
  return std::clamp(bin, 0, bins - 1);
}

double bin_center(int bin, int bins) { return -1.0 + (bin + 0.5) * 2.0 / bins; }

std::vector<int> encode_action(const ContinuousAction& action, const Vocabulary& vocab) {
  if (vocab.action_dims() != static_cast<int>(kActionDims)) {
    throw Error("vocab", "vocabulary action_dims does not match the 7-D action");
  }
  std::vector<int> ids(kActionDims);
  for (std::size_t d = 0; d < kActionDims; ++d) {
    const double v = action[d];
    if (!std::isfinite(v) || v < -1.0 || v > 1.0) throw Error("vocab", "action component outside [-1, 1]");
    ids[d] = vocab.action_token(static_cast<int>(d), action_bin(v, vocab.bins_per_dim()));
  }
  return ids;
}

ContinuousAction decode_action(std::span<const int> ids, const Vocabulary& vocab) {
  if (ids.size() != kActionDims) throw Error("vocab", "expected 7 action ids");
  std::array<double, kActionDims> values{};
  for (std::size_t d = 0; d < kActionDims; ++d) {
    if (vocab.action_dim(ids[d]) != static_cast<int>(d)) {
      throw Error("vocab", "id " + std::to_string(ids[d]) + " outside the bins of action dimension " + std::to_string(d));
    }
    const int bin = ids[d] - vocab.action_token(static_cast<int>(d), 0);
    values[d] = bin_center(bin, vocab.bins_per_dim());
  }
  return ContinuousAction(values);
}

std::vector<int> tokenize_text(std::string_view text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const std::string& w : split_words(text)) {
    if (auto id = vocab.word_id(w)) {
      ids.push_back(*id);
    } else if (vocab.unk_id() >= 0) {
      ids.push_back(vocab.unk_id());
    } else {
      throw Error("vocab", "word '" + w + "' is not in the vocabulary and no <unk> token exists");
    }
  }
  return ids;
}

std::size_t TokenizedSample::count(Segment s) const {
  return static_cast<std::size_t>(std::count(segment.begin(), segment.end(), s));
}

namespace {

void push(TokenizedSample& s, int id, Segment seg, bool supervised) {
  s.input_ids.push_back(id);
  s.segment.push_back(seg);
  s.labels.push_back(supervised ? id : kIgnoreLabel);
}

}  // namespace

TokenizedSample assemble_prompt(const Observation& observation, const Vocabulary& vocab) {
  if (observation.images.empty()) throw Error("vocab", "observation has no images");
  TokenizedSample s;
  s.views = static_cast<int>(observation.images.size());
  s.grid = observation.images.front().size;
  push(s, Vocabulary::kBos, Segment::Special, false);
  for (const ImageGrid& img : observation.images) {
    if (img.size != s.grid) throw Error("vocab", "views differ in grid size");
    s.patches.insert(s.patches.end(), img.cells.begin(), img.cells.end());
    for (std::size_t i = 0; i < img.cells.size(); ++i) push(s, Vocabulary::kImg, Segment::Image, false);
  }
  for (int id : tokenize_text(observation.instruction, vocab)) push(s, id, Segment::Instruction, false);
  return s;
}

TokenizedSample assemble_sample(const Step& step, const Vocabulary& vocab, const AssembleOptions& options) {
  if (options.reasoning_budget < 0) throw Error("vocab", "reasoning budget must be >= 0");
  TokenizedSample s = assemble_prompt(step.observation, vocab);
  if (options.include_trace && step.trace) {
    std::vector<int> trace = tokenize_text(render_trace_for_tokens(*step.trace), vocab);
    if (trace.size() > static_cast<std::size_t>(options.reasoning_budget)) {
      trace.resize(static_cast<std::size_t>(options.reasoning_budget));
    }
    for (int id : trace) push(s, id, Segment::Reasoning, true);
  }
  for (int id : encode_action(step.action, vocab)) push(s, id, Segment::Action, true);
  push(s, Vocabulary::kEos, Segment::Special, false);
  return s;
}

}  // namespace cotvla
