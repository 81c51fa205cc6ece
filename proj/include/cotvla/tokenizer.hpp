#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cotvla/data_model.hpp"
#include "json.hpp"

namespace cotvla {

inline constexpr int kIgnoreLabel = -100;
inline constexpr int kDefaultReasoningBudget = 244;
inline constexpr const char* kUnkWord = "<unk>";

enum class Segment : std::uint8_t { Special, Image, Instruction, Reasoning, Action };

std::string_view segment_name(Segment s);

/// Partitioned id space: specials [0, 4), text words, then action bins laid
/// out dimension-major (x, y, z, roll, pitch, yaw, gripper).
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kImg = 3;
  static constexpr int kSpecialCount = 4;

  /// Throws Error("vocab") for duplicate/empty words, an empty list or bins < 2.
  static Vocabulary build(int bins_per_dim, std::vector<std::string> words, int action_dims = 7);

  int size() const { return action_begin_ + action_dims_ * bins_; }
  int bins_per_dim() const { return bins_; }
  int action_dims() const { return action_dims_; }
  int text_begin() const { return kSpecialCount; }
  int text_end() const { return action_begin_; }  // exclusive
  int translation_token_start_idx() const { return action_begin_; }
  int gripper_token_end_idx() const { return size() - 1; }  // inclusive

  bool is_action(int id) const { return id >= action_begin_ && id <= gripper_token_end_idx(); }
  bool is_text(int id) const { return id >= text_begin() && id < text_end(); }
  /// Dimension whose bin interval contains `id`, or -1.
  int action_dim(int id) const;
  int action_token(int dim, int bin) const { return action_begin_ + dim * bins_ + bin; }

  std::optional<int> word_id(std::string_view word) const;
  /// Id of "<unk>" when the word list contains it, otherwise -1.
  int unk_id() const { return unk_; }
  const std::vector<std::string>& words() const { return words_; }
  /// Human-readable token: word, "<act:d:b>", or a special name.
  std::string token_text(int id) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON form.
  std::uint64_t hash() const;

  bool operator==(const Vocabulary& o) const {
    return words_ == o.words_ && bins_ == o.bins_ && action_dims_ == o.action_dims_;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  int bins_ = 0;
  int action_dims_ = 7;
  int action_begin_ = 0;
  int unk_ = -1;
};

/// Lower-cased whitespace/punctuation split; punctuation becomes its own word.
std::vector<std::string> split_words(std::string_view text);

/// "<unk>" followed by the sorted set of words used by instructions and
/// rendered traces.
std::vector<std::string> corpus_words(std::span<const Episode> episodes);

/// Uniform bin of [-1, 1]; values are clamped to the extreme bins.
int action_bin(double value, int bins);
double bin_center(int bin, int bins);

std::vector<int> encode_action(const ContinuousAction& action, const Vocabulary& vocab);
/// Throws Error("vocab") unless each id lies inside its own dimension's interval.
ContinuousAction decode_action(std::span<const int> ids, const Vocabulary& vocab);

/// "observation: ... situation: ... spatial: ... plan: ... next: ..."
std::string render_trace_for_tokens(const ReasoningTrace& trace);

std::vector<int> tokenize_text(std::string_view text, const Vocabulary& vocab);

struct TokenizedSample {
  std::vector<int> input_ids;
  std::vector<int> labels;
  std::vector<Segment> segment;
  std::vector<std::uint8_t> patches;  // views * grid * grid color indices, view-major, row-major
  int views = 0;
  int grid = 0;

  std::size_t length() const { return input_ids.size(); }
  std::size_t count(Segment s) const;
};

struct AssembleOptions {
  int reasoning_budget = kDefaultReasoningBudget;
  bool include_trace = true;
};

/// [BOS][IMG x views*P*P][instruction][trace <= budget][action x 7][EOS];
/// only reasoning and action positions are supervised.
TokenizedSample assemble_sample(const Step& step, const Vocabulary& vocab,
                                const AssembleOptions& options = AssembleOptions{});

/// The conditioning prefix only: [BOS][IMG ...][instruction].
TokenizedSample assemble_prompt(const Observation& observation, const Vocabulary& vocab);

}  // namespace cotvla
