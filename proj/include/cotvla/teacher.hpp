#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cotvla/data_model.hpp"
#include "cotvla/error.hpp"
#include "cotvla/simenv.hpp"

namespace cotvla::teacher {

/// The four question headers asked of the teacher, in order.
inline constexpr std::string_view kSectionHeaders[4] = {"Observation", "Situation Analysis", "Spatial Reasoning",
                                                        "Task Planning"};

/// Structured reasoning prompt with the instruction substituted verbatim.
/// Throws Error("teacher") for an empty instruction.
std::string build_prompt(std::string_view instruction);

/// Parse failure; keeps the teacher text so it can be stored under "raw".
class TraceParseError : public Error {
 public:
  TraceParseError(const std::string& message, std::string raw)
      : Error("parse", message), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

/// Extracts the four tagged sections (case-insensitive, tolerant of "#N"
/// prefixes and markdown emphasis), the numbered <logical_steps> items and
/// the <sub_action> clause.
ReasoningTrace parse_trace(std::string_view teacher_text);

/// Canonical teacher-style text for a trace; parse_trace(render_trace_text(t)) == t
/// for traces without markup characters.
std::string render_trace_text(const ReasoningTrace& trace);

class TeacherBackend {
 public:
  virtual ~TeacherBackend() = default;
  virtual std::string generate(std::span<const ImageGrid> images, std::string_view instruction,
                               std::string_view prompt) = 0;
  virtual std::string name() const = 0;
  virtual bool deterministic() const = 0;
};

/// Teacher text for a known world state: ground-truth trace rendered in the
/// tagged four-section shape.
std::string rule_based_generate(const sim::WorldState& world, const sim::TaskSpec& task);

/// Offline deterministic teacher. Recovers the world from the first view and
/// the instruction, then answers with rule_based_generate.
class RuleBasedTeacher final : public TeacherBackend {
 public:
  std::string generate(std::span<const ImageGrid> images, std::string_view instruction,
                       std::string_view prompt) override;
  std::string name() const override { return "rule"; }
  bool deterministic() const override { return true; }
};

struct RemoteTeacherConfig {
  std::string url;  // scheme://host:port
  std::string api_key;
  double timeout_s = 30.0;
  int max_retries = 3;
  std::chrono::milliseconds backoff{500};

  /// Reads TEACHER_URL, TEACHER_API_KEY and TEACHER_TIMEOUT_S.
  static RemoteTeacherConfig from_env();
};

/// JSON-over-HTTP teacher: POST /generate {"prompt","images","instruction"} ->
/// {"text"}. Non-200 or a missing "text" counts as a failed attempt; after
/// the retries are exhausted generate() returns "".
class RemoteTeacher final : public TeacherBackend {
 public:
  explicit RemoteTeacher(RemoteTeacherConfig config);
  std::string generate(std::span<const ImageGrid> images, std::string_view instruction,
                       std::string_view prompt) override;
  std::string name() const override { return "remote"; }
  bool deterministic() const override { return false; }

  /// Body sent to the server for one step.
  static std::string request_body(std::span<const ImageGrid> images, std::string_view instruction,
                                  std::string_view prompt);

 private:
  RemoteTeacherConfig config_;
  std::string scheme_host_port_;
};

struct AnnotationFailure {
  std::string episode_id;
  int step_index = 0;
  std::string reason;
};

struct AnnotationReport {
  int episodes_total = 0;
  int steps_total = 0;
  int steps_annotated = 0;  // includes steps skipped because they were already annotated
  int steps_failed = 0;
  int steps_skipped = 0;
  int backend_calls = 0;
  std::vector<AnnotationFailure> failures;

  nlohmann::json to_json() const;
};

/// Queries the teacher once per step (all views of the step plus the prompt)
/// on a pool of `workers` threads and writes `<out_dir>/<episode_id>.json`.
/// Steps that already hold a parsed trace in an existing file are skipped.
AnnotationReport annotate_dataset(TeacherBackend& backend, std::span<const Episode> episodes,
                                  const std::filesystem::path& out_dir, int workers);

}  // namespace cotvla::teacher
