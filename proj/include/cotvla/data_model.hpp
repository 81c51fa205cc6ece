#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace cotvla {

inline constexpr std::size_t kActionDims = 7;

/// Normalized 7-DoF command: translation xyz, rotation rpy, gripper.
/// Every component is finite and lies in [-1, 1].
class ContinuousAction {
 public:
  ContinuousAction() = default;
  explicit ContinuousAction(const std::array<double, kActionDims>& values);

  /// Throws Error("data") unless `values` has exactly 7 finite components in [-1, 1].
  static ContinuousAction from_values(std::span<const double> values);

  static ContinuousAction hold() { return {}; }

  double operator[](std::size_t i) const { return values_[i]; }
  const std::array<double, kActionDims>& values() const { return values_; }

  double dx() const { return values_[0]; }
  double dy() const { return values_[1]; }
  double dz() const { return values_[2]; }
  double gripper() const { return values_[6]; }

  double max_abs() const;

  bool operator==(const ContinuousAction&) const = default;

 private:
  std::array<double, kActionDims> values_{};
};

/// Square grid of small color indices, row-major (`cells[y * size + x]`).
struct ImageGrid {
  int size = 0;
  std::vector<std::uint8_t> cells;

  static ImageGrid blank(int size);

  std::uint8_t at(int x, int y) const { return cells[static_cast<std::size_t>(y * size + x)]; }
  void set(int x, int y, std::uint8_t c) { cells[static_cast<std::size_t>(y * size + x)] = c; }

  bool operator==(const ImageGrid&) const = default;
};

struct Observation {
  std::vector<ImageGrid> images;  // one per camera view
  std::string instruction;

  bool operator==(const Observation&) const = default;
};

struct ReasoningTrace {
  std::string observation;
  std::string situation_analysis;
  std::string spatial_reasoning;
  std::string task_planning;
  std::vector<std::string> logical_steps;
  std::string sub_action;

  bool operator==(const ReasoningTrace&) const = default;
};

struct Step {
  Observation observation;
  ContinuousAction action;
  std::optional<ReasoningTrace> trace;

  bool operator==(const Step&) const = default;
};

struct Episode {
  std::string episode_id;
  std::string task_name;
  std::vector<Step> steps;
  std::map<std::string, std::string> metadata;

  const std::string& instruction() const { return steps.front().observation.instruction; }
  /// True when every step carries a reasoning trace.
  bool enriched() const;

  bool operator==(const Episode&) const = default;
};

/// Checks every Episode/Step/Observation invariant; throws Error("data")
/// naming the episode on the first violation.
void validate_episode(const Episode& episode);

nlohmann::json episode_to_json(const Episode& episode);
/// Inverse of episode_to_json. Field errors are reported with `context`
/// prepended (typically "line N").
Episode episode_from_json(const nlohmann::json& j, const std::string& context);

nlohmann::json trace_to_json(const ReasoningTrace& trace);
ReasoningTrace trace_from_json(const nlohmann::json& j);

/// Reads an episode JSON-Lines file. All-or-nothing: the first malformed
/// record or invariant violation throws.
std::vector<Episode> load_episodes(const std::filesystem::path& path);
void save_episodes(const std::filesystem::path& path, std::span<const Episode> episodes);

/// One element of a per-episode trace file: either a parsed trace or the
/// raw teacher text that failed to parse (possibly empty).
struct TraceEntry {
  std::optional<ReasoningTrace> trace;
  std::string raw;

  bool ok() const { return trace.has_value(); }
  bool operator==(const TraceEntry&) const = default;
};

std::filesystem::path trace_file_path(const std::filesystem::path& traces_dir,
                                      const std::string& episode_id);
std::vector<TraceEntry> load_trace_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames, so readers never observe a
/// half-written trace file.
void save_trace_file(const std::filesystem::path& path, std::span<const TraceEntry> entries);

struct AttachOptions {
  /// Drop episodes that contain unparsed ("raw") entries instead of failing.
  bool skip_unparsed = false;
};

struct AttachResult {
  std::vector<Episode> episodes;
  std::vector<std::string> skipped_episode_ids;
};

/// Pairs every step with the trace stored at the same index of
/// `<traces_dir>/<episode_id>.json`.
AttachResult attach_traces(std::span<const Episode> episodes, const std::filesystem::path& traces_dir,
                           const AttachOptions& options);
std::vector<Episode> attach_traces(std::span<const Episode> episodes,
                                   const std::filesystem::path& traces_dir);

/// Copies of `episodes` with every trace removed.
std::vector<Episode> strip_traces(std::span<const Episode> episodes);

}  // namespace cotvla
