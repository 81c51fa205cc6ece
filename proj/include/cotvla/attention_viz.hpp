#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cotvla/data_model.hpp"
#include "cotvla/model.hpp"
#include "cotvla/tokenizer.hpp"
#include "json.hpp"

namespace cotvla {

enum class FusionMethod { Max, Mean };

std::string_view method_name(FusionMethod m);
/// "max" or "mean"; anything else is Error("config").
FusionMethod parse_method(std::string_view name);

/// stack: rows are (layer, head) pairs, columns are source positions. Per
/// column, keeps the k largest values and reduces them by max or mean.
Eigen::VectorXd topk_aggregate(const Eigen::MatrixXd& stack, int k, FusionMethod method);

struct FusedAttentionMap {
  int target = 0;  // query position whose attention is fused
  int k = 0;
  FusionMethod method = FusionMethod::Max;
  int grid = 0;
  std::vector<Eigen::MatrixXd> views;  // grid x grid, min-max normalized to [0, 1]
  std::vector<double> text_attention;  // fused scores of non-image positions, in sequence order
  std::vector<int> text_positions;
  bool flat = false;  // the image scores were constant, so the grid is all zeros

  nlohmann::json to_json() const;
  static FusedAttentionMap from_json(const nlohmann::json& j);
};

/// Retags the Special placeholders of generated positions as Action or Reasoning.
void tag_generated_segments(AttentionRecord& record, const Vocabulary& vocab);

/// One map per target query position, from that row of every (layer, head).
std::vector<FusedAttentionMap> fuse_attention_map(const AttentionRecord& record, std::span<const int> targets,
                                                  int k = 5, FusionMethod method = FusionMethod::Max);

/// Cell with the largest value of view 0 (first in row-major order on ties).
std::pair<int, int> argmax_cell(const FusedAttentionMap& map, int view = 0);

/// Writes <stem>.json and <stem>.ppm (8 px per cell). Pixel color is
/// (1 - w) * dimmed base palette + w * red, so higher attention is redder.
void export_heatmap(const FusedAttentionMap& map, const ImageGrid& base, const std::filesystem::path& stem,
                    int view = 0);

}  // namespace cotvla
