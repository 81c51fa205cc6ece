#include "cotvla/attention_viz.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>

#include "cotvla/error.hpp"

namespace cotvla {

using nlohmann::json;

std::string_view method_name(FusionMethod m) { return m == FusionMethod::Max ? "max" : "mean"; }

FusionMethod parse_method(std::string_view name) {
  if (name == "max") return FusionMethod::Max;
  if (name == "mean") return FusionMethod::Mean;
  throw Error("config", "unsupported fusion method '" + std::string(name) + "' (expected max or mean)");
}

Eigen::VectorXd topk_aggregate(const Eigen::MatrixXd& stack, int k, FusionMethod method) {
  const Eigen::Index n = stack.rows();
  if (k < 1 || k > n) {
    throw Error("config", "top-k " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  Eigen::VectorXd out(stack.cols());
  std::vector<double> col(static_cast<std::size_t>(n));
  for (Eigen::Index c = 0; c < stack.cols(); ++c) {
    for (Eigen::Index r = 0; r < n; ++r) col[static_cast<std::size_t>(r)] = stack(r, c);
    std::partial_sort(col.begin(), col.begin() + k, col.end(), std::greater<>());
    if (method == FusionMethod::Max) {
      out(c) = col[0];
    } else {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += col[static_cast<std::size_t>(i)];
      out(c) = s / k;
    }
  }
  return out;
}

void tag_generated_segments(AttentionRecord& record, const Vocabulary& vocab) {
  for (std::size_t p = 0; p < record.segment.size(); ++p) {
    const int id = record.input_ids[p];
    if (record.segment[p] != Segment::Special || id < Vocabulary::kSpecialCount) continue;
    record.segment[p] = vocab.is_action(id) ? Segment::Action : Segment::Reasoning;
  }
}

std::vector<FusedAttentionMap> fuse_attention_map(const AttentionRecord& record, std::span<const int> targets, int k,
                                                  FusionMethod method) {
  const int pairs = record.n_layers * record.n_heads;
  if (pairs <= 0 || static_cast<int>(record.maps.size()) != pairs) throw Error("data", "incomplete attention record");
  if (k < 1 || k > pairs) throw Error("config", "top-k " + std::to_string(k) + " outside [1, " + std::to_string(pairs) + "]");
  const int p2 = record.grid * record.grid;
  std::vector<FusedAttentionMap> out;
  for (int target : targets) {
    const int row = record.row_of(target);
    if (row < 0) throw Error("data", "target position " + std::to_string(target) + " was not recorded");
    Eigen::MatrixXd stack(pairs, record.n_keys);
    for (int i = 0; i < pairs; ++i) stack.row(i) = record.maps[static_cast<std::size_t>(i)].row(row);
    const Eigen::VectorXd fused = topk_aggregate(stack, k, method);

    FusedAttentionMap m;
    m.target = target;
    m.k = k;
    m.method = method;
    m.grid = record.grid;
    m.views.assign(static_cast<std::size_t>(record.views), Eigen::MatrixXd::Zero(record.grid, record.grid));
    int patch = 0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (int p = 0; p < record.n_keys; ++p) {
      const double v = fused(p);
      if (record.segment[static_cast<std::size_t>(p)] == Segment::Image) {
        if (patch >= record.views * p2) throw Error("data", "record has more image positions than patches");
        m.views[static_cast<std::size_t>(patch / p2)]((patch % p2) / record.grid, patch % record.grid) = v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        ++patch;
      } else {
        m.text_attention.push_back(v);
        m.text_positions.push_back(p);
      }
    }
    if (patch != record.views * p2) throw Error("data", "record image positions do not cover the patch grid");
    if (!(hi - lo > 1e-12)) {
      m.flat = true;
      for (auto& g : m.views) g.setZero();
    } else {
      for (auto& g : m.views) g = (g.array() - lo) / (hi - lo);
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::pair<int, int> argmax_cell(const FusedAttentionMap& map, int view) {
  const Eigen::MatrixXd& g = map.views.at(static_cast<std::size_t>(view));
  int br = 0;
  int bc = 0;
  for (int r = 0; r < g.rows(); ++r) {
    for (int c = 0; c < g.cols(); ++c) {
      if (g(r, c) > g(br, bc)) {
        br = r;
        bc = c;
      }
    }
  }
  return {br, bc};
}

namespace {

json grid_json(const Eigen::MatrixXd& g) {
  json rows = json::array();
  for (int r = 0; r < g.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < g.cols(); ++c) row.push_back(g(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd grid_from_json(const json& j) {
  const int n = static_cast<int>(j.size());
  Eigen::MatrixXd g(n, n);
  for (int r = 0; r < n; ++r) {
    if (static_cast<int>(j[static_cast<std::size_t>(r)].size()) != n) throw Error("data", "heatmap grid is not square");
    for (int c = 0; c < n; ++c) g(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
  }
  return g;
}

constexpr std::array<std::array<int, 3>, 8> kPalette = {{
    {235, 225, 200},  // table
    {70, 90, 200},    // gripper open
    {30, 40, 120},    // gripper closed
    {140, 95, 50},    // drawer
    {40, 160, 60},    // can
    {240, 150, 30},   // orange
    {230, 220, 60},   // sponge
    {200, 200, 210},  // plate
}};

constexpr int kCellPixels = 8;
constexpr double kBaseAlpha = 0.6;

}  // namespace

json FusedAttentionMap::to_json() const {
  json j{{"target", target},
         {"k", k},
         {"method", method_name(method)},
         {"grid", views.empty() ? json::array() : grid_json(views[0])},
         {"text_attention", text_attention},
         {"text_positions", text_positions},
         {"flat", flat}};
  if (views.size() > 1) {
    json all = json::array();
    for (const auto& v : views) all.push_back(grid_json(v));
    j["views"] = all;
  }
  return j;
}

FusedAttentionMap FusedAttentionMap::from_json(const json& j) {
  FusedAttentionMap m;
  try {
    m.target = j.at("target").get<int>();
    m.k = j.at("k").get<int>();
    m.method = parse_method(j.at("method").get<std::string>());
    if (j.contains("views")) {
      for (const auto& v : j["views"]) m.views.push_back(grid_from_json(v));
    } else {
      m.views.push_back(grid_from_json(j.at("grid")));
    }
    m.grid = static_cast<int>(m.views[0].rows());
    m.text_attention = j.at("text_attention").get<std::vector<double>>();
    m.text_positions = j.value("text_positions", std::vector<int>{});
    m.flat = j.at("flat").get<bool>();
  } catch (const json::exception& e) {
    throw Error("data", std::string("malformed heatmap JSON: ") + e.what());
  }
  return m;
}

void export_heatmap(const FusedAttentionMap& map, const ImageGrid& base, const std::filesystem::path& stem, int view) {
  if (view < 0 || view >= static_cast<int>(map.views.size())) throw Error("data", "heatmap view out of range");
  const Eigen::MatrixXd& g = map.views[static_cast<std::size_t>(view)];
  if (base.size != g.rows() || base.size != g.cols()) {
    throw Error("data", "heatmap grid " + std::to_string(g.rows()) + " does not match image size " +
                            std::to_string(base.size));
  }
  const std::filesystem::path json_path = stem.string() + ".json";
  {
    std::ofstream out(json_path, std::ios::trunc);
    if (!out) throw Error("io", "cannot write " + json_path.string());
    out << map.to_json().dump() << "\n";
    if (!out) throw Error("io", "short write to " + json_path.string());
  }
  const int px = base.size * kCellPixels;
  std::string pixels(static_cast<std::size_t>(px * px * 3), '\0');
  for (int y = 0; y < px; ++y) {
    for (int x = 0; x < px; ++x) {
      const int r = y / kCellPixels;
      const int c = x / kCellPixels;
      const double w = std::clamp(g(r, c), 0.0, 1.0);
      const auto& col = kPalette[static_cast<std::size_t>(base.at(c, r) % kPalette.size())];
      const std::array<double, 3> heat{255.0, 0.0, 0.0};
      for (int ch = 0; ch < 3; ++ch) {
        const double v = (1.0 - w) * kBaseAlpha * col[static_cast<std::size_t>(ch)] + w * heat[static_cast<std::size_t>(ch)];
        pixels[static_cast<std::size_t>((y * px + x) * 3 + ch)] = static_cast<char>(static_cast<int>(std::lround(v)));
      }
    }
  }
  const std::filesystem::path ppm_path = stem.string() + ".ppm";
  std::ofstream out(ppm_path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io", "cannot write " + ppm_path.string());
  out << "P6\n" << px << " " << px << "\n255\n";
  out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw Error("io", "short write to " + ppm_path.string());
}

}  // namespace cotvla
