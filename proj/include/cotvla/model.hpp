#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cotvla/tokenizer.hpp"
#include "json.hpp"

namespace cotvla {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 640;
  int vocab_size = 0;
  int grid = 16;
  int views = 1;
  int n_colors = 8;
  std::uint64_t seed = 0;

  int d_head() const { return d_model / n_heads; }
  int patch_count() const { return views * grid * grid; }
  /// Throws Error("config") on non-positive sizes or d_model % n_heads != 0.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Attention weights recorded during a forward pass or generation. Row i of
/// maps[l * n_heads + h] is the softmax over keys [0, n_keys) for the query at
/// sequence position query_positions[i]; keys after the query are zero.
struct AttentionRecord {
  int n_layers = 0;
  int n_heads = 0;
  int n_keys = 0;
  std::vector<int> query_positions;
  std::vector<Eigen::MatrixXd> maps;
  std::vector<int> input_ids;  // the full recorded sequence
  // Generated positions are tagged Special until tag_generated_segments runs.
  std::vector<Segment> segment;
  int views = 0;
  int grid = 0;

  const Eigen::MatrixXd& map(int layer, int head) const {
    return maps[static_cast<std::size_t>(layer * n_heads + head)];
  }
  /// Row index holding `query_position`, or -1.
  int row_of(int query_position) const;
};

/// Parameter group of the embeddings (token, position, patch); blocks use
/// their index and the final norm plus output projection use n_layers.
inline constexpr int kEmbeddingGroup = -1;

template <class T>
struct Parameter {
  std::string name;
  int group = 0;
  RowMatrix<T> value;
  RowMatrix<T> grad;  // empty when frozen
  bool trainable = true;
};

struct GenerateResult {
  std::vector<int> tokens;
};

/// Picks the next token from a logits row given the tokens generated so far.
/// Returning EOS ends generation.
template <class T>
using TokenChooser = std::function<int(std::span<const T> logits, std::span<const int> generated)>;

template <class T>
class PolicyModel {
 public:
  using Matrix = RowMatrix<T>;

  /// Scaled-uniform projections, zero biases, unit norm gains; a pure function of cfg.seed.
  explicit PolicyModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Blocks [0, K) and, when K > 0, the embeddings stop receiving gradients.
  void freeze_lower_layers(int k);
  int frozen_prefix() const { return frozen_; }
  bool group_trainable(int group) const;

  /// Full (L x vocab) logits.
  Matrix forward(const TokenizedSample& sample, AttentionRecord* record = nullptr) const;

  struct Cache;
  /// Logits at the requested positions only; `cache` keeps what backward needs.
  Matrix forward_train(const TokenizedSample& sample, std::span<const int> rows, Cache& cache) const;
  /// Accumulates d(loss)/d(theta) into the trainable gradient buffers.
  void backward(const Cache& cache, const Matrix& dlogits);
  void zero_grad();

  /// Greedy decoding (or `chooser`) from `prompt`, with one attention row per
  /// emitted token: the row of the query whose logits produced it.
  GenerateResult generate(const TokenizedSample& prompt, int max_new, AttentionRecord* record = nullptr,
                          const TokenChooser<T>& chooser = {}) const;

  /// FNV-1a over the raw bytes of every parameter (or of one group).
  std::uint64_t checksum() const;
  std::uint64_t checksum(int group) const;

 private:
  struct Block {
    int ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
  };
  struct KvCache;

  int add(std::string name, int group, int rows, int cols);
  const Matrix& w(int i) const { return params_[static_cast<std::size_t>(i)].value; }
  void check_sample(const TokenizedSample& sample) const;
  Matrix embed(const TokenizedSample& sample) const;
  void extend(KvCache& kv, const Matrix& x_new, int start, AttentionRecord* record, bool record_last_only,
              Matrix& out) const;

  ModelConfig cfg_;
  std::vector<Parameter<T>> params_;
  int tok_emb_ = 0, pos_emb_ = 0, patch_emb_ = 0, patch_b_ = 0;
  std::vector<Block> blocks_;
  int lnf_g_ = 0, lnf_b_ = 0, w_out_ = 0, b_out_ = 0;
  int frozen_ = 0;
};

template <class T>
struct PolicyModel<T>::Cache {
  struct Layer {
    Matrix xhat1, qkv, att, xhat2, u, g;
    std::vector<T> rstd1, rstd2;
    std::vector<Matrix> probs;  // per head, L x L lower-triangular
  };
  std::vector<int> input_ids;
  std::vector<std::uint8_t> patches;
  std::vector<int> rows;
  std::vector<Layer> layers;
  Matrix xhatf, hf;
  std::vector<T> rstdf;
};

extern template class PolicyModel<float>;
extern template class PolicyModel<double>;

/// "COTVLA01" | u64 header size | JSON header | raw parameter data.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const PolicyModel<T>& model, const Vocabulary& vocab);

struct CheckpointInfo {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  int frozen_prefix = 0;
  std::string dtype;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);
/// Throws Error("io") unless the stored vocabulary hash equals vocab.hash().
PolicyModel<float> load_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab);

}  // namespace cotvla
