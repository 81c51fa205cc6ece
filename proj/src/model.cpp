#include "cotvla/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "cotvla/error.hpp"

namespace cotvla {

using nlohmann::json;

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0 || vocab_size <= 0 ||
      grid <= 0 || views <= 0 || n_colors <= 0) {
    throw Error("config", "model sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw Error("config", "d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                              std::to_string(n_heads));
  }
}

json ModelConfig::to_json() const {
  return json{{"d_model", d_model}, {"n_layers", n_layers}, {"n_heads", n_heads},   {"d_ff", d_ff},
              {"max_seq_len", max_seq_len}, {"vocab_size", vocab_size}, {"grid", grid}, {"views", views},
              {"n_colors", n_colors}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.grid = j.at("grid").get<int>();
  c.views = j.at("views").get<int>();
  c.n_colors = j.at("n_colors").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

int AttentionRecord::row_of(int query_position) const {
  auto it = std::find(query_positions.begin(), query_positions.end(), query_position);
  return it == query_positions.end() ? -1 : static_cast<int>(it - query_positions.begin());
}

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluK = 0.044715;

template <class T>
using Mat = RowMatrix<T>;

template <class T>
void layer_norm(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, Mat<T>& xhat, std::vector<T>& rstd,
                Mat<T>& out) {
  const Eigen::Index n = x.rows();
  const T d = static_cast<T>(x.cols());
  xhat.resize(x.rows(), x.cols());
  rstd.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).sum() / d;
    const T var = (x.row(i).array() - mean).square().sum() / d;
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    rstd[static_cast<std::size_t>(i)] = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
  }
  out = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
}

// Returns dx; adds the gain/bias gradients when their buffers are non-empty.
template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const std::vector<T>& rstd, const Mat<T>& gamma,
                           Mat<T>& dgamma, Mat<T>& dbeta, bool need_dx) {
  if (dgamma.size() > 0) {
    dgamma.row(0) += dy.cwiseProduct(xhat).colwise().sum();
    dbeta.row(0) += dy.colwise().sum();
  }
  if (!need_dx) return {};
  Mat<T> dxhat = dy.array().rowwise() * gamma.row(0).array();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T m1 = dxhat.row(i).mean();
    const T m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
    dx.row(i) = rstd[static_cast<std::size_t>(i)] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

template <class T>
T gelu(T u) {
  return T(0.5) * u * (T(1) + std::tanh(static_cast<T>(kGeluC) * (u + static_cast<T>(kGeluK) * u * u * u)));
}

template <class T>
T gelu_grad(T u) {
  const T c = static_cast<T>(kGeluC);
  const T k = static_cast<T>(kGeluK);
  const T t = std::tanh(c * (u + k * u * u * u));
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3) * k * u * u);
}

// Causal softmax in place on rows of s; row i may attend to keys [0, offset + i].
template <class T>
void causal_softmax(Mat<T>& s, Eigen::Index offset) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Eigen::Index n = std::min<Eigen::Index>(offset + i + 1, s.cols());
    auto head = s.row(i).head(n);
    const T m = head.maxCoeff();
    head = (head.array() - m).exp();
    head /= head.sum();
    s.row(i).tail(s.cols() - n).setZero();
  }
}

std::uint64_t fnv_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Uniform in [-a, a] from the top 53 bits; identical on every platform.
double uniform_pm(std::mt19937_64& rng, double a) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return (2.0 * u - 1.0) * a;
}

}  // namespace

template <class T>
struct PolicyModel<T>::KvCache {
  std::vector<Matrix> k, v;  // per layer, capacity x d_model
};

template <class T>
int PolicyModel<T>::add(std::string name, int group, int rows, int cols) {
  Parameter<T> p;
  p.name = std::move(name);
  p.group = group;
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

template <class T>
PolicyModel<T>::PolicyModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.d_model;
  const int patch_rows = cfg_.n_colors + 2 * cfg_.grid + cfg_.views;
  tok_emb_ = add("tok_emb", kEmbeddingGroup, cfg_.vocab_size, d);
  pos_emb_ = add("pos_emb", kEmbeddingGroup, cfg_.max_seq_len, d);
  patch_emb_ = add("patch_emb", kEmbeddingGroup, patch_rows, d);
  patch_b_ = add("patch_b", kEmbeddingGroup, 1, d);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Block b{};
    b.ln1_g = add(p + "ln1_g", l, 1, d);
    b.ln1_b = add(p + "ln1_b", l, 1, d);
    b.w_qkv = add(p + "w_qkv", l, d, 3 * d);
    b.b_qkv = add(p + "b_qkv", l, 1, 3 * d);
    b.w_o = add(p + "w_o", l, d, d);
    b.b_o = add(p + "b_o", l, 1, d);
    b.ln2_g = add(p + "ln2_g", l, 1, d);
    b.ln2_b = add(p + "ln2_b", l, 1, d);
    b.w_1 = add(p + "w_1", l, d, cfg_.d_ff);
    b.b_1 = add(p + "b_1", l, 1, cfg_.d_ff);
    b.w_2 = add(p + "w_2", l, cfg_.d_ff, d);
    b.b_2 = add(p + "b_2", l, 1, d);
    blocks_.push_back(b);
  }
  lnf_g_ = add("lnf_g", cfg_.n_layers, 1, d);
  lnf_b_ = add("lnf_b", cfg_.n_layers, 1, d);
  w_out_ = add("w_out", cfg_.n_layers, d, cfg_.vocab_size);
  b_out_ = add("b_out", cfg_.n_layers, 1, cfg_.vocab_size);

  std::mt19937_64 rng(cfg_.seed);
  for (Parameter<T>& p : params_) {
    const std::string& n = p.name;
    const bool gain = n.ends_with("_g");
    const bool bias = p.value.rows() == 1 && !gain;
    if (gain) {
      p.value.setOnes();
    } else if (bias) {
      p.value.setZero();
    } else {
      const bool embedding = p.group == kEmbeddingGroup;
      const double a = embedding ? 0.1 : 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(uniform_pm(rng, a));
    }
  }
}

template <class T>
std::size_t PolicyModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <class T>
bool PolicyModel<T>::group_trainable(int group) const {
  if (group == kEmbeddingGroup) return frozen_ == 0;
  return group >= frozen_;
}

template <class T>
void PolicyModel<T>::freeze_lower_layers(int k) {
  if (k < 0 || k > cfg_.n_layers) {
    throw Error("config", "freeze depth " + std::to_string(k) + " outside [0, " + std::to_string(cfg_.n_layers) + "]");
  }
  frozen_ = k;
  for (Parameter<T>& p : params_) {
    p.trainable = group_trainable(p.group);
    if (p.trainable) {
      if (p.grad.size() != p.value.size()) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    } else {
      p.grad = Matrix();
    }
  }
}

template <class T>
void PolicyModel<T>::zero_grad() {
  for (Parameter<T>& p : params_) {
    if (p.trainable) p.grad.setZero();
  }
}

template <class T>
void PolicyModel<T>::check_sample(const TokenizedSample& sample) const {
  const int len = static_cast<int>(sample.length());
  if (len == 0) throw Error("data", "empty sample");
  if (len > cfg_.max_seq_len) {
    throw Error("data", "sample length " + std::to_string(len) + " exceeds max_seq_len " +
                            std::to_string(cfg_.max_seq_len));
  }
  const int imgs = static_cast<int>(std::count(sample.input_ids.begin(), sample.input_ids.end(), Vocabulary::kImg));
  if (imgs != cfg_.patch_count() || static_cast<int>(sample.patches.size()) != cfg_.patch_count()) {
    throw Error("data", "sample has " + std::to_string(imgs) + " image positions, model expects " +
                            std::to_string(cfg_.patch_count()));
  }
  for (int id : sample.input_ids) {
    if (id < 0 || id >= cfg_.vocab_size) throw Error("data", "token id " + std::to_string(id) + " outside vocabulary");
  }
  for (std::uint8_t c : sample.patches) {
    if (c >= cfg_.n_colors) throw Error("data", "patch color " + std::to_string(c) + " outside palette");
  }
}

template <class T>
typename PolicyModel<T>::Matrix PolicyModel<T>::embed(const TokenizedSample& sample) const {
  const int len = static_cast<int>(sample.length());
  const int p2 = cfg_.grid * cfg_.grid;
  const Matrix& tok = w(tok_emb_);
  const Matrix& pos = w(pos_emb_);
  const Matrix& pe = w(patch_emb_);
  Matrix x(len, cfg_.d_model);
  int patch = 0;
  for (int p = 0; p < len; ++p) {
    const int id = sample.input_ids[static_cast<std::size_t>(p)];
    if (id == Vocabulary::kImg) {
      const int view = patch / p2;
      const int r = (patch % p2) / cfg_.grid;
      const int c = patch % cfg_.grid;
      const int color = sample.patches[static_cast<std::size_t>(patch)];
      x.row(p) = pe.row(color) + pe.row(cfg_.n_colors + r) + pe.row(cfg_.n_colors + cfg_.grid + c) +
                 pe.row(cfg_.n_colors + 2 * cfg_.grid + view) + w(patch_b_).row(0);
      ++patch;
    } else {
      x.row(p) = tok.row(id);
    }
    x.row(p) += pos.row(p);
  }
  return x;
}

template <class T>
typename PolicyModel<T>::Matrix PolicyModel<T>::forward_train(const TokenizedSample& sample,
                                                              std::span<const int> rows, Cache& cache) const {
  check_sample(sample);
  const int len = static_cast<int>(sample.length());
  const int d = cfg_.d_model;
  const int dh = cfg_.d_head();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  cache.input_ids = sample.input_ids;
  cache.patches = sample.patches;
  cache.rows.assign(rows.begin(), rows.end());
  cache.layers.resize(static_cast<std::size_t>(cfg_.n_layers));

  Matrix x = embed(sample);
  Matrix h;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const Block& b = blocks_[static_cast<std::size_t>(l)];
    auto& c = cache.layers[static_cast<std::size_t>(l)];
    layer_norm(x, w(b.ln1_g), w(b.ln1_b), c.xhat1, c.rstd1, h);
    c.qkv.noalias() = h * w(b.w_qkv);
    c.qkv.rowwise() += w(b.b_qkv).row(0);
    c.att.resize(len, d);
    c.probs.resize(static_cast<std::size_t>(cfg_.n_heads));
    for (int hd = 0; hd < cfg_.n_heads; ++hd) {
      Matrix& s = c.probs[static_cast<std::size_t>(hd)];
      s.noalias() = c.qkv.middleCols(hd * dh, dh) * c.qkv.middleCols(d + hd * dh, dh).transpose();
      s *= scale;
      causal_softmax(s, 0);
      c.att.middleCols(hd * dh, dh).noalias() = s * c.qkv.middleCols(2 * d + hd * dh, dh);
    }
    x.noalias() += c.att * w(b.w_o);
    x.rowwise() += w(b.b_o).row(0);
    layer_norm(x, w(b.ln2_g), w(b.ln2_b), c.xhat2, c.rstd2, h);
    c.u.noalias() = h * w(b.w_1);
    c.u.rowwise() += w(b.b_1).row(0);
    c.g = c.u.unaryExpr([](T v) { return gelu(v); });
    x.noalias() += c.g * w(b.w_2);
    x.rowwise() += w(b.b_2).row(0);
  }
  layer_norm(x, w(lnf_g_), w(lnf_b_), cache.xhatf, cache.rstdf, cache.hf);
  Matrix sel(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= len) throw Error("data", "logit row outside the sample");
    sel.row(static_cast<Eigen::Index>(i)) = cache.hf.row(rows[i]);
  }
  Matrix logits = sel * w(w_out_);
  logits.rowwise() += w(b_out_).row(0);
  return logits;
}

template <class T>
void PolicyModel<T>::backward(const Cache& cache, const Matrix& dlogits) {
  const int len = static_cast<int>(cache.input_ids.size());
  const int d = cfg_.d_model;
  const int dh = cfg_.d_head();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto g = [this](int i) -> Matrix& { return params_[static_cast<std::size_t>(i)].grad; };

  Matrix sel(static_cast<Eigen::Index>(cache.rows.size()), d);
  for (std::size_t i = 0; i < cache.rows.size(); ++i) sel.row(static_cast<Eigen::Index>(i)) = cache.hf.row(cache.rows[i]);
  g(w_out_).noalias() += sel.transpose() * dlogits;
  g(b_out_).row(0) += dlogits.colwise().sum();
  Matrix dsel = dlogits * w(w_out_).transpose();
  Matrix dhf = Matrix::Zero(len, d);
  for (std::size_t i = 0; i < cache.rows.size(); ++i) dhf.row(cache.rows[i]) += dsel.row(static_cast<Eigen::Index>(i));
  Matrix dx = layer_norm_backward(dhf, cache.xhatf, cache.rstdf, w(lnf_g_), g(lnf_g_), g(lnf_b_), true);

  for (int l = cfg_.n_layers - 1; l >= frozen_; --l) {
    const Block& b = blocks_[static_cast<std::size_t>(l)];
    const auto& c = cache.layers[static_cast<std::size_t>(l)];
    const bool need_dx = l > 0 || frozen_ == 0;

    // feed-forward sublayer
    g(b.w_2).noalias() += c.g.transpose() * dx;
    g(b.b_2).row(0) += dx.colwise().sum();
    Matrix du = dx * w(b.w_2).transpose();
    du = du.cwiseProduct(c.u.unaryExpr([](T v) { return gelu_grad(v); }));
    Matrix h2 = (c.xhat2.array().rowwise() * w(b.ln2_g).row(0).array()).rowwise() + w(b.ln2_b).row(0).array();
    g(b.w_1).noalias() += h2.transpose() * du;
    g(b.b_1).row(0) += du.colwise().sum();
    Matrix dh2 = du * w(b.w_1).transpose();
    dx += layer_norm_backward(dh2, c.xhat2, c.rstd2, w(b.ln2_g), g(b.ln2_g), g(b.ln2_b), true);

    // attention sublayer
    g(b.w_o).noalias() += c.att.transpose() * dx;
    g(b.b_o).row(0) += dx.colwise().sum();
    Matrix datt = dx * w(b.w_o).transpose();
    Matrix dqkv(len, 3 * d);
    for (int hd = 0; hd < cfg_.n_heads; ++hd) {
      const Matrix& a = c.probs[static_cast<std::size_t>(hd)];
      const auto q = c.qkv.middleCols(hd * dh, dh);
      const auto k = c.qkv.middleCols(d + hd * dh, dh);
      const auto v = c.qkv.middleCols(2 * d + hd * dh, dh);
      const auto dout = datt.middleCols(hd * dh, dh);
      Matrix da = dout * v.transpose();
      dqkv.middleCols(2 * d + hd * dh, dh).noalias() = a.transpose() * dout;
      const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = a.cwiseProduct(da).rowwise().sum();
      Matrix ds = (a.array() * (da.array().colwise() - rowdot.array())) * scale;
      dqkv.middleCols(hd * dh, dh).noalias() = ds * k;
      dqkv.middleCols(d + hd * dh, dh).noalias() = ds.transpose() * q;
    }
    Matrix h1 = (c.xhat1.array().rowwise() * w(b.ln1_g).row(0).array()).rowwise() + w(b.ln1_b).row(0).array();
    g(b.w_qkv).noalias() += h1.transpose() * dqkv;
    g(b.b_qkv).row(0) += dqkv.colwise().sum();
    const Matrix dh1 = dqkv * w(b.w_qkv).transpose();
    if (need_dx) {
      dx += layer_norm_backward(dh1, c.xhat1, c.rstd1, w(b.ln1_g), g(b.ln1_g), g(b.ln1_b), true);
    } else {
      layer_norm_backward(dh1, c.xhat1, c.rstd1, w(b.ln1_g), g(b.ln1_g), g(b.ln1_b), false);
    }
  }

  if (frozen_ != 0) return;
  const int p2 = cfg_.grid * cfg_.grid;
  int patch = 0;
  for (int p = 0; p < len; ++p) {
    const int id = cache.input_ids[static_cast<std::size_t>(p)];
    g(pos_emb_).row(p) += dx.row(p);
    if (id == Vocabulary::kImg) {
      const int view = patch / p2;
      const int r = (patch % p2) / cfg_.grid;
      const int col = patch % cfg_.grid;
      const int color = cache.patches[static_cast<std::size_t>(patch)];
      Matrix& ge = g(patch_emb_);
      ge.row(color) += dx.row(p);
      ge.row(cfg_.n_colors + r) += dx.row(p);
      ge.row(cfg_.n_colors + cfg_.grid + col) += dx.row(p);
      ge.row(cfg_.n_colors + 2 * cfg_.grid + view) += dx.row(p);
      g(patch_b_).row(0) += dx.row(p);
      ++patch;
    } else {
      g(tok_emb_).row(id) += dx.row(p);
    }
  }
}

// Runs the blocks over `x_new`, the rows at positions [start, start + m), with
// keys/values of earlier positions taken from `kv`. `out` receives the final
// residual stream (before the last norm).
template <class T>
void PolicyModel<T>::extend(KvCache& kv, const Matrix& x_new, int start, AttentionRecord* record,
                            bool record_last_only, Matrix& out) const {
  const int m = static_cast<int>(x_new.rows());
  const int d = cfg_.d_model;
  const int dh = cfg_.d_head();
  const int end = start + m;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix x = x_new;
  Matrix xhat, h, qkv, att(m, d), s;
  std::vector<T> rstd;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const Block& b = blocks_[static_cast<std::size_t>(l)];
    layer_norm(x, w(b.ln1_g), w(b.ln1_b), xhat, rstd, h);
    qkv.noalias() = h * w(b.w_qkv);
    qkv.rowwise() += w(b.b_qkv).row(0);
    Matrix& kc = kv.k[static_cast<std::size_t>(l)];
    Matrix& vc = kv.v[static_cast<std::size_t>(l)];
    kc.middleRows(start, m) = qkv.middleCols(d, d);
    vc.middleRows(start, m) = qkv.middleCols(2 * d, d);
    for (int hd = 0; hd < cfg_.n_heads; ++hd) {
      s.noalias() = qkv.middleCols(hd * dh, dh) * kc.block(0, hd * dh, end, dh).transpose();
      s *= scale;
      causal_softmax(s, start);
      att.middleCols(hd * dh, dh).noalias() = s * vc.block(0, hd * dh, end, dh);
      if (record != nullptr) {
        Eigen::MatrixXd& map = record->maps[static_cast<std::size_t>(l * cfg_.n_heads + hd)];
        const int first = record_last_only ? m - 1 : 0;
        const Eigen::Index r0 = map.rows();
        map.conservativeResize(r0 + (m - first), Eigen::NoChange);
        map.bottomRows(m - first).setZero();
        for (int i = first; i < m; ++i) {
          map.row(r0 + (i - first)).head(end) = s.row(i).template cast<double>();
        }
      }
    }
    x.noalias() += att * w(b.w_o);
    x.rowwise() += w(b.b_o).row(0);
    layer_norm(x, w(b.ln2_g), w(b.ln2_b), xhat, rstd, h);
    Matrix u = h * w(b.w_1);
    u.rowwise() += w(b.b_1).row(0);
    u = u.unaryExpr([](T v) { return gelu(v); });
    x.noalias() += u * w(b.w_2);
    x.rowwise() += w(b.b_2).row(0);
  }
  out = std::move(x);
}

namespace {

void begin_record(AttentionRecord& r, const ModelConfig& cfg, const TokenizedSample& s, int capacity) {
  r = AttentionRecord{};
  r.n_layers = cfg.n_layers;
  r.n_heads = cfg.n_heads;
  r.n_keys = capacity;
  r.views = s.views;
  r.grid = s.grid;
  r.input_ids = s.input_ids;
  r.segment = s.segment;
  r.maps.assign(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads), Eigen::MatrixXd(0, capacity));
}

}  // namespace

template <class T>
typename PolicyModel<T>::Matrix PolicyModel<T>::forward(const TokenizedSample& sample, AttentionRecord* record) const {
  check_sample(sample);
  const int len = static_cast<int>(sample.length());
  KvCache kv;
  kv.k.assign(static_cast<std::size_t>(cfg_.n_layers), Matrix(len, cfg_.d_model));
  kv.v.assign(static_cast<std::size_t>(cfg_.n_layers), Matrix(len, cfg_.d_model));
  if (record != nullptr) {
    begin_record(*record, cfg_, sample, len);
    for (int p = 0; p < len; ++p) record->query_positions.push_back(p);
  }
  Matrix x;
  extend(kv, embed(sample), 0, record, false, x);
  Matrix xhat, hf;
  std::vector<T> rstd;
  layer_norm(x, w(lnf_g_), w(lnf_b_), xhat, rstd, hf);
  Matrix logits = hf * w(w_out_);
  logits.rowwise() += w(b_out_).row(0);
  return logits;
}

template <class T>
GenerateResult PolicyModel<T>::generate(const TokenizedSample& prompt, int max_new, AttentionRecord* record,
                                        const TokenChooser<T>& chooser) const {
  check_sample(prompt);
  if (max_new < 0) throw Error("data", "max_new must be >= 0");
  const int len0 = static_cast<int>(prompt.length());
  if (len0 + max_new > cfg_.max_seq_len) {
    throw Error("data", "prompt of " + std::to_string(len0) + " plus " + std::to_string(max_new) +
                            " new tokens exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  GenerateResult result;
  if (record != nullptr) begin_record(*record, cfg_, prompt, len0 + max_new);
  if (max_new == 0) {
    if (record != nullptr) {
      for (auto& m : record->maps) m.resize(0, len0);
      record->n_keys = len0;
    }
    return result;
  }
  const int cap = len0 + max_new;
  KvCache kv;
  kv.k.assign(static_cast<std::size_t>(cfg_.n_layers), Matrix(cap, cfg_.d_model));
  kv.v.assign(static_cast<std::size_t>(cfg_.n_layers), Matrix(cap, cfg_.d_model));
  Matrix x;
  extend(kv, embed(prompt), 0, record, true, x);

  int cur = len0;
  Matrix last = x.bottomRows(1);
  Matrix xhat, hf, logits;
  std::vector<T> rstd;
  for (int t = 0; t < max_new; ++t) {
    layer_norm(last, w(lnf_g_), w(lnf_b_), xhat, rstd, hf);
    logits.noalias() = hf * w(w_out_);
    logits.row(0) += w(b_out_).row(0);
    if (record != nullptr) record->query_positions.push_back(cur - 1);
    int next = 0;
    if (chooser) {
      next = chooser(std::span<const T>(logits.data(), static_cast<std::size_t>(logits.cols())), result.tokens);
      if (next < 0 || next >= cfg_.vocab_size) throw Error("data", "token chooser returned an invalid id");
    } else {
      Eigen::Index arg = 0;
      logits.row(0).maxCoeff(&arg);
      next = static_cast<int>(arg);
    }
    result.tokens.push_back(next);
    if (next == Vocabulary::kEos || t + 1 == max_new) break;
    Matrix xn = w(tok_emb_).row(next) + w(pos_emb_).row(cur);
    extend(kv, xn, cur, record, true, last);
    ++cur;
  }
  if (record != nullptr) {
    const int final_len = len0 + static_cast<int>(result.tokens.size());
    for (auto& m : record->maps) m = m.leftCols(final_len).eval();
    record->n_keys = final_len;
    for (int id : result.tokens) {
      record->input_ids.push_back(id);
      record->segment.push_back(Segment::Special);
    }
  }
  return result;
}

template <class T>
std::uint64_t PolicyModel<T>::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) h = fnv_bytes(h, p.value.data(), sizeof(T) * static_cast<std::size_t>(p.value.size()));
  return h;
}

template <class T>
std::uint64_t PolicyModel<T>::checksum(int group) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    if (p.group == group) h = fnv_bytes(h, p.value.data(), sizeof(T) * static_cast<std::size_t>(p.value.size()));
  }
  return h;
}

template class PolicyModel<float>;
template class PolicyModel<double>;

namespace {

constexpr char kMagic[8] = {'C', 'O', 'T', 'V', 'L', 'A', '0', '1'};

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

template <class T>
void save_checkpoint(const std::filesystem::path& path, const PolicyModel<T>& model, const Vocabulary& vocab) {
  json header{{"config", model.config().to_json()},
              {"vocab_hash", vocab.hash()},
              {"frozen_prefix", model.frozen_prefix()},
              {"dtype", dtype_name<T>()}};
  json shapes = json::array();
  for (const auto& p : model.parameters()) shapes.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  header["parameters"] = shapes;
  const std::string text = header.dump();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io", "cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t n = text.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : model.parameters()) {
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(sizeof(T) * static_cast<std::size_t>(p.value.size())));
    }
    if (!out) throw Error("io", "short write to checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("io", "cannot rename checkpoint into " + path.string() + ": " + ec.message());
}

template void save_checkpoint<float>(const std::filesystem::path&, const PolicyModel<float>&, const Vocabulary&);
template void save_checkpoint<double>(const std::filesystem::path&, const PolicyModel<double>&, const Vocabulary&);

namespace {

json read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw Error("io", path.string() + " is not a checkpoint");
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n > (1u << 24)) throw Error("io", path.string() + ": corrupt checkpoint header");
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (!in) throw Error("io", path.string() + ": truncated checkpoint header");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error("io", path.string() + ": malformed checkpoint header: " + e.what());
  }
}

}  // namespace

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open checkpoint " + path.string());
  const json h = read_header(in, path);
  CheckpointInfo info;
  info.config = ModelConfig::from_json(h.at("config"));
  info.vocab_hash = h.at("vocab_hash").get<std::uint64_t>();
  info.frozen_prefix = h.at("frozen_prefix").get<int>();
  info.dtype = h.at("dtype").get<std::string>();
  return info;
}

PolicyModel<float> load_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open checkpoint " + path.string());
  const json h = read_header(in, path);
  const auto stored = h.at("vocab_hash").get<std::uint64_t>();
  if (stored != vocab.hash()) throw Error("io", path.string() + ": vocabulary hash mismatch");
  PolicyModel<float> model(ModelConfig::from_json(h.at("config")));
  const std::string dtype = h.at("dtype").get<std::string>();
  if (dtype != "f32" && dtype != "f64") throw Error("io", path.string() + ": unknown dtype " + dtype);
  const auto& shapes = h.at("parameters");
  if (shapes.size() != model.parameters().size()) throw Error("io", path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    auto& p = model.parameters()[i];
    if (shapes[i].at("name").get<std::string>() != p.name || shapes[i].at("rows").get<Eigen::Index>() != p.value.rows() ||
        shapes[i].at("cols").get<Eigen::Index>() != p.value.cols()) {
      throw Error("io", path.string() + ": parameter layout mismatch at " + p.name);
    }
    if (dtype == "f32") {
      in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(sizeof(float) * p.value.size()));
    } else {
      RowMatrix<double> tmp(p.value.rows(), p.value.cols());
      in.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(sizeof(double) * tmp.size()));
      p.value = tmp.cast<float>();
    }
    if (!in) throw Error("io", path.string() + ": truncated parameter data");
  }
  model.freeze_lower_layers(h.at("frozen_prefix").get<int>());
  return model;
}

}  // namespace cotvla
