#include "cotvla/objective.hpp"

#include <cmath>
#include <limits>

#include "cotvla/error.hpp"

namespace cotvla {

std::vector<int> shift_labels(std::span<const int> labels) {
  if (labels.empty()) return {};
  return std::vector<int>(labels.begin() + 1, labels.end());
}

TokenMasks split_masks(std::span<const int> shifted_labels, const Vocabulary& vocab) {
  TokenMasks m;
  m.action.resize(shifted_labels.size());
  m.reasoning.resize(shifted_labels.size());
  for (std::size_t i = 0; i < shifted_labels.size(); ++i) {
    const int l = shifted_labels[i];
    const bool action = l >= vocab.translation_token_start_idx() && l <= vocab.gripper_token_end_idx();
    m.action[i] = action;
    m.reasoning[i] = l != kIgnoreLabel && !action;
  }
  return m;
}

SupervisedRows supervised_rows(std::span<const int> labels) {
  SupervisedRows s;
  for (std::size_t p = 0; p + 1 < labels.size(); ++p) {
    if (labels[p + 1] != kIgnoreLabel) {
      s.rows.push_back(static_cast<int>(p));
      s.targets.push_back(labels[p + 1]);
    }
  }
  return s;
}

void NllSums::add(const NllSums& o) {
  action += o.action;
  reasoning += o.reasoning;
  n_action += o.n_action;
  n_reasoning += o.n_reasoning;
}

template <class T>
void accumulate_nll(const RowMatrix<T>& logits, std::span<const int> targets, const Vocabulary& vocab, NllSums& sums,
                    double action_weight, double reasoning_weight, RowMatrix<T>* dlogits) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) throw Error("data", "logits/targets row mismatch");
  if (logits.cols() != vocab.size()) throw Error("data", "logits width does not match the vocabulary");
  if (dlogits != nullptr) dlogits->setZero(logits.rows(), logits.cols());
  const Eigen::Index v = logits.cols();
  Eigen::VectorXd row(v);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= v) throw Error("data", "target id " + std::to_string(t) + " outside vocabulary");
    row = logits.row(i).template cast<double>().transpose();
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    const double nll = lse - row(t);
    const bool action = vocab.is_action(t);
    if (action) {
      sums.action += nll;
      ++sums.n_action;
    } else {
      sums.reasoning += nll;
      ++sums.n_reasoning;
    }
    if (dlogits != nullptr) {
      const double w = action ? action_weight : reasoning_weight;
      Eigen::VectorXd p = (row.array() - lse).exp();
      p(t) -= 1.0;
      dlogits->row(i) = (p * w).transpose().template cast<T>();
    }
  }
}

LossBreakdown combine_losses(const NllSums& sums, double lambda_r) {
  if (!(lambda_r >= 0.0)) throw Error("config", "lambda_r must be >= 0");
  LossBreakdown b;
  b.lambda_r = lambda_r;
  b.n_action_tokens = sums.n_action;
  b.n_reasoning_tokens = sums.n_reasoning;
  b.loss_action = sums.n_action > 0 ? sums.action / static_cast<double>(sums.n_action) : 0.0;
  b.loss_reasoning = sums.n_reasoning > 0 ? sums.reasoning / static_cast<double>(sums.n_reasoning) : 0.0;
  b.loss_total = b.loss_action + lambda_r * b.loss_reasoning;
  return b;
}

namespace {

template <class T>
void gather_rows(const RowMatrix<T>& logits, std::span<const int> labels, RowMatrix<T>& rows_out,
                 std::vector<int>& targets) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw Error("data", "logits have " + std::to_string(logits.rows()) + " rows but labels have " +
                            std::to_string(labels.size()));
  }
  SupervisedRows s = supervised_rows(labels);
  rows_out.resize(static_cast<Eigen::Index>(s.rows.size()), logits.cols());
  for (std::size_t i = 0; i < s.rows.size(); ++i) rows_out.row(static_cast<Eigen::Index>(i)) = logits.row(s.rows[i]);
  targets = std::move(s.targets);
}

}  // namespace

template <class T>
LossBreakdown compute_losses(const RowMatrix<T>& logits, std::span<const int> labels, const Vocabulary& vocab,
                             double lambda_r) {
  RowMatrix<T> rows;
  std::vector<int> targets;
  gather_rows(logits, labels, rows, targets);
  NllSums sums;
  accumulate_nll(rows, targets, vocab, sums);
  return combine_losses(sums, lambda_r);
}

template <class T>
LossBreakdown compute_batch_losses(std::span<const RowMatrix<T>> logits, std::span<const std::vector<int>> labels,
                                   const Vocabulary& vocab, double lambda_r) {
  if (logits.size() != labels.size()) throw Error("data", "batch logits/labels count mismatch");
  NllSums sums;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    RowMatrix<T> rows;
    std::vector<int> targets;
    gather_rows(logits[b], labels[b], rows, targets);
    accumulate_nll(rows, targets, vocab, sums);
  }
  return combine_losses(sums, lambda_r);
}

nlohmann::json MetricSet::to_json() const {
  auto v = [](double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); };
  return {{"action_accuracy", v(action_accuracy)},
          {"reasoning_accuracy", v(reasoning_accuracy)},
          {"action_l1", v(action_l1)}};
}

void MetricSums::add(const MetricSums& o) {
  action_correct += o.action_correct;
  n_action += o.n_action;
  reasoning_correct += o.reasoning_correct;
  n_reasoning += o.n_reasoning;
  l1_sum += o.l1_sum;
  l1_count += o.l1_count;
}

MetricSet MetricSums::finalize() const {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  MetricSet m;
  m.action_accuracy = n_action > 0 ? static_cast<double>(action_correct) / static_cast<double>(n_action) : nan;
  m.reasoning_accuracy =
      n_reasoning > 0 ? static_cast<double>(reasoning_correct) / static_cast<double>(n_reasoning) : nan;
  m.action_l1 = l1_count > 0 ? l1_sum / static_cast<double>(l1_count) : nan;
  return m;
}

template <class T>
void accumulate_metrics(const RowMatrix<T>& logits, std::span<const int> targets, const Vocabulary& vocab,
                        MetricSums& sums) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) throw Error("data", "logits/targets row mismatch");
  const std::size_t n = targets.size();
  std::vector<int> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index arg = 0;
    logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    pred[i] = static_cast<int>(arg);
    const bool correct = pred[i] == targets[i];
    if (vocab.is_action(targets[i])) {
      ++sums.n_action;
      sums.action_correct += correct;
    } else {
      ++sums.n_reasoning;
      sums.reasoning_correct += correct;
    }
  }
  const int dims = vocab.action_dims();
  const int bins = vocab.bins_per_dim();
  for (std::size_t i = 0; i + static_cast<std::size_t>(dims) <= n;) {
    bool group = true;
    for (int d = 0; d < dims && group; ++d) group = vocab.action_dim(targets[i + static_cast<std::size_t>(d)]) == d;
    if (!group) {
      ++i;
      continue;
    }
    for (int d = 0; d < dims; ++d) {
      const int t = targets[i + static_cast<std::size_t>(d)];
      const int p = pred[i + static_cast<std::size_t>(d)];
      double err = 2.0;
      if (vocab.action_dim(p) == d) {
        const int base = vocab.action_token(d, 0);
        err = std::abs(bin_center(p - base, bins) - bin_center(t - base, bins));
      }
      sums.l1_sum += err;
      ++sums.l1_count;
    }
    i += static_cast<std::size_t>(dims);
  }
}

template <class T>
MetricSet compute_metrics(const RowMatrix<T>& logits, std::span<const int> labels, const Vocabulary& vocab) {
  RowMatrix<T> rows;
  std::vector<int> targets;
  gather_rows(logits, labels, rows, targets);
  MetricSums sums;
  accumulate_metrics(rows, targets, vocab, sums);
  return sums.finalize();
}

#define COTVLA_OBJECTIVE_INSTANTIATE(T)                                                                              \
  template void accumulate_nll<T>(const RowMatrix<T>&, std::span<const int>, const Vocabulary&, NllSums&, double,    \
                                  double, RowMatrix<T>*);                                                            \
  template LossBreakdown compute_losses<T>(const RowMatrix<T>&, std::span<const int>, const Vocabulary&, double);    \
  template LossBreakdown compute_batch_losses<T>(std::span<const RowMatrix<T>>, std::span<const std::vector<int>>,   \
                                                 const Vocabulary&, double);                                         \
  template void accumulate_metrics<T>(const RowMatrix<T>&, std::span<const int>, const Vocabulary&, MetricSums&);    \
  template MetricSet compute_metrics<T>(const RowMatrix<T>&, std::span<const int>, const Vocabulary&);

COTVLA_OBJECTIVE_INSTANTIATE(float)
COTVLA_OBJECTIVE_INSTANTIATE(double)

}  // namespace cotvla
