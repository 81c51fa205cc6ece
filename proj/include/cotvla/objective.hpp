#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cotvla/model.hpp"
#include "cotvla/tokenizer.hpp"
#include "json.hpp"

namespace cotvla {

struct LossBreakdown {
  double loss_total = 0.0;
  double loss_action = 0.0;
  double loss_reasoning = 0.0;
  long n_action_tokens = 0;
  long n_reasoning_tokens = 0;
  double lambda_r = 0.0;
};

struct TokenMasks {
  std::vector<std::uint8_t> action;
  std::vector<std::uint8_t> reasoning;
};

/// labels[1:]; element p is the target of logits row p.
std::vector<int> shift_labels(std::span<const int> labels);

/// action iff label in [translation_token_start_idx, gripper_token_end_idx];
/// reasoning iff label != IGNORE and not action.
TokenMasks split_masks(std::span<const int> shifted_labels, const Vocabulary& vocab);

/// Logit rows that carry a supervised target, with those targets.
struct SupervisedRows {
  std::vector<int> rows;
  std::vector<int> targets;
};
SupervisedRows supervised_rows(std::span<const int> labels);

/// Per-group sums of -log softmax(logits)[target]; pooled across a batch
/// before the per-group means are taken.
struct NllSums {
  double action = 0.0;
  double reasoning = 0.0;
  long n_action = 0;
  long n_reasoning = 0;

  void add(const NllSums& o);
};

/// Adds the NLL of each row against `targets` (aligned, no IGNORE). When
/// `dlogits` is non-null it receives d(total)/d(logits) with per-row weights
/// `action_weight` or `reasoning_weight` (typically 1/N_a and lambda/N_r).
template <class T>
void accumulate_nll(const RowMatrix<T>& logits, std::span<const int> targets, const Vocabulary& vocab, NllSums& sums,
                    double action_weight = 0.0, double reasoning_weight = 0.0, RowMatrix<T>* dlogits = nullptr);

/// Per-group means combined as total = action + lambda_r * reasoning; an empty group contributes 0.
LossBreakdown combine_losses(const NllSums& sums, double lambda_r);

/// Single sequence; `logits` (L x V) and `labels` (L) are aligned before the shift.
template <class T>
LossBreakdown compute_losses(const RowMatrix<T>& logits, std::span<const int> labels, const Vocabulary& vocab,
                             double lambda_r);

/// A batch of ragged sequences with token counts pooled across the batch.
template <class T>
LossBreakdown compute_batch_losses(std::span<const RowMatrix<T>> logits, std::span<const std::vector<int>> labels,
                                   const Vocabulary& vocab, double lambda_r);

/// Accuracies and action L1 are NaN when their group has no positions.
struct MetricSet {
  double action_accuracy = 0.0;
  double reasoning_accuracy = 0.0;
  double action_l1 = 0.0;

  nlohmann::json to_json() const;  // NaN is written as null
};

struct MetricSums {
  long action_correct = 0;
  long n_action = 0;
  long reasoning_correct = 0;
  long n_reasoning = 0;
  double l1_sum = 0.0;
  long l1_count = 0;

  void add(const MetricSums& o);
  MetricSet finalize() const;
};

/// Argmax accuracy per group; L1 over complete 7-token action groups, with
/// 2.0 charged for a slot whose argmax falls outside its dimension's bins.
template <class T>
void accumulate_metrics(const RowMatrix<T>& logits, std::span<const int> targets, const Vocabulary& vocab,
                        MetricSums& sums);

template <class T>
MetricSet compute_metrics(const RowMatrix<T>& logits, std::span<const int> labels, const Vocabulary& vocab);

}  // namespace cotvla
