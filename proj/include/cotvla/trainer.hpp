#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cotvla/data_model.hpp"
#include "cotvla/model.hpp"
#include "cotvla/objective.hpp"
#include "cotvla/simenv.hpp"
#include "cotvla/tokenizer.hpp"

namespace cotvla {

struct TrainConfig {
  double lambda_r = 0.3;
  double learning_rate = 2e-4;
  int batch_size = 32;
  int epochs = 1;
  int freeze_layers = 0;
  std::uint64_t seed = 0;
  int save_steps = 500;
  int shuffle_buffer = 0;  // 0: full-dataset shuffle
  int reasoning_budget = kDefaultReasoningBudget;
  int eval_steps = 0;           // 0: evaluate only at the end; otherwise also at step 0
  int early_stop_patience = 0;  // evals without action_accuracy gain; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::filesystem::path out_dir;

  /// Throws Error("config") for non-positive sizes/rates or K outside [0, n_layers].
  void validate(int n_layers) const;
  nlohmann::json to_json() const;
};

/// Vocabulary over every word the episodes (and their traces) use.
Vocabulary build_vocabulary(std::span<const Episode> episodes, int bins_per_dim);

/// One assembled sample per step, in dataset order. Traces are read only when
/// `include_trace`; then a step without a trace is an Error("data").
std::vector<TokenizedSample> build_samples(std::span<const Episode> episodes, const Vocabulary& vocab,
                                           int reasoning_budget, bool include_trace);

/// Sample order for one epoch: Fisher-Yates when buffer == 0, otherwise a
/// streaming shuffle through a buffer of that size.
std::vector<std::size_t> shuffled_order(std::size_t n, int buffer, std::mt19937_64& rng);

struct EvalResult {
  MetricSet metrics;
  LossBreakdown loss;
};

struct EvalPoint {
  int step = 0;
  EvalResult result;
};

struct TrainResult {
  int steps = 0;
  bool early_stopped = false;
  std::vector<LossBreakdown> losses;  // one per optimizer step
  std::vector<MetricSet> metrics;
  std::vector<EvalPoint> evals;
  std::filesystem::path metrics_path;
  std::filesystem::path eval_path;
  std::filesystem::path final_checkpoint;
};

/// Adam over the trainable subset only, one optimizer step per mini-batch.
/// Writes vocab.json, train_config.json, metrics.jsonl, eval.jsonl and
/// ckpt_<step>.bin under cfg.out_dir. The model's frozen prefix is set to
/// cfg.freeze_layers.
TrainResult train(PolicyModel<float>& model, const Vocabulary& vocab, std::span<const Episode> dataset,
                  const TrainConfig& cfg, std::span<const Episode> eval_set = {});

/// Teacher-forced metrics pooled over every step of `dataset`; traces are used
/// when lambda_r > 0. Throws for an empty dataset or a vocabulary mismatch.
EvalResult evaluate_offline(const PolicyModel<float>& model, const Vocabulary& vocab, std::span<const Episode> dataset,
                            const TrainConfig& cfg);

struct PolicyOptions {
  int reasoning_budget = kDefaultReasoningBudget;
};

struct PolicyDecode {
  std::vector<int> tokens;
  int first_action = -1;  // index into tokens
  bool ok = false;
  ContinuousAction action;
};

/// Greedy decode of reasoning then exactly 7 action tokens, each constrained to
/// its own dimension's bins. Specials are never emitted before the action.
/// When decoding fails the action is a hold.
PolicyDecode decode_policy_step(const PolicyModel<float>& model, const Vocabulary& vocab, const Observation& obs,
                                const PolicyOptions& options, AttentionRecord* record = nullptr);

sim::Policy make_policy(std::shared_ptr<const PolicyModel<float>> model, Vocabulary vocab, PolicyOptions options = {});

}  // namespace cotvla
