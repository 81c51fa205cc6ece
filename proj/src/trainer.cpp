#include "cotvla/trainer.hpp"

#include <cmath>
#include <fstream>

#include "cotvla/error.hpp"

namespace cotvla {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate(int n_layers) const {
  if (!(lambda_r >= 0.0) || !std::isfinite(lambda_r)) throw Error("config", "lambda_r must be a finite value >= 0");
  if (!(learning_rate > 0.0)) throw Error("config", "learning rate must be > 0");
  if (batch_size < 1) throw Error("config", "batch size must be >= 1");
  if (epochs < 1) throw Error("config", "epochs must be >= 1");
  if (save_steps < 1) throw Error("config", "save_steps must be >= 1");
  if (shuffle_buffer < 0) throw Error("config", "shuffle_buffer must be >= 0");
  if (reasoning_budget < 0) throw Error("config", "reasoning budget must be >= 0");
  if (eval_steps < 0 || early_stop_patience < 0) throw Error("config", "eval_steps and patience must be >= 0");
  if (freeze_layers < 0 || freeze_layers > n_layers) {
    throw Error("config", "freeze " + std::to_string(freeze_layers) + " outside [0, " + std::to_string(n_layers) + "]");
  }
}

json TrainConfig::to_json() const {
  return json{{"lambda_r", lambda_r},
              {"learning_rate", learning_rate},
              {"batch_size", batch_size},
              {"epochs", epochs},
              {"freeze_layers", freeze_layers},
              {"seed", seed},
              {"save_steps", save_steps},
              {"shuffle_buffer", shuffle_buffer},
              {"reasoning_budget", reasoning_budget},
              {"eval_steps", eval_steps},
              {"early_stop_patience", early_stop_patience}};
}

Vocabulary build_vocabulary(std::span<const Episode> episodes, int bins_per_dim) {
  return Vocabulary::build(bins_per_dim, corpus_words(episodes));
}

std::vector<TokenizedSample> build_samples(std::span<const Episode> episodes, const Vocabulary& vocab,
                                           int reasoning_budget, bool include_trace) {
  std::vector<TokenizedSample> out;
  AssembleOptions opts{reasoning_budget, include_trace};
  for (const Episode& ep : episodes) {
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      if (include_trace && !ep.steps[t].trace) {
        throw Error("data", "episode " + ep.episode_id + " step " + std::to_string(t) +
                                " has no reasoning trace (required when lambda_r > 0)");
      }
      out.push_back(assemble_sample(ep.steps[t], vocab, opts));
    }
  }
  return out;
}

namespace {

std::size_t below(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

struct Item {
  const TokenizedSample* sample = nullptr;
  SupervisedRows rows;
};

std::vector<Item> make_items(const std::vector<TokenizedSample>& samples) {
  std::vector<Item> items(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    items[i].sample = &samples[i];
    items[i].rows = supervised_rows(samples[i].labels);
  }
  return items;
}

void check_vocab(const PolicyModel<float>& model, const Vocabulary& vocab) {
  if (model.config().vocab_size != vocab.size()) {
    throw Error("vocab", "model vocabulary size " + std::to_string(model.config().vocab_size) +
                             " != vocabulary size " + std::to_string(vocab.size()));
  }
}

EvalResult evaluate_items(const PolicyModel<float>& model, const Vocabulary& vocab, const std::vector<Item>& items,
                          double lambda_r) {
  NllSums nll;
  MetricSums metrics;
  PolicyModel<float>::Cache cache;
  for (const Item& it : items) {
    const RowMatrix<float> logits = model.forward_train(*it.sample, it.rows.rows, cache);
    accumulate_nll(logits, it.rows.targets, vocab, nll);
    accumulate_metrics(logits, it.rows.targets, vocab, metrics);
  }
  return {metrics.finalize(), combine_losses(nll, lambda_r)};
}

ordered_json metric_line(int step, const LossBreakdown& loss, const MetricSet& m) {
  auto v = [](double x) { return std::isnan(x) ? ordered_json(nullptr) : ordered_json(x); };
  ordered_json j;
  j["step"] = step;
  j["loss_total"] = loss.loss_total;
  j["loss_action"] = loss.loss_action;
  j["loss_reasoning"] = loss.loss_reasoning;
  j["action_accuracy"] = v(m.action_accuracy);
  j["reasoning_accuracy"] = v(m.reasoning_accuracy);
  j["action_l1"] = v(m.action_l1);
  return j;
}

struct Adam {
  std::vector<RowMatrix<float>> m, v;
  long t = 0;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << text;
  if (!out) throw Error("io", "short write to " + path.string());
}

}  // namespace

std::vector<std::size_t> shuffled_order(std::size_t n, int buffer, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (n < 2) return order;
  if (buffer <= 0) {
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[below(rng, i + 1)]);
    return order;
  }
  std::vector<std::size_t> out;
  out.reserve(n);
  std::vector<std::size_t> buf;
  std::size_t next = 0;
  while (next < n && buf.size() < static_cast<std::size_t>(buffer)) buf.push_back(next++);
  while (!buf.empty()) {
    const std::size_t j = below(rng, buf.size());
    out.push_back(buf[j]);
    if (next < n) {
      buf[j] = next++;
    } else {
      buf[j] = buf.back();
      buf.pop_back();
    }
  }
  return out;
}

TrainResult train(PolicyModel<float>& model, const Vocabulary& vocab, std::span<const Episode> dataset,
                  const TrainConfig& cfg, std::span<const Episode> eval_set) {
  cfg.validate(model.config().n_layers);
  check_vocab(model, vocab);
  if (dataset.empty()) throw Error("data", "training dataset is empty");
  const bool use_traces = cfg.lambda_r > 0.0;
  const std::vector<TokenizedSample> samples = build_samples(dataset, vocab, cfg.reasoning_budget, use_traces);
  const std::vector<Item> items = make_items(samples);
  std::vector<TokenizedSample> eval_samples;
  std::vector<Item> eval_items;
  if (!eval_set.empty()) {
    eval_samples = build_samples(eval_set, vocab, cfg.reasoning_budget, use_traces);
    eval_items = make_items(eval_samples);
  }

  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw Error("io", "cannot create " + cfg.out_dir.string() + ": " + ec.message());
  write_text(cfg.out_dir / "vocab.json", vocab.to_json().dump(1) + "\n");
  json run{{"train", cfg.to_json()}, {"model", model.config().to_json()}};
  write_text(cfg.out_dir / "train_config.json", run.dump(1) + "\n");

  TrainResult result;
  result.metrics_path = cfg.out_dir / "metrics.jsonl";
  result.eval_path = cfg.out_dir / "eval.jsonl";
  std::ofstream metrics_out(result.metrics_path, std::ios::trunc);
  std::ofstream eval_out(result.eval_path, std::ios::trunc);
  if (!metrics_out || !eval_out) throw Error("io", "cannot open metric logs under " + cfg.out_dir.string());

  model.freeze_lower_layers(cfg.freeze_layers);
  auto& params = model.parameters();
  Adam adam;
  adam.m.resize(params.size());
  adam.v.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    adam.m[i] = RowMatrix<float>::Zero(params[i].value.rows(), params[i].value.cols());
    adam.v[i] = RowMatrix<float>::Zero(params[i].value.rows(), params[i].value.cols());
  }

  std::mt19937_64 rng(cfg.seed);
  PolicyModel<float>::Cache cache;
  RowMatrix<float> dlogits;
  int step = 0;
  int last_saved = -1;
  double best_eval = -1.0;
  int evals_without_gain = 0;

  auto save = [&](int s) {
    const std::filesystem::path p = cfg.out_dir / ("ckpt_" + std::to_string(s) + ".bin");
    save_checkpoint(p, model, vocab);
    result.final_checkpoint = p;
    last_saved = s;
  };
  auto run_eval = [&](int s) {
    if (eval_items.empty()) return false;
    EvalResult r = evaluate_items(model, vocab, eval_items, cfg.lambda_r);
    result.evals.push_back({s, r});
    eval_out << metric_line(s, r.loss, r.metrics).dump() << "\n";
    eval_out.flush();
    if (cfg.early_stop_patience <= 0 || std::isnan(r.metrics.action_accuracy)) return false;
    if (r.metrics.action_accuracy > best_eval) {
      best_eval = r.metrics.action_accuracy;
      evals_without_gain = 0;
    } else if (++evals_without_gain >= cfg.early_stop_patience) {
      return true;
    }
    return false;
  };

  // Periodic evaluation starts from the untrained baseline.
  if (cfg.eval_steps > 0) run_eval(0);
  bool stop = false;
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    const std::vector<std::size_t> order = shuffled_order(items.size(), cfg.shuffle_buffer, rng);
    for (std::size_t begin = 0; begin < order.size() && !stop; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      long n_action = 0;
      long n_reasoning = 0;
      for (std::size_t b = begin; b < end; ++b) {
        for (int t : items[order[b]].rows.targets) (vocab.is_action(t) ? n_action : n_reasoning)++;
      }
      const double aw = n_action > 0 ? 1.0 / static_cast<double>(n_action) : 0.0;
      const double rw = n_reasoning > 0 ? cfg.lambda_r / static_cast<double>(n_reasoning) : 0.0;

      model.zero_grad();
      NllSums nll;
      MetricSums msums;
      for (std::size_t b = begin; b < end; ++b) {
        const Item& it = items[order[b]];
        const RowMatrix<float> logits = model.forward_train(*it.sample, it.rows.rows, cache);
        accumulate_nll(logits, it.rows.targets, vocab, nll, aw, rw, &dlogits);
        accumulate_metrics(logits, it.rows.targets, vocab, msums);
        model.backward(cache, dlogits);
      }
      const LossBreakdown loss = combine_losses(nll, cfg.lambda_r);
      if (loss.loss_total != loss.loss_action + cfg.lambda_r * loss.loss_reasoning || !std::isfinite(loss.loss_total)) {
        throw Error("data", "loss decomposition violated at step " + std::to_string(step + 1));
      }

      ++adam.t;
      const float lr = static_cast<float>(cfg.learning_rate);
      const float b1 = static_cast<float>(cfg.beta1);
      const float b2 = static_cast<float>(cfg.beta2);
      const float c1 = static_cast<float>(1.0 - std::pow(cfg.beta1, static_cast<double>(adam.t)));
      const float c2 = static_cast<float>(1.0 - std::pow(cfg.beta2, static_cast<double>(adam.t)));
      const float eps = static_cast<float>(cfg.adam_eps);
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].trainable) continue;
        auto g = params[i].grad.array();
        auto m = adam.m[i].array();
        auto v = adam.v[i].array();
        m = b1 * m + (1.0f - b1) * g;
        v = b2 * v + (1.0f - b2) * g.square();
        params[i].value.array() -= lr * (m / c1) / ((v / c2).sqrt() + eps);
      }

      ++step;
      const MetricSet mset = msums.finalize();
      result.losses.push_back(loss);
      result.metrics.push_back(mset);
      metrics_out << metric_line(step, loss, mset).dump() << "\n";
      metrics_out.flush();
      if (step % cfg.save_steps == 0) save(step);
      if (cfg.eval_steps > 0 && step % cfg.eval_steps == 0) {
        stop = run_eval(step);
        result.early_stopped = stop;
      }
    }
  }
  if (result.evals.empty() || result.evals.back().step != step) run_eval(step);
  if (last_saved != step) save(step);
  result.steps = step;
  return result;
}

EvalResult evaluate_offline(const PolicyModel<float>& model, const Vocabulary& vocab, std::span<const Episode> dataset,
                            const TrainConfig& cfg) {
  check_vocab(model, vocab);
  if (dataset.empty()) throw Error("data", "evaluation dataset is empty");
  const std::vector<TokenizedSample> samples = build_samples(dataset, vocab, cfg.reasoning_budget, cfg.lambda_r > 0.0);
  if (samples.empty()) throw Error("data", "evaluation dataset has no steps");
  return evaluate_items(model, vocab, make_items(samples), cfg.lambda_r);
}

namespace {

int constrained_argmax(std::span<const float> logits, int lo, int hi) {
  int best = lo;
  for (int i = lo + 1; i < hi; ++i) {
    if (logits[static_cast<std::size_t>(i)] > logits[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

}  // namespace

PolicyDecode decode_policy_step(const PolicyModel<float>& model, const Vocabulary& vocab, const Observation& obs,
                                const PolicyOptions& options, AttentionRecord* record) {
  check_vocab(model, vocab);
  const TokenizedSample prompt = assemble_prompt(obs, vocab);
  const int dims = vocab.action_dims();
  const int room = model.config().max_seq_len - static_cast<int>(prompt.length());
  const int max_new = std::min(options.reasoning_budget + dims + 1, room);
  if (max_new < dims) throw Error("data", "no room left in the context for an action");
  const int force_at = std::min(options.reasoning_budget, max_new - dims);

  auto dim_range = [&](int d) { return std::pair{vocab.action_token(d, 0), vocab.action_token(d, vocab.bins_per_dim())}; };
  TokenChooser<float> chooser = [&](std::span<const float> logits, std::span<const int> generated) {
    int n_act = 0;
    for (int id : generated) n_act += vocab.is_action(id);
    if (n_act >= dims) return Vocabulary::kEos;
    if (n_act > 0 || static_cast<int>(generated.size()) >= force_at) {
      auto [lo, hi] = dim_range(n_act);
      return constrained_argmax(logits, lo, hi);
    }
    const int pick = constrained_argmax(logits, Vocabulary::kSpecialCount, vocab.size());
    if (vocab.is_action(pick) && vocab.action_dim(pick) != 0) {
      auto [lo, hi] = dim_range(0);
      return constrained_argmax(logits, lo, hi);
    }
    return pick;
  };

  PolicyDecode out;
  out.tokens = model.generate(prompt, max_new, record, chooser).tokens;
  std::vector<int> action_ids;
  for (std::size_t i = 0; i < out.tokens.size(); ++i) {
    if (vocab.is_action(out.tokens[i])) {
      if (out.first_action < 0) out.first_action = static_cast<int>(i);
      action_ids.push_back(out.tokens[i]);
    }
  }
  if (static_cast<int>(action_ids.size()) == dims) {
    out.action = decode_action(action_ids, vocab);
    out.ok = true;
  }
  return out;
}

sim::Policy make_policy(std::shared_ptr<const PolicyModel<float>> model, Vocabulary vocab, PolicyOptions options) {
  return [model = std::move(model), vocab = std::move(vocab), options](const Observation& obs) {
    return decode_policy_step(*model, vocab, obs, options).action;
  };
}

}  // namespace cotvla
