#include <gtest/gtest.h>

#include <random>

#include "cotvla/error.hpp"
#include "cotvla/model.hpp"
#include "cotvla/objective.hpp"
#include "test_support.hpp"

using namespace cotvla;
using cotvla::testing::TempDir;

namespace {

struct Fixture {
  Vocabulary vocab;
  std::vector<TokenizedSample> samples;
};

// Tiny vocabulary plus samples on a grid x grid image with real traces.
Fixture make_fixture(int grid, int views, int n_samples, std::uint64_t seed, int bins = 4) {
  std::mt19937_64 rng(seed);
  std::vector<Episode> eps;
  for (int i = 0; i < n_samples; ++i) {
    eps.push_back(cotvla::testing::random_episode(rng, "e" + std::to_string(i), 1, grid, views, true));
    auto& t = *eps.back().steps[0].trace;
    t.logical_steps.resize(std::min<std::size_t>(t.logical_steps.size(), 1));
  }
  Fixture f{Vocabulary::build(bins, corpus_words(eps)), {}};
  AssembleOptions o;
  o.reasoning_budget = 12;
  for (const Episode& ep : eps) f.samples.push_back(assemble_sample(ep.steps[0], f.vocab, o));
  return f;
}

ModelConfig micro_config(int vocab_size) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 64;
  c.grid = 2;
  c.views = 1;
  c.vocab_size = vocab_size;
  c.seed = 17;
  return c;
}

// Combined loss of one sample from the full forward pass.
double combined_loss(const PolicyModel<double>& m, const TokenizedSample& s, const Vocabulary& v, double lambda) {
  return compute_losses<double>(m.forward(s), s.labels, v, lambda).loss_total;
}

void backprop(PolicyModel<double>& m, const TokenizedSample& s, const Vocabulary& v, double lambda) {
  const SupervisedRows sup = supervised_rows(s.labels);
  long n_a = 0;
  long n_r = 0;
  for (int t : sup.targets) (v.is_action(t) ? n_a : n_r) += 1;
  PolicyModel<double>::Cache cache;
  const RowMatrix<double> logits = m.forward_train(s, sup.rows, cache);
  NllSums sums;
  RowMatrix<double> dlogits = RowMatrix<double>::Zero(logits.rows(), logits.cols());
  accumulate_nll<double>(logits, sup.targets, v, sums, n_a ? 1.0 / n_a : 0.0, n_r ? lambda / n_r : 0.0, &dlogits);
  m.backward(cache, dlogits);
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t ff = c.d_ff;
  const std::size_t patch_rows = c.n_colors + 2 * c.grid + c.views;
  const std::size_t embed = c.vocab_size * d + c.max_seq_len * d + patch_rows * d + d;
  const std::size_t block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d);
  return embed + c.n_layers * block + 2 * d + d * c.vocab_size + c.vocab_size;
}

}  // namespace

TEST(ModelConfig, ValidatesAndRoundtrips) {
  ModelConfig c = micro_config(30);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = micro_config(0);
  EXPECT_THROW(c.validate(), Error);
}

TEST(PolicyModel, ParameterCountMatchesShapeArithmetic) {
  const ModelConfig c = micro_config(40);
  const PolicyModel<float> m(c);
  EXPECT_EQ(m.parameter_count(), expected_parameter_count(c));
  ModelConfig big;
  big.vocab_size = 300;
  EXPECT_EQ(PolicyModel<float>(big).parameter_count(), expected_parameter_count(big));
}

TEST(PolicyModel, InitIsPureFunctionOfSeed) {
  const ModelConfig c = micro_config(40);
  EXPECT_EQ(PolicyModel<float>(c).checksum(), PolicyModel<float>(c).checksum());
  ModelConfig other = c;
  other.seed = 18;
  EXPECT_NE(PolicyModel<float>(c).checksum(), PolicyModel<float>(other).checksum());
}

TEST(PolicyModel, RejectsMismatchedSamples) {
  const Fixture f = make_fixture(3, 1, 1, 1);
  const PolicyModel<double> m(micro_config(f.vocab.size()));
  EXPECT_THROW(m.forward(f.samples[0]), Error);
}

TEST(PolicyModel, ForwardTrainRowsMatchFullForward) {
  const Fixture f = make_fixture(2, 1, 2, 2);
  const PolicyModel<double> m(micro_config(f.vocab.size()));
  for (const auto& s : f.samples) {
    const RowMatrix<double> full = m.forward(s);
    const std::vector<int> rows{0, 3, static_cast<int>(s.length()) - 1};
    PolicyModel<double>::Cache cache;
    const RowMatrix<double> part = m.forward_train(s, rows, cache);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      EXPECT_LT((part.row(static_cast<Eigen::Index>(i)) - full.row(rows[i])).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(PolicyModel, AttentionRowsAreCausalDistributions) {
  const Fixture f = make_fixture(2, 2, 1, 3);
  ModelConfig c = micro_config(f.vocab.size());
  c.views = 2;
  const PolicyModel<double> m(c);
  AttentionRecord rec;
  m.forward(f.samples[0], &rec);
  const int len = static_cast<int>(f.samples[0].length());
  ASSERT_EQ(static_cast<int>(rec.maps.size()), c.n_layers * c.n_heads);
  ASSERT_EQ(static_cast<int>(rec.query_positions.size()), len);
  for (const auto& map : rec.maps) {
    ASSERT_EQ(map.rows(), len);
    ASSERT_EQ(map.cols(), len);
    for (int q = 0; q < len; ++q) {
      EXPECT_NEAR(map.row(q).sum(), 1.0, 1e-6);
      for (int k = q + 1; k < len; ++k) EXPECT_EQ(map(q, k), 0.0);
      for (int k = 0; k <= q; ++k) EXPECT_GT(map(q, k), 0.0);
    }
  }
}

TEST(PolicyModel, FutureTokensDoNotChangeEarlierLogits) {
  Fixture f = make_fixture(2, 1, 1, 4);
  const PolicyModel<double> m(micro_config(f.vocab.size()));
  TokenizedSample s = f.samples[0];
  const RowMatrix<double> before = m.forward(s);
  s.input_ids.back() = Vocabulary::kPad;
  const RowMatrix<double> after = m.forward(s);
  const Eigen::Index keep = before.rows() - 1;
  EXPECT_EQ((before.topRows(keep) - after.topRows(keep)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PolicyModel, GradientsMatchCentralDifferences) {
  const Fixture f = make_fixture(2, 1, 1, 5);
  const TokenizedSample& s = f.samples[0];
  ASSERT_GT(s.count(Segment::Reasoning), 0u);
  PolicyModel<double> m(micro_config(f.vocab.size()));
  const double lambda = 0.3;
  m.zero_grad();
  backprop(m, s, f.vocab, lambda);

  std::mt19937_64 rng(99);
  auto& params = m.parameters();
  const double eps = 1e-4;
  double worst = 0.0;
  int checked = 0;
  // Round-robin over tensors so every parameter kind is sampled.
  for (int i = 0; checked < 96; ++i) {
    auto& p = params[static_cast<std::size_t>(i) % params.size()];
    const Eigen::Index idx = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.value.size()));
    double& x = p.value.data()[idx];
    const double saved = x;
    x = saved + eps;
    const double up = combined_loss(m, s, f.vocab, lambda);
    x = saved - eps;
    const double down = combined_loss(m, s, f.vocab, lambda);
    x = saved;
    const double numeric = (up - down) / (2 * eps);
    const double analytic = p.grad.data()[idx];
    const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    const double rel = std::abs(numeric - analytic) / scale;
    worst = std::max(worst, rel);
    EXPECT_LE(rel, 1e-4) << p.name << "[" << idx << "] analytic " << analytic << " numeric " << numeric;
    ++checked;
  }
  EXPECT_GE(checked, 64);
  RecordProperty("max_relative_error", std::to_string(worst));
}

TEST(PolicyModel, FrozenParametersGetNoGradient) {
  const Fixture f = make_fixture(2, 1, 1, 6);
  PolicyModel<double> m(micro_config(f.vocab.size()));
  m.freeze_lower_layers(1);
  EXPECT_FALSE(m.group_trainable(kEmbeddingGroup));
  EXPECT_FALSE(m.group_trainable(0));
  EXPECT_TRUE(m.group_trainable(1));
  EXPECT_TRUE(m.group_trainable(2));
  m.zero_grad();
  backprop(m, f.samples[0], f.vocab, 0.5);
  bool any_nonzero = false;
  for (const auto& p : m.parameters()) {
    if (!p.trainable) {
      EXPECT_EQ(p.grad.size(), 0) << p.name;
      EXPECT_LT(p.group, 1);
    } else {
      any_nonzero = any_nonzero || p.grad.cwiseAbs().maxCoeff() > 0.0;
    }
  }
  EXPECT_TRUE(any_nonzero);
  EXPECT_THROW(m.freeze_lower_layers(3), Error);
  m.freeze_lower_layers(0);
  for (const auto& p : m.parameters()) EXPECT_TRUE(p.trainable);
}

TEST(PolicyModel, FreezingDoesNotChangeUpperGradients) {
  const Fixture f = make_fixture(2, 1, 1, 7);
  PolicyModel<double> full(micro_config(f.vocab.size()));
  PolicyModel<double> half(micro_config(f.vocab.size()));
  half.freeze_lower_layers(1);
  full.zero_grad();
  half.zero_grad();
  backprop(full, f.samples[0], f.vocab, 0.3);
  backprop(half, f.samples[0], f.vocab, 0.3);
  for (std::size_t i = 0; i < full.parameters().size(); ++i) {
    if (!half.parameters()[i].trainable) continue;
    EXPECT_EQ(full.parameters()[i].grad, half.parameters()[i].grad) << full.parameters()[i].name;
  }
}

TEST(PolicyModel, GreedyGenerateMatchesTeacherForcedArgmax) {
  const Fixture f = make_fixture(2, 1, 3, 8);
  ModelConfig c = micro_config(f.vocab.size());
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    c.seed = seed;
    const PolicyModel<double> m(c);
    for (const auto& s : f.samples) {
      TokenizedSample prompt = s;
      const std::size_t len0 = 1 + s.patches.size() + s.count(Segment::Instruction);
      prompt.input_ids.resize(len0);
      prompt.labels.resize(len0);
      prompt.segment.resize(len0);
      const GenerateResult g = m.generate(prompt, 10);
      ASSERT_FALSE(g.tokens.empty());
      TokenizedSample full = prompt;
      for (int id : g.tokens) {
        full.input_ids.push_back(id);
        full.labels.push_back(kIgnoreLabel);
        full.segment.push_back(Segment::Special);
      }
      const RowMatrix<double> logits = m.forward(full);
      for (std::size_t t = 0; t < g.tokens.size(); ++t) {
        Eigen::Index arg = 0;
        logits.row(static_cast<Eigen::Index>(len0 + t - 1)).maxCoeff(&arg);
        EXPECT_EQ(static_cast<int>(arg), g.tokens[t]) << "token " << t;
      }
    }
  }
}

TEST(PolicyModel, GenerateRecordsEmittingQueryRows) {
  const Fixture f = make_fixture(2, 1, 1, 9);
  const PolicyModel<double> m(micro_config(f.vocab.size()));
  TokenizedSample prompt = f.samples[0];
  const std::size_t len0 = 1 + prompt.patches.size() + prompt.count(Segment::Instruction);
  prompt.input_ids.resize(len0);
  prompt.labels.resize(len0);
  prompt.segment.resize(len0);
  AttentionRecord rec;
  // Never stop early: pick the best non-EOS token.
  const TokenChooser<double> chooser = [](std::span<const double> logits, std::span<const int>) {
    int best = 4;
    for (int i = 4; i < static_cast<int>(logits.size()); ++i) best = logits[i] > logits[best] ? i : best;
    return best;
  };
  const GenerateResult g = m.generate(prompt, 5, &rec, chooser);
  ASSERT_EQ(g.tokens.size(), 5u);
  ASSERT_EQ(rec.query_positions.size(), 5u);
  EXPECT_EQ(rec.n_keys, static_cast<int>(len0 + 5));
  EXPECT_EQ(rec.input_ids.size(), len0 + 5);

  TokenizedSample full = prompt;
  for (int id : g.tokens) {
    full.input_ids.push_back(id);
    full.labels.push_back(kIgnoreLabel);
    full.segment.push_back(Segment::Special);
  }
  AttentionRecord dense;
  m.forward(full, &dense);
  for (std::size_t i = 0; i < g.tokens.size(); ++i) {
    const int q = static_cast<int>(len0 + i) - 1;
    EXPECT_EQ(rec.query_positions[i], q);
    EXPECT_EQ(rec.row_of(q), static_cast<int>(i));
    for (int l = 0; l < 2; ++l) {
      for (int h = 0; h < 2; ++h) {
        const auto a = rec.map(l, h).row(static_cast<Eigen::Index>(i));
        const auto b = dense.map(l, h).row(q);
        EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
      }
    }
  }
}

TEST(PolicyModel, GenerateRespectsLengthLimit) {
  const Fixture f = make_fixture(2, 1, 1, 10);
  const PolicyModel<double> m(micro_config(f.vocab.size()));
  EXPECT_THROW(m.generate(f.samples[0], 64), Error);
  EXPECT_TRUE(m.generate(f.samples[0], 0).tokens.empty());
}

TEST(Checkpoint, RoundtripPreservesWeightsAndFreeze) {
  TempDir dir;
  const Fixture f = make_fixture(2, 1, 1, 11);
  PolicyModel<float> m(micro_config(f.vocab.size()));
  m.freeze_lower_layers(1);
  save_checkpoint(dir / "m.bin", m, f.vocab);
  const CheckpointInfo info = read_checkpoint_info(dir / "m.bin");
  EXPECT_EQ(info.config, m.config());
  EXPECT_EQ(info.vocab_hash, f.vocab.hash());
  EXPECT_EQ(info.frozen_prefix, 1);
  EXPECT_EQ(info.dtype, "f32");
  const PolicyModel<float> back = load_checkpoint(dir / "m.bin", f.vocab);
  EXPECT_EQ(back.checksum(), m.checksum());
  EXPECT_EQ(back.frozen_prefix(), 1);
  EXPECT_EQ(back.forward(f.samples[0]), m.forward(f.samples[0]));
}

TEST(Checkpoint, DoublePrecisionLoadsAsFloat) {
  TempDir dir;
  const Fixture f = make_fixture(2, 1, 1, 12);
  const PolicyModel<double> m(micro_config(f.vocab.size()));
  save_checkpoint(dir / "d.bin", m, f.vocab);
  EXPECT_EQ(read_checkpoint_info(dir / "d.bin").dtype, "f64");
  const PolicyModel<float> back = load_checkpoint(dir / "d.bin", f.vocab);
  EXPECT_LT((back.forward(f.samples[0]).cast<double>() - m.forward(f.samples[0])).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Checkpoint, RejectsOtherVocabularyAndGarbage) {
  TempDir dir;
  const Fixture f = make_fixture(2, 1, 1, 13);
  const PolicyModel<float> m(micro_config(f.vocab.size()));
  save_checkpoint(dir / "m.bin", m, f.vocab);
  const Vocabulary other = Vocabulary::build(5, f.vocab.words());
  EXPECT_THROW(load_checkpoint(dir / "m.bin", other), Error);
  cotvla::testing::write_file(dir / "bad.bin", "not a checkpoint");
  EXPECT_THROW(load_checkpoint(dir / "bad.bin", f.vocab), Error);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin", f.vocab), Error);
}
