#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cotvla/error.hpp"
#include "cotvla/objective.hpp"
#include "test_support.hpp"

using namespace cotvla;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::build(4, {"<unk>", "a", "b", "c", "d", "e"});
  return v;
}

// Random labels: IGNORE prefix, then reasoning words, then 7 actions, then IGNORE.
std::vector<int> random_labels(std::mt19937_64& rng, int len) {
  const Vocabulary& v = vocab();
  std::vector<int> labels(static_cast<std::size_t>(len), kIgnoreLabel);
  for (int p = 1; p < len; ++p) {
    const auto r = rng() % 4;
    if (r == 0) continue;
    labels[static_cast<std::size_t>(p)] = r == 1 ? v.text_begin() + static_cast<int>(rng() % 6)
                                                 : v.action_token(static_cast<int>(rng() % 7), static_cast<int>(rng() % 4));
  }
  return labels;
}

RowMatrix<double> random_logits(std::mt19937_64& rng, int len) {
  std::normal_distribution<double> n(0.0, 3.0);
  RowMatrix<double> m(len, vocab().size());
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Independent enumeration: every position, explicit log-sum-exp, classification by label range.
LossBreakdown oracle(const std::vector<RowMatrix<double>>& logits, const std::vector<std::vector<int>>& labels,
                     double lambda) {
  const int lo = vocab().translation_token_start_idx();
  const int hi = vocab().gripper_token_end_idx();
  long double sa = 0, sr = 0;
  long na = 0, nr = 0;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    for (std::size_t p = 0; p + 1 < labels[b].size(); ++p) {
      const int y = labels[b][p + 1];
      if (y == kIgnoreLabel) continue;
      const auto row = logits[b].row(static_cast<Eigen::Index>(p));
      long double mx = row.maxCoeff();
      long double z = 0;
      for (Eigen::Index k = 0; k < row.size(); ++k) z += std::exp(static_cast<long double>(row(k)) - mx);
      const long double nll = -(row(y) - mx - std::log(z));
      if (y >= lo && y <= hi) {
        sa += nll;
        ++na;
      } else {
        sr += nll;
        ++nr;
      }
    }
  }
  LossBreakdown out;
  out.loss_action = na ? static_cast<double>(sa / na) : 0.0;
  out.loss_reasoning = nr ? static_cast<double>(sr / nr) : 0.0;
  out.loss_total = out.loss_action + lambda * out.loss_reasoning;
  out.n_action_tokens = na;
  out.n_reasoning_tokens = nr;
  return out;
}

}  // namespace

TEST(ShiftLabels, DropsFirstLabel) {
  const std::vector<int> labels{1, 2, 3};
  EXPECT_EQ(shift_labels(labels), (std::vector<int>{2, 3}));
  EXPECT_TRUE(shift_labels(std::vector<int>{}).empty());
}

TEST(SplitMasks, ClassifiesByLabelRange) {
  const Vocabulary& v = vocab();
  const std::vector<int> shifted{kIgnoreLabel, v.text_begin(), v.translation_token_start_idx(),
                                 v.gripper_token_end_idx(), v.gripper_token_end_idx() + 1};
  const TokenMasks m = split_masks(shifted, v);
  EXPECT_EQ(m.action, (std::vector<std::uint8_t>{0, 0, 1, 1, 0}));
  EXPECT_EQ(m.reasoning, (std::vector<std::uint8_t>{0, 1, 0, 0, 1}));
}

TEST(Losses, MatchOracleOnRandomBatches) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const int batch = 1 + static_cast<int>(rng() % 4);
    std::vector<RowMatrix<double>> logits;
    std::vector<std::vector<int>> labels;
    for (int b = 0; b < batch; ++b) {
      const int len = 2 + static_cast<int>(rng() % 20);
      logits.push_back(random_logits(rng, len));
      labels.push_back(random_labels(rng, len));
    }
    const double lambda = trial % 5 == 0 ? 0.0 : std::uniform_real_distribution<double>(0.0, 2.0)(rng);
    const LossBreakdown got = compute_batch_losses<double>(logits, labels, vocab(), lambda);
    const LossBreakdown want = oracle(logits, labels, lambda);
    EXPECT_NEAR(got.loss_action, want.loss_action, 1e-6);
    EXPECT_NEAR(got.loss_reasoning, want.loss_reasoning, 1e-6);
    EXPECT_NEAR(got.loss_total, want.loss_total, 1e-6);
    EXPECT_EQ(got.n_action_tokens, want.n_action_tokens);
    EXPECT_EQ(got.n_reasoning_tokens, want.n_reasoning_tokens);
    EXPECT_EQ(got.lambda_r, lambda);
    if (lambda == 0.0) EXPECT_NEAR(got.loss_total, got.loss_action, 1e-12);
  }
}

TEST(Losses, EmptyGroupsContributeZero) {
  const Vocabulary& v = vocab();
  std::mt19937_64 rng(1);
  const RowMatrix<double> logits = random_logits(rng, 3);
  const std::vector<int> only_action{kIgnoreLabel, v.action_token(0, 1), kIgnoreLabel};
  const LossBreakdown l = compute_losses<double>(logits, only_action, v, 1.0);
  EXPECT_EQ(l.loss_reasoning, 0.0);
  EXPECT_EQ(l.n_reasoning_tokens, 0);
  EXPECT_DOUBLE_EQ(l.loss_total, l.loss_action);
  EXPECT_THROW(compute_losses<double>(logits, only_action, v, -0.1), Error);
}

TEST(Losses, FloatMatchesDouble) {
  std::mt19937_64 rng(2);
  const RowMatrix<double> logits = random_logits(rng, 12);
  const std::vector<int> labels = random_labels(rng, 12);
  const LossBreakdown d = compute_losses<double>(logits, labels, vocab(), 0.3);
  const RowMatrix<float> lf = logits.cast<float>();
  const LossBreakdown f = compute_losses<float>(lf, labels, vocab(), 0.3);
  EXPECT_NEAR(d.loss_total, f.loss_total, 1e-5);
}

TEST(AccumulateNll, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(3);
  const RowMatrix<double> logits = random_logits(rng, 6);
  std::vector<int> labels = random_labels(rng, 7);
  labels[1] = vocab().text_begin();
  labels[2] = vocab().action_token(0, 0);
  const SupervisedRows sup = supervised_rows(labels);
  long na = 0, nr = 0;
  for (int t : sup.targets) (vocab().is_action(t) ? na : nr) += 1;
  const double lambda = 0.7;
  RowMatrix<double> rows(static_cast<Eigen::Index>(sup.rows.size()), logits.cols());
  for (std::size_t i = 0; i < sup.rows.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = logits.row(sup.rows[i]);
  NllSums sums;
  RowMatrix<double> grad = RowMatrix<double>::Zero(rows.rows(), rows.cols());
  accumulate_nll<double>(rows, sup.targets, vocab(), sums, 1.0 / na, lambda / nr, &grad);
  auto loss = [&](const RowMatrix<double>& r) {
    NllSums s;
    accumulate_nll<double>(r, sup.targets, vocab(), s);
    return combine_losses(s, lambda).loss_total;
  };
  for (Eigen::Index i = 0; i < rows.size(); i += 7) {
    RowMatrix<double> up = rows, down = rows;
    up.data()[i] += 1e-6;
    down.data()[i] -= 1e-6;
    EXPECT_NEAR(grad.data()[i], (loss(up) - loss(down)) / 2e-6, 1e-7);
  }
}

TEST(SupervisedRows, PointAtPredictingPositions) {
  const std::vector<int> labels{kIgnoreLabel, kIgnoreLabel, 9, kIgnoreLabel, 12};
  const SupervisedRows s = supervised_rows(labels);
  EXPECT_EQ(s.rows, (std::vector<int>{1, 3}));
  EXPECT_EQ(s.targets, (std::vector<int>{9, 12}));
}

TEST(MaskAgreement, LabelRangesMatchSegmentTags) {
  std::mt19937_64 rng(77);
  std::vector<Episode> eps;
  for (int i = 0; i < 200; ++i) {
    eps.push_back(cotvla::testing::random_episode(rng, "m" + std::to_string(i), 1, 2 + static_cast<int>(rng() % 4),
                                                  1 + static_cast<int>(rng() % 2), rng() % 4 != 0));
  }
  const Vocabulary v = Vocabulary::build(8 + static_cast<int>(rng() % 32), corpus_words(eps));
  long mismatches = 0;
  for (const Episode& ep : eps) {
    AssembleOptions o;
    o.reasoning_budget = static_cast<int>(rng() % 40);
    const TokenizedSample s = assemble_sample(ep.steps[0], v, o);
    const TokenMasks m = split_masks(shift_labels(s.labels), v);
    for (std::size_t p = 0; p + 1 < s.length(); ++p) {
      const Segment seg = s.segment[p + 1];
      mismatches += (m.action[p] != 0) != (seg == Segment::Action);
      mismatches += (m.reasoning[p] != 0) != (seg == Segment::Reasoning);
    }
  }
  EXPECT_EQ(mismatches, 0);
}

TEST(Metrics, AccuracyAndL1OnHandBuiltLogits) {
  const Vocabulary& v = vocab();
  // Row 0 predicts the reasoning word; rows 1..7 predict the action slots, one off by a bin.
  std::vector<int> targets{v.text_begin() + 1};
  for (int d = 0; d < 7; ++d) targets.push_back(v.action_token(d, 2));
  RowMatrix<double> logits = RowMatrix<double>::Zero(8, v.size());
  logits(0, v.text_begin() + 2) = 5.0;
  for (int d = 0; d < 7; ++d) logits(1 + d, v.action_token(d, d == 3 ? 1 : 2)) = 5.0;
  MetricSums sums;
  accumulate_metrics<double>(logits, targets, v, sums);
  const MetricSet m = sums.finalize();
  EXPECT_DOUBLE_EQ(m.reasoning_accuracy, 0.0);
  EXPECT_DOUBLE_EQ(m.action_accuracy, 6.0 / 7.0);
  // One slot off by one bin of width 0.5, averaged over 7 slots.
  EXPECT_NEAR(m.action_l1, 0.5 / 7.0, 1e-12);
}

TEST(Metrics, OutOfRangePredictionCostsTwo) {
  const Vocabulary& v = vocab();
  std::vector<int> targets;
  for (int d = 0; d < 7; ++d) targets.push_back(v.action_token(d, 0));
  RowMatrix<double> logits = RowMatrix<double>::Zero(7, v.size());
  for (int d = 0; d < 7; ++d) logits(d, v.text_begin()) = 5.0;
  MetricSums sums;
  accumulate_metrics<double>(logits, targets, v, sums);
  EXPECT_DOUBLE_EQ(sums.finalize().action_l1, 2.0);
}

TEST(Metrics, EmptyGroupsAreNullInJson) {
  const MetricSet m = MetricSums{}.finalize();
  EXPECT_TRUE(std::isnan(m.action_accuracy));
  EXPECT_TRUE(m.to_json()["action_accuracy"].is_null());
}
