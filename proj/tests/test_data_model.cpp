#include <gtest/gtest.h>

#include "cotvla/data_model.hpp"
#include "cotvla/error.hpp"
#include "test_support.hpp"

using namespace cotvla;
using cotvla::testing::TempDir;

namespace {

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(ContinuousAction, RejectsWrongLengthAndRange) {
  std::vector<double> six(6, 0.0);
  EXPECT_NE(error_of([&] { ContinuousAction::from_values(six); }).find("action length"), std::string::npos);
  std::vector<double> big(7, 0.0);
  big[3] = 1.5;
  EXPECT_THROW(ContinuousAction::from_values(big), Error);
  big[3] = std::nan("");
  EXPECT_THROW(ContinuousAction::from_values(big), Error);
  std::vector<double> ok{1, -1, 0, 0.5, -0.5, 0, 1};
  EXPECT_EQ(ContinuousAction::from_values(ok).gripper(), 1.0);
}

TEST(LoadEpisodes, EmptyFileGivesEmptyList) {
  TempDir dir;
  cotvla::testing::write_file(dir / "e.jsonl", "");
  EXPECT_TRUE(load_episodes(dir / "e.jsonl").empty());
}

TEST(LoadEpisodes, MissingFileIsError) {
  TempDir dir;
  EXPECT_THROW(load_episodes(dir / "nope.jsonl"), Error);
}

TEST(LoadEpisodes, TwoEpisodesOfThreeStepsRoundtrip) {
  TempDir dir;
  std::mt19937_64 rng(1);
  std::vector<Episode> eps{cotvla::testing::random_episode(rng, "a", 3), cotvla::testing::random_episode(rng, "b", 3)};
  save_episodes(dir / "e.jsonl", eps);
  const auto back = load_episodes(dir / "e.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].steps.size(), 3u);
  EXPECT_EQ(back[1].steps.size(), 3u);
  EXPECT_EQ(back, eps);
}

TEST(LoadEpisodes, SixComponentActionNamesEpisodeAndField) {
  TempDir dir;
  std::mt19937_64 rng(2);
  auto j = episode_to_json(cotvla::testing::random_episode(rng, "broken_ep", 2));
  j["steps"][1]["action"] = {0, 0, 0, 0, 0, 0};
  cotvla::testing::write_file(dir / "e.jsonl", j.dump() + "\n");
  const std::string msg = error_of([&] { load_episodes(dir / "e.jsonl"); });
  EXPECT_NE(msg.find("broken_ep"), std::string::npos) << msg;
  EXPECT_NE(msg.find("action length"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
}

TEST(LoadEpisodes, MalformedLineReportsLineNumber) {
  TempDir dir;
  std::mt19937_64 rng(3);
  auto j = episode_to_json(cotvla::testing::random_episode(rng, "ok", 1));
  cotvla::testing::write_file(dir / "e.jsonl", j.dump() + "\n{not json\n");
  const std::string msg = error_of([&] { load_episodes(dir / "e.jsonl"); });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
}

TEST(LoadEpisodes, InvariantViolationsAreErrors) {
  TempDir dir;
  std::mt19937_64 rng(4);
  auto ep = cotvla::testing::random_episode(rng, "mixed", 2);
  auto j = episode_to_json(ep);
  j["steps"] = nlohmann::json::array();
  cotvla::testing::write_file(dir / "a.jsonl", j.dump() + "\n");
  EXPECT_THROW(load_episodes(dir / "a.jsonl"), Error);

  auto dup = episode_to_json(ep);
  cotvla::testing::write_file(dir / "b.jsonl", dup.dump() + "\n" + dup.dump() + "\n");
  EXPECT_NE(error_of([&] { load_episodes(dir / "b.jsonl"); }).find("duplicate"), std::string::npos);

  Episode two_sizes = ep;
  two_sizes.steps[0].observation.images.push_back(ImageGrid::blank(4));
  EXPECT_THROW(validate_episode(two_sizes), Error);
  Episode no_instruction = ep;
  for (auto& s : no_instruction.steps) s.observation.instruction.clear();
  EXPECT_THROW(validate_episode(no_instruction), Error);
}

TEST(Serialization, RoundtripPropertyOverRandomEpisodes) {
  TempDir dir;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<Episode> eps;
    const int n = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < n; ++i) {
      eps.push_back(cotvla::testing::random_episode(rng, "ep" + std::to_string(i), 1 + static_cast<int>(rng() % 5),
                                                    2 + static_cast<int>(rng() % 7), 1 + static_cast<int>(rng() % 2),
                                                    rng() % 2 == 0));
    }
    save_episodes(dir / "r.jsonl", eps);
    ASSERT_EQ(load_episodes(dir / "r.jsonl"), eps) << "trial " << trial;
  }
}

class AttachTraces : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(6);
    eps = {cotvla::testing::random_episode(rng, "x", 3)};
    for (int t = 0; t < 3; ++t) entries.push_back({cotvla::testing::random_trace(rng), ""});
  }
  TempDir dir;
  std::vector<Episode> eps;
  std::vector<TraceEntry> entries;
};

TEST_F(AttachTraces, MatchingCountsEnrichEveryStep) {
  save_trace_file(trace_file_path(dir.path(), "x"), entries);
  const auto out = attach_traces(eps, dir.path());
  ASSERT_EQ(out.size(), 1u);
  EXPECT_TRUE(out[0].enriched());
  for (int t = 0; t < 3; ++t) EXPECT_EQ(*out[0].steps[static_cast<std::size_t>(t)].trace, *entries[static_cast<std::size_t>(t)].trace);
  EXPECT_EQ(out.size(), eps.size());
}

TEST_F(AttachTraces, IsIdempotent) {
  save_trace_file(trace_file_path(dir.path(), "x"), entries);
  const auto once = attach_traces(eps, dir.path());
  const auto twice = attach_traces(once, dir.path());
  EXPECT_EQ(once, twice);
}

TEST_F(AttachTraces, StepCountMismatchIsError) {
  entries.pop_back();
  save_trace_file(trace_file_path(dir.path(), "x"), entries);
  const std::string msg = error_of([&] { attach_traces(eps, dir.path()); });
  EXPECT_NE(msg.find("step-count mismatch"), std::string::npos) << msg;
}

TEST_F(AttachTraces, MissingFileIsError) { EXPECT_THROW(attach_traces(eps, dir.path()), Error); }

TEST_F(AttachTraces, UnparsedEntryFailsUnlessSkipped) {
  entries[1] = TraceEntry{std::nullopt, "garbled teacher output"};
  save_trace_file(trace_file_path(dir.path(), "x"), entries);
  EXPECT_NE(error_of([&] { attach_traces(eps, dir.path()); }).find("unparseable"), std::string::npos);
  const auto r = attach_traces(eps, dir.path(), AttachOptions{true});
  EXPECT_TRUE(r.episodes.empty());
  ASSERT_EQ(r.skipped_episode_ids.size(), 1u);
  EXPECT_EQ(r.skipped_episode_ids[0], "x");
  const auto loaded = load_trace_file(trace_file_path(dir.path(), "x"));
  EXPECT_EQ(loaded[1].raw, "garbled teacher output");
}

TEST(AttachTracesEmpty, NoEpisodesNeedsNoDirectory) {
  std::vector<Episode> none;
  EXPECT_TRUE(attach_traces(none, "/definitely/not/a/dir").empty());
}

TEST(StripTraces, RemovesEveryTrace) {
  std::mt19937_64 rng(7);
  std::vector<Episode> eps{cotvla::testing::random_episode(rng, "t", 2, 4, 1, true)};
  ASSERT_TRUE(eps[0].enriched());
  const auto stripped = strip_traces(eps);
  for (const auto& s : stripped[0].steps) EXPECT_FALSE(s.trace.has_value());
}
