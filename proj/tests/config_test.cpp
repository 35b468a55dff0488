#include <gtest/gtest.h>

#include "kadapt/config.hpp"
#include "tiny_experiment.hpp"

using namespace kadapt;

namespace {

void expect_config_error(const Json& j) {
  try {
    from_json(j);
    FAIL() << "expected a config error for " << j.dump();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config) << e.what();
  }
}

}  // namespace

TEST(Config, DefaultsMatchTheMethodSettings) {
  const auto c = default_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.method.adapter.rank, 64);
  EXPECT_EQ(c.method.adapter.alpha, 256.0);
  EXPECT_EQ(c.method.schedule.family, ScheduleFamily::Cosinoidal);
  EXPECT_EQ(c.method.schedule.a, 0.5);
  EXPECT_EQ(c.method.schedule.b, 0.1);
  EXPECT_EQ(c.method.validation_fraction, 0.15);
  EXPECT_EQ(c.data.sequence.size(), 4u);
  EXPECT_EQ(c.data.unseen.size(), 1u);
  EXPECT_EQ(c.method.block_schedule().total_layers, c.method.encoder.blocks);
}

TEST(Config, EmptyObjectGivesDefaults) {
  EXPECT_EQ(to_json(from_json(Json::object())).dump(), to_json(default_config()).dump());
}

TEST(Config, JsonRoundTrip) {
  auto c = fixtures::tiny_config(11);
  c.method.encoder.sites = {SiteKind::Q, SiteKind::FFN};
  c.method.schedule.family = ScheduleFamily::SquareRoot;
  c.stats_samples = 4;
  c.threads = 3;
  const Json j = to_json(c);
  const auto back = from_json(j);
  EXPECT_EQ(to_json(back).dump(), j.dump());
  EXPECT_EQ(back.method.encoder.sites, c.method.encoder.sites);
  EXPECT_EQ(*back.stats_samples, 4);
  EXPECT_EQ(back.data.unseen[0].blend.size(), 3u);
}

TEST(Config, PartialOverrideKeepsOtherDefaults) {
  const auto c = from_json(Json::parse(R"({"adapter": {"rank": 8}, "train": {"margin": 0.5}})"));
  EXPECT_EQ(c.method.adapter.rank, 8);
  EXPECT_EQ(c.method.adapter.alpha, 256.0);
  EXPECT_EQ(c.method.train.margin, 0.5);
  EXPECT_EQ(c.method.train.stage2_iterations, 600);
}

TEST(Config, UnknownKeysAreRejectedAtEveryLevel) {
  expect_config_error(Json::parse(R"({"bogus": 1})"));
  expect_config_error(Json::parse(R"({"encoder": {"layers": 3}})"));
  expect_config_error(Json::parse(R"({"train": {"lr": 0.1}})"));
  expect_config_error(Json::parse(R"({"data": {"sequence": [{"name": "a", "colour": 1}]}})"));
  expect_config_error(Json::parse(R"({"data": {"unseen": [{"name": "u", "blend": [{"gap_seed": 1, "w": 1}]}]}})"));
}

TEST(Config, InvalidValuesAreRejected) {
  expect_config_error(Json::parse(R"({"adapter": {"rank": "big"}})"));
  expect_config_error(Json::parse(R"({"adapter": {"rank": 0}})"));
  expect_config_error(Json::parse(R"({"adapter": {"alpha": -1}})"));
  expect_config_error(Json::parse(R"({"schedule": {"family": "quadratic"}})"));
  expect_config_error(Json::parse(R"({"schedule": {"b": 0}})"));
  expect_config_error(Json::parse(R"({"encoder": {"sites": ["Q", "Z"]}})"));
  expect_config_error(Json::parse(R"({"encoder": {"heads": 5}})"));
  expect_config_error(Json::parse(R"({"data": {"feat_dim": 100}})"));
  expect_config_error(Json::parse(R"({"data": {"sequence": []}})"));
  expect_config_error(Json::parse(R"({"data": {"sequence": [{"name": "base"}]}})"));
  expect_config_error(Json::parse(R"({"data": {"sequence": [{"name": "a", "cameras": 1}]}})"));
  expect_config_error(Json::parse(R"({"stats_samples": 1})"));
  expect_config_error(Json::parse(R"({"stats_samples": "all"})"));
  expect_config_error(Json::parse(R"({"threads": 0})"));
  expect_config_error(Json::parse(R"({"validation_fraction": 1.5})"));
  expect_config_error(Json::parse(R"([1, 2])"));
}

TEST(Config, IdentityOffsetsAreDisjointRanges) {
  const auto c = default_config();
  const auto off = identity_offsets(c.data);
  ASSERT_EQ(off.size(), 6u);
  EXPECT_EQ(off[0], 0);
  EXPECT_EQ(off[1], c.data.base.num_identities);
  for (std::size_t i = 1; i < off.size(); ++i) EXPECT_GT(off[i], off[i - 1]);
}
