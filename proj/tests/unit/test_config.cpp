#include <gtest/gtest.h>

#include "driftalign/pipeline.hpp"
#include "test_util.hpp"

using namespace driftalign;

namespace {

// Published hyperparameters, typed in by hand rather than read from the defaults.
TEST(Config, DefaultsMatchPublishedHyperparameters) {
  const Config c;
  EXPECT_EQ(c.align.s_vox, (std::vector<double>{0.04, 0.02}));
  EXPECT_EQ(c.align.d_max, (std::vector<double>{0.05, 0.03}));
  EXPECT_EQ(c.align.iters, (std::vector<int>{50, 150}));
  EXPECT_EQ(c.align.lr_camera, 1e-3);
  EXPECT_EQ(c.align.lr_field, 1e-3);
  EXPECT_EQ(c.align.lambda_color, 0.05);
  EXPECT_EQ(c.align.lambda_corr, 1.0);
  EXPECT_EQ(c.align.lambda_tv, 10.0);
  EXPECT_EQ(c.filter.theta_loc, 15.0);
  EXPECT_EQ(c.filter.theta_cnt, 50.0);
  EXPECT_EQ(c.align.theta_d, 75.0);
  EXPECT_EQ(c.align.theta_c, 75.0);
  EXPECT_EQ(c.align.sigma_d, 2.5);
  EXPECT_EQ(c.align.sigma_c, 1.5);
  EXPECT_EQ(c.align.max_correspondences, 5000);
  EXPECT_EQ(c.align.max_pairs, 20);
  EXPECT_EQ(c.global.iters, 100);
  EXPECT_EQ(c.global.lambda_anchor, 50.0);
  EXPECT_EQ(c.global.lambda_color, 0.05);
  EXPECT_EQ(c.inverse.iters, 2000);
  EXPECT_EQ(c.inverse.lambda_tv, 10.0);
  EXPECT_EQ(c.splat.opacity, 0.1);
  EXPECT_EQ(c.splat.k, 10);
  EXPECT_EQ(c.defaults_version, kDefaultsVersion);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundtripPreservesEverything) {
  Config c;
  c.seed = 42;
  c.stride = 3;
  c.align.lambda_corr = 0.25;
  c.global.iters = 7;
  c.filter.scope = FilterScope::PerFrame;
  const Config d = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(d), config_to_json(c));
  EXPECT_EQ(d.hash(), c.hash());
  EXPECT_NE(d.hash(), Config().hash());
}

TEST(Config, HashIsStableAndSixteenHexDigits) {
  const std::string h = Config().hash();
  EXPECT_EQ(h.size(), 16u);
  EXPECT_EQ(h.find_first_not_of("0123456789abcdef"), std::string::npos);
  EXPECT_EQ(Config().hash(), h);
}

TEST(Config, PartialFileKeepsDefaults) {
  const Config c = config_from_json(R"({"defaults_version": 1, "align": {"lambda_tv": 2.0}})");
  EXPECT_EQ(c.align.lambda_tv, 2.0);
  EXPECT_EQ(c.align.lambda_corr, 1.0);
  EXPECT_EQ(c.global.lambda_anchor, 50.0);
}

void expect_config_error(const std::string& text, const std::string& needle) {
  try {
    config_from_json(text);
    ADD_FAILURE() << "accepted: " << text;
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "config");
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(Config, RejectsBadInput) {
  expect_config_error(R"({"defaults_version": 1, "align": {"lambda_corr": -1.0}})", "lambda_corr");
  expect_config_error(R"({"defaults_version": 1, "global": {"lambda_anchor": -0.5}})", "lambda_anchor");
  expect_config_error(R"({"defaults_version": 1, "align": {"lamda_tv": 1.0}})", "lamda_tv");
  expect_config_error(R"({"defaults_version": 1, "colour": 1})", "colour");
  expect_config_error(R"({"defaults_version": 1, "align": {"iters": "many"}})", "iters");
  expect_config_error(R"({"align": {}})", "defaults_version");
  expect_config_error("{not json", "malformed");
}

TEST(Ablation, ParseNameAndApply) {
  EXPECT_EQ(Ablation().name(), "full");
  const Ablation a = Ablation::parse({"no-corr", "only-rigid"});
  EXPECT_TRUE(a.no_corr);
  EXPECT_TRUE(a.only_rigid);
  EXPECT_FALSE(a.no_global);
  const Config c = a.apply(Config());
  EXPECT_EQ(c.align.lambda_corr, 0.0);
  EXPECT_TRUE(c.align.freeze_field);
  EXPECT_TRUE(c.global.freeze_field);
  EXPECT_THROW(Ablation::parse({"no-everything"}), Error);
}

TEST(Checkpoint, RoundtripAndStageOrder) {
  testutil::TempDir dir("ckpt");
  SceneSpec spec = SceneSpec::desk();
  spec.width = 64;
  spec.height = 48;
  spec.orbit.count = 3;
  generate(spec, dir / "scene");
  Config cfg;
  cfg.stride = 4;
  cfg.align.iters = {3, 3};
  const Checkpoint ck = run_align(dir / "scene", cfg, true);
  ASSERT_EQ(ck.states.size(), 3u);
  ASSERT_GT(ck.model.size(), 100u);
  save_checkpoint(dir / "ck", ck);
  const Checkpoint back = load_checkpoint(dir / "ck");
  EXPECT_EQ(back.stage, "align");
  EXPECT_EQ(back.config_json, ck.config_json);
  ASSERT_EQ(back.states.size(), ck.states.size());
  for (size_t i = 0; i < ck.states.size(); ++i) {
    EXPECT_EQ(back.states[i].frame_id, ck.states[i].frame_id);
    EXPECT_EQ(back.states[i].xi_g.vector(), ck.states[i].xi_g.vector());
    EXPECT_EQ(back.states[i].pose0.R, ck.states[i].pose0.R);
    EXPECT_EQ(back.states[i].pose0.t, ck.states[i].pose0.t);
    EXPECT_EQ(back.states[i].field_enabled, ck.states[i].field_enabled);
    EXPECT_EQ(back.states[i].field.serialize(), ck.states[i].field.serialize());
  }
  ASSERT_EQ(back.model.size(), ck.model.size());
  // model.ply stores float32 positions; pixel provenance is exact
  for (size_t i = 0; i < ck.model.size(); ++i) {
    EXPECT_EQ(back.model.positions[i], ck.model.positions[i].cast<float>().cast<double>());
    EXPECT_EQ(back.model.pixels[i].u, ck.model.pixels[i].u);
    EXPECT_EQ(back.model.pixels[i].v, ck.model.pixels[i].v);
    EXPECT_EQ(back.model.frame_ids[i], ck.model.frame_ids[i]);
  }
  EXPECT_EQ(back.stats.g_d, ck.stats.g_d);
  EXPECT_EQ(back.stats.tau_d, ck.stats.tau_d);
  ASSERT_EQ(back.reports.size(), ck.reports.size());
  EXPECT_EQ(back.reports.back().accepted, ck.reports.back().accepted);

  Checkpoint bogus = ck;
  bogus.stage = "inverse";
  EXPECT_THROW(run_refine(bogus, cfg), Error);
  EXPECT_THROW(load_checkpoint(dir / "nowhere"), Error);
}

}  // namespace
