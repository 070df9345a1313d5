// Backbone assembly: ramp schedules, preset plans, config validation,
// reproducible construction, and forward-pass shapes.

#include <gtest/gtest.h>

#include "iformer/model.hpp"
#include "iformer/analysis.hpp"
#include "iformer/train.hpp"

using namespace iformer;

TEST(RampSchedule, InterpolatesAndStaysNonincreasing) {
  StageConfig s;
  s.depth = 9;
  s.channels = 320;
  s.heads = 10;
  s.high_start = 3;
  s.high_end = 1;
  EXPECT_EQ(ramp_schedule(s), (std::vector<int>{3, 3, 3, 2, 2, 2, 2, 1, 1}));
}

TEST(RampSchedule, SingleBlockUsesStart) {
  StageConfig s;
  s.depth = 1;
  s.channels = 64;
  s.heads = 8;
  s.high_start = 1;
  s.high_end = 1;
  EXPECT_EQ(ramp_schedule(s), (std::vector<int>{1}));
}

TEST(RampSchedule, RejectsIncreaseAndOutOfRange) {
  StageConfig s;
  s.depth = 4;
  s.channels = 128;
  s.heads = 4;
  s.high_start = 1;
  s.high_end = 3;
  EXPECT_THROW(ramp_schedule(s), ConfigError);
  s.high_start = 5;  // more units than heads
  s.high_end = 1;
  EXPECT_THROW(ramp_schedule(s), ConfigError);
  s.high_start = 2;
  s.high_end = -1;
  EXPECT_THROW(ramp_schedule(s), ConfigError);
}

TEST(Presets, SmallPlanPerStage) {
  const auto plans = model_block_plans(preset_config("iformer-s"));
  EXPECT_EQ(plans[0], (std::vector<int>{2, 2, 2}));
  EXPECT_EQ(plans[1], (std::vector<int>{3, 3, 3}));
  EXPECT_EQ(plans[2], (std::vector<int>{3, 3, 3, 2, 2, 2, 2, 1, 1}));
  EXPECT_EQ(plans[3], (std::vector<int>{1, 1, 1}));
}

TEST(Presets, BasePlanStage3) {
  const auto plans = model_block_plans(preset_config("iformer-b"));
  EXPECT_EQ(plans[2], (std::vector<int>{4, 4, 4, 4, 3, 3, 3, 3, 3, 3, 2, 2, 2, 2}));
}

TEST(Presets, LargePlanStage3) {
  const auto plans = model_block_plans(preset_config("iformer-l"));
  std::vector<int> expect;
  expect.insert(expect.end(), 5, 4);
  expect.insert(expect.end(), 8, 3);
  expect.insert(expect.end(), 5, 2);
  EXPECT_EQ(plans[2], expect);
}

TEST(Presets, PoolStridesHalveOnlyEarlyStages) {
  for (const char* name : {"iformer-s", "iformer-b", "iformer-l", "iformer-micro"}) {
    ModelConfig cfg = preset_config(name);
    EXPECT_EQ(cfg.stages[0].pool_stride, 2) << name;
    EXPECT_EQ(cfg.stages[1].pool_stride, 2) << name;
    EXPECT_EQ(cfg.stages[2].pool_stride, 1) << name;
    EXPECT_EQ(cfg.stages[3].pool_stride, 1) << name;
  }
}

TEST(Presets, ChannelsMatchHeadTimesHeadDim) {
  for (const char* name : {"iformer-s", "iformer-b", "iformer-l", "iformer-micro"}) {
    ModelConfig cfg = preset_config(name);
    for (int s = 0; s < 4; ++s) {
      EXPECT_EQ(cfg.stages[s].channels, cfg.stages[s].heads * cfg.head_dim) << name;
    }
  }
}

TEST(Presets, UnknownNameThrows) {
  EXPECT_THROW(preset_config("iformer-xl"), ConfigError);
}

TEST(Presets, ReverseRampFlipsPlans) {
  ModelConfig cfg = preset_config("iformer-s");
  cfg.reverse_ramp = true;
  const auto plans = model_block_plans(cfg);
  EXPECT_EQ(plans[2], (std::vector<int>{1, 1, 2, 2, 2, 2, 3, 3, 3}));
}

TEST(ValidateConfig, RejectsBadConfigs) {
  {
    ModelConfig cfg = preset_config("iformer-micro");
    cfg.stages[1].channels = 30;  // not heads * head_dim
    EXPECT_THROW(validate_config(cfg), ConfigError);
  }
  {
    ModelConfig cfg = preset_config("iformer-micro");
    cfg.input_size = 30;  // not a multiple of 4
    EXPECT_THROW(validate_config(cfg), ConfigError);
  }
  {
    ModelConfig cfg = preset_config("iformer-micro");
    cfg.stages[0].pool_stride = 3;
    EXPECT_THROW(validate_config(cfg), ConfigError);
  }
  {
    ModelConfig cfg = preset_config("iformer-micro");
    cfg.stages[0].depth = 0;
    EXPECT_THROW(validate_config(cfg), ConfigError);
  }
  {
    // stride-2 attention pooling at an odd stage resolution
    ModelConfig cfg = preset_config("iformer-micro");
    cfg.input_size = 24;  // stage resolutions 6,3,... stage2 stride 2 at 3x3
    EXPECT_THROW(validate_config(cfg), ConfigError);
  }
}

TEST(ParamStore, DuplicateAndUnknownNames) {
  ParamStore<float> ps;
  ps.add("a", Tensor<float>::zeros({2}));
  EXPECT_THROW(ps.add("a", Tensor<float>::zeros({2})), ConfigError);
  EXPECT_THROW(ps.at("missing"), ConfigError);
  EXPECT_TRUE(ps.has("a"));
  EXPECT_FALSE(ps.has("b"));
}

TEST(BuildModel, DeterministicAcrossBuilds) {
  ModelConfig cfg = preset_config("iformer-micro");
  cfg.seed = 7;
  Model<float> a = build_model<float>(cfg);
  Model<float> b = build_model<float>(cfg);
  ASSERT_EQ(a.params.size(), b.params.size());
  auto ia = a.params.begin();
  auto ib = b.params.begin();
  for (; ia != a.params.end(); ++ia, ++ib) {
    EXPECT_EQ(ia->first, ib->first);
    EXPECT_EQ(ia->second.checksum(), ib->second.checksum()) << ia->first;
  }
}

TEST(BuildModel, SeedChangesWeights) {
  ModelConfig cfg = preset_config("iformer-micro");
  cfg.seed = 1;
  Model<float> a = build_model<float>(cfg);
  cfg.seed = 2;
  Model<float> b = build_model<float>(cfg);
  EXPECT_NE(a.params.at("stem.conv1.w").checksum(), b.params.at("stem.conv1.w").checksum());
}

TEST(BuildModel, MicroLayout) {
  Model<float> m = build_model<float>(preset_config("iformer-micro"));
  // stage2 block1 runs 2 high units of head_dim 8 -> low = 32 - 16 = 16
  EXPECT_EQ(m.params.at("stage2.block1.attn.q.w").shape(), (std::vector<int64_t>{16, 16}));
  EXPECT_EQ(m.params.at("stage2.block1.pool.fc.w").shape(), (std::vector<int64_t>{8, 8}));
  EXPECT_EQ(m.params.at("stage2.block1.conv.dw.w").shape(), (std::vector<int64_t>{3, 3, 8}));
  // stage3 ramps 2 -> 1: block1 low = 48-16 = 32, block2 low = 48-8 = 40
  EXPECT_EQ(m.params.at("stage3.block1.attn.q.w").dim(0), 32);
  EXPECT_EQ(m.params.at("stage3.block2.attn.q.w").dim(0), 40);
  // micro runs without the residual branch scales
  EXPECT_FALSE(m.params.has("stage1.block1.ls1"));
  // big presets carry them
  Model<float> s = build_model<float>(preset_config("iformer-s"));
  EXPECT_TRUE(s.params.has("stage1.block1.ls1"));
}

TEST(Forward, MicroShapesAndDeterminism) {
  Model<float> m = build_model<float>(preset_config("iformer-micro"));
  Rng rng(11);
  Tensor<float> x = Tensor<float>::randn({2, 32, 32, 3}, rng);

  Tape<float> tape;
  Binder<float> bind(tape, m);
  ForwardOpts<float> opts;
  opts.want_stage_outputs = true;
  ForwardResult<float> res = forward_model(bind, tape.leaf(x), opts);
  EXPECT_EQ(res.logits.shape(), (std::vector<int64_t>{2, 4}));
  ASSERT_EQ(res.stage_outputs.size(), 4u);
  EXPECT_EQ(res.stage_outputs[0].shape(), (std::vector<int64_t>{2, 8, 8, 16}));
  EXPECT_EQ(res.stage_outputs[1].shape(), (std::vector<int64_t>{2, 4, 4, 32}));
  EXPECT_EQ(res.stage_outputs[2].shape(), (std::vector<int64_t>{2, 2, 2, 48}));
  EXPECT_EQ(res.stage_outputs[3].shape(), (std::vector<int64_t>{2, 1, 1, 64}));

  Tape<float> tape2;
  Binder<float> bind2(tape2, m);
  ForwardResult<float> res2 = forward_model(bind2, tape2.leaf(x));
  EXPECT_EQ(res.logits.value().checksum(), res2.logits.value().checksum());
}

TEST(Forward, RejectsWrongInputShape) {
  Model<float> m = build_model<float>(preset_config("iformer-micro"));
  Tape<float> tape;
  Binder<float> bind(tape, m);
  Rng rng(1);
  EXPECT_THROW(forward_model(bind, tape.leaf(Tensor<float>::randn({1, 16, 16, 3}, rng))),
               ShapeError);
  EXPECT_THROW(forward_model(bind, tape.leaf(Tensor<float>::randn({1, 32, 32, 1}, rng))),
               ShapeError);
}

TEST(Forward, TapCapturesBranches) {
  Model<float> m = build_model<float>(preset_config("iformer-micro"));
  Rng rng(12);
  Tensor<float> x = Tensor<float>::randn({1, 32, 32, 3}, rng);
  auto capture = [&](int stage, int block, Branch br) {
    Tape<float> tape;
    Binder<float> bind(tape, m);
    TapRequest<float> tap;
    tap.stage = stage;
    tap.block = block;
    tap.branch = br;
    ForwardOpts<float> opts;
    opts.tap = &tap;
    opts.want_stage_outputs = true;
    ForwardResult<float> res = forward_model(bind, tape.leaf(x), opts);
    EXPECT_TRUE(tap.filled);
    return std::pair{tap.captured, res.stage_outputs};
  };
  auto [attn, stages0] = capture(0, 0, Branch::attention);
  EXPECT_EQ(attn.shape(), (std::vector<int64_t>{1, 8, 8, 8}));  // low = 16 - 1*8
  auto [pool, s1] = capture(1, 0, Branch::maxpool);
  EXPECT_EQ(pool.shape(), (std::vector<int64_t>{1, 4, 4, 8}));
  auto [conv, s2] = capture(2, 1, Branch::dwconv);
  EXPECT_EQ(conv.shape(), (std::vector<int64_t>{1, 2, 2, 4}));  // 1 high unit split in two
  // tapping a block's output reproduces the stage output for the last block
  auto [out, stages] = capture(0, 0, Branch::output);
  EXPECT_EQ(out.checksum(), stages[0].checksum());
}

TEST(Forward, BinderGradZerosForUnusedParam) {
  Model<float> m = build_model<float>(preset_config("iformer-micro"));
  Tape<float> tape;
  Binder<float> bind(tape, m);
  // nothing bound yet: gradient defaults to zeros of the right shape
  Tensor<float> g = bind.grad("head.fc.w");
  EXPECT_EQ(g.shape(), m.params.at("head.fc.w").shape());
  for (int64_t i = 0; i < g.numel(); ++i) ASSERT_EQ(g[i], 0.0f);
}

TEST(ParamCount, AnalyticMatchesStoreForAllPresetsAndVariants) {
  for (const char* name : {"iformer-s", "iformer-b", "iformer-l", "iformer-micro"}) {
    ModelConfig cfg = preset_config(name);
    Model<float> m = build_model<float>(cfg);
    EXPECT_EQ(count_params(cfg), count_params(m)) << name;
  }
  for (const auto& v : ablation_variant_names()) {
    ModelConfig cfg = micro_variant_config(v, 3);
    Model<float> m = build_model<float>(cfg);
    EXPECT_EQ(count_params(cfg), count_params(m)) << v;
  }
}

TEST(ParamCount, PresetTotalsAreStable) {
  EXPECT_EQ(count_params(preset_config("iformer-s")), 19161768);
  EXPECT_EQ(count_params(preset_config("iformer-b")), 47890920);
  EXPECT_EQ(count_params(preset_config("iformer-l")), 88427944);
  EXPECT_EQ(count_params(preset_config("iformer-micro")), 143396);
}
