// Persistence: bit-exact weight container round-trips, structural validation
// of corrupt containers, the config text format, PPM decoding, and CSV shape.

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>

#include "iformer/io.hpp"
#include "iformer/train.hpp"

using namespace iformer;

namespace {

std::string temp_path(const std::string& name) {
  return ::testing::TempDir() + name;
}

uint64_t params_checksum(const Model<float>& m) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : m.params) h ^= t.checksum() + 0x9e3779b97f4a7c15ull * h;
  for (const auto& [name, t] : m.buffers) h ^= t.checksum() + 0x9e3779b97f4a7c15ull * h;
  return h;
}

Tensor<float> micro_input(uint64_t seed) {
  Rng rng(seed);
  return Tensor<float>::randn({1, 32, 32, 3}, rng);
}

uint64_t logits_checksum(Model<float>& m, const Tensor<float>& x) {
  Tape<float> tape;
  Binder<float> bind(tape, m);
  return forward_model(bind, tape.leaf(x)).logits.value().checksum();
}

}  // namespace

TEST(WeightContainer, BitwiseRoundTripRestoresForward) {
  ModelConfig cfg = preset_config("iformer-micro");
  cfg.seed = 11;
  Model<float> src = build_model<float>(cfg);
  // make the running stats non-trivial so buffers are exercised too
  {
    Tape<float> tape;
    Binder<float> bind(tape, src);
    ForwardOpts<float> opts;
    opts.training = true;
    opts.update_running_stats = true;
    forward_model(bind, tape.leaf(micro_input(1)), opts);
  }
  const std::string path = temp_path("roundtrip.ifw");
  save_weights(src, path);

  cfg.seed = 12;  // deliberately different init
  Model<float> dst = build_model<float>(cfg);
  ASSERT_NE(params_checksum(src), params_checksum(dst));
  load_weights(dst, path);
  EXPECT_EQ(params_checksum(src), params_checksum(dst));

  const Tensor<float> x = micro_input(2);
  EXPECT_EQ(logits_checksum(src, x), logits_checksum(dst, x));

  // serialized bytes are a pure function of the weights
  EXPECT_EQ(serialize_weights(src), serialize_weights(dst));
  std::remove(path.c_str());
}

TEST(WeightContainer, EmptyContainerIsJustTheHeader) {
  const std::string blob = serialize_tensors({});
  EXPECT_EQ(blob.size(), 12u);  // magic + version + count
  EXPECT_TRUE(parse_weight_container(blob).empty());
}

TEST(WeightContainer, RejectsBadMagicAndVersion) {
  std::string blob = serialize_tensors({});
  std::string bad = blob;
  bad[0] = 'X';
  EXPECT_THROW(parse_weight_container(bad), FormatError);
  bad = blob;
  bad[4] = 2;  // version
  EXPECT_THROW(parse_weight_container(bad), FormatError);
}

TEST(WeightContainer, RejectsTruncation) {
  Tensor<float> t = Tensor<float>::full({2, 3}, 1.5f);
  const std::string blob = serialize_tensors({{"w", &t}});
  const std::vector<size_t> cuts = {3, 8, 11, 14, 20, blob.size() - 1};
  for (size_t cut : cuts) {
    EXPECT_THROW(parse_weight_container(blob.substr(0, cut)), FormatError) << "cut " << cut;
  }
}

TEST(WeightContainer, RejectsTrailingBytes) {
  Tensor<float> t = Tensor<float>::full({2}, 1.0f);
  std::string blob = serialize_tensors({{"w", &t}});
  blob.push_back('\0');
  EXPECT_THROW(parse_weight_container(blob), FormatError);
}

TEST(WeightContainer, RejectsDuplicateNames) {
  Tensor<float> t = Tensor<float>::full({2}, 1.0f);
  const std::string blob = serialize_tensors({{"w", &t}, {"w", &t}});
  EXPECT_THROW(parse_weight_container(blob), FormatError);
}

TEST(WeightContainer, RejectsUnknownDtype) {
  Tensor<float> t = Tensor<float>::full({1}, 1.0f);
  std::string blob = serialize_tensors({{"w", &t}});
  // record layout: 12-byte header, u32 name_len, 1-byte name, u32 rank,
  // u64 dim, then the dtype byte
  const size_t dtype_at = 12 + 4 + 1 + 4 + 8;
  ASSERT_EQ(blob[dtype_at], 0);
  blob[dtype_at] = 1;
  EXPECT_THROW(parse_weight_container(blob), FormatError);
}

TEST(WeightContainer, LoadValidatesCountNamesAndShapes) {
  ModelConfig cfg = preset_config("iformer-micro");
  Model<float> m = build_model<float>(cfg);

  // too few tensors
  Tensor<float> t = Tensor<float>::full({2}, 1.0f);
  EXPECT_THROW(deserialize_weights(m, serialize_tensors({{"w", &t}})), FormatError);

  // right count, one unknown name
  std::vector<std::pair<std::string, Tensor<float>>> records =
      parse_weight_container(serialize_weights(m));
  records[3].first = "no.such.tensor";
  std::vector<std::pair<std::string, const Tensor<float>*>> entries;
  for (const auto& [name, tt] : records) entries.emplace_back(name, &tt);
  EXPECT_THROW(deserialize_weights(m, serialize_tensors(entries)), FormatError);
}

TEST(WeightContainer, ShapeMismatchLeavesModelUntouched) {
  // Same architecture at a larger input size: every tensor name matches but
  // the learned position map's shape differs.
  ModelConfig big = preset_config("iformer-micro");
  big.input_size = 64;
  big.seed = 5;
  Model<float> src = build_model<float>(big);

  Model<float> dst = build_model<float>(preset_config("iformer-micro"));
  const uint64_t before = params_checksum(dst);
  EXPECT_THROW(deserialize_weights(dst, serialize_weights(src)), FormatError);
  EXPECT_EQ(params_checksum(dst), before);  // nothing partially loaded
}

TEST(ConfigText, EmitParseRoundTrip) {
  ModelConfig cfg = preset_config("iformer-s");
  cfg.seed = 5;
  cfg.high_mix = HighMix::pool_only;
  cfg.reverse_ramp = true;
  const std::string text = emit_config(cfg);
  ModelConfig back = parse_config_text(text);
  EXPECT_EQ(emit_config(back), text);
  EXPECT_EQ(back.seed, 5u);
  EXPECT_EQ(back.high_mix, HighMix::pool_only);
  EXPECT_TRUE(back.reverse_ramp);
  EXPECT_EQ(back.stages[2].depth, 9);
}

TEST(ConfigText, PresetThenOverrides) {
  ModelConfig cfg = parse_config_text(
      "# comment line\n"
      "preset = iformer-micro\n"
      "seed = 9\n"
      "stage1.depth = 2   # inline comment\n");
  EXPECT_EQ(cfg.name, "iformer-micro");
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.stages[0].depth, 2);
}

TEST(ConfigText, ErrorsCarryLineNumbers) {
  try {
    parse_config_text("preset = iformer-micro\n\nbogus_key = 3\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  try {
    parse_config_text("head_dim = banana\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config_text("just words\n"), ConfigError);
  EXPECT_THROW(parse_config_text("preset = iformer-nope\n"), ConfigError);
  EXPECT_THROW(parse_config_text("stage7.depth = 1\n"), ConfigError);
}

TEST(ConfigText, SemanticValidationStillRuns) {
  // parses fine but violates channels == heads * head_dim
  EXPECT_THROW(parse_config_text("preset = iformer-micro\nstage1.channels = 24\n"),
               ConfigError);
}

TEST(ConfigText, LoadConfigPrefixesPath) {
  const std::string path = temp_path("bad.cfg");
  write_file(path, "nonsense\n");
  try {
    load_config(path);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(path), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(Ppm, DecodesAndStandardizes) {
  // 2x1 image: white pixel then black pixel
  std::string ppm = "P6\n# a comment\n2 1\n255\n";
  ppm += std::string("\xff\xff\xff", 3);
  ppm += std::string("\x00\x00\x00", 3);
  const std::string path = temp_path("pix.ppm");
  write_file(path, ppm);
  Tensor<float> img = load_ppm(path);
  EXPECT_EQ(img.shape(), (std::vector<int64_t>{1, 1, 2, 3}));
  for (int c = 0; c < 3; ++c) {
    EXPECT_FLOAT_EQ(img[c], 1.0f);       // (1.0 - 0.5) / 0.5
    EXPECT_FLOAT_EQ(img[3 + c], -1.0f);  // (0.0 - 0.5) / 0.5
  }
  // custom normalization leaves raw [0,1] values
  Tensor<float> raw = load_ppm(path, 0.0f, 1.0f);
  EXPECT_FLOAT_EQ(raw[0], 1.0f);
  EXPECT_FLOAT_EQ(raw[3], 0.0f);
  std::remove(path.c_str());
}

TEST(Ppm, RejectsWrongFormatMaxvalAndTruncation) {
  const std::string path = temp_path("bad.ppm");
  write_file(path, "P3\n2 1\n255\n1 2 3 4 5 6\n");
  EXPECT_THROW(load_ppm(path), FormatError);
  write_file(path, "P6\n2 1\n65535\n" + std::string(12, '\0'));
  EXPECT_THROW(load_ppm(path), FormatError);
  write_file(path, "P6\n2 1\n255\n" + std::string(3, '\0'));  // needs 6 bytes
  EXPECT_THROW(load_ppm(path), FormatError);
  std::remove(path.c_str());
}

TEST(Csv, SpectrumHasHeaderPlusOneLinePerBin) {
  Rng rng(3);
  Tensor<float> x = Tensor<float>::randn({1, 32, 32, 1}, rng);
  SpectrumReport rep = feature_spectrum_of(x);
  const std::string csv = spectrum_csv(rep);
  const size_t lines = static_cast<size_t>(std::count(csv.begin(), csv.end(), '\n'));
  EXPECT_EQ(lines, rep.bins.size() + 1);
  EXPECT_EQ(rep.bins.size(), 16u);  // a 32x32 grid fills all requested bins
  EXPECT_EQ(csv.substr(0, 4), "bin,");
  // deterministic bytes
  EXPECT_EQ(csv, spectrum_csv(feature_spectrum_of(x)));
}

TEST(Csv, CostEndsWithTotalsRow) {
  Model<float> m = build_model<float>(preset_config("iformer-micro"));
  const std::string csv = cost_csv(cost_report(m));
  const size_t last_line_at = csv.rfind("total,");
  ASSERT_NE(last_line_at, std::string::npos);
  EXPECT_NE(csv.find(std::to_string(count_params(m))), std::string::npos);
}
