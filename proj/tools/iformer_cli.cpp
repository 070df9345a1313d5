// Command-line front end: model inspection (describe), deterministic forward
// passes (forward), frequency diagnostics of branch outputs (spectrum),
// finite-difference gradient verification (gradcheck), synthetic-task training
// (train-toy), and the mixer/ramp variant comparison (ablate).
//
// Exit codes: 0 success, 2 usage or configuration error, 3 data mismatch
// (weights, images, shapes), 4 numeric failure (divergence, failed check).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iformer/iformer.hpp"
#include "iformer/gradcheck.hpp"

using namespace iformer;

namespace {

ModelConfig resolve_config(const std::string& preset, const std::string& config_path) {
  if (!preset.empty() && !config_path.empty()) {
    throw UsageError("give either --preset or --config, not both");
  }
  if (!preset.empty()) return preset_config(preset);
  if (!config_path.empty()) return load_config(config_path);
  throw UsageError("one of --preset or --config is required");
}

std::string human_count(double v) {
  char buf[64];
  if (v >= 1e9) {
    std::snprintf(buf, sizeof(buf), "%.3f G", v / 1e9);
  } else if (v >= 1e6) {
    std::snprintf(buf, sizeof(buf), "%.3f M", v / 1e6);
  } else if (v >= 1e3) {
    std::snprintf(buf, sizeof(buf), "%.3f K", v / 1e3);
  } else {
    std::snprintf(buf, sizeof(buf), "%.0f", v);
  }
  return buf;
}

std::string hex_checksum(uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void cmd_describe(const ModelConfig& cfg_in, int64_t input_size, const std::string& csv_path) {
  ModelConfig cfg = cfg_in;
  if (input_size > 0) cfg.input_size = input_size;
  validate_config(cfg);
  Model<float> m = build_model<float>(cfg);
  const auto plans = model_block_plans(cfg);

  std::cout << "name: " << cfg.name << "  input " << cfg.input_size << "x" << cfg.input_size
            << "  classes " << cfg.num_classes << "  head_dim " << cfg.head_dim
            << "  high_mix " << high_mix_name(cfg.high_mix) << "\n";
  int64_t res = cfg.input_size / 4;
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    if (s > 0) res /= 2;
    std::cout << "stage" << s + 1 << ": " << res << "x" << res << "  depth " << st.depth
              << "  channels " << st.channels << "  heads " << st.heads << "  pool_stride "
              << st.pool_stride << "\n";
    std::cout << "  high units per block:";
    for (int u : plans[s]) std::cout << " " << u;
    std::cout << "  (low channels:";
    for (int u : plans[s]) {
      const MixerSplit sp = mixer_split(detail::block_mixer_config(cfg, s, u));
      std::cout << " " << sp.low;
    }
    std::cout << ")\n";
  }
  CostReport rep = cost_report(m);
  std::cout << "params " << rep.total_params << " (" << human_count(static_cast<double>(rep.total_params))
            << ")\n";
  std::cout << "flops  " << rep.total_flops << " (" << human_count(static_cast<double>(rep.total_flops))
            << " multiply-accumulates per image)\n";
  if (!csv_path.empty()) {
    write_file(csv_path, cost_csv(rep));
    std::cout << "wrote " << csv_path << "\n";
  }
}

Tensor<float> make_input(const ModelConfig& cfg, const std::string& image_path,
                         uint64_t input_seed) {
  if (!image_path.empty()) {
    Tensor<float> img = load_ppm(image_path);
    if (img.dim(1) != cfg.input_size || img.dim(2) != cfg.input_size) {
      throw ShapeError("image is " + std::to_string(img.dim(2)) + "x" +
                       std::to_string(img.dim(1)) + " but the model expects " +
                       std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size));
    }
    return img;
  }
  Rng rng(input_seed);
  return Tensor<float>::randn({1, cfg.input_size, cfg.input_size, 3}, rng);
}

void cmd_forward(const ModelConfig& cfg_in, const std::string& weights_path, uint64_t seed,
                 const std::string& image_path, uint64_t input_seed, int dump_stage,
                 const std::string& out_path) {
  ModelConfig cfg = cfg_in;
  cfg.seed = seed;
  Model<float> m = build_model<float>(cfg);
  if (!weights_path.empty()) load_weights(m, weights_path);
  Tensor<float> x = make_input(cfg, image_path, input_seed);

  Tape<float> tape;
  Binder<float> bind(tape, m);
  ForwardOpts<float> opts;
  opts.want_stage_outputs = true;
  ForwardResult<float> res = forward_model(bind, tape.leaf(x), opts);

  std::cout << "input  " << shape_str(x.shape()) << "  checksum " << hex_checksum(x.checksum())
            << "\n";
  for (size_t s = 0; s < res.stage_outputs.size(); ++s) {
    const Tensor<float>& t = res.stage_outputs[s];
    std::cout << "stage" << s + 1 << " " << shape_str(t.shape()) << "  checksum "
              << hex_checksum(t.checksum()) << "\n";
  }
  const Tensor<float>& logits = res.logits.value();
  std::cout << "logits " << shape_str(logits.shape()) << "  checksum "
            << hex_checksum(logits.checksum()) << "\n";
  for (int64_t b = 0; b < logits.dim(0); ++b) {
    int best = 0;
    for (int c = 1; c < cfg.num_classes; ++c) {
      if (logits[b * cfg.num_classes + c] > logits[b * cfg.num_classes + best]) best = c;
    }
    std::cout << "argmax[" << b << "] = " << best << "\n";
  }
  if (dump_stage > 0) {
    if (dump_stage > 4) throw UsageError("--dump-stage takes a stage number 1..4");
    if (out_path.empty()) throw UsageError("--dump-stage needs --out <file>");
    const std::string name = "stage" + std::to_string(dump_stage) + ".output";
    const Tensor<float>& t = res.stage_outputs[static_cast<size_t>(dump_stage - 1)];
    write_file(out_path, serialize_tensors({{name, &t}}));
    std::cout << "wrote " << name << " to " << out_path << "\n";
  }
}

void cmd_spectrum(const ModelConfig& cfg_in, const std::string& weights_path, uint64_t seed,
                  const std::string& image_path, uint64_t input_seed, int stage, int block,
                  const std::string& branch_name, int bins, const std::string& out_path) {
  ModelConfig cfg = cfg_in;
  cfg.seed = seed;
  if (stage < 1 || stage > 4) {
    throw ConfigError("--stage takes 1..4, got " + std::to_string(stage));
  }
  if (block < 1) throw ConfigError("--block takes 1-based block numbers");
  const Branch branch = parse_branch(branch_name);
  Model<float> m = build_model<float>(cfg);
  if (!weights_path.empty()) load_weights(m, weights_path);
  Tensor<float> x = make_input(cfg, image_path, input_seed);

  SpectrumReport rep = feature_spectrum(m, x, stage - 1, block - 1, branch, bins);
  std::cout << "stage" << stage << ".block" << block << "." << branch_name << " on "
            << (image_path.empty() ? "white noise" : image_path) << ": " << rep.bins.size()
            << " bins over " << rep.height << "x" << rep.width << "x" << rep.channels << "\n";
  std::cout << "delta log amplitude (highest vs lowest bin): " << csv_num(rep.delta_log_amplitude)
            << "\n";
  std::cout << "top-quartile delta: " << csv_num(top_quartile_delta(rep)) << "\n";
  std::cout << "zero-frequency concentrated: " << (rep.zero_freq_concentrated ? "yes" : "no")
            << "\n";
  if (!rep.merged_bins.empty()) {
    std::cout << "empty bins merged downward: " << rep.merged_bins.size() << "\n";
  }
  if (!out_path.empty()) {
    write_file(out_path, spectrum_csv(rep));
    std::cout << "wrote " << out_path << "\n";
  }
}

int cmd_gradcheck(const ModelConfig& cfg, double tolerance, int samples, uint64_t input_seed,
                  const std::string& sabotage) {
  GradCheckReport rep = model_gradcheck<long double>(cfg, samples, 1e-4, input_seed, sabotage);
  for (const auto& row : rep.rows) {
    std::printf("%-40s max_rel_err %.3e  samples %d\n", row.name.c_str(), row.max_rel_err,
                row.samples);
  }
  const bool ok = rep.passed(tolerance);
  std::printf("%s: max relative error %.3e in %s (tolerance %.1e)\n", ok ? "PASS" : "FAIL",
              rep.max_rel_err, rep.worst.c_str(), tolerance);
  return ok ? 0 : 4;
}

void cmd_train_toy(const ModelConfig& cfg_in, uint64_t seed, int64_t steps, int64_t n,
                   uint64_t data_seed, int64_t batch, int64_t eval_every, double stop_at,
                   const std::string& out_dir) {
  ModelConfig cfg = cfg_in;
  cfg.seed = seed;
  Model<float> m = build_model<float>(cfg);
  FreqBandDataset ds = gen_dataset(n, data_seed);
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = batch;
  tc.order_seed = seed;
  tc.eval_every = eval_every;
  tc.stop_at_accuracy = stop_at;
  std::vector<int64_t> test_idx;
  for (int64_t i = ds.n_train; i < ds.images.dim(0); ++i) test_idx.push_back(i);

  TrainMetrics tm;
  if (steps > 0) {
    tm = train_toy(m, ds, tc);
  } else {
    tm.final_eval = evaluate(m, ds, test_idx, batch);
    tm.evals.emplace_back(0, tm.final_eval);
  }

  std::ostringstream summary;
  summary << "model " << cfg.name << " seed " << seed << "\n";
  summary << "dataset n " << n << " seed " << data_seed << " (train " << ds.n_train << ", test "
          << test_idx.size() << ")\n";
  summary << "steps run " << tm.steps_run << " of " << steps << ", batch " << batch << "\n";
  summary << "held-out accuracy " << csv_num(tm.final_eval.accuracy) << "\n";
  summary << "high-band accuracy " << csv_num(high_band_accuracy(tm.final_eval)) << "\n";
  for (size_t c = 0; c < tm.final_eval.per_class.size(); ++c) {
    summary << "band " << c << " accuracy " << csv_num(tm.final_eval.per_class[c]) << "\n";
  }
  std::cout << summary.str();

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);
    write_file((dir / "losses.csv").string(), losses_csv(tm));
    write_file((dir / "evals.csv").string(), evals_csv(tm));
    write_file((dir / "summary.txt").string(), summary.str());
    write_file((dir / "config.cfg").string(), emit_config(cfg));
    save_weights(m, (dir / "weights.ifw").string());
    std::cout << "wrote losses.csv, evals.csv, summary.txt, config.cfg, weights.ifw to "
              << out_dir << "\n";
  }
}

void cmd_ablate(const std::vector<std::string>& variants, const std::vector<uint64_t>& seeds,
                int64_t steps, int64_t n, int64_t train_n, uint64_t data_seed, int64_t batch,
                int64_t eval_every, int64_t burn_in, const std::string& out_path) {
  FreqBandDataset ds = gen_dataset(n, data_seed);
  if (train_n > 0) {
    if (train_n >= ds.images.dim(0)) throw UsageError("--train-n must leave held-out examples");
    ds.n_train = train_n;
  }
  std::ostringstream csv;
  csv << "seed,variant,accuracy,high_band_accuracy,high_band_mean,"
         "acc_band0,acc_band1,acc_band2,acc_band3,error\n";
  for (uint64_t seed : seeds) {
    TrainConfig tc;
    tc.steps = steps;
    tc.batch_size = batch;
    tc.order_seed = seed;
    tc.eval_every = eval_every;
    const std::vector<AblationRow> rows = run_ablation(variants, ds, tc, seed, burn_in);
    for (const auto& r : rows) {
      csv << seed << ',' << r.name << ',' << csv_num(r.accuracy) << ',' << csv_num(r.high_band)
          << ',' << csv_num(r.high_band_mean);
      for (int c = 0; c < 4; ++c) {
        csv << ',' << (c < static_cast<int>(r.per_class.size()) ? csv_num(r.per_class[c]) : "0");
      }
      csv << ',' << (r.ok ? "" : r.error) << "\n";
    }
  }
  std::cout << csv.str();
  if (!out_path.empty()) {
    write_file(out_path, csv.str());
    std::cout << "wrote " << out_path << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inception-mixer vision backbone: inspection, diagnostics and toy training"};
  app.require_subcommand(1);
  int exit_code = 0;

  // shared flags
  std::string preset, config_path;
  auto add_model_flags = [&](CLI::App* sub) {
    sub->add_option("--preset", preset,
                    "built-in configuration (iformer-s, iformer-b, iformer-l, iformer-micro)");
    sub->add_option("--config", config_path, "configuration file (key = value lines)");
  };

  // describe
  int64_t input_size = 0;
  std::string csv_path;
  auto* describe = app.add_subcommand("describe", "print the architecture and its cost table");
  add_model_flags(describe);
  describe->add_option("--input-size", input_size, "override the input resolution");
  describe->add_option("--csv", csv_path, "also write the per-module cost table as CSV");
  describe->callback([&]() {
    cmd_describe(resolve_config(preset, config_path), input_size, csv_path);
  });

  // forward
  std::string weights_path, image_path, out_path;
  uint64_t seed = 0, input_seed = 0;
  int dump_stage = 0;
  auto* forward = app.add_subcommand("forward", "run one forward pass and print checksums");
  add_model_flags(forward);
  forward->add_option("--weights", weights_path, "weight container to load");
  forward->add_option("--seed", seed, "model init seed when no weights are given");
  forward->add_option("--image", image_path, "P6 PPM input (must match the input size)");
  forward->add_option("--input-seed", input_seed, "seed for the random input (default 0)");
  forward->add_option("--dump-stage", dump_stage, "write this stage's output (1..4) to --out");
  forward->add_option("--out", out_path, "output file for --dump-stage");
  forward->callback([&]() {
    cmd_forward(resolve_config(preset, config_path), weights_path, seed, image_path, input_seed,
                dump_stage, out_path);
  });

  // spectrum
  int stage = 1, block = 1, bins = 16;
  std::string branch = "output";
  auto* spectrum =
      app.add_subcommand("spectrum", "radial frequency profile of a mixer branch output");
  add_model_flags(spectrum);
  spectrum->add_option("--weights", weights_path, "weight container to load");
  spectrum->add_option("--seed", seed, "model init seed when no weights are given");
  spectrum->add_option("--image", image_path, "P6 PPM input; default is seeded white noise");
  spectrum->add_option("--input-seed", input_seed, "seed for the white-noise input");
  spectrum->add_option("--stage", stage, "stage number 1..4")->required();
  spectrum->add_option("--block", block, "block number within the stage, 1-based")->required();
  spectrum
      ->add_option("--branch", branch, "attention, maxpool, dwconv or output")
      ->required();
  spectrum->add_option("--bins", bins, "number of radial bins (default 16)");
  spectrum->add_option("--out", out_path, "CSV output path");
  spectrum->callback([&]() {
    cmd_spectrum(resolve_config(preset, config_path), weights_path, seed, image_path, input_seed,
                 stage, block, branch, bins, out_path);
  });

  // gradcheck
  double tolerance = 1e-5;
  int samples = 8;
  std::string sabotage;
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "compare tape gradients against finite differences");
  add_model_flags(gradcheck);
  gradcheck->add_option("--tolerance", tolerance, "max relative error allowed (default 1e-5)");
  gradcheck->add_option("--samples", samples, "coordinates sampled per tensor (default 8)");
  gradcheck->add_option("--input-seed", input_seed, "seed for the probe input");
  gradcheck->add_option("--sabotage", sabotage,
                        "scale this parameter group's gradient (negative control)");
  gradcheck->callback([&]() {
    ModelConfig cfg = preset.empty() && config_path.empty()
                          ? preset_config("iformer-micro")
                          : resolve_config(preset, config_path);
    exit_code = cmd_gradcheck(cfg, tolerance, samples, input_seed == 0 ? 123 : input_seed,
                              sabotage);
  });

  // train-toy
  int64_t steps = 500, n_examples = 1280, batch = 16, eval_every = 25;
  uint64_t data_seed = 7;
  double stop_at = 0.0;
  std::string out_dir;
  auto* train =
      app.add_subcommand("train-toy", "train on the synthetic frequency-band task");
  add_model_flags(train);
  train->add_option("--steps", steps, "optimizer steps (default 500; 0 = evaluate only)");
  train->add_option("--seed", seed, "model init and batch order seed (default 0)");
  train->add_option("--n", n_examples, "dataset size (default 1280, 4/5 train)");
  train->add_option("--data-seed", data_seed, "dataset generation seed (default 7)");
  train->add_option("--batch", batch, "batch size (default 16)");
  train->add_option("--eval-every", eval_every, "evaluation cadence in steps (default 25)");
  train->add_option("--stop-at", stop_at, "stop once held-out accuracy reaches this");
  train->add_option("--out", out_dir, "directory for curves, summary, config and weights");
  train->callback([&]() {
    ModelConfig cfg = preset.empty() && config_path.empty()
                          ? preset_config("iformer-micro")
                          : resolve_config(preset, config_path);
    cmd_train_toy(cfg, seed, steps, n_examples, data_seed, batch, eval_every, stop_at, out_dir);
  });

  // ablate
  std::vector<std::string> variants = ablation_variant_names();
  std::vector<uint64_t> seeds = {1};
  int64_t train_n = 1024, burn_in = 50;
  auto* ablate = app.add_subcommand(
      "ablate", "train mixer/ramp variants with equal budgets and tabulate accuracy");
  ablate->add_option("--variants", variants,
                     "variants to run (default: full attention-only attention-maxpool "
                     "ramp-up ramp-flat ramp-down)");
  ablate->add_option("--seeds", seeds, "model/order seeds to sweep (default 1)");
  ablate->add_option("--steps", steps, "training steps per variant (default 250)");
  ablate->add_option("--n", n_examples, "dataset size (default 2560)");
  ablate->add_option("--train-n", train_n, "train-split override (default 1024; 0 = 4/5 split)");
  ablate->add_option("--data-seed", data_seed, "dataset generation seed (default 7)");
  ablate->add_option("--batch", batch, "batch size (default 16)");
  ablate->add_option("--eval-every", eval_every, "evaluation cadence (default 50)");
  ablate->add_option("--burn-in", burn_in, "checkpoints at or before this step are ignored "
                                           "in high_band_mean (default 50)");
  ablate->add_option("--out", out_path, "CSV output path");
  ablate->callback([&]() {
    const int64_t ablate_steps = ablate->count("--steps") ? steps : 250;
    const int64_t ablate_eval = ablate->count("--eval-every") ? eval_every : 50;
    const int64_t ablate_n = ablate->count("--n") ? n_examples : 2560;
    cmd_ablate(variants, seeds, ablate_steps, ablate_n, train_n, data_seed, batch, ablate_eval,
               burn_in, out_path);
  });

  try {
    app.parse(argc, argv);
    return exit_code;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
