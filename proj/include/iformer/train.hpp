#pragma once

// Synthetic frequency-band classification task plus the training machinery:
// grating dataset, AdamW, a deterministic training loop, and the
// mixer/ramp-variant comparison harness.

#include <cstdint>
#include <string>
#include <vector>

#include "iformer/io.hpp"

namespace iformer {

// ---------------------------------------------------------------------------
// Dataset: 32x32 RGB sinusoidal gratings. Class b draws its radial frequency
// uniformly from band b of (0, 0.5] cycles/pixel split into four equal bands;
// orientation and phase are random and pixel noise is N(0, 0.1). Labels are
// assigned round-robin so classes stay balanced, and each example derives its
// own RNG from (seed, index), making generation order independent.
// ---------------------------------------------------------------------------

struct FreqBandDataset {
  Tensor<float> images;     // [n, size, size, 3]
  std::vector<int> labels;  // in {0..3}
  uint64_t seed = 0;
  int64_t n_train = 0;      // first n_train examples train, the rest test
};

inline FreqBandDataset gen_dataset(int64_t n, uint64_t seed, int64_t size = 32,
                                   double noise_sigma = 0.1) {
  if (n < 8) throw ConfigError("dataset needs at least 8 examples, got " + std::to_string(n));
  FreqBandDataset ds;
  ds.seed = seed;
  ds.n_train = n * 4 / 5;
  ds.images = Tensor<float>::zeros({n, size, size, 3});
  ds.labels.resize(static_cast<size_t>(n));
  const double band_width = 0.5 / 4.0;
  float* img = ds.images.data();
  parallel_for(n, [&](int64_t i) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
    const int band = static_cast<int>(i % 4);
    ds.labels[static_cast<size_t>(i)] = band;
    // Uniform over (lo, hi]: hi - u * width with u in [0, 1).
    const double freq = (band + 1) * band_width - rng.uniform() * band_width;
    const double theta = rng.uniform(0.0, 3.14159265358979323846);
    const double phase = rng.uniform(0.0, 6.28318530717958647692);
    const double fx = freq * std::cos(theta), fy = freq * std::sin(theta);
    float* base = img + i * size * size * 3;
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        const double s =
            std::sin(6.28318530717958647692 * (fx * static_cast<double>(x) +
                                               fy * static_cast<double>(y)) +
                     phase);
        float* px = base + (y * size + x) * 3;
        for (int c = 0; c < 3; ++c) {
          px[c] = static_cast<float>(s + noise_sigma * rng.normal());
        }
      }
    }
  });
  return ds;
}

template <typename T>
Tensor<T> dataset_batch(const FreqBandDataset& ds, const std::vector<int64_t>& idx,
                        std::vector<int>& labels_out) {
  const int64_t size = ds.images.dim(1);
  const int64_t per = size * size * 3;
  Tensor<T> batch({static_cast<int64_t>(idx.size()), size, size, 3});
  labels_out.resize(idx.size());
  for (size_t k = 0; k < idx.size(); ++k) {
    labels_out[k] = ds.labels[static_cast<size_t>(idx[k])];
    for (int64_t j = 0; j < per; ++j) {
      batch[static_cast<int64_t>(k) * per + j] = static_cast<T>(ds.images[idx[k] * per + j]);
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// AdamW: decoupled weight decay folded under the learning rate,
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p),
// with decay skipped for rank<=1 tensors (biases, norm affines, scales).
// Running statistics live in Model::buffers and are never touched here.
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <typename T>
struct TrainState {
  int64_t step = 0;
  std::vector<Tensor<T>> m1, m2;  // moments, aligned with param order
  Rng rng{0};
};

// One optimizer step on one batch. Returns the loss. Throws NumericError
// with step/grad diagnostics when the loss stops being finite.
template <typename T>
T train_step(Model<T>& model, TrainState<T>& state, const Tensor<T>& images,
             const std::vector<int>& labels, const AdamWConfig& opt) {
  Tape<T> tape;
  Binder<T> bind(tape, model);
  ForwardOpts<T> fwd;
  fwd.training = true;
  fwd.update_running_stats = true;
  Var<T> logits = forward_model(bind, tape.leaf(images), fwd).logits;
  Var<T> loss = cross_entropy_mean(logits, labels);
  const T loss_val = loss.value()[0];
  tape.backward(loss);

  if (state.m1.empty()) {
    for (const auto& [name, t] : model.params) {
      state.m1.push_back(Tensor<T>::zeros(t.shape()));
      state.m2.push_back(Tensor<T>::zeros(t.shape()));
    }
  }

  T max_abs_grad = T(0);
  size_t pi = 0;
  std::vector<Tensor<T>> grads;
  grads.reserve(model.params.size());
  for (const auto& [name, t] : model.params) {
    grads.push_back(bind.grad(name));
    const Tensor<T>& g = grads.back();
    for (int64_t i = 0; i < g.numel(); ++i) max_abs_grad = std::max(max_abs_grad, std::abs(g[i]));
  }
  if (!std::isfinite(static_cast<double>(loss_val))) {
    throw NumericError("training diverged at step " + std::to_string(state.step) +
                       ": loss is not finite, max |grad| = " +
                       std::to_string(static_cast<double>(max_abs_grad)));
  }

  state.step += 1;
  const double t_step = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(opt.beta1, t_step);
  const double bc2 = 1.0 - std::pow(opt.beta2, t_step);
  for (auto& [name, p] : model.params) {
    const Tensor<T>& g = grads[pi];
    Tensor<T>& m1 = state.m1[pi];
    Tensor<T>& m2 = state.m2[pi];
    ++pi;
    const bool decay = p.rank() > 1;
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double m = opt.beta1 * static_cast<double>(m1[i]) + (1.0 - opt.beta1) * gi;
      const double v = opt.beta2 * static_cast<double>(m2[i]) + (1.0 - opt.beta2) * gi * gi;
      m1[i] = static_cast<T>(m);
      m2[i] = static_cast<T>(v);
      double update = (m / bc1) / (std::sqrt(v / bc2) + opt.eps);
      if (decay) update += opt.weight_decay * static_cast<double>(p[i]);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - opt.lr * update);
    }
  }
  return loss_val;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0;
  std::vector<double> per_class;  // accuracy per label
  std::vector<int64_t> class_counts;
};

template <typename T>
EvalResult evaluate(Model<T>& model, const FreqBandDataset& ds,
                    const std::vector<int64_t>& indices, int64_t batch_size = 16) {
  EvalResult r;
  const int n_classes = model.cfg.num_classes;
  std::vector<int64_t> correct(static_cast<size_t>(n_classes), 0);
  r.class_counts.assign(static_cast<size_t>(n_classes), 0);
  int64_t total_correct = 0;
  for (size_t at = 0; at < indices.size(); at += static_cast<size_t>(batch_size)) {
    const size_t hi = std::min(indices.size(), at + static_cast<size_t>(batch_size));
    std::vector<int64_t> chunk(indices.begin() + at, indices.begin() + hi);
    std::vector<int> labels;
    Tensor<T> batch = dataset_batch<T>(ds, chunk, labels);
    Tape<T> tape;
    Binder<T> bind(tape, model);
    Var<T> logits = forward_model(bind, tape.leaf(batch)).logits;
    const Tensor<T>& lv = logits.value();
    for (size_t k = 0; k < chunk.size(); ++k) {
      int best = 0;
      for (int c = 1; c < n_classes; ++c) {
        if (lv[static_cast<int64_t>(k) * n_classes + c] > lv[static_cast<int64_t>(k) * n_classes + best]) best = c;
      }
      const int label = labels[k];
      r.class_counts[static_cast<size_t>(label)] += 1;
      if (best == label) {
        correct[static_cast<size_t>(label)] += 1;
        ++total_correct;
      }
    }
  }
  r.accuracy = indices.empty() ? 0.0 : static_cast<double>(total_correct) / static_cast<double>(indices.size());
  r.per_class.resize(static_cast<size_t>(n_classes), 0.0);
  for (int c = 0; c < n_classes; ++c) {
    if (r.class_counts[static_cast<size_t>(c)] > 0) {
      r.per_class[static_cast<size_t>(c)] =
          static_cast<double>(correct[static_cast<size_t>(c)]) /
          static_cast<double>(r.class_counts[static_cast<size_t>(c)]);
    }
  }
  return r;
}

// Accuracy over the upper half of the frequency bands (classes 2 and 3).
inline double high_band_accuracy(const EvalResult& r) {
  if (r.per_class.size() < 4) return 0.0;
  int64_t correct = 0, total = 0;
  for (size_t c = 2; c < 4; ++c) {
    correct += static_cast<int64_t>(r.per_class[c] * static_cast<double>(r.class_counts[c]) + 0.5);
    total += r.class_counts[c];
  }
  return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Training loop. Batches walk a reshuffled permutation of the train split
// each epoch; everything is a pure function of (model seed, data seed, order
// seed), so two runs with the same seeds match bitwise.
// ---------------------------------------------------------------------------

struct TrainConfig {
  int64_t steps = 500;
  int64_t batch_size = 16;
  uint64_t order_seed = 1;       // batch shuffling
  int64_t eval_every = 50;       // 0: evaluate only at the end
  double stop_at_accuracy = 0;   // > 0: stop once an eval reaches this
  AdamWConfig adamw;
};

struct TrainMetrics {
  std::vector<double> losses;                         // one entry per step
  std::vector<std::pair<int64_t, EvalResult>> evals;  // scheduled checkpoints
  EvalResult final_eval;
  int64_t steps_run = 0;
};

// Mean high-band accuracy over checkpoints past a burn-in step; a lower
// variance readout of a run's high-frequency performance than any single
// checkpoint. Falls back to the final evaluation when nothing qualifies.
inline double mean_high_band(const TrainMetrics& tm, int64_t burn_in) {
  double acc = 0;
  int n = 0;
  for (const auto& [step, ev] : tm.evals) {
    if (step > burn_in) {
      acc += high_band_accuracy(ev);
      ++n;
    }
  }
  return n > 0 ? acc / n : high_band_accuracy(tm.final_eval);
}

template <typename T>
TrainMetrics train_toy(Model<T>& model, const FreqBandDataset& ds, const TrainConfig& cfg) {
  if (cfg.batch_size <= 0 || cfg.batch_size > ds.n_train) {
    throw ConfigError("batch_size " + std::to_string(cfg.batch_size) +
                      " does not fit the train split of " + std::to_string(ds.n_train));
  }
  TrainState<T> state;
  state.rng = Rng(cfg.order_seed);
  std::vector<int64_t> train_idx(static_cast<size_t>(ds.n_train));
  for (int64_t i = 0; i < ds.n_train; ++i) train_idx[static_cast<size_t>(i)] = i;
  std::vector<int64_t> test_idx;
  for (int64_t i = ds.n_train; i < ds.images.dim(0); ++i) test_idx.push_back(i);

  auto shuffle = [&](std::vector<int64_t>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(state.rng.uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  };

  TrainMetrics out;
  shuffle(train_idx);
  size_t cursor = 0;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    if (cursor + static_cast<size_t>(cfg.batch_size) > train_idx.size()) {
      shuffle(train_idx);
      cursor = 0;
    }
    std::vector<int64_t> batch_idx(train_idx.begin() + cursor,
                                   train_idx.begin() + cursor + static_cast<size_t>(cfg.batch_size));
    cursor += static_cast<size_t>(cfg.batch_size);
    std::vector<int> labels;
    Tensor<T> batch = dataset_batch<T>(ds, batch_idx, labels);
    const T loss = train_step(model, state, batch, labels, cfg.adamw);
    out.losses.push_back(static_cast<double>(loss));
    out.steps_run = step + 1;
    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
      EvalResult ev = evaluate(model, ds, test_idx, cfg.batch_size);
      out.evals.emplace_back(step + 1, ev);
      if (cfg.stop_at_accuracy > 0 && ev.accuracy >= cfg.stop_at_accuracy) {
        out.final_eval = ev;
        return out;
      }
    }
  }
  out.final_eval = evaluate(model, ds, test_idx, cfg.batch_size);
  out.evals.emplace_back(out.steps_run, out.final_eval);
  return out;
}

// ---------------------------------------------------------------------------
// Variant harness: the three mixer reductions and the three ramp directions,
// all realized on the micro configuration. "full" and "ramp-up" are the same
// configuration listed under both families.
// ---------------------------------------------------------------------------

struct AblationVariant {
  std::string name;
  ModelConfig cfg;
};

inline ModelConfig micro_variant_config(const std::string& name, uint64_t model_seed) {
  ModelConfig cfg = preset_config("iformer-micro");
  cfg.seed = model_seed;
  auto set_ramp = [&cfg](int s, int hi_start, int hi_end) {
    cfg.stages[s].high_start = hi_start;
    cfg.stages[s].high_end = hi_end;
  };
  if (name == "full" || name == "ramp-up") {
    // baseline: high share shrinks with depth
  } else if (name == "attention-only") {
    cfg.high_mix = HighMix::none;
  } else if (name == "attention-maxpool") {
    cfg.high_mix = HighMix::pool_only;
  } else if (name == "ramp-flat") {
    set_ramp(0, 1, 1);
    set_ramp(1, 2, 2);
    set_ramp(2, 3, 3);
    set_ramp(3, 4, 4);
  } else if (name == "ramp-down") {
    // high share grows with depth; within-stage plans are built under the
    // nonincreasing rule and then reversed
    set_ramp(0, 0, 0);
    set_ramp(1, 1, 1);
    set_ramp(2, 2, 1);
    set_ramp(3, 4, 4);
    cfg.reverse_ramp = true;
  } else {
    throw ConfigError("unknown variant '" + name +
                      "' (expected full, attention-only, attention-maxpool, "
                      "ramp-up, ramp-flat or ramp-down)");
  }
  cfg.name = "iformer-micro/" + name;
  return cfg;
}

inline std::vector<std::string> ablation_variant_names() {
  return {"full", "attention-only", "attention-maxpool", "ramp-up", "ramp-flat", "ramp-down"};
}

struct AblationRow {
  std::string name;
  bool ok = false;
  std::string error;
  double accuracy = 0;        // held-out accuracy at the end of the budget
  double high_band = 0;       // high-band accuracy at the end of the budget
  double high_band_mean = 0;  // mean over checkpoints past the burn-in
  std::vector<double> per_class;
};

// Trains each requested variant with an identical budget and seeds. Errors in
// one variant are recorded in its row; the others still run.
inline std::vector<AblationRow> run_ablation(const std::vector<std::string>& names,
                                             const FreqBandDataset& ds,
                                             const TrainConfig& cfg, uint64_t model_seed,
                                             int64_t trend_burn_in = 50) {
  std::vector<AblationRow> rows;
  for (const auto& name : names) {
    AblationRow row;
    row.name = name;
    try {
      ModelConfig mc = micro_variant_config(name, model_seed);
      Model<float> model = build_model<float>(mc);
      TrainMetrics tm = train_toy(model, ds, cfg);
      row.accuracy = tm.final_eval.accuracy;
      row.high_band = high_band_accuracy(tm.final_eval);
      row.high_band_mean = mean_high_band(tm, trend_burn_in);
      row.per_class = tm.final_eval.per_class;
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant,accuracy,high_band_accuracy,high_band_mean,"
         "acc_band0,acc_band1,acc_band2,acc_band3,error\n";
  for (const auto& r : rows) {
    out << r.name << ',' << csv_num(r.accuracy) << ',' << csv_num(r.high_band) << ','
        << csv_num(r.high_band_mean);
    for (int c = 0; c < 4; ++c) {
      out << ',' << (c < static_cast<int>(r.per_class.size()) ? csv_num(r.per_class[c]) : "0");
    }
    out << ',' << (r.ok ? "" : r.error) << "\n";
  }
  return out.str();
}

inline std::string evals_csv(const TrainMetrics& tm) {
  std::ostringstream out;
  out << "step,accuracy,high_band_accuracy\n";
  for (const auto& [step, ev] : tm.evals) {
    out << step << ',' << csv_num(ev.accuracy) << ',' << csv_num(high_band_accuracy(ev)) << "\n";
  }
  return out.str();
}

inline std::string losses_csv(const TrainMetrics& tm) {
  std::ostringstream out;
  out << "step,loss\n";
  for (size_t i = 0; i < tm.losses.size(); ++i) {
    out << (i + 1) << ',' << csv_num(tm.losses[i]) << "\n";
  }
  return out.str();
}

}  // namespace iformer
