#pragma once

// Whole-model gradient verification: compares tape gradients of the
// classification loss against finite differences at a random sample of
// coordinates in every parameter tensor. Uses a five-point (fourth-order)
// central stencil: some coordinates carry true gradients of ~1e-9, and the
// O(h^2) error of a plain central difference would drown them. Intended for
// 64-bit or extended-precision runs on the micro configuration; a size guard
// refuses large models.

#include <string>
#include <unordered_map>
#include <vector>

#include "iformer/analysis.hpp"

namespace iformer {

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0;
  int samples = 0;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double max_rel_err = 0;
  std::string worst;
  bool passed(double tolerance) const { return max_rel_err < tolerance; }
};

// sabotage names a parameter-group prefix whose analytic gradient gets
// deliberately scaled, as a negative control for the check itself.
template <typename T>
GradCheckReport model_gradcheck(const ModelConfig& cfg, int samples_per_tensor = 8,
                                T eps = T(1e-4), uint64_t input_seed = 123,
                                const std::string& sabotage = "") {
  const int64_t n_params = count_params(cfg);
  if (n_params > 1000000) {
    throw ConfigError("gradient check refused: " + std::to_string(n_params) +
                      " parameters exceeds the 1e6 limit (use a micro-scale config)");
  }
  Model<T> model = build_model<T>(cfg);
  Rng rng(input_seed);
  Tensor<T> x = Tensor<T>::randn({1, cfg.input_size, cfg.input_size, 3}, rng);
  const std::vector<int> labels = {static_cast<int>(input_seed % static_cast<uint64_t>(cfg.num_classes))};

  // Batch statistics active, running statistics frozen: the loss is then a
  // pure function of the parameters, which finite differences require.
  auto loss_value = [&]() -> T {
    Tape<T> tape;
    Binder<T> bind(tape, model);
    ForwardOpts<T> fwd;
    fwd.training = true;
    Var<T> loss = cross_entropy_mean(forward_model(bind, tape.leaf(x), fwd).logits, labels);
    return loss.value()[0];
  };

  std::unordered_map<std::string, Tensor<T>> analytic;
  {
    Tape<T> tape;
    Binder<T> bind(tape, model);
    ForwardOpts<T> fwd;
    fwd.training = true;
    Var<T> loss = cross_entropy_mean(forward_model(bind, tape.leaf(x), fwd).logits, labels);
    tape.backward(loss);
    for (const auto& [name, t] : model.params) analytic.emplace(name, bind.grad(name));
  }
  if (!sabotage.empty()) {
    bool hit = false;
    for (auto& [name, g] : analytic) {
      if (name.rfind(sabotage, 0) == 0) {
        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= T(1.5);
        hit = true;
      }
    }
    if (!hit) throw ConfigError("sabotage prefix '" + sabotage + "' matches no parameter");
  }

  GradCheckReport rep;
  uint64_t tensor_idx = 0;
  for (auto& [name, p] : model.params) {
    Rng coord_rng(mix_seed(input_seed, tensor_idx++));
    GradCheckRow row;
    row.name = name;
    const Tensor<T>& a = analytic.at(name);
    const int64_t k = std::min<int64_t>(samples_per_tensor, p.numel());
    for (int64_t s = 0; s < k; ++s) {
      const int64_t i = coord_rng.uniform_int(p.numel());
      const T old = p[i];
      p[i] = old + eps;
      const T f1 = loss_value();
      p[i] = old - eps;
      const T f2 = loss_value();
      p[i] = old + 2 * eps;
      const T f3 = loss_value();
      p[i] = old - 2 * eps;
      const T f4 = loss_value();
      p[i] = old;
      const double fd = static_cast<double>(8 * (f1 - f2) - (f3 - f4)) /
                        (12.0 * static_cast<double>(eps));
      const double rel = std::abs(static_cast<double>(a[i]) - fd) / (std::abs(fd) + 1e-8);
      row.max_rel_err = std::max(row.max_rel_err, rel);
      ++row.samples;
    }
    if (row.max_rel_err >= rep.max_rel_err) {
      rep.max_rel_err = row.max_rel_err;
      rep.worst = name;
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace iformer
