#pragma once

// Model assembly: four-stage backbone with a convolutional stem, per-stage
// patch merging, pre-norm mixer/FFN blocks, and a linear classifier head.
// The share of channels routed to the high-frequency mixer branches is
// scheduled per block in whole attention-head units and shrinks with depth.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "iformer/mixer.hpp"

namespace iformer {

struct StageConfig {
  int depth = 0;
  int64_t channels = 0;
  int heads = 0;       // total head units; channels == heads * head_dim
  int high_start = 0;  // high-frequency head units at the first block
  int high_end = 0;    // ... at the last block (must not exceed high_start)
  int pool_stride = 2; // attention token pooling inside the mixer
};

struct ModelConfig {
  std::string name = "custom";
  StageConfig stages[4];
  int64_t head_dim = 32;
  int num_classes = 1000;
  int64_t input_size = 224;      // square RGB input
  double layerscale_init = 1e-6; // <= 0 disables the per-channel residual scale
  HighMix high_mix = HighMix::pool_and_conv;
  bool reverse_ramp = false;     // reverse each stage's block plan (trend study)
  uint64_t seed = 0;
};

// High-frequency head units for each block of a stage: linear interpolation
// from high_start to high_end, rounded to whole heads, forced nonincreasing.
inline std::vector<int> ramp_schedule(const StageConfig& s) {
  if (s.high_start < s.high_end) {
    throw ConfigError("stage ramp must not increase: " + std::to_string(s.high_start) +
                      " -> " + std::to_string(s.high_end));
  }
  if (s.high_start > s.heads || s.high_end < 0) {
    throw ConfigError("stage ramp " + std::to_string(s.high_start) + " -> " +
                      std::to_string(s.high_end) + " outside [0, " +
                      std::to_string(s.heads) + "] heads");
  }
  std::vector<int> plan(static_cast<size_t>(s.depth));
  for (int i = 0; i < s.depth; ++i) {
    const double v = s.depth == 1
                         ? static_cast<double>(s.high_start)
                         : s.high_start + (s.high_end - s.high_start) *
                                              static_cast<double>(i) / (s.depth - 1);
    plan[i] = static_cast<int>(std::lround(v));
  }
  for (int i = 1; i < s.depth; ++i) plan[i] = std::min(plan[i], plan[i - 1]);
  return plan;
}

// ---------------------------------------------------------------------------
// Named tensor store, insertion ordered (serialization and optimizer walk it
// in creation order, so a given seed always produces the same bytes).
// ---------------------------------------------------------------------------

template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, items_.size());
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return items_[it->second].second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return items_[it->second].second;
  }
  size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

template <typename T>
struct Model {
  ModelConfig cfg;
  ParamStore<T> params;   // trainable
  ParamStore<T> buffers;  // batch-norm running statistics
};

// ---------------------------------------------------------------------------
// Construction. All weights come from one seeded generator in a fixed
// insertion order, so build_model(cfg) is bit-reproducible.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void add_trunc_normal(ParamStore<T>& ps, Rng& rng, const std::string& name,
                      std::vector<int64_t> shape, double std_dev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.trunc_normal(std_dev));
  ps.add(name, std::move(t));
}

template <typename T>
void add_const(ParamStore<T>& ps, const std::string& name,
               std::vector<int64_t> shape, T value) {
  ps.add(name, Tensor<T>::full(std::move(shape), value));
}

template <typename T>
void add_linear(ParamStore<T>& ps, Rng& rng, const std::string& prefix,
                int64_t c_in, int64_t c_out) {
  add_trunc_normal(ps, rng, prefix + ".w", {c_in, c_out});
  add_const<T>(ps, prefix + ".b", {c_out}, T(0));
}

template <typename T>
void add_norm(ParamStore<T>& ps, const std::string& prefix, int64_t c) {
  add_const<T>(ps, prefix + ".gamma", {c}, T(1));
  add_const<T>(ps, prefix + ".beta", {c}, T(0));
}

inline MixerConfig block_mixer_config(const ModelConfig& cfg, int stage, int high_units) {
  const StageConfig& s = cfg.stages[stage];
  MixerConfig mc;
  mc.channels = s.channels;
  mc.high_mix = cfg.high_mix;
  mc.pool_stride = s.pool_stride;
  if (cfg.high_mix == HighMix::none) {
    mc.low_channels = s.channels;
    mc.heads = s.heads;
  } else {
    mc.low_channels = s.channels - static_cast<int64_t>(high_units) * cfg.head_dim;
    mc.heads = s.heads - high_units;
  }
  if (mc.low_channels > 0 && mc.heads <= 0) {
    throw ConfigError("block in stage " + std::to_string(stage + 1) +
                      " has low-frequency channels but no attention heads");
  }
  return mc;
}

}  // namespace detail

// Per-stage block plans after optional reversal. plan[s][i] = high head units.
inline std::vector<std::vector<int>> model_block_plans(const ModelConfig& cfg) {
  std::vector<std::vector<int>> plans(4);
  for (int s = 0; s < 4; ++s) {
    plans[s] = ramp_schedule(cfg.stages[s]);
    if (cfg.reverse_ramp) std::reverse(plans[s].begin(), plans[s].end());
  }
  return plans;
}

inline void validate_config(const ModelConfig& cfg) {
  if (cfg.head_dim <= 0) throw ConfigError("head_dim must be positive");
  if (cfg.num_classes <= 0) throw ConfigError("num_classes must be positive");
  if (cfg.input_size <= 0 || cfg.input_size % 4 != 0) {
    throw ConfigError("input_size must be a positive multiple of 4, got " +
                      std::to_string(cfg.input_size));
  }
  int64_t res = cfg.input_size / 4;
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::string where = "stage" + std::to_string(s + 1);
    if (st.depth <= 0) throw ConfigError(where + ": depth must be positive");
    if (st.channels != static_cast<int64_t>(st.heads) * cfg.head_dim) {
      throw ConfigError(where + ": channels " + std::to_string(st.channels) +
                        " != heads " + std::to_string(st.heads) + " * head_dim " +
                        std::to_string(cfg.head_dim));
    }
    if (st.pool_stride != 1 && st.pool_stride != 2) {
      throw ConfigError(where + ": pool_stride must be 1 or 2");
    }
    if (s > 0) {
      if (res % 2 != 0) {
        throw ConfigError(where + ": resolution " + std::to_string(res) +
                          " not divisible by the patch-merge stride");
      }
      res /= 2;
    }
    if (st.pool_stride == 2 && res % 2 != 0) {
      throw ConfigError(where + ": pooled attention needs even resolution, have " +
                        std::to_string(res));
    }
    ramp_schedule(st);  // bounds + monotonicity
  }
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  validate_config(cfg);
  Model<T> m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  ParamStore<T>& ps = m.params;
  const int64_t c1 = cfg.stages[0].channels;
  const int64_t stem_mid = c1 / 2;
  const int64_t r0 = cfg.input_size / 4;

  // Stem: 3x3 s2 conv -> BN+GELU -> 3x3 s2 conv -> LN, plus a learned
  // additive position map at stage-1 resolution.
  detail::add_trunc_normal(ps, rng, "stem.conv1.w", {3, 3, 3, stem_mid});
  detail::add_const<T>(ps, "stem.conv1.b", {stem_mid}, T(0));
  detail::add_norm(ps, "stem.bn", stem_mid);
  m.buffers.add("stem.bn.mean", Tensor<T>::zeros({stem_mid}));
  m.buffers.add("stem.bn.var", Tensor<T>::ones({stem_mid}));
  detail::add_trunc_normal(ps, rng, "stem.conv2.w", {3, 3, stem_mid, c1});
  detail::add_const<T>(ps, "stem.conv2.b", {c1}, T(0));
  detail::add_norm(ps, "stem.ln", c1);
  detail::add_trunc_normal(ps, rng, "stem.pos", {r0, r0, c1});

  const auto plans = model_block_plans(cfg);
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::string sp = "stage" + std::to_string(s + 1);
    if (s > 0) {
      detail::add_trunc_normal(ps, rng, sp + ".embed.conv.w",
                               {2, 2, cfg.stages[s - 1].channels, st.channels});
      detail::add_const<T>(ps, sp + ".embed.conv.b", {st.channels}, T(0));
      detail::add_norm(ps, sp + ".embed.ln", st.channels);
    }
    for (int b = 0; b < st.depth; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b + 1);
      const MixerConfig mc = detail::block_mixer_config(cfg, s, plans[s][b]);
      const MixerSplit sp_ch = mixer_split(mc);
      detail::add_norm(ps, bp + ".ln1", st.channels);
      if (sp_ch.low > 0) {
        detail::add_linear(ps, rng, bp + ".attn.q", sp_ch.low, sp_ch.low);
        detail::add_linear(ps, rng, bp + ".attn.k", sp_ch.low, sp_ch.low);
        detail::add_linear(ps, rng, bp + ".attn.v", sp_ch.low, sp_ch.low);
        detail::add_linear(ps, rng, bp + ".attn.o", sp_ch.low, sp_ch.low);
      }
      if (sp_ch.pool > 0) detail::add_linear(ps, rng, bp + ".pool.fc", sp_ch.pool, sp_ch.pool);
      if (sp_ch.conv > 0) {
        detail::add_linear(ps, rng, bp + ".conv.fc", sp_ch.conv, sp_ch.conv);
        detail::add_trunc_normal(ps, rng, bp + ".conv.dw.w", {3, 3, sp_ch.conv});
        detail::add_const<T>(ps, bp + ".conv.dw.b", {sp_ch.conv}, T(0));
      }
      detail::add_trunc_normal(ps, rng, bp + ".fuse.dw.w", {3, 3, st.channels});
      detail::add_const<T>(ps, bp + ".fuse.dw.b", {st.channels}, T(0));
      detail::add_linear(ps, rng, bp + ".fuse.fc", st.channels, st.channels);
      detail::add_norm(ps, bp + ".ln2", st.channels);
      detail::add_linear(ps, rng, bp + ".ffn.fc1", st.channels, 4 * st.channels);
      detail::add_linear(ps, rng, bp + ".ffn.fc2", 4 * st.channels, st.channels);
      if (cfg.layerscale_init > 0) {
        detail::add_const<T>(ps, bp + ".ls1", {st.channels}, static_cast<T>(cfg.layerscale_init));
        detail::add_const<T>(ps, bp + ".ls2", {st.channels}, static_cast<T>(cfg.layerscale_init));
      }
    }
  }
  detail::add_norm(ps, "head.ln", cfg.stages[3].channels);
  detail::add_linear(ps, rng, "head.fc", cfg.stages[3].channels, cfg.num_classes);
  return m;
}

// ---------------------------------------------------------------------------
// Presets.
// ---------------------------------------------------------------------------

inline ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  c.name = name;
  auto st = [](int depth, int64_t ch, int heads, int hi_s, int hi_e, int stride) {
    StageConfig s;
    s.depth = depth;
    s.channels = ch;
    s.heads = heads;
    s.high_start = hi_s;
    s.high_end = hi_e;
    s.pool_stride = stride;
    return s;
  };
  if (name == "iformer-s") {
    c.stages[0] = st(3, 96, 3, 2, 2, 2);
    c.stages[1] = st(3, 192, 6, 3, 3, 2);
    c.stages[2] = st(9, 320, 10, 3, 1, 1);
    c.stages[3] = st(3, 384, 12, 1, 1, 1);
  } else if (name == "iformer-b") {
    c.stages[0] = st(4, 96, 3, 2, 2, 2);
    c.stages[1] = st(6, 192, 6, 3, 3, 2);
    c.stages[2] = st(14, 384, 12, 4, 2, 1);
    c.stages[3] = st(6, 512, 16, 1, 1, 1);
  } else if (name == "iformer-l") {
    c.stages[0] = st(4, 96, 3, 2, 2, 2);
    c.stages[1] = st(6, 192, 6, 3, 3, 2);
    c.stages[2] = st(18, 448, 14, 4, 2, 1);
    c.stages[3] = st(8, 640, 20, 1, 1, 1);
  } else if (name == "iformer-micro") {
    c.stages[0] = st(1, 16, 2, 1, 1, 2);
    c.stages[1] = st(1, 32, 4, 2, 2, 2);
    c.stages[2] = st(2, 48, 6, 2, 1, 1);
    c.stages[3] = st(1, 64, 8, 1, 1, 1);
    c.head_dim = 8;
    c.num_classes = 4;
    c.input_size = 32;
    c.layerscale_init = 0.0;
  } else {
    throw ConfigError("unknown preset: " + name +
                      " (expected iformer-s, iformer-b, iformer-l or iformer-micro)");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Forward. A Binder lazily lifts stored tensors onto a tape as leaves and
// remembers their ids so gradients can be read back by name after backward.
// ---------------------------------------------------------------------------

template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, Model<T>& model) : tape_(&tape), model_(&model) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return Var<T>{tape_, it->second};
    Var<T> v = tape_->leaf(model_->params.at(name));
    bound_.emplace(name, v.id);
    return v;
  }
  bool bound(const std::string& name) const { return bound_.count(name) != 0; }
  // Gradient of the loss w.r.t. a named parameter (zeros if unused).
  Tensor<T> grad(const std::string& name) const {
    auto it = bound_.find(name);
    if (it == bound_.end()) return Tensor<T>::zeros(model_->params.at(name).shape());
    return tape_->grad(Var<T>{tape_, it->second});
  }
  Tape<T>& tape() { return *tape_; }
  Model<T>& model() { return *model_; }

 private:
  Tape<T>* tape_;
  Model<T>* model_;
  std::unordered_map<std::string, int32_t> bound_;
};

enum class Branch { attention, maxpool, dwconv, output };

inline Branch parse_branch(const std::string& s) {
  if (s == "attention") return Branch::attention;
  if (s == "maxpool") return Branch::maxpool;
  if (s == "dwconv") return Branch::dwconv;
  if (s == "output") return Branch::output;
  throw ConfigError("unknown branch '" + s +
                    "' (expected attention, maxpool, dwconv or output)");
}

template <typename T>
struct TapRequest {
  int stage = 0;   // 0-based
  int block = 0;   // 0-based
  Branch branch = Branch::output;
  Tensor<T> captured;
  bool filled = false;
};

template <typename T>
struct ForwardOpts {
  bool training = false;
  bool update_running_stats = false;
  bool want_stage_outputs = false;
  TapRequest<T>* tap = nullptr;
};

namespace detail {

template <typename T>
MixerVars<T> bind_mixer(Binder<T>& bind, const std::string& bp, const MixerSplit& sp,
                        int heads) {
  MixerVars<T> mv;
  if (sp.low > 0) {
    mv.msa.wq = bind(bp + ".attn.q.w");
    mv.msa.bq = bind(bp + ".attn.q.b");
    mv.msa.wk = bind(bp + ".attn.k.w");
    mv.msa.bk = bind(bp + ".attn.k.b");
    mv.msa.wv = bind(bp + ".attn.v.w");
    mv.msa.bv = bind(bp + ".attn.v.b");
    mv.msa.wo = bind(bp + ".attn.o.w");
    mv.msa.bo = bind(bp + ".attn.o.b");
    mv.msa.heads = heads;
  }
  if (sp.pool > 0) {
    mv.pool_fc_w = bind(bp + ".pool.fc.w");
    mv.pool_fc_b = bind(bp + ".pool.fc.b");
  }
  if (sp.conv > 0) {
    mv.conv_fc_w = bind(bp + ".conv.fc.w");
    mv.conv_fc_b = bind(bp + ".conv.fc.b");
    mv.conv_dw_w = bind(bp + ".conv.dw.w");
    mv.conv_dw_b = bind(bp + ".conv.dw.b");
  }
  mv.fuse_dw_w = bind(bp + ".fuse.dw.w");
  mv.fuse_dw_b = bind(bp + ".fuse.dw.b");
  mv.fuse_fc_w = bind(bp + ".fuse.fc.w");
  mv.fuse_fc_b = bind(bp + ".fuse.fc.b");
  return mv;
}

}  // namespace detail

template <typename T>
struct ForwardResult {
  Var<T> logits;                        // [B, num_classes]
  std::vector<Tensor<T>> stage_outputs; // values after each stage, if requested
};

// x: [B, input_size, input_size, 3] on bind's tape.
template <typename T>
ForwardResult<T> forward_model(Binder<T>& bind, Var<T> x, const ForwardOpts<T>& opts = {}) {
  Model<T>& m = bind.model();
  const ModelConfig& cfg = m.cfg;
  const auto& xs = x.shape();
  if (xs.size() != 4 || xs[1] != cfg.input_size || xs[2] != cfg.input_size || xs[3] != 3) {
    throw ShapeError("model expects [B," + std::to_string(cfg.input_size) + "," +
                     std::to_string(cfg.input_size) + ",3], got " + shape_str(xs));
  }
  ForwardResult<T> res;

  Var<T> h = conv2d(x, bind("stem.conv1.w"), bind("stem.conv1.b"), 2, 1);
  h = batch_norm(h, bind("stem.bn.gamma"), bind("stem.bn.beta"),
                 m.buffers.at("stem.bn.mean"), m.buffers.at("stem.bn.var"),
                 opts.training, opts.update_running_stats);
  h = gelu(h);
  h = conv2d(h, bind("stem.conv2.w"), bind("stem.conv2.b"), 2, 1);
  h = layer_norm(h, bind("stem.ln.gamma"), bind("stem.ln.beta"));
  h = add(h, bind("stem.pos"));

  const auto plans = model_block_plans(cfg);
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::string sp = "stage" + std::to_string(s + 1);
    if (s > 0) {
      h = conv2d(h, bind(sp + ".embed.conv.w"), bind(sp + ".embed.conv.b"), 2, 0);
      h = layer_norm(h, bind(sp + ".embed.ln.gamma"), bind(sp + ".embed.ln.beta"));
    }
    for (int b = 0; b < st.depth; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b + 1);
      const MixerConfig mc = detail::block_mixer_config(cfg, s, plans[s][b]);
      const MixerSplit split = mixer_split(mc);
      MixerVars<T> mv = detail::bind_mixer(bind, bp, split, mc.heads);

      const bool want_tap = opts.tap && opts.tap->stage == s && opts.tap->block == b;
      MixerTaps<T> taps;
      Var<T> mixed = inception_mix(
          layer_norm(h, bind(bp + ".ln1.gamma"), bind(bp + ".ln1.beta")), mc, mv,
          want_tap ? &taps : nullptr);
      if (cfg.layerscale_init > 0) mixed = mul(mixed, bind(bp + ".ls1"));
      Var<T> y = add(h, mixed);

      Var<T> f = layer_norm(y, bind(bp + ".ln2.gamma"), bind(bp + ".ln2.beta"));
      f = linear(f, bind(bp + ".ffn.fc1.w"), bind(bp + ".ffn.fc1.b"));
      f = gelu(f);
      f = linear(f, bind(bp + ".ffn.fc2.w"), bind(bp + ".ffn.fc2.b"));
      if (cfg.layerscale_init > 0) f = mul(f, bind(bp + ".ls2"));
      h = add(y, f);

      if (want_tap) {
        TapRequest<T>& tr = *opts.tap;
        switch (tr.branch) {
          case Branch::attention:
            if (split.low == 0) throw ConfigError("requested attention branch is empty in this block");
            tr.captured = taps.attention;
            break;
          case Branch::maxpool:
            if (split.pool == 0) throw ConfigError("requested maxpool branch is empty in this block");
            tr.captured = taps.maxpool;
            break;
          case Branch::dwconv:
            if (split.conv == 0) throw ConfigError("requested dwconv branch is empty in this block");
            tr.captured = taps.dwconv;
            break;
          case Branch::output:
            tr.captured = h.value();
            break;
        }
        tr.filled = true;
      }
    }
    if (opts.want_stage_outputs) res.stage_outputs.push_back(h.value());
  }

  Var<T> pooled = mean_spatial(h);  // [B, C4]
  pooled = layer_norm(pooled, bind("head.ln.gamma"), bind("head.ln.beta"));
  res.logits = linear(pooled, bind("head.fc.w"), bind("head.fc.b"));
  return res;
}

}  // namespace iformer
