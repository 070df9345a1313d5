#pragma once

// Inception token mixer. Channels are split into a low-frequency group that
// goes through pooled self-attention and a high-frequency group handled by a
// max-pool branch and a depthwise-conv branch; the branch outputs are
// concatenated and fused with a depthwise-conv residual followed by a linear
// layer.

#include <cstdint>
#include <string>
#include <vector>

#include "iformer/nn.hpp"

namespace iformer {

// Which high-frequency branches are active. The reduced modes exist for
// controlled comparisons: pool_only routes the whole high group through the
// max-pool branch; none sends every channel through attention.
enum class HighMix { pool_and_conv, pool_only, none };

struct MixerConfig {
  int64_t channels = 0;       // total C
  int64_t low_channels = 0;   // C_l assigned to attention
  int heads = 1;              // attention heads over the low group
  int pool_stride = 2;        // 2: attention runs on pooled tokens; 1: full resolution
  HighMix high_mix = HighMix::pool_and_conv;
};

struct MixerSplit {
  int64_t low = 0, pool = 0, conv = 0;
};

inline MixerSplit mixer_split(const MixerConfig& cfg) {
  MixerSplit s;
  if (cfg.high_mix == HighMix::none) {
    s.low = cfg.channels;
    return s;
  }
  s.low = cfg.low_channels;
  const int64_t high = cfg.channels - s.low;
  if (high < 0) {
    throw ConfigError("mixer: low channels " + std::to_string(s.low) +
                      " exceed total " + std::to_string(cfg.channels));
  }
  if (cfg.high_mix == HighMix::pool_only) {
    s.pool = high;
    return s;
  }
  if (high % 2 != 0) {
    throw ConfigError("mixer: high-frequency channels " + std::to_string(high) +
                      " must split evenly between the two branches");
  }
  s.pool = high / 2;
  s.conv = high / 2;
  return s;
}

// Parameters for one mixer instance. Branch weights are empty Vars when the
// corresponding branch has no channels.
template <typename T>
struct MixerVars {
  MsaVars<T> msa;                      // low branch
  Var<T> pool_fc_w, pool_fc_b;         // pool branch projection
  Var<T> conv_fc_w, conv_fc_b;         // conv branch projection
  Var<T> conv_dw_w, conv_dw_b;         // conv branch depthwise 3x3
  Var<T> fuse_dw_w, fuse_dw_b;         // fuse depthwise 3x3
  Var<T> fuse_fc_w, fuse_fc_b;         // fuse linear
};

// Forward values of the branch outputs, captured for spectrum analysis.
template <typename T>
struct MixerTaps {
  Tensor<T> attention;  // low branch output (after upsample), [B,H,W,C_l]
  Tensor<T> maxpool;    // pool branch output, [B,H,W,C_p]
  Tensor<T> dwconv;     // conv branch output, [B,H,W,C_c]
};

// x: [B,H,W,C]. Returns [B,H,W,C].
template <typename T>
Var<T> inception_mix(Var<T> x, const MixerConfig& cfg, const MixerVars<T>& p,
                     MixerTaps<T>* taps = nullptr) {
  const auto& xs = x.shape();
  if (xs.size() != 4 || xs[3] != cfg.channels) {
    throw ShapeError("mixer expects [B,H,W," + std::to_string(cfg.channels) +
                     "], got " + shape_str(xs));
  }
  const int64_t b = xs[0], h = xs[1], w = xs[2];
  const MixerSplit sp = mixer_split(cfg);
  if (cfg.pool_stride != 1 && cfg.pool_stride != 2) {
    throw ConfigError("mixer: pool stride must be 1 or 2, got " + std::to_string(cfg.pool_stride));
  }
  if (cfg.pool_stride == 2 && (h % 2 != 0 || w % 2 != 0)) {
    throw ShapeError("mixer: pooled attention needs even spatial dims, got " + shape_str(xs));
  }

  std::vector<Var<T>> parts;
  {
    std::vector<int64_t> sizes;
    if (sp.low > 0) sizes.push_back(sp.low);
    if (sp.pool > 0) sizes.push_back(sp.pool);
    if (sp.conv > 0) sizes.push_back(sp.conv);
    if (sizes.size() > 1) {
      parts = split_channels(x, sizes);
    } else {
      parts = {x};
    }
  }
  size_t pi = 0;
  std::vector<Var<T>> outs;

  if (sp.low > 0) {
    Var<T> xl = parts[pi++];
    Var<T> t = xl;
    int64_t th = h, tw = w;
    if (cfg.pool_stride == 2) {
      t = avg_pool2x2_s2(t);
      th = h / 2;
      tw = w / 2;
    }
    t = reshape(t, {b, th * tw, sp.low});
    t = msa(t, p.msa);
    t = reshape(t, {b, th, tw, sp.low});
    if (cfg.pool_stride == 2) t = upsample_nearest2x(t);
    outs.push_back(t);
    if (taps) taps->attention = t.value();
  }
  if (sp.pool > 0) {
    Var<T> t = linear(max_pool3x3(parts[pi++]), p.pool_fc_w, p.pool_fc_b);
    outs.push_back(t);
    if (taps) taps->maxpool = t.value();
  }
  if (sp.conv > 0) {
    Var<T> t = linear(parts[pi++], p.conv_fc_w, p.conv_fc_b);
    t = depthwise_conv3x3(t, p.conv_dw_w, p.conv_dw_b);
    outs.push_back(t);
    if (taps) taps->dwconv = t.value();
  }

  Var<T> yc = outs.size() > 1 ? concat_channels(outs) : outs[0];
  Var<T> fused = add(yc, depthwise_conv3x3(yc, p.fuse_dw_w, p.fuse_dw_b));
  return linear(fused, p.fuse_fc_w, p.fuse_fc_b);
}

}  // namespace iformer
