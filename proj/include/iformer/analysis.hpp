#pragma once

// Model cost accounting (parameters and multiply-accumulate counts) and
// frequency-domain diagnostics: a self-contained FFT (radix-2 with a
// Bluestein fallback for arbitrary lengths) and radially binned spectrum
// summaries of feature maps.

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "iformer/model.hpp"

namespace iformer {

// ---------------------------------------------------------------------------
// Cost accounting. FLOPs follow the multiply-accumulate convention:
//   dense conv  k*k*C_in*C_out*H_out*W_out
//   depthwise   k*k*C*H*W
//   linear      C_in*C_out*locations
//   attention   4*N*C^2 (projections) + 2*N^2*C (score and value products)
// Norms, activations and pooling are not counted.
// ---------------------------------------------------------------------------

struct CostRow {
  std::string name;
  int64_t params = 0;
  int64_t flops = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  int64_t total_params = 0;
  int64_t total_flops = 0;
};

template <typename T>
int64_t count_params(const Model<T>& m) {
  int64_t n = 0;
  for (const auto& [name, t] : m.params) n += t.numel();
  return n;
}

// Same count computed from the configuration alone, without materializing
// weights. Kept in lockstep with build_model by a test over every preset.
inline int64_t count_params(const ModelConfig& cfg) {
  validate_config(cfg);
  const int64_t c1 = cfg.stages[0].channels;
  const int64_t mid = c1 / 2;
  const int64_t r0 = cfg.input_size / 4;
  auto linear_p = [](int64_t ci, int64_t co) { return ci * co + co; };
  int64_t n = 9 * 3 * mid + mid + 2 * mid          // stem conv1 + bn affine
            + 9 * mid * c1 + c1 + 2 * c1           // stem conv2 + ln
            + r0 * r0 * c1;                        // position map
  const auto plans = model_block_plans(cfg);
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    if (s > 0) n += 4 * cfg.stages[s - 1].channels * st.channels + st.channels + 2 * st.channels;
    for (int b = 0; b < st.depth; ++b) {
      const MixerSplit sp = mixer_split(detail::block_mixer_config(cfg, s, plans[s][b]));
      n += 2 * st.channels;  // ln1
      if (sp.low > 0) n += 4 * linear_p(sp.low, sp.low);
      if (sp.pool > 0) n += linear_p(sp.pool, sp.pool);
      if (sp.conv > 0) n += linear_p(sp.conv, sp.conv) + 9 * sp.conv + sp.conv;
      n += 9 * st.channels + st.channels + linear_p(st.channels, st.channels);  // fuse
      n += 2 * st.channels;  // ln2
      n += linear_p(st.channels, 4 * st.channels) + linear_p(4 * st.channels, st.channels);
      if (cfg.layerscale_init > 0) n += 2 * st.channels;
    }
  }
  n += 2 * cfg.stages[3].channels + linear_p(cfg.stages[3].channels, cfg.num_classes);
  return n;
}

namespace detail {

template <typename T>
int64_t params_with_prefix(const Model<T>& m, const std::string& prefix) {
  int64_t n = 0;
  for (const auto& [name, t] : m.params) {
    if (name.rfind(prefix, 0) == 0) n += t.numel();
  }
  return n;
}

inline int64_t mixer_flops(const MixerConfig& mc, int64_t res) {
  const MixerSplit sp = mixer_split(mc);
  const int64_t area = res * res;
  int64_t f = 0;
  if (sp.low > 0) {
    const int64_t n = (res / mc.pool_stride) * (res / mc.pool_stride);
    f += 4 * n * sp.low * sp.low;  // q,k,v,out projections
    f += 2 * n * n * sp.low;       // scores and weighted values
  }
  if (sp.pool > 0) f += area * sp.pool * sp.pool;
  if (sp.conv > 0) f += area * sp.conv * sp.conv + 9 * sp.conv * area;
  f += 9 * mc.channels * area;             // fuse depthwise
  f += area * mc.channels * mc.channels;   // fuse linear
  return f;
}

}  // namespace detail

template <typename T>
CostReport cost_report(const Model<T>& m) {
  const ModelConfig& cfg = m.cfg;
  CostReport r;
  auto push = [&](const std::string& name, int64_t flops) {
    CostRow row;
    row.name = name;
    row.params = detail::params_with_prefix(m, name + ".");
    row.flops = flops;
    r.rows.push_back(row);
    r.total_params += row.params;
    r.total_flops += flops;
  };

  const int64_t c1 = cfg.stages[0].channels;
  const int64_t mid = c1 / 2;
  const int64_t half = cfg.input_size / 2, quarter = cfg.input_size / 4;
  push("stem", 9 * 3 * mid * half * half + 9 * mid * c1 * quarter * quarter);

  const auto plans = model_block_plans(cfg);
  int64_t res = quarter;
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::string sp = "stage" + std::to_string(s + 1);
    if (s > 0) {
      res /= 2;
      push(sp + ".embed", 4 * cfg.stages[s - 1].channels * st.channels * res * res);
    }
    for (int b = 0; b < st.depth; ++b) {
      const MixerConfig mc = detail::block_mixer_config(cfg, s, plans[s][b]);
      const int64_t ffn = 8 * res * res * st.channels * st.channels;
      push(sp + ".block" + std::to_string(b + 1), detail::mixer_flops(mc, res) + ffn);
    }
  }
  push("head", cfg.stages[3].channels * cfg.num_classes);
  return r;
}

template <typename T>
int64_t count_flops(const Model<T>& m) {
  return cost_report(m).total_flops;
}

// ---------------------------------------------------------------------------
// FFT. Power-of-two lengths use iterative radix-2; everything else goes
// through Bluestein's chirp-z reformulation on a padded power-of-two grid.
// ---------------------------------------------------------------------------

using cplx = std::complex<double>;

namespace detail {

inline void fft_pow2(std::vector<cplx>& a, bool inverse) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * 3.14159265358979323846 / static_cast<double>(len);
    const cplx wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const cplx u = a[i + k];
        const cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    for (auto& x : a) x /= static_cast<double>(n);
  }
}

inline bool is_pow2(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline void fft_any(std::vector<cplx>& a, bool inverse);

inline void fft_bluestein(std::vector<cplx>& a, bool inverse) {
  const size_t n = a.size();
  size_t m = 1;
  while (m < 2 * n + 1) m <<= 1;
  const double sign = inverse ? 1.0 : -1.0;
  std::vector<cplx> chirp(n);
  for (size_t k = 0; k < n; ++k) {
    // angle = sign * pi * k^2 / n, with k^2 reduced mod 2n to keep it exact
    const double ang = sign * 3.14159265358979323846 *
                       static_cast<double>((k * k) % (2 * n)) / static_cast<double>(n);
    chirp[k] = cplx(std::cos(ang), std::sin(ang));
  }
  std::vector<cplx> x(m, cplx(0, 0)), y(m, cplx(0, 0));
  for (size_t k = 0; k < n; ++k) x[k] = a[k] * chirp[k];
  for (size_t k = 0; k < n; ++k) y[k] = std::conj(chirp[k]);
  for (size_t k = 1; k < n; ++k) y[m - k] = std::conj(chirp[k]);
  fft_pow2(x, false);
  fft_pow2(y, false);
  for (size_t k = 0; k < m; ++k) x[k] *= y[k];
  fft_pow2(x, true);
  for (size_t k = 0; k < n; ++k) a[k] = x[k] * chirp[k];
  if (inverse) {
    for (auto& v : a) v /= static_cast<double>(n);
  }
}

inline void fft_any(std::vector<cplx>& a, bool inverse) {
  if (a.size() <= 1) return;
  if (is_pow2(a.size())) {
    fft_pow2(a, inverse);
  } else {
    fft_bluestein(a, inverse);
  }
}

}  // namespace detail

// In-place 1-D transform; unscaled forward, 1/N on the inverse.
inline void fft(std::vector<cplx>& a, bool inverse = false) { detail::fft_any(a, inverse); }

// 2-D transform of an h*w row-major grid (rows first, then columns).
inline void fft2d(std::vector<cplx>& grid, int64_t h, int64_t w, bool inverse = false) {
  if (static_cast<int64_t>(grid.size()) != h * w) {
    throw ShapeError("fft2d: grid size " + std::to_string(grid.size()) + " != " +
                     std::to_string(h) + "*" + std::to_string(w));
  }
  std::vector<cplx> buf;
  for (int64_t y = 0; y < h; ++y) {
    buf.assign(grid.begin() + y * w, grid.begin() + (y + 1) * w);
    fft(buf, inverse);
    std::copy(buf.begin(), buf.end(), grid.begin() + y * w);
  }
  buf.resize(static_cast<size_t>(h));
  for (int64_t x = 0; x < w; ++x) {
    for (int64_t y = 0; y < h; ++y) buf[y] = grid[y * w + x];
    fft(buf, inverse);
    for (int64_t y = 0; y < h; ++y) grid[y * w + x] = buf[y];
  }
}

// ---------------------------------------------------------------------------
// Radial spectrum summaries. The 2-D magnitude spectrum is centered
// (frequency zero at pixel (floor(H/2), floor(W/2))), magnitudes are averaged
// over batch and channels first, then binned by normalized radial frequency
// nu = r / min(H, W), which spans [0, sqrt(2)/2] out to the grid corners.
// Per bin the report keeps the raw mean amplitude and the gap in
// log(1 + amplitude) relative to the center bin. Bins that receive no pixels
// are merged into their lower neighbor.
// ---------------------------------------------------------------------------

struct SpectrumBin {
  double nu_lo = 0, nu_hi = 0;
  int64_t count = 0;            // pixels mapped to this bin
  double mean_amplitude = 0;    // average |X| over the bin
  double log_amplitude = 0;     // log(1 + mean_amplitude)
  double delta_log_amplitude = 0;  // log_amplitude minus the center bin's value
};

struct SpectrumReport {
  int64_t height = 0, width = 0, batch = 0, channels = 0;
  int requested_bins = 0;
  std::vector<SpectrumBin> bins;      // after merging empties
  std::vector<int> merged_bins;       // indices of requested bins that were empty
  double delta_log_amplitude = 0;     // highest-frequency bin minus lowest
  double mean_offcenter_delta = 0;    // mean delta over bins past the center one
  bool zero_freq_concentrated = false;  // mean_offcenter_delta <= -0.5
};

// Magnitude spectrum of x averaged over batch and channels; x is [B,H,W,C].
template <typename T>
std::vector<double> mean_magnitude_spectrum(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("spectrum expects [B,H,W,C], got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  std::vector<double> acc(static_cast<size_t>(h * w), 0.0);
  std::vector<cplx> grid(static_cast<size_t>(h * w));
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t ci = 0; ci < c; ++ci) {
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t xx = 0; xx < w; ++xx) {
          grid[y * w + xx] = cplx(static_cast<double>(x[((bi * h + y) * w + xx) * c + ci]), 0.0);
        }
      }
      fft2d(grid, h, w);
      for (int64_t y = 0; y < h; ++y) {
        // fftshift: move frequency zero to (floor(h/2), floor(w/2)).
        const int64_t sy = (y + h / 2) % h;
        for (int64_t xx = 0; xx < w; ++xx) {
          const int64_t sx = (xx + w / 2) % w;
          acc[sy * w + sx] += std::abs(grid[y * w + xx]);
        }
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(b * c);
  for (auto& v : acc) v *= inv;
  return acc;
}

// Radial binning of a centered magnitude grid.
inline SpectrumReport radial_profile(const std::vector<double>& mag, int64_t h, int64_t w,
                                     int n_bins = 16) {
  if (n_bins < 2) throw ConfigError("radial_profile needs at least 2 bins");
  if (static_cast<int64_t>(mag.size()) != h * w) {
    throw ShapeError("radial_profile: magnitude grid size mismatch");
  }
  SpectrumReport rep;
  rep.height = h;
  rep.width = w;
  rep.requested_bins = n_bins;
  const double nu_max = 0.5 * std::sqrt(2.0);
  const int64_t cy = h / 2, cx = w / 2;
  const double denom = static_cast<double>(std::min(h, w));
  std::vector<double> sum(static_cast<size_t>(n_bins), 0.0);
  std::vector<int64_t> cnt(static_cast<size_t>(n_bins), 0);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double r = std::hypot(static_cast<double>(y - cy), static_cast<double>(x - cx));
      const double nu = r / denom;
      int k = static_cast<int>(nu / nu_max * n_bins);
      if (k >= n_bins) k = n_bins - 1;
      sum[k] += mag[y * w + x];
      ++cnt[k];
    }
  }
  const double width_nu = nu_max / n_bins;
  for (int k = 0; k < n_bins; ++k) {
    if (cnt[k] == 0) {
      rep.merged_bins.push_back(k);
      if (!rep.bins.empty()) rep.bins.back().nu_hi = (k + 1) * width_nu;
      continue;
    }
    SpectrumBin bin;
    bin.nu_lo = rep.bins.empty() ? 0.0 : k * width_nu;
    bin.nu_hi = (k + 1) * width_nu;
    bin.count = cnt[k];
    bin.mean_amplitude = sum[k] / static_cast<double>(cnt[k]);
    rep.bins.push_back(bin);
  }
  const double ref = std::log1p(rep.bins.front().mean_amplitude);
  double acc = 0;
  for (size_t i = 0; i < rep.bins.size(); ++i) {
    rep.bins[i].log_amplitude = std::log1p(rep.bins[i].mean_amplitude);
    rep.bins[i].delta_log_amplitude = rep.bins[i].log_amplitude - ref;
    if (i > 0) acc += rep.bins[i].delta_log_amplitude;
  }
  rep.delta_log_amplitude = rep.bins.back().delta_log_amplitude;
  rep.mean_offcenter_delta = rep.bins.size() > 1 ? acc / static_cast<double>(rep.bins.size() - 1) : 0.0;
  rep.zero_freq_concentrated = rep.mean_offcenter_delta <= -0.5;
  return rep;
}

// Mean delta over bins whose center lies in the top quarter of the
// normalized-frequency range. Falls back to the last bin when merges left
// nothing up there (degenerately small maps).
inline double top_quartile_delta(const SpectrumReport& rep) {
  const double cutoff = 0.75 * 0.5 * std::sqrt(2.0);
  double acc = 0;
  int n = 0;
  for (const auto& b : rep.bins) {
    if (0.5 * (b.nu_lo + b.nu_hi) >= cutoff) {
      acc += b.delta_log_amplitude;
      ++n;
    }
  }
  return n > 0 ? acc / n : rep.bins.back().delta_log_amplitude;
}

template <typename T>
SpectrumReport feature_spectrum_of(const Tensor<T>& x, int n_bins = 16) {
  SpectrumReport rep = radial_profile(mean_magnitude_spectrum(x), x.dim(1), x.dim(2), n_bins);
  rep.batch = x.dim(0);
  rep.channels = x.dim(3);
  return rep;
}

// Runs the model in eval mode on x and reports the spectrum of the chosen
// branch output (or the block output) at (stage, block), both 0-based.
template <typename T>
SpectrumReport feature_spectrum(Model<T>& m, const Tensor<T>& x, int stage, int block,
                                Branch branch, int n_bins = 16) {
  if (stage < 0 || stage >= 4) throw ConfigError("stage index out of range");
  if (block < 0 || block >= m.cfg.stages[stage].depth) {
    throw ConfigError("block index out of range for stage " + std::to_string(stage + 1));
  }
  Tape<T> tape;
  Binder<T> bind(tape, m);
  TapRequest<T> tap;
  tap.stage = stage;
  tap.block = block;
  tap.branch = branch;
  ForwardOpts<T> opts;
  opts.tap = &tap;
  forward_model(bind, tape.leaf(x), opts);
  if (!tap.filled) throw ConfigError("forward pass did not reach the requested block");
  return feature_spectrum_of(tap.captured, n_bins);
}

// Fraction of total binned amplitude mass at normalized frequency >= nu_min.
inline double high_band_mass(const SpectrumReport& rep, double nu_min) {
  double total = 0, high = 0;
  for (const auto& b : rep.bins) {
    const double mass = b.mean_amplitude * static_cast<double>(b.count);
    total += mass;
    if (b.nu_lo >= nu_min) high += mass;
  }
  return total > 0 ? high / total : 0.0;
}

}  // namespace iformer
