#pragma once

// Neural building blocks on top of the tape: linear, dense and depthwise
// convolution, max/average pooling, nearest upsampling, layer/batch norm,
// exact GELU, softmax and multi-head self-attention. All feature maps are
// channel-last (B,H,W,C); token form is (B,N,C) with N = H*W.

#include <cmath>
#include <cstdint>
#include <vector>

#include "iformer/tape.hpp"

namespace iformer {

// ---------------------------------------------------------------------------
// linear: per-location affine map over the trailing channel axis.
// x [..., C_in], w [C_in, C_out], b [C_out].
// ---------------------------------------------------------------------------

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws.size() != 2 || xs.back() != ws[0]) {
    throw ShapeError("linear: input channels " + shape_str(xs) +
                     " do not match weight " + shape_str(ws));
  }
  const int64_t c_in = ws[0], c_out = ws[1];
  int64_t rows = 1;
  for (size_t i = 0; i + 1 < xs.size(); ++i) rows *= xs[i];
  Var<T> flat = reshape(x, {rows, c_in});
  Var<T> y = add(matmul(flat, w), b);
  std::vector<int64_t> out_shape(xs.begin(), xs.end() - 1);
  out_shape.push_back(c_out);
  return reshape(y, std::move(out_shape));
}

// ---------------------------------------------------------------------------
// conv2d: dense cross-channel convolution (correlation), zero padding.
// x [B,H,W,C_in], w [kh,kw,C_in,C_out], b [C_out].
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  const Tensor<T>& wv = tape.value(w.id);
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(3) != wv.dim(2)) {
    throw ShapeError("conv2d: input " + shape_str(xv.shape()) +
                     " incompatible with kernel " + shape_str(wv.shape()));
  }
  const int64_t bs = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), ci = xv.dim(3);
  const int64_t kh = wv.dim(0), kw = wv.dim(1), co = wv.dim(3);
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv2d: kernel " + shape_str(wv.shape()) +
                     " does not fit input " + shape_str(xv.shape()));
  }
  const Tensor<T>& bias = tape.value(b.id);
  Tensor<T> out({bs, oh, ow, co});
  {
    const T* xp = xv.data();
    const T* wp = wv.data();
    const T* bp = bias.data();
    T* op = out.data();
    parallel_for(bs * oh, [&](int64_t row) {
      const int64_t bi = row / oh, oy = row % oh;
      for (int64_t ox = 0; ox < ow; ++ox) {
        T* opix = op + ((bi * oh + oy) * ow + ox) * co;
        for (int64_t c = 0; c < co; ++c) opix[c] = bp[c];
        for (int64_t ky = 0; ky < kh; ++ky) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t kx = 0; kx < kw; ++kx) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= wd) continue;
            const T* xpix = xp + ((bi * h + iy) * wd + ix) * ci;
            const T* wrow = wp + (ky * kw + kx) * ci * co;
            for (int64_t c = 0; c < ci; ++c) {
              const T xval = xpix[c];
              const T* wc = wrow + c * co;
              for (int64_t c2 = 0; c2 < co; ++c2) opix[c2] += xval * wc[c2];
            }
          }
        }
      }
    });
  }
  const int32_t xid = x.id, wid = w.id, bid = b.id, oid = tape.next_id();
  return tape.append(std::move(out), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    const Tensor<T>& xv2 = t.value(xid);
    const Tensor<T>& wv2 = t.value(wid);
    Tensor<T>& gx = t.grad_ref(xid);
    Tensor<T>& gw = t.grad_ref(wid);
    Tensor<T>& gb = t.grad_ref(bid);
    for (int64_t bi = 0; bi < bs; ++bi) {
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          const T* gpix = g.data() + ((bi * oh + oy) * ow + ox) * co;
          for (int64_t c2 = 0; c2 < co; ++c2) gb[c2] += gpix[c2];
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= wd) continue;
              const int64_t xoff = ((bi * h + iy) * wd + ix) * ci;
              const int64_t woff = (ky * kw + kx) * ci * co;
              for (int64_t c = 0; c < ci; ++c) {
                const T xval = xv2[xoff + c];
                const T* wc = wv2.data() + woff + c * co;
                T acc = T(0);
                for (int64_t c2 = 0; c2 < co; ++c2) {
                  acc += gpix[c2] * wc[c2];
                  gw[woff + c * co + c2] += xval * gpix[c2];
                }
                gx[xoff + c] += acc;
              }
            }
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// depthwise_conv3x3: one 3x3 filter per channel, stride 1, zero padding 1
// (resolution preserving). x [B,H,W,C], w [3,3,C], b [C].
// ---------------------------------------------------------------------------

template <typename T>
Var<T> depthwise_conv3x3(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  const Tensor<T>& wv = tape.value(w.id);
  if (xv.rank() != 4 || wv.rank() != 3 || wv.dim(0) != 3 || wv.dim(1) != 3 ||
      wv.dim(2) != xv.dim(3)) {
    throw ShapeError("depthwise_conv3x3: input " + shape_str(xv.shape()) +
                     " incompatible with kernel " + shape_str(wv.shape()));
  }
  const int64_t bs = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), c = xv.dim(3);
  const Tensor<T>& bias = tape.value(b.id);
  Tensor<T> out({bs, h, wd, c});
  {
    const T* xp = xv.data();
    const T* wp = wv.data();
    const T* bp = bias.data();
    T* op = out.data();
    parallel_for(bs * h, [&](int64_t row) {
      const int64_t bi = row / h, y = row % h;
      for (int64_t xx = 0; xx < wd; ++xx) {
        T* opix = op + ((bi * h + y) * wd + xx) * c;
        for (int64_t ci = 0; ci < c; ++ci) opix[ci] = bp[ci];
        for (int64_t ky = 0; ky < 3; ++ky) {
          const int64_t iy = y - 1 + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t kx = 0; kx < 3; ++kx) {
            const int64_t ix = xx - 1 + kx;
            if (ix < 0 || ix >= wd) continue;
            const T* xpix = xp + ((bi * h + iy) * wd + ix) * c;
            const T* wpix = wp + (ky * 3 + kx) * c;
            for (int64_t ci = 0; ci < c; ++ci) opix[ci] += xpix[ci] * wpix[ci];
          }
        }
      }
    });
  }
  const int32_t xid = x.id, wid = w.id, bid = b.id, oid = tape.next_id();
  return tape.append(std::move(out), [=](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    const Tensor<T>& xv2 = t.value(xid);
    const Tensor<T>& wv2 = t.value(wid);
    Tensor<T>& gx = t.grad_ref(xid);
    Tensor<T>& gw = t.grad_ref(wid);
    Tensor<T>& gb = t.grad_ref(bid);
    for (int64_t bi = 0; bi < bs; ++bi) {
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t xx = 0; xx < wd; ++xx) {
          const T* gpix = g.data() + ((bi * h + y) * wd + xx) * c;
          for (int64_t ci = 0; ci < c; ++ci) gb[ci] += gpix[ci];
          for (int64_t ky = 0; ky < 3; ++ky) {
            const int64_t iy = y - 1 + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < 3; ++kx) {
              const int64_t ix = xx - 1 + kx;
              if (ix < 0 || ix >= wd) continue;
              const int64_t xoff = ((bi * h + iy) * wd + ix) * c;
              const int64_t woff = (ky * 3 + kx) * c;
              for (int64_t ci = 0; ci < c; ++ci) {
                gx[xoff + ci] += gpix[ci] * wv2[woff + ci];
                gw[woff + ci] += gpix[ci] * xv2[xoff + ci];
              }
            }
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// max_pool3x3: stride 1, padding 1; padded positions act as -inf. The
// subgradient goes to the first maximal element in row-major window order.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> max_pool3x3(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  if (xv.rank() != 4) throw ShapeError("max_pool3x3 expects [B,H,W,C], got " + shape_str(xv.shape()));
  const int64_t bs = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), c = xv.dim(3);
  Tensor<T> out({bs, h, wd, c});
  std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
  const T* xp = xv.data();
  T* op = out.data();
  for (int64_t bi = 0; bi < bs; ++bi) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t xx = 0; xx < wd; ++xx) {
        const int64_t obase = ((bi * h + y) * wd + xx) * c;
        for (int64_t ci = 0; ci < c; ++ci) {
          T best = T(0);
          int64_t best_idx = -1;
          for (int64_t ky = 0; ky < 3; ++ky) {
            const int64_t iy = y - 1 + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < 3; ++kx) {
              const int64_t ix = xx - 1 + kx;
              if (ix < 0 || ix >= wd) continue;
              const int64_t idx = ((bi * h + iy) * wd + ix) * c + ci;
              if (best_idx < 0 || xp[idx] > best) {
                best = xp[idx];
                best_idx = idx;
              }
            }
          }
          op[obase + ci] = best;
          argmax[obase + ci] = best_idx;
        }
      }
    }
  }
  const int32_t xid = x.id, oid = tape.next_id();
  const int64_t n = out.numel();
  return tape.append(std::move(out), [xid, oid, n, argmax = std::move(argmax)](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    Tensor<T>& gx = t.grad_ref(xid);
    for (int64_t i = 0; i < n; ++i) gx[argmax[i]] += g[i];
  });
}

// ---------------------------------------------------------------------------
// avg_pool2x2_s2: non-overlapping 2x2 means; requires even H and W.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> avg_pool2x2_s2(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  if (xv.rank() != 4) throw ShapeError("avg_pool2x2_s2 expects [B,H,W,C], got " + shape_str(xv.shape()));
  const int64_t bs = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), c = xv.dim(3);
  if (h % 2 != 0 || wd % 2 != 0) {
    throw ShapeError("avg_pool2x2_s2 requires even spatial dims, got " + shape_str(xv.shape()));
  }
  const int64_t oh = h / 2, ow = wd / 2;
  Tensor<T> out({bs, oh, ow, c});
  const T* xp = xv.data();
  T* op = out.data();
  for (int64_t bi = 0; bi < bs; ++bi) {
    for (int64_t oy = 0; oy < oh; ++oy) {
      for (int64_t ox = 0; ox < ow; ++ox) {
        T* opix = op + ((bi * oh + oy) * ow + ox) * c;
        const T* p00 = xp + ((bi * h + 2 * oy) * wd + 2 * ox) * c;
        const T* p01 = p00 + c;
        const T* p10 = p00 + wd * c;
        const T* p11 = p10 + c;
        for (int64_t ci = 0; ci < c; ++ci) {
          opix[ci] = (p00[ci] + p01[ci] + p10[ci] + p11[ci]) * T(0.25);
        }
      }
    }
  }
  const int32_t xid = x.id, oid = tape.next_id();
  return tape.append(std::move(out), [xid, oid, bs, h, wd, c, oh, ow](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    Tensor<T>& gx = t.grad_ref(xid);
    for (int64_t bi = 0; bi < bs; ++bi) {
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          const T* gpix = g.data() + ((bi * oh + oy) * ow + ox) * c;
          T* p00 = gx.data() + ((bi * h + 2 * oy) * wd + 2 * ox) * c;
          T* p01 = p00 + c;
          T* p10 = p00 + wd * c;
          T* p11 = p10 + c;
          for (int64_t ci = 0; ci < c; ++ci) {
            const T q = gpix[ci] * T(0.25);
            p00[ci] += q;
            p01[ci] += q;
            p10[ci] += q;
            p11[ci] += q;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// upsample_nearest2x: replicate each pixel into a 2x2 block.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> upsample_nearest2x(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  if (xv.rank() != 4) throw ShapeError("upsample_nearest2x expects [B,H,W,C], got " + shape_str(xv.shape()));
  const int64_t bs = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), c = xv.dim(3);
  const int64_t oh = 2 * h, ow = 2 * wd;
  Tensor<T> out({bs, oh, ow, c});
  const T* xp = xv.data();
  T* op = out.data();
  for (int64_t bi = 0; bi < bs; ++bi) {
    for (int64_t oy = 0; oy < oh; ++oy) {
      const int64_t iy = oy / 2;
      for (int64_t ox = 0; ox < ow; ++ox) {
        const int64_t ix = ox / 2;
        const T* src = xp + ((bi * h + iy) * wd + ix) * c;
        T* dst = op + ((bi * oh + oy) * ow + ox) * c;
        for (int64_t ci = 0; ci < c; ++ci) dst[ci] = src[ci];
      }
    }
  }
  const int32_t xid = x.id, oid = tape.next_id();
  return tape.append(std::move(out), [xid, oid, bs, h, wd, c, oh, ow](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    Tensor<T>& gx = t.grad_ref(xid);
    for (int64_t bi = 0; bi < bs; ++bi) {
      for (int64_t oy = 0; oy < oh; ++oy) {
        const int64_t iy = oy / 2;
        for (int64_t ox = 0; ox < ow; ++ox) {
          const int64_t ix = ox / 2;
          T* dst = gx.data() + ((bi * h + iy) * wd + ix) * c;
          const T* src = g.data() + ((bi * oh + oy) * ow + ox) * c;
          for (int64_t ci = 0; ci < c; ++ci) dst[ci] += src[ci];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// layer_norm over the trailing channel axis, then affine.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  const int64_t c = xv.shape().back();
  const Tensor<T>& gv = tape.value(gamma.id);
  if (gv.numel() != c || tape.value(beta.id).numel() != c) {
    throw ShapeError("layer_norm: affine size " + shape_str(gv.shape()) +
                     " does not match channels of " + shape_str(xv.shape()));
  }
  const int64_t rows = xv.numel() / c;
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(static_cast<size_t>(rows));
  const T* xp = xv.data();
  const T* gp = gv.data();
  const T* bp = tape.value(beta.id).data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * c;
    T mean = T(0);
    for (int64_t i = 0; i < c; ++i) mean += row[i];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int64_t i = 0; i < c; ++i) {
      const T d = row[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[r] = istd;
    for (int64_t i = 0; i < c; ++i) {
      const T xh = (row[i] - mean) * istd;
      xhat[r * c + i] = xh;
      out[r * c + i] = gp[i] * xh + bp[i];
    }
  }
  const int32_t xid = x.id, gid = gamma.id, bid = beta.id, oid = tape.next_id();
  return tape.append(std::move(out),
                     [xid, gid, bid, oid, rows, c, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    const Tensor<T>& gv2 = t.value(gid);
    Tensor<T>& gx = t.grad_ref(xid);
    Tensor<T>& gg = t.grad_ref(gid);
    Tensor<T>& gb = t.grad_ref(bid);
    for (int64_t r = 0; r < rows; ++r) {
      const T* grow = g.data() + r * c;
      const T* xh = xhat.data() + r * c;
      T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
      for (int64_t i = 0; i < c; ++i) {
        const T dxh = grow[i] * gv2[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xh[i];
        gg[i] += grow[i] * xh[i];
        gb[i] += grow[i];
      }
      mean_dxhat /= static_cast<T>(c);
      mean_dxhat_xhat /= static_cast<T>(c);
      const T istd = inv_std[r];
      for (int64_t i = 0; i < c; ++i) {
        const T dxh = grow[i] * gv2[i];
        gx[r * c + i] += istd * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// batch_norm over (B,H,W) per channel. Running statistics live outside the
// tape; they are only written when update_running_stats is set (the training
// loop sets it, gradient-check probes do not, keeping f(x) pure).
// ---------------------------------------------------------------------------

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training,
                  bool update_running_stats = false, T momentum = T(0.1),
                  T eps = T(1e-5)) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  if (xv.rank() != 4) throw ShapeError("batch_norm expects [B,H,W,C], got " + shape_str(xv.shape()));
  const int64_t c = xv.dim(3);
  const int64_t n = xv.numel() / c;
  const Tensor<T>& gv = tape.value(gamma.id);
  const Tensor<T>& bv = tape.value(beta.id);
  Tensor<T> out(xv.shape());

  if (!training) {
    std::vector<T> scale_c(c), shift_c(c);
    for (int64_t i = 0; i < c; ++i) {
      const T istd = T(1) / std::sqrt(running_var[i] + eps);
      scale_c[i] = gv[i] * istd;
      shift_c[i] = bv[i] - running_mean[i] * scale_c[i];
    }
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t i = 0; i < c; ++i) out[r * c + i] = xv[r * c + i] * scale_c[i] + shift_c[i];
    }
    const int32_t xid = x.id, gid = gamma.id, bid = beta.id, oid = tape.next_id();
    Tensor<T> istd_t({c});
    for (int64_t i = 0; i < c; ++i) istd_t[i] = T(1) / std::sqrt(running_var[i] + eps);
    Tensor<T> rm = running_mean;
    return tape.append(std::move(out),
                       [xid, gid, bid, oid, n, c, istd_t = std::move(istd_t),
                        rm = std::move(rm)](Tape<T>& t) {
      const Tensor<T>& g = t.grad_ref(oid);
      const Tensor<T>& xv2 = t.value(xid);
      const Tensor<T>& gv2 = t.value(gid);
      Tensor<T>& gx = t.grad_ref(xid);
      Tensor<T>& gg = t.grad_ref(gid);
      Tensor<T>& gb = t.grad_ref(bid);
      for (int64_t r = 0; r < n; ++r) {
        for (int64_t i = 0; i < c; ++i) {
          const T gi = g[r * c + i];
          gx[r * c + i] += gi * gv2[i] * istd_t[i];
          gg[i] += gi * (xv2[r * c + i] - rm[i]) * istd_t[i];
          gb[i] += gi;
        }
      }
    });
  }

  // Training mode: batch statistics.
  std::vector<T> mean(c, T(0)), var(c, T(0));
  for (int64_t r = 0; r < n; ++r) {
    for (int64_t i = 0; i < c; ++i) mean[i] += xv[r * c + i];
  }
  for (int64_t i = 0; i < c; ++i) mean[i] /= static_cast<T>(n);
  for (int64_t r = 0; r < n; ++r) {
    for (int64_t i = 0; i < c; ++i) {
      const T d = xv[r * c + i] - mean[i];
      var[i] += d * d;
    }
  }
  for (int64_t i = 0; i < c; ++i) var[i] /= static_cast<T>(n);

  if (update_running_stats) {
    // Unbiased variance in the running estimate, as is conventional.
    const T unbias = n > 1 ? static_cast<T>(n) / static_cast<T>(n - 1) : T(1);
    for (int64_t i = 0; i < c; ++i) {
      running_mean[i] = (T(1) - momentum) * running_mean[i] + momentum * mean[i];
      running_var[i] = (T(1) - momentum) * running_var[i] + momentum * var[i] * unbias;
    }
  }

  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(c);
  for (int64_t i = 0; i < c; ++i) inv_std[i] = T(1) / std::sqrt(var[i] + eps);
  for (int64_t r = 0; r < n; ++r) {
    for (int64_t i = 0; i < c; ++i) {
      const T xh = (xv[r * c + i] - mean[i]) * inv_std[i];
      xhat[r * c + i] = xh;
      out[r * c + i] = gv[i] * xh + bv[i];
    }
  }
  const int32_t xid = x.id, gid = gamma.id, bid = beta.id, oid = tape.next_id();
  return tape.append(std::move(out),
                     [xid, gid, bid, oid, n, c, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    const Tensor<T>& gv2 = t.value(gid);
    Tensor<T>& gx = t.grad_ref(xid);
    Tensor<T>& gg = t.grad_ref(gid);
    Tensor<T>& gb = t.grad_ref(bid);
    std::vector<T> mean_dxhat(c, T(0)), mean_dxhat_xhat(c, T(0));
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t i = 0; i < c; ++i) {
        const T dxh = g[r * c + i] * gv2[i];
        mean_dxhat[i] += dxh;
        mean_dxhat_xhat[i] += dxh * xhat[r * c + i];
        gg[i] += g[r * c + i] * xhat[r * c + i];
        gb[i] += g[r * c + i];
      }
    }
    for (int64_t i = 0; i < c; ++i) {
      mean_dxhat[i] /= static_cast<T>(n);
      mean_dxhat_xhat[i] /= static_cast<T>(n);
    }
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t i = 0; i < c; ++i) {
        const T dxh = g[r * c + i] * gv2[i];
        gx[r * c + i] += inv_std[i] * (dxh - mean_dxhat[i] - xhat[r * c + i] * mean_dxhat_xhat[i]);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Exact GELU: x * Phi(x) with Phi the standard normal CDF via erf.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> gelu(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  const int64_t n = xv.numel();
  Tensor<T> out(xv.shape());
  for (int64_t i = 0; i < n; ++i) {
    const T v = xv[i];
    out[i] = v * T(0.5) * (T(1) + std::erf(v * T(0.7071067811865475244)));
  }
  const int32_t xid = x.id, oid = tape.next_id();
  return tape.append(std::move(out), [xid, oid, n](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    const Tensor<T>& xv2 = t.value(xid);
    Tensor<T>& gx = t.grad_ref(xid);
    for (int64_t i = 0; i < n; ++i) {
      const T v = xv2[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * T(0.7071067811865475244)));
      const T pdf = std::exp(T(-0.5) * v * v) * T(0.3989422804014326779);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// softmax over the last axis, max-subtracted for stability.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = tape.value(x.id);
  const int64_t c = xv.shape().back();
  const int64_t rows = xv.numel() / c;
  Tensor<T> out(xv.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T* orow = out.data() + r * c;
    T m = row[0];
    for (int64_t i = 1; i < c; ++i) m = std::max(m, row[i]);
    T z = T(0);
    for (int64_t i = 0; i < c; ++i) {
      orow[i] = std::exp(row[i] - m);
      z += orow[i];
    }
    const T inv = T(1) / z;
    for (int64_t i = 0; i < c; ++i) orow[i] *= inv;
  }
  const int32_t xid = x.id, oid = tape.next_id();
  return tape.append(std::move(out), [xid, oid, rows, c](Tape<T>& t) {
    const Tensor<T>& g = t.grad_ref(oid);
    const Tensor<T>& s = t.value(oid);
    Tensor<T>& gx = t.grad_ref(xid);
    for (int64_t r = 0; r < rows; ++r) {
      const T* grow = g.data() + r * c;
      const T* srow = s.data() + r * c;
      T dot = T(0);
      for (int64_t i = 0; i < c; ++i) dot += grow[i] * srow[i];
      T* gxrow = gx.data() + r * c;
      for (int64_t i = 0; i < c; ++i) gxrow[i] += srow[i] * (grow[i] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Multi-head self-attention on token form [B,N,C]. Composed from the
// primitives above, so its backward pass needs no dedicated code.
// softmax(Q K^T / sqrt(head_dim)) V per head, heads concatenated, then the
// output projection.
// ---------------------------------------------------------------------------

template <typename T>
struct MsaVars {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
  int heads = 1;
};

template <typename T>
Var<T> msa(Var<T> x, const MsaVars<T>& p, Var<T>* attn_out = nullptr) {
  const auto& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("msa expects [B,N,C], got " + shape_str(xs));
  const int64_t b = xs[0], n = xs[1], c = xs[2];
  if (p.heads <= 0 || c % p.heads != 0) {
    throw ConfigError("msa: channels " + std::to_string(c) +
                      " not divisible by heads " + std::to_string(p.heads));
  }
  const int64_t h = p.heads, d = c / h;
  auto to_heads = [&](Var<T> v) {
    return permute(reshape(v, {b, n, h, d}), {0, 2, 1, 3});  // [B,h,N,d]
  };
  Var<T> q = to_heads(linear(x, p.wq, p.bq));
  Var<T> k = to_heads(linear(x, p.wk, p.bk));
  Var<T> v = to_heads(linear(x, p.wv, p.bv));
  Var<T> logits = scale(matmul(q, transpose_last2(k)),
                        static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  Var<T> attn = softmax_lastdim(logits);  // [B,h,N,N]
  if (attn_out) *attn_out = attn;
  Var<T> ctx = matmul(attn, v);                            // [B,h,N,d]
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), {b, n, c});    // [B,N,C]
  return linear(ctx, p.wo, p.bo);
}

// Cross-entropy with integer labels, mean over the batch. Fused stable
// log-softmax; returns a scalar.
template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, const std::vector<int>& labels) {
  Tape<T>& tape = *logits.tape;
  const Tensor<T>& lv = tape.value(logits.id);
  if (lv.rank() != 2 || lv.dim(0) != static_cast<int64_t>(labels.size())) {
    throw ShapeError("cross_entropy: logits " + shape_str(lv.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  const int64_t b = lv.dim(0), k = lv.dim(1);
  Tensor<T> probs(lv.shape());
  T loss = T(0);
  for (int64_t r = 0; r < b; ++r) {
    const T* row = lv.data() + r * k;
    T m = row[0];
    for (int64_t i = 1; i < k; ++i) m = std::max(m, row[i]);
    T z = T(0);
    for (int64_t i = 0; i < k; ++i) z += std::exp(row[i] - m);
    const T logz = std::log(z) + m;
    loss += logz - row[labels[r]];
    for (int64_t i = 0; i < k; ++i) probs[r * k + i] = std::exp(row[i] - logz);
  }
  loss /= static_cast<T>(b);
  Tensor<T> out({1});
  out[0] = loss;
  const int32_t lid = logits.id, oid = tape.next_id();
  return tape.append(std::move(out),
                     [lid, oid, b, k, labels, probs = std::move(probs)](Tape<T>& t) {
    const T g = t.grad_ref(oid)[0];
    Tensor<T>& gl = t.grad_ref(lid);
    const T inv_b = T(1) / static_cast<T>(b);
    for (int64_t r = 0; r < b; ++r) {
      for (int64_t i = 0; i < k; ++i) {
        T p = probs[r * k + i];
        if (i == labels[r]) p -= T(1);
        gl[r * k + i] += g * p * inv_b;
      }
    }
  });
}

}  // namespace iformer
