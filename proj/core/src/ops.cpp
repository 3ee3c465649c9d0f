#include "sscd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "sscd/detail/gemm.hpp"

namespace sscd {

namespace {

template <class T>
void require_rank4(const Tensor<T>& t, const char* who) {
  if (t.rank() != 4)
    throw ShapeError(std::string(who) + ": expected rank-4 NCHW tensor, got " +
                     shape_str(t.shape()));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

// col[(c*kh+ky)*kw+kx][oy*Wo+ox] = x[c][oy*s-p+ky][ox*s-p+kx], zero padded.
template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, T* col) {
  const int64_t L = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) * L;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* out = row + static_cast<int64_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(out, out + Wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            out[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add of a column matrix back into image layout (adjoint of im2col).
template <class T>
void col2im_acc(const T* col, int C, int H, int W, int kh, int kw, int stride,
                int pad, int Ho, int Wo, T* x) {
  const int64_t L = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) * L;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + static_cast<int64_t>(oy) * Wo;
          T* dst = x + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise / reduction
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  if (Tape<T>* tp = common_tape<T>({&a, &b})) {
    tp->record(nodes_of<T>({&a, &b}), out,
               [ad = a.handle(), bd = b.handle(), od = out.handle()] {
                 const int64_t n = static_cast<int64_t>(od->values.size());
                 if (ad->tape)
                   for (int64_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i];
                 if (bd->tape)
                   for (int64_t i = 0; i < n; ++i) bd->grad[i] += od->grad[i];
               });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
  if (Tape<T>* tp = common_tape<T>({&a, &b})) {
    tp->record(nodes_of<T>({&a, &b}), out,
               [ad = a.handle(), bd = b.handle(), od = out.handle()] {
                 const int64_t n = static_cast<int64_t>(od->values.size());
                 if (ad->tape)
                   for (int64_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i];
                 if (bd->tape)
                   for (int64_t i = 0; i < n; ++i) bd->grad[i] -= od->grad[i];
               });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  if (Tape<T>* tp = common_tape<T>({&a, &b})) {
    tp->record(nodes_of<T>({&a, &b}), out,
               [ad = a.handle(), bd = b.handle(), od = out.handle()] {
                 const int64_t n = static_cast<int64_t>(od->values.size());
                 if (ad->tape)
                   for (int64_t i = 0; i < n; ++i)
                     ad->grad[i] += od->grad[i] * bd->values[i];
                 if (bd->tape)
                   for (int64_t i = 0; i < n; ++i)
                     bd->grad[i] += od->grad[i] * ad->values[i];
               });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] * c;
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out, [xd = x.handle(), od = out.handle(), c] {
      const int64_t n = static_cast<int64_t>(od->values.size());
      for (int64_t i = 0; i < n; ++i) xd->grad[i] += od->grad[i] * c;
    });
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] + c;
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out, [xd = x.handle(), od = out.handle()] {
      const int64_t n = static_cast<int64_t>(od->values.size());
      for (int64_t i = 0; i < n; ++i) xd->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> log_op(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = std::log(xv[i]);
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out, [xd = x.handle(), od = out.handle()] {
      const int64_t n = static_cast<int64_t>(od->values.size());
      for (int64_t i = 0; i < n; ++i) xd->grad[i] += od->grad[i] / xd->values[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  if (!(lo <= hi)) throw ShapeError("clamp: lo > hi");
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = std::min(hi, std::max(lo, xv[i]));
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out,
               [xd = x.handle(), od = out.handle(), lo, hi] {
                 const int64_t n = static_cast<int64_t>(od->values.size());
                 for (int64_t i = 0; i < n; ++i)
                   if (xd->values[i] > lo && xd->values[i] < hi)
                     xd->grad[i] += od->grad[i];
               });
  }
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out, [xd = x.handle(), od = out.handle()] {
      const int64_t n = static_cast<int64_t>(od->values.size());
      for (int64_t i = 0; i < n; ++i)
        if (xd->values[i] > T(0)) xd->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  const T* xv = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += xv[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out, [xd = x.handle(), od = out.handle()] {
      const T g = od->grad[0];
      const int64_t n = static_cast<int64_t>(xd->values.size());
      for (int64_t i = 0; i < n; ++i) xd->grad[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int pad) {
  require_rank4(x, "conv2d");
  require_rank4(w, "conv2d weight");
  if (b.rank() != 1)
    throw ShapeError("conv2d: bias must be rank-1, got " + shape_str(b.shape()));
  const int N = x.extent(0), Cin = x.extent(1), H = x.extent(2), W = x.extent(3);
  const int Cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  if (w.extent(1) != Cin)
    throw ShapeError("conv2d: input channels do not match weight, input " +
                     shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (b.extent(0) != Cout)
    throw ShapeError("conv2d: bias length " + std::to_string(b.extent(0)) +
                     " vs " + std::to_string(Cout) + " output channels");
  if (kh < 1 || kw < 1 || stride < 1 || pad < 0)
    throw ShapeError("conv2d: need kernel >= 1, stride >= 1, pad >= 0");
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d: kernel " + shape_str({kh, kw}) +
                     " larger than padded input " +
                     shape_str({H + 2 * pad, W + 2 * pad}));
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int K = Cin * kh * kw;
  const int64_t L = static_cast<int64_t>(Ho) * Wo;

  Tensor<T> out({N, Cout, Ho, Wo});
  std::vector<T> col(static_cast<size_t>(K) * L);
  const int64_t x_stride = static_cast<int64_t>(Cin) * H * W;
  const int64_t o_stride = static_cast<int64_t>(Cout) * L;
  for (int n = 0; n < N; ++n) {
    im2col(x.data() + n * x_stride, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
           col.data());
    T* o = out.data() + n * o_stride;
    detail::gemm_acc(w.data(), col.data(), o, Cout, K, static_cast<int>(L));
    for (int c = 0; c < Cout; ++c) {
      const T bias = b.data()[c];
      if (bias == T(0)) continue;
      T* row = o + static_cast<int64_t>(c) * L;
      for (int64_t i = 0; i < L; ++i) row[i] += bias;
    }
  }

  if (Tape<T>* tp = common_tape<T>({&x, &w, &b})) {
    tp->record(
        nodes_of<T>({&x, &w, &b}), out,
        [xd = x.handle(), wd = w.handle(), bd = b.handle(), od = out.handle(),
         N, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, L, x_stride,
         o_stride] {
          // The im2col buffer is recomputed here instead of being kept alive
          // from the forward pass; it is cheap next to the matmuls.
          std::vector<T> col(static_cast<size_t>(K) * L);
          std::vector<T> dcol;
          if (xd->tape) dcol.resize(static_cast<size_t>(K) * L);
          for (int n = 0; n < N; ++n) {
            const T* go = od->grad.data() + n * o_stride;
            if (bd->tape) {
              for (int c = 0; c < Cout; ++c) {
                T acc = T(0);
                const T* row = go + static_cast<int64_t>(c) * L;
                for (int64_t i = 0; i < L; ++i) acc += row[i];
                bd->grad[c] += acc;
              }
            }
            if (wd->tape || xd->tape)
              im2col(xd->values.data() + n * x_stride, Cin, H, W, kh, kw,
                     stride, pad, Ho, Wo, col.data());
            if (wd->tape)
              detail::gemm_nt_acc(go, col.data(), wd->grad.data(), Cout,
                                  static_cast<int>(L), K);
            if (xd->tape) {
              std::fill(dcol.begin(), dcol.end(), T(0));
              detail::gemm_tn_acc(wd->values.data(), go, dcol.data(), Cout, K,
                                  static_cast<int>(L));
              col2im_acc(dcol.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                         xd->grad.data() + n * x_stride);
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// max_pool2d
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k, int stride) {
  require_rank4(x, "max_pool2d");
  if (k < 1 || stride < 1) throw ShapeError("max_pool2d: need k >= 1, stride >= 1");
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (k > H || k > W)
    throw ShapeError("max_pool2d: window " + std::to_string(k) +
                     " larger than input " + shape_str({H, W}));
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;
  Tensor<T> out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<int32_t>>(out.numel());
  const T* xv = x.data();
  T* ov = out.data();
  int64_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* plane = xv + (static_cast<int64_t>(n) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          const int y0 = oy * stride, x0 = ox * stride;
          T best = plane[static_cast<int64_t>(y0) * W + x0];
          int32_t best_idx = y0 * W + x0;
          for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
              const int32_t idx = (y0 + dy) * W + (x0 + dx);
              const T v = plane[idx];
              if (v > best) {  // strict: first occurrence wins ties
                best = v;
                best_idx = idx;
              }
            }
          }
          ov[oi] = best;
          (*argmax)[oi] = best_idx;
        }
      }
    }
  }
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out,
               [xd = x.handle(), od = out.handle(), argmax, N, C, H, W, Ho, Wo] {
                 const int64_t per_plane = static_cast<int64_t>(H) * W;
                 const int64_t per_out = static_cast<int64_t>(Ho) * Wo;
                 int64_t oi = 0;
                 for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
                   T* gx = xd->grad.data() + p * per_plane;
                   for (int64_t i = 0; i < per_out; ++i, ++oi)
                     gx[(*argmax)[oi]] += od->grad[oi];
                 }
               });
  }
  return out;
}

// ---------------------------------------------------------------------------
// upsample2x
// ---------------------------------------------------------------------------

namespace {

struct LinearTap {
  int i0, i1;
  double w0, w1;
};

// align-corners-false source taps for doubling a length-n axis
inline std::vector<LinearTap> bilinear_taps_2x(int n) {
  std::vector<LinearTap> taps(2 * n);
  for (int i = 0; i < 2 * n; ++i) {
    double s = (i + 0.5) / 2.0 - 0.5;
    int i0 = static_cast<int>(std::floor(s));
    double w1 = s - i0;
    int i1 = i0 + 1;
    i0 = std::clamp(i0, 0, n - 1);
    i1 = std::clamp(i1, 0, n - 1);
    taps[i] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace

template <class T>
Tensor<T> upsample2x(const Tensor<T>& x, UpsampleMode mode) {
  require_rank4(x, "upsample2x");
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (H < 1 || W < 1) throw ShapeError("upsample2x: empty spatial extent");
  const int Ho = 2 * H, Wo = 2 * W;
  Tensor<T> out({N, C, Ho, Wo});
  const int64_t planes = static_cast<int64_t>(N) * C;
  const T* xv = x.data();
  T* ov = out.data();

  if (mode == UpsampleMode::kNearest) {
    for (int64_t p = 0; p < planes; ++p) {
      const T* src = xv + p * H * W;
      T* dst = ov + p * Ho * Wo;
      for (int y = 0; y < Ho; ++y) {
        const T* row = src + static_cast<int64_t>(y / 2) * W;
        T* orow = dst + static_cast<int64_t>(y) * Wo;
        for (int x2 = 0; x2 < Wo; ++x2) orow[x2] = row[x2 / 2];
      }
    }
    if (Tape<T>* tp = common_tape<T>({&x})) {
      tp->record(nodes_of<T>({&x}), out,
                 [xd = x.handle(), od = out.handle(), planes, H, W, Ho, Wo] {
                   for (int64_t p = 0; p < planes; ++p) {
                     T* gx = xd->grad.data() + p * H * W;
                     const T* go = od->grad.data() + p * Ho * Wo;
                     for (int y = 0; y < Ho; ++y)
                       for (int x2 = 0; x2 < Wo; ++x2)
                         gx[static_cast<int64_t>(y / 2) * W + x2 / 2] +=
                             go[static_cast<int64_t>(y) * Wo + x2];
                   }
                 });
    }
    return out;
  }

  const auto ty = bilinear_taps_2x(H);
  const auto tx = bilinear_taps_2x(W);
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = xv + p * H * W;
    T* dst = ov + p * Ho * Wo;
    for (int y = 0; y < Ho; ++y) {
      const LinearTap& a = ty[y];
      T* orow = dst + static_cast<int64_t>(y) * Wo;
      for (int x2 = 0; x2 < Wo; ++x2) {
        const LinearTap& b = tx[x2];
        orow[x2] = static_cast<T>(
            a.w0 * (b.w0 * src[static_cast<int64_t>(a.i0) * W + b.i0] +
                    b.w1 * src[static_cast<int64_t>(a.i0) * W + b.i1]) +
            a.w1 * (b.w0 * src[static_cast<int64_t>(a.i1) * W + b.i0] +
                    b.w1 * src[static_cast<int64_t>(a.i1) * W + b.i1]));
      }
    }
  }
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out,
               [xd = x.handle(), od = out.handle(), planes, H, W, Ho, Wo, ty, tx] {
                 for (int64_t p = 0; p < planes; ++p) {
                   T* gx = xd->grad.data() + p * H * W;
                   const T* go = od->grad.data() + p * Ho * Wo;
                   for (int y = 0; y < Ho; ++y) {
                     const LinearTap& a = ty[y];
                     for (int x2 = 0; x2 < Wo; ++x2) {
                       const LinearTap& b = tx[x2];
                       const T g = go[static_cast<int64_t>(y) * Wo + x2];
                       gx[static_cast<int64_t>(a.i0) * W + b.i0] += static_cast<T>(a.w0 * b.w0) * g;
                       gx[static_cast<int64_t>(a.i0) * W + b.i1] += static_cast<T>(a.w0 * b.w1) * g;
                       gx[static_cast<int64_t>(a.i1) * W + b.i0] += static_cast<T>(a.w1 * b.w0) * g;
                       gx[static_cast<int64_t>(a.i1) * W + b.i1] += static_cast<T>(a.w1 * b.w1) * g;
                     }
                   }
                 }
               });
  }
  return out;
}

// ---------------------------------------------------------------------------
// concat / slice
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> channel_concat(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("channel_concat: no inputs");
  for (const auto& t : parts) require_rank4(t, "channel_concat");
  const int N = parts[0].extent(0), H = parts[0].extent(2), W = parts[0].extent(3);
  int Ctot = 0;
  for (const auto& t : parts) {
    if (t.extent(0) != N || t.extent(2) != H || t.extent(3) != W)
      throw ShapeError("channel_concat: spatial/batch mismatch " +
                       shape_str(parts[0].shape()) + " vs " + shape_str(t.shape()));
    Ctot += t.extent(1);
  }
  Tensor<T> out({N, Ctot, H, W});
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    int64_t coff = 0;
    for (const auto& t : parts) {
      const int c = t.extent(1);
      std::memcpy(out.data() + (static_cast<int64_t>(n) * Ctot + coff) * hw,
                  t.data() + static_cast<int64_t>(n) * c * hw,
                  static_cast<size_t>(c) * hw * sizeof(T));
      coff += c;
    }
  }

  std::vector<const Tensor<T>*> ptrs;
  for (const auto& t : parts) ptrs.push_back(&t);
  Tape<T>* tp = nullptr;
  for (const auto* t : ptrs) {
    if (!t->on_tape()) continue;
    if (!tp) tp = t->tape();
    else if (tp != t->tape())
      throw ShapeError("channel_concat: inputs from two different tapes");
  }
  if (tp) {
    std::vector<int> nodes;
    std::vector<std::shared_ptr<detail::TensorData<T>>> handles;
    for (const auto& t : parts) {
      handles.push_back(t.handle());
      if (t.on_tape()) nodes.push_back(t.node());
    }
    tp->record(std::move(nodes), out,
               [handles, od = out.handle(), N, Ctot, hw] {
                 for (int n = 0; n < N; ++n) {
                   int64_t coff = 0;
                   for (const auto& h : handles) {
                     const int c = h->shape[1];
                     if (h->tape) {
                       const T* go =
                           od->grad.data() + (static_cast<int64_t>(n) * Ctot + coff) * hw;
                       T* gi = h->grad.data() + static_cast<int64_t>(n) * c * hw;
                       for (int64_t i = 0; i < c * hw; ++i) gi[i] += go[i];
                     }
                     coff += c;
                   }
                 }
               });
  }
  return out;
}

template <class T>
Tensor<T> channel_concat(const Tensor<T>& a, const Tensor<T>& b) {
  const Tensor<T> parts[2] = {a, b};
  return channel_concat(std::span<const Tensor<T>>(parts, 2));
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  require_rank4(x, "slice_channels");
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (c0 < 0 || c1 > C || c0 > c1)
    throw ShapeError("slice_channels: range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") out of " + std::to_string(C));
  const int Cs = c1 - c0;
  Tensor<T> out({N, Cs, H, W});
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int n = 0; n < N; ++n)
    std::memcpy(out.data() + static_cast<int64_t>(n) * Cs * hw,
                x.data() + (static_cast<int64_t>(n) * C + c0) * hw,
                static_cast<size_t>(Cs) * hw * sizeof(T));
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out,
               [xd = x.handle(), od = out.handle(), N, C, Cs, c0, hw] {
                 for (int n = 0; n < N; ++n) {
                   T* gx = xd->grad.data() + (static_cast<int64_t>(n) * C + c0) * hw;
                   const T* go = od->grad.data() + static_cast<int64_t>(n) * Cs * hw;
                   for (int64_t i = 0; i < Cs * hw; ++i) gx[i] += go[i];
                 }
               });
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel_softmax
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> channel_softmax(const Tensor<T>& x) {
  require_rank4(x, "channel_softmax");
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (C < 2) throw ShapeError("channel_softmax: need at least 2 channels, got " +
                              std::to_string(C));
  Tensor<T> out(x.shape());
  const int64_t hw = static_cast<int64_t>(H) * W;
  const T* xv = x.data();
  T* ov = out.data();
  for (int n = 0; n < N; ++n) {
    const T* xn = xv + static_cast<int64_t>(n) * C * hw;
    T* on = ov + static_cast<int64_t>(n) * C * hw;
    for (int64_t i = 0; i < hw; ++i) {
      T m = xn[i];
      for (int c = 1; c < C; ++c) m = std::max(m, xn[c * hw + i]);
      T s = T(0);
      for (int c = 0; c < C; ++c) {
        const T e = std::exp(xn[c * hw + i] - m);
        on[c * hw + i] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (int c = 0; c < C; ++c) on[c * hw + i] *= inv;
    }
  }
  if (Tape<T>* tp = common_tape<T>({&x})) {
    tp->record(nodes_of<T>({&x}), out,
               [xd = x.handle(), od = out.handle(), N, C, hw] {
                 for (int n = 0; n < N; ++n) {
                   const T* p = od->values.data() + static_cast<int64_t>(n) * C * hw;
                   const T* g = od->grad.data() + static_cast<int64_t>(n) * C * hw;
                   T* gx = xd->grad.data() + static_cast<int64_t>(n) * C * hw;
                   for (int64_t i = 0; i < hw; ++i) {
                     T dot = T(0);
                     for (int c = 0; c < C; ++c) dot += g[c * hw + i] * p[c * hw + i];
                     for (int c = 0; c < C; ++c)
                       gx[c * hw + i] += p[c * hw + i] * (g[c * hw + i] - dot);
                   }
                 }
               });
  }
  return out;
}

// ---------------------------------------------------------------------------
// correlation2d
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> correlation2d(const Tensor<T>& a, const Tensor<T>& b, int max_disp) {
  require_rank4(a, "correlation2d");
  require_rank4(b, "correlation2d");
  require_same_shape(a, b, "correlation2d");
  if (max_disp < 0) throw ShapeError("correlation2d: max_disp must be >= 0");
  const int N = a.extent(0), C = a.extent(1), H = a.extent(2), W = a.extent(3);
  const int D = max_disp, S = 2 * D + 1;
  Tensor<T> out({N, S * S, H, W});
  const T inv_c = T(1) / static_cast<T>(C);
  const int64_t hw = static_cast<int64_t>(H) * W;
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int n = 0; n < N; ++n) {
    const T* an = av + static_cast<int64_t>(n) * C * hw;
    const T* bn = bv + static_cast<int64_t>(n) * C * hw;
    T* on = ov + static_cast<int64_t>(n) * S * S * hw;
    for (int dy = -D; dy <= D; ++dy) {
      for (int dx = -D; dx <= D; ++dx) {
        T* plane = on + static_cast<int64_t>((dy + D) * S + (dx + D)) * hw;
        for (int y = 0; y < H; ++y) {
          const int y2 = y + dy;
          T* orow = plane + static_cast<int64_t>(y) * W;
          if (y2 < 0 || y2 >= H) {
            std::fill(orow, orow + W, T(0));
            continue;
          }
          for (int x = 0; x < W; ++x) {
            const int x2 = x + dx;
            if (x2 < 0 || x2 >= W) {
              orow[x] = T(0);
              continue;
            }
            T acc = T(0);
            for (int c = 0; c < C; ++c)
              acc += an[c * hw + y * W + x] * bn[c * hw + y2 * W + x2];
            orow[x] = acc * inv_c;
          }
        }
      }
    }
  }
  if (Tape<T>* tp = common_tape<T>({&a, &b})) {
    tp->record(nodes_of<T>({&a, &b}), out,
               [ad = a.handle(), bd = b.handle(), od = out.handle(), N, C, H, W,
                D, S, hw, inv_c] {
                 for (int n = 0; n < N; ++n) {
                   const T* an = ad->values.data() + static_cast<int64_t>(n) * C * hw;
                   const T* bn = bd->values.data() + static_cast<int64_t>(n) * C * hw;
                   const T* gn = od->grad.data() + static_cast<int64_t>(n) * S * S * hw;
                   T* ga = ad->tape ? ad->grad.data() + static_cast<int64_t>(n) * C * hw : nullptr;
                   T* gb = bd->tape ? bd->grad.data() + static_cast<int64_t>(n) * C * hw : nullptr;
                   for (int dy = -D; dy <= D; ++dy) {
                     for (int dx = -D; dx <= D; ++dx) {
                       const T* gplane =
                           gn + static_cast<int64_t>((dy + D) * S + (dx + D)) * hw;
                       for (int y = 0; y < H; ++y) {
                         const int y2 = y + dy;
                         if (y2 < 0 || y2 >= H) continue;
                         for (int x = 0; x < W; ++x) {
                           const int x2 = x + dx;
                           if (x2 < 0 || x2 >= W) continue;
                           const T g = gplane[y * W + x] * inv_c;
                           if (g == T(0)) continue;
                           for (int c = 0; c < C; ++c) {
                             if (ga) ga[c * hw + y * W + x] += g * bn[c * hw + y2 * W + x2];
                             if (gb) gb[c * hw + y2 * W + x2] += g * an[c * hw + y * W + x];
                           }
                         }
                       }
                     }
                   }
                 }
               });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch_norm2d
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool training, T momentum, T eps) {
  require_rank4(x, "batch_norm2d");
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw ShapeError("batch_norm2d: parameter length mismatch for C=" +
                     std::to_string(C));
  const int64_t hw = static_cast<int64_t>(H) * W;
  const int64_t cnt = static_cast<int64_t>(N) * hw;
  Tensor<T> out(x.shape());

  std::vector<T> mean(C), invstd(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      T m = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = x.data() + (static_cast<int64_t>(n) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) m += p[i];
      }
      m /= static_cast<T>(cnt);
      T v = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = x.data() + (static_cast<int64_t>(n) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const T d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<T>(cnt);
      mean[c] = m;
      invstd[c] = T(1) / std::sqrt(v + eps);
      running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * m;
      running_var.data()[c] = (T(1) - momentum) * running_var.data()[c] + momentum * v;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      invstd[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }

  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* p = x.data() + (static_cast<int64_t>(n) * C + c) * hw;
      T* o = out.data() + (static_cast<int64_t>(n) * C + c) * hw;
      const T g = gamma.data()[c], bta = beta.data()[c], m = mean[c], is = invstd[c];
      for (int64_t i = 0; i < hw; ++i) o[i] = (p[i] - m) * is * g + bta;
    }
  }

  if (Tape<T>* tp = common_tape<T>({&x, &gamma, &beta})) {
    tp->record(
        nodes_of<T>({&x, &gamma, &beta}), out,
        [xd = x.handle(), gd = gamma.handle(), btd = beta.handle(),
         od = out.handle(), mean, invstd, training, N, C, hw, cnt] {
          for (int c = 0; c < C; ++c) {
            const T m = mean[c], is = invstd[c], gam = gd->values[c];
            T sum_g = T(0), sum_gx = T(0);
            for (int n = 0; n < N; ++n) {
              const int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
              const T* go = od->grad.data() + off;
              const T* xv = xd->values.data() + off;
              for (int64_t i = 0; i < hw; ++i) {
                sum_g += go[i];
                sum_gx += go[i] * (xv[i] - m) * is;
              }
            }
            if (gd->tape) gd->grad[c] += sum_gx;
            if (btd->tape) btd->grad[c] += sum_g;
            if (xd->tape) {
              const T mg = sum_g / static_cast<T>(cnt);
              const T mgx = sum_gx / static_cast<T>(cnt);
              for (int n = 0; n < N; ++n) {
                const int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
                const T* go = od->grad.data() + off;
                const T* xv = xd->values.data() + off;
                T* gx = xd->grad.data() + off;
                if (training) {
                  for (int64_t i = 0; i < hw; ++i) {
                    const T xhat = (xv[i] - m) * is;
                    gx[i] += gam * is * (go[i] - mg - xhat * mgx);
                  }
                } else {
                  for (int64_t i = 0; i < hw; ++i) gx[i] += gam * is * go[i];
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> tensor_from_masks(std::span<const Mask> ms) {
  if (ms.empty()) throw ShapeError("tensor_from_masks: no masks");
  const int H = ms[0].h, W = ms[0].w;
  Tensor<T> out({static_cast<int>(ms.size()), 1, H, W});
  T* o = out.data();
  for (size_t n = 0; n < ms.size(); ++n) {
    const Mask& m = ms[n];
    if (m.h != H || m.w != W)
      throw ShapeError("tensor_from_masks: mask sizes differ");
    for (size_t i = 0; i < m.v.size(); ++i) {
      const uint8_t b = m.v[i];
      if (b > 1)
        throw DataError("tensor_from_masks: non-binary mask value " +
                        std::to_string(int(b)) + " at index " + std::to_string(i));
      *o++ = static_cast<T>(b);
    }
  }
  return out;
}

template <class T>
Tensor<T> one_hot_labels(std::span<const LabelMap> ls, int K) {
  if (ls.empty()) throw ShapeError("one_hot_labels: no label maps");
  const int H = ls[0].h, W = ls[0].w;
  Tensor<T> out({static_cast<int>(ls.size()), K, H, W});
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (size_t n = 0; n < ls.size(); ++n) {
    const LabelMap& l = ls[n];
    if (l.h != H || l.w != W)
      throw ShapeError("one_hot_labels: label map sizes differ");
    T* base = out.data() + static_cast<int64_t>(n) * K * hw;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const int cls = l.at(y, x);
        if (cls >= K)
          throw DataError("one_hot_labels: class " + std::to_string(cls) +
                          " >= K=" + std::to_string(K) + " at pixel (n=" +
                          std::to_string(n) + ", y=" + std::to_string(y) +
                          ", x=" + std::to_string(x) + ")");
        base[static_cast<int64_t>(cls) * hw + y * W + x] = T(1);
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack: no tensors");
  const Shape& s = items[0].shape();
  Shape out_shape;
  out_shape.push_back(static_cast<int>(items.size()));
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor<T> out(out_shape);
  const int64_t per = items[0].numel();
  for (size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != s)
      throw ShapeError("stack: shape mismatch " + shape_str(s) + " vs " +
                       shape_str(items[i].shape()));
    std::memcpy(out.data() + static_cast<int64_t>(i) * per, items[i].data(),
                static_cast<size_t>(per) * sizeof(T));
  }
  return out;
}

namespace {
constexpr double kProbClampLo = 1e-7;
}

template <class T>
Tensor<T> bce_change_loss(const Tensor<T>& logits, std::span<const Mask> targets,
                          bool mean_reduce) {
  require_rank4(logits, "bce_change_loss");
  if (logits.extent(1) != 2)
    throw ShapeError("bce_change_loss: expected 2 logit channels, got " +
                     std::to_string(logits.extent(1)));
  if (static_cast<size_t>(logits.extent(0)) != targets.size())
    throw ShapeError("bce_change_loss: batch " + std::to_string(logits.extent(0)) +
                     " vs " + std::to_string(targets.size()) + " masks");
  for (const Mask& m : targets)
    if (m.h != logits.extent(2) || m.w != logits.extent(3))
      throw ShapeError("bce_change_loss: target size " + shape_str({m.h, m.w}) +
                       " vs logits " + shape_str(logits.shape()));
  const T lo = static_cast<T>(kProbClampLo);
  const T hi = T(1) - static_cast<T>(kProbClampLo);
  Tensor<T> t = tensor_from_masks<T>(targets);

  auto p = channel_softmax(logits);
  auto pc = slice_channels(p, 1, 2);
  auto pos = mul(t, log_op(clamp(pc, lo, hi)));
  auto one_minus_pc = add_scalar(scale(pc, T(-1)), T(1));
  auto one_minus_t = add_scalar(scale(t, T(-1)), T(1));
  auto neg = mul(one_minus_t, log_op(clamp(one_minus_pc, lo, hi)));
  auto loss = scale(sum_all(add(pos, neg)), T(-1));
  if (mean_reduce) loss = scale(loss, T(1) / static_cast<T>(t.numel()));
  return loss;
}

template <class T>
Tensor<T> bce_change_loss(const Tensor<T>& logits, const Mask& target,
                          bool mean_reduce) {
  return bce_change_loss(logits, std::span<const Mask>(&target, 1), mean_reduce);
}

template <class T>
Tensor<T> split_semantic_loss(const Tensor<T>& logits,
                              std::span<const LabelMap> targets1,
                              std::span<const LabelMap> targets2,
                              bool mean_reduce) {
  require_rank4(logits, "split_semantic_loss");
  const int C = logits.extent(1);
  if (C % 2 != 0)
    throw ShapeError("split_semantic_loss: logit channels must be even, got " +
                     std::to_string(C));
  const int K = C / 2;
  if (static_cast<size_t>(logits.extent(0)) != targets1.size() ||
      targets1.size() != targets2.size())
    throw ShapeError("split_semantic_loss: batch size mismatch");
  for (auto targets : {targets1, targets2})
    for (const LabelMap& l : targets)
      if (l.h != logits.extent(2) || l.w != logits.extent(3))
        throw ShapeError("split_semantic_loss: target size " +
                         shape_str({l.h, l.w}) + " vs logits " +
                         shape_str(logits.shape()));
  const T lo = static_cast<T>(kProbClampLo);
  const T hi = T(1) - static_cast<T>(kProbClampLo);
  Tensor<T> t1 = one_hot_labels<T>(targets1, K);
  Tensor<T> t2 = one_hot_labels<T>(targets2, K);

  auto p1 = channel_softmax(slice_channels(logits, 0, K));
  auto p2 = channel_softmax(slice_channels(logits, K, 2 * K));
  auto s1 = mul(t1, log_op(clamp(p1, lo, hi)));
  auto s2 = mul(t2, log_op(clamp(p2, lo, hi)));
  auto loss = scale(sum_all(add(s1, s2)), T(-1));
  if (mean_reduce)
    loss = scale(loss, T(1) / static_cast<T>(targets1.size() * targets1[0].size()));
  return loss;
}

template <class T>
Tensor<T> split_semantic_loss(const Tensor<T>& logits, const LabelMap& t1,
                              const LabelMap& t2, bool mean_reduce) {
  return split_semantic_loss(logits, std::span<const LabelMap>(&t1, 1),
                             std::span<const LabelMap>(&t2, 1), mean_reduce);
}

// ---------------------------------------------------------------------------

#define SSCD_INSTANTIATE_OPS(T)                                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> scale(const Tensor<T>&, T);                               \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                          \
  template Tensor<T> log_op(const Tensor<T>&);                                 \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                            \
  template Tensor<T> relu(const Tensor<T>&);                                   \
  template Tensor<T> sum_all(const Tensor<T>&);                                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,                \
                            const Tensor<T>&, int, int);                       \
  template Tensor<T> max_pool2d(const Tensor<T>&, int, int);                   \
  template Tensor<T> upsample2x(const Tensor<T>&, UpsampleMode);               \
  template Tensor<T> channel_concat(const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> channel_concat(std::span<const Tensor<T>>);               \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);               \
  template Tensor<T> channel_softmax(const Tensor<T>&);                        \
  template Tensor<T> correlation2d(const Tensor<T>&, const Tensor<T>&, int);   \
  template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&,          \
                                  const Tensor<T>&, Tensor<T>&, Tensor<T>&,    \
                                  bool, T, T);                                 \
  template Tensor<T> bce_change_loss(const Tensor<T>&, std::span<const Mask>,  \
                                     bool);                                    \
  template Tensor<T> bce_change_loss(const Tensor<T>&, const Mask&, bool);     \
  template Tensor<T> split_semantic_loss(const Tensor<T>&,                     \
                                         std::span<const LabelMap>,            \
                                         std::span<const LabelMap>, bool);     \
  template Tensor<T> split_semantic_loss(const Tensor<T>&, const LabelMap&,    \
                                         const LabelMap&, bool);               \
  template Tensor<T> tensor_from_masks(std::span<const Mask>);                 \
  template Tensor<T> one_hot_labels(std::span<const LabelMap>, int);           \
  template Tensor<T> stack(std::span<const Tensor<T>>);

SSCD_INSTANTIATE_OPS(float)
SSCD_INSTANTIATE_OPS(double)
#undef SSCD_INSTANTIATE_OPS

}  // namespace sscd
