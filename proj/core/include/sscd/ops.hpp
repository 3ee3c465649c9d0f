#pragma once

#include <span>

#include "sscd/tensor.hpp"
#include "sscd/types.hpp"

namespace sscd {

enum class UpsampleMode { kNearest, kBilinear };

// --- elementwise / reduction primitives ---

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& x, T c);
template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c);
template <class T>
Tensor<T> log_op(const Tensor<T>& x);
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);
template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> sum_all(const Tensor<T>& x);  // scalar

// --- image-layer primitives (NCHW) ---

// Direct convolution via im2col + matmul. Output H' = (H+2p-kh)/s + 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int pad = 0);

// Windowed max; backward routes each window's grad to the first-occurring max.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k, int stride);

// Doubles both spatial extents. Bilinear uses the align-corners-false
// convention (source coordinate (i+0.5)/2 - 0.5, edge-clamped).
template <class T>
Tensor<T> upsample2x(const Tensor<T>& x, UpsampleMode mode);

template <class T>
Tensor<T> channel_concat(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> channel_concat(std::span<const Tensor<T>> parts);

// Copies channels [c0, c1) into a new tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1);

// Per-pixel softmax over the channel axis, max-subtracted for stability.
template <class T>
Tensor<T> channel_softmax(const Tensor<T>& x);

// Cost volume over square displacements dy,dx in [-max_disp, max_disp]:
// out[(dy+D)*(2D+1)+(dx+D)](y,x) = mean_c a[c](y,x) * b[c](y+dy, x+dx),
// with out-of-bounds samples of b treated as zero.
template <class T>
Tensor<T> correlation2d(const Tensor<T>& a, const Tensor<T>& b, int max_disp);

// Batch normalization over (N,H,W) per channel. Training mode normalizes by
// batch statistics and folds them into the running buffers; eval mode uses
// the running buffers. Running buffers stay off the tape.
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool training,
                       T momentum = T(0.1), T eps = T(1e-5));

// --- loss heads ---

// Binary change loss: softmax over the 2 logit channels, channel 1 is the
// change probability; -sum[t ln p + (1-t) ln(1-p)] over every pixel of the
// batch. Probabilities are clamped to [1e-7, 1-1e-7] before the log.
template <class T>
Tensor<T> bce_change_loss(const Tensor<T>& logits, std::span<const Mask> targets,
                          bool mean_reduce = false);
template <class T>
Tensor<T> bce_change_loss(const Tensor<T>& logits, const Mask& target,
                          bool mean_reduce = false);

// Semantic change loss: the 2K logit channels split into two K-channel
// halves, each softmaxed per pixel and scored against its one-hot target;
// -sum over pixels, classes and both halves.
template <class T>
Tensor<T> split_semantic_loss(const Tensor<T>& logits,
                              std::span<const LabelMap> targets1,
                              std::span<const LabelMap> targets2,
                              bool mean_reduce = false);
template <class T>
Tensor<T> split_semantic_loss(const Tensor<T>& logits, const LabelMap& t1,
                              const LabelMap& t2, bool mean_reduce = false);

// --- target adapters ---

// Masks stacked to [N,1,H,W]; rejects values other than 0/1.
template <class T>
Tensor<T> tensor_from_masks(std::span<const Mask> ms);

// One-hot [N,K,H,W]; rejects any class index >= K, naming the pixel.
template <class T>
Tensor<T> one_hot_labels(std::span<const LabelMap> ls, int K);

// Stacks same-shape tensors along a new leading axis.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items);

#define SSCD_DECLARE_OPS(T)                                                     \
  extern template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);            \
  extern template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);            \
  extern template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);            \
  extern template Tensor<T> scale(const Tensor<T>&, T);                         \
  extern template Tensor<T> add_scalar(const Tensor<T>&, T);                    \
  extern template Tensor<T> log_op(const Tensor<T>&);                           \
  extern template Tensor<T> clamp(const Tensor<T>&, T, T);                      \
  extern template Tensor<T> relu(const Tensor<T>&);                             \
  extern template Tensor<T> sum_all(const Tensor<T>&);                          \
  extern template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,          \
                                   const Tensor<T>&, int, int);                 \
  extern template Tensor<T> max_pool2d(const Tensor<T>&, int, int);             \
  extern template Tensor<T> upsample2x(const Tensor<T>&, UpsampleMode);         \
  extern template Tensor<T> channel_concat(const Tensor<T>&, const Tensor<T>&); \
  extern template Tensor<T> channel_concat(std::span<const Tensor<T>>);         \
  extern template Tensor<T> slice_channels(const Tensor<T>&, int, int);         \
  extern template Tensor<T> channel_softmax(const Tensor<T>&);                  \
  extern template Tensor<T> correlation2d(const Tensor<T>&, const Tensor<T>&,   \
                                          int);                                 \
  extern template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&,    \
                                         const Tensor<T>&, Tensor<T>&,          \
                                         Tensor<T>&, bool, T, T);               \
  extern template Tensor<T> bce_change_loss(const Tensor<T>&,                   \
                                            std::span<const Mask>, bool);       \
  extern template Tensor<T> bce_change_loss(const Tensor<T>&, const Mask&,      \
                                            bool);                              \
  extern template Tensor<T> split_semantic_loss(                                \
      const Tensor<T>&, std::span<const LabelMap>, std::span<const LabelMap>,   \
      bool);                                                                    \
  extern template Tensor<T> split_semantic_loss(const Tensor<T>&,               \
                                                const LabelMap&,                \
                                                const LabelMap&, bool);         \
  extern template Tensor<T> tensor_from_masks(std::span<const Mask>);           \
  extern template Tensor<T> one_hot_labels(std::span<const LabelMap>, int);     \
  extern template Tensor<T> stack(std::span<const Tensor<T>>);

SSCD_DECLARE_OPS(float)
SSCD_DECLARE_OPS(double)
#undef SSCD_DECLARE_OPS

}  // namespace sscd
