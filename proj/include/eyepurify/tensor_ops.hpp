#pragma once

#include "eyepurify/tensor.hpp"

namespace eyepurify {

// All ops allocate a fresh output node and never mutate inputs. Shapes are
// validated eagerly; mismatches throw std::invalid_argument. Backward
// closures accumulate additively, so fan-out (using one tensor in several
// ops) sums gradients over all paths.

// ---- elementwise / reduction ----

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, double s);

// Pairwise-tree sum over all elements; scalar result.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

// Fused sum of squared differences: sum((a - b)^2). Equivalent to
// sum(mul(sub,sub)) but with one saved intermediate; this is the workhorse
// of every distance term.
template <typename T> Tensor<T> l2_diff_sum(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> relu(const Tensor<T>& a);

// 127.5 * (tanh(x) + 1): smooth map onto [0, 255].
template <typename T> Tensor<T> scaled_tanh(const Tensor<T>& a);

// Inverted dropout: keeps an element with probability 1-p and scales it by
// 1/(1-p). Draws exactly numel() uniforms from rng when p > 0 (row-major
// element order), none when p == 0. Callers bypass it entirely in eval mode.
template <typename T> Tensor<T> dropout(const Tensor<T>& a, double p, SeededRng& rng);

// ---- structural ----

// x: [N,C,H,W] -> [C,H,W] view-copy of sample n.
template <typename T> Tensor<T> slice_batch(const Tensor<T>& x, long n);

// Spatial crop of the trailing two dims (rank 3 or 4).
template <typename T> Tensor<T> crop2d(const Tensor<T>& x, long top, long left,
                                       long out_h, long out_w);

// Mirror padding without edge repetition; requires pad <= H-1, W-1.
template <typename T> Tensor<T> reflection_pad2d(const Tensor<T>& x, long pad);

// x: [C,H,W] times a constant [H,W] mask broadcast over channels. The mask
// is data, not a differentiable input.
template <typename T> Tensor<T> mask_mul(const Tensor<T>& x, const Tensor<T>& mask);

// Per-channel bias add; x rank 3 or 4 with channel dim C matching bias [C].
template <typename T> Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);

// ---- convolution / pooling / normalization ----

// x: [C,H,W] or [N,C,H,W]; weight: [K, C, kh, kw]. Output spatial dims
// floor((H + 2p - kh)/stride) + 1.
template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                                       long stride, long pad);

// x as above; weight: [C, K, kh, kw] (input-major). Output spatial dims
// (H-1)*stride - 2p + kh.
template <typename T> Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight,
                                                 long stride, long pad);

// 2x2 stride-2 max pooling, floor semantics; ties pick the first element in
// row-major patch order, which keeps backward deterministic.
template <typename T> Tensor<T> maxpool2d(const Tensor<T>& x);

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
};

// x: [N,C,H,W]. Training mode normalizes by batch statistics (biased
// variance) and updates running stats in place with unbiased variance;
// eval mode normalizes by the running stats as constants.
template <typename T> Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                                             const Tensor<T>& beta, BatchNormState<T>& state,
                                             bool training, double momentum = 0.1,
                                             double eps = 1e-5);

// ---- loss primitives ----

// x: [C,H,W] -> [C,C] Gram matrix F F^T over the flattened spatial axis.
// The spatial columns are reduced in a canonical content-sorted order, so
// the result is bit-identical under any spatial permutation of x.
template <typename T> Tensor<T> gram(const Tensor<T>& x);

// Anisotropic squared-difference total variation over the trailing two
// dims of a [C,H,W] tensor, summed over channels and normalized by pixel
// count.
template <typename T> Tensor<T> tv_loss(const Tensor<T>& x);

#define EYEPURIFY_EXTERN_OPS(T)                                                     \
    extern template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);           \
    extern template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);           \
    extern template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);           \
    extern template Tensor<T> scale<T>(const Tensor<T>&, double);                   \
    extern template Tensor<T> sum<T>(const Tensor<T>&);                             \
    extern template Tensor<T> mean<T>(const Tensor<T>&);                            \
    extern template Tensor<T> l2_diff_sum<T>(const Tensor<T>&, const Tensor<T>&);   \
    extern template Tensor<T> relu<T>(const Tensor<T>&);                            \
    extern template Tensor<T> scaled_tanh<T>(const Tensor<T>&);                     \
    extern template Tensor<T> dropout<T>(const Tensor<T>&, double, SeededRng&);     \
    extern template Tensor<T> slice_batch<T>(const Tensor<T>&, long);               \
    extern template Tensor<T> crop2d<T>(const Tensor<T>&, long, long, long, long);  \
    extern template Tensor<T> reflection_pad2d<T>(const Tensor<T>&, long);          \
    extern template Tensor<T> mask_mul<T>(const Tensor<T>&, const Tensor<T>&);      \
    extern template Tensor<T> add_channel_bias<T>(const Tensor<T>&, const Tensor<T>&); \
    extern template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, long, long); \
    extern template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&, long, long); \
    extern template Tensor<T> maxpool2d<T>(const Tensor<T>&);                       \
    extern template Tensor<T> batch_norm2d<T>(const Tensor<T>&, const Tensor<T>&,   \
                                              const Tensor<T>&, BatchNormState<T>&, \
                                              bool, double, double);                \
    extern template Tensor<T> gram<T>(const Tensor<T>&);                            \
    extern template Tensor<T> tv_loss<T>(const Tensor<T>&);

EYEPURIFY_EXTERN_OPS(float)
EYEPURIFY_EXTERN_OPS(double)
#undef EYEPURIFY_EXTERN_OPS

}  // namespace eyepurify
