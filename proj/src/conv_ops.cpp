#include <Eigen/Dense>
#include <algorithm>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "eyepurify/tensor_ops.hpp"

namespace eyepurify {

namespace {

template <typename T>
using Node = typename Tensor<T>::Node;

template <typename T>
using RowMajorM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// One GEMM-backed correlation kernel powers conv2d forward, both
// grad-input passes, and conv_transpose2d forward. The source may be read
// through an input-dilated view (dil > 1 inserts dil-1 virtual zeros
// between samples), and the output extent is explicit because the
// grad-input passes need target sizes the closed-form formula cannot
// always reproduce.
struct GemmGeom {
    long src_ch;
    long src_h, src_w;
    long kh, kw;
    long stride;
    long pad_h, pad_w;
    long dil;
    long out_h, out_w;
};

// Fills col (row-major [src_ch*kh*kw, len]) with patches for output
// positions [pos0, pos0+len).
template <typename T>
void im2col_chunk(const T* src, const GemmGeom& g, long pos0, long len, T* col) {
    long krows = g.kh * g.kw;
    for (long s = 0; s < g.src_ch; ++s) {
        const T* plane = src + s * g.src_h * g.src_w;
        for (long ki = 0; ki < g.kh; ++ki) {
            for (long kj = 0; kj < g.kw; ++kj) {
                T* row = col + (s * krows + ki * g.kw + kj) * len;
                if (g.dil == 1 && g.stride == 1) {
                    // Contiguous row segments; copy with zero borders.
                    long j = 0;
                    while (j < len) {
                        long pos = pos0 + j;
                        long oy = pos / g.out_w;
                        long ox = pos % g.out_w;
                        long seg = std::min(len - j, g.out_w - ox);
                        long vy = oy - g.pad_h + ki;
                        if (vy < 0 || vy >= g.src_h) {
                            std::fill(row + j, row + j + seg, T(0));
                        } else {
                            const T* srow = plane + vy * g.src_w;
                            for (long t = 0; t < seg; ++t) {
                                long vx = ox + t - g.pad_w + kj;
                                row[j + t] = (vx >= 0 && vx < g.src_w) ? srow[vx] : T(0);
                            }
                        }
                        j += seg;
                    }
                } else {
                    for (long j = 0; j < len; ++j) {
                        long pos = pos0 + j;
                        long oy = pos / g.out_w;
                        long ox = pos % g.out_w;
                        long vy = oy * g.stride - g.pad_h + ki;
                        long vx = ox * g.stride - g.pad_w + kj;
                        T v = T(0);
                        if (vy >= 0 && vx >= 0 && vy % g.dil == 0 && vx % g.dil == 0) {
                            long iy = vy / g.dil;
                            long ix = vx / g.dil;
                            if (iy < g.src_h && ix < g.src_w) v = plane[iy * g.src_w + ix];
                        }
                        row[j] = v;
                    }
                }
            }
        }
    }
}

long chunk_cols_for(long krows) {
    // Keep the col scratch near 8 MB.
    long c = 2'000'000 / std::max<long>(1, krows);
    return std::clamp<long>(c, 64, 4096);
}

// out[r, pos] = sum_k Wm[r, k] * patch[k, pos]; out is [rows, out_h*out_w].
template <typename T>
void conv_gemm(const T* Wm, long rows, const T* src, const GemmGeom& g, T* out) {
    long krows = g.src_ch * g.kh * g.kw;
    long out_hw = g.out_h * g.out_w;
    long chunk = chunk_cols_for(krows);
    Eigen::Map<const RowMajorM<T>> W(Wm, rows, krows);
    parallel_for(0, out_hw, chunk, [&](long lo, long hi) {
        long len = hi - lo;
        std::vector<T> col(static_cast<size_t>(krows * len));
        im2col_chunk(src, g, lo, len, col.data());
        Eigen::Map<const RowMajorM<T>> colm(col.data(), krows, len);
        Eigen::Map<RowMajorM<T>, 0, Eigen::OuterStride<>> outb(
            out + lo, rows, len, Eigen::OuterStride<>(out_hw));
        outb.noalias() = W * colm;
    });
}

// dW[r, s*kh*kw + k] += sum_pos a[r, pos] * patch_b[s*kh*kw + k, pos],
// where patches of b are taken at a's positions with (stride, pad).
// Chunks accumulate sequentially in a fixed order.
template <typename T>
void conv_gemm_weight(const T* a, long rows, long a_h, long a_w, const T* b, long s_ch,
                      long b_h, long b_w, long kh, long kw, long stride, long pad,
                      T* dW) {
    GemmGeom g{s_ch, b_h, b_w, kh, kw, stride, pad, pad, 1, a_h, a_w};
    long krows = s_ch * kh * kw;
    long a_hw = a_h * a_w;
    long chunk = chunk_cols_for(krows);
    Eigen::Map<RowMajorM<T>> dWm(dW, rows, krows);
    std::vector<T> col;
    for (long lo = 0; lo < a_hw; lo += chunk) {
        long len = std::min(chunk, a_hw - lo);
        col.resize(static_cast<size_t>(krows * len));
        im2col_chunk(b, g, lo, len, col.data());
        Eigen::Map<const RowMajorM<T>> colm(col.data(), krows, len);
        Eigen::Map<const RowMajorM<T>, 0, Eigen::OuterStride<>> ab(
            a + lo, rows, len, Eigen::OuterStride<>(a_hw));
        dWm.noalias() += ab * colm.transpose();
    }
}

// Flipped, role-swapped weight matrix. For weight [D0, D1, kh, kw] the
// result is [D1, D0*kh*kw] with both kernel axes reversed:
// out[d1][d0, ki, kj] = w[d0, d1, kh-1-ki, kw-1-kj].
template <typename T>
std::vector<T> flip_swap_weight(const T* w, long d0, long d1, long kh, long kw) {
    std::vector<T> out(static_cast<size_t>(d0 * d1 * kh * kw));
    for (long i0 = 0; i0 < d0; ++i0) {
        for (long i1 = 0; i1 < d1; ++i1) {
            const T* src = w + (i0 * d1 + i1) * kh * kw;
            T* dst = out.data() + (i1 * d0 + i0) * kh * kw;
            for (long ki = 0; ki < kh; ++ki) {
                for (long kj = 0; kj < kw; ++kj) {
                    dst[ki * kw + kj] = src[(kh - 1 - ki) * kw + (kw - 1 - kj)];
                }
            }
        }
    }
    return out;
}

struct ConvShape {
    long n, c, h, w;      // input
    long k, kh, kw;       // weight
    long out_h, out_w;
    bool batched;
};

template <typename T>
ConvShape conv_shapes(const Tensor<T>& x, const Tensor<T>& weight, long stride, long pad,
                      bool transpose, const char* op) {
    ConvShape s{};
    s.batched = x.rank() == 4;
    if (x.rank() != 3 && x.rank() != 4) {
        throw std::invalid_argument(strf("%s: input must be rank 3 or 4, got %s", op,
                                         shape_str(x.shape()).c_str()));
    }
    s.n = s.batched ? x.dim(0) : 1;
    s.c = x.dim(s.batched ? 1 : 0);
    s.h = x.dim(s.batched ? 2 : 1);
    s.w = x.dim(s.batched ? 3 : 2);
    if (weight.rank() != 4) {
        throw std::invalid_argument(strf("%s: weight must be rank 4, got %s", op,
                                         shape_str(weight.shape()).c_str()));
    }
    long w_in = transpose ? weight.dim(0) : weight.dim(1);
    s.k = transpose ? weight.dim(1) : weight.dim(0);
    s.kh = weight.dim(2);
    s.kw = weight.dim(3);
    if (w_in != s.c) {
        throw std::invalid_argument(strf("%s: weight %s does not accept %ld input channels",
                                         op, shape_str(weight.shape()).c_str(), s.c));
    }
    if (stride < 1) throw std::invalid_argument(strf("%s: stride must be >= 1", op));
    if (pad < 0) throw std::invalid_argument(strf("%s: pad must be >= 0", op));
    if (transpose) {
        s.out_h = (s.h - 1) * stride - 2 * pad + s.kh;
        s.out_w = (s.w - 1) * stride - 2 * pad + s.kw;
    } else {
        s.out_h = s.h + 2 * pad < s.kh ? 0 : (s.h + 2 * pad - s.kh) / stride + 1;
        s.out_w = s.w + 2 * pad < s.kw ? 0 : (s.w + 2 * pad - s.kw) / stride + 1;
    }
    if (s.out_h < 1 || s.out_w < 1) {
        throw std::invalid_argument(
            strf("%s: input %ldx%ld with kernel %ldx%ld stride %ld pad %ld yields an empty output",
                 op, s.h, s.w, s.kh, s.kw, stride, pad));
    }
    return s;
}

inline std::vector<long> conv_out_shape(const ConvShape& s) {
    if (s.batched) return {s.n, s.k, s.out_h, s.out_w};
    return {s.k, s.out_h, s.out_w};
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, long stride, long pad) {
    ConvShape s = conv_shapes(x, weight, stride, pad, false, "conv2d");
    auto out = detail::make_op_node<T>(
        conv_out_shape(s), {x.node(), weight.node()}, [s, stride, pad](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            long in_sz = s.c * s.h * s.w;
            long out_sz = s.k * s.out_h * s.out_w;
            if (px.needs) {
                auto& g = detail::ensure_grad<T>(px);
                std::vector<T> wf = flip_swap_weight(pw.data.data(), s.k, s.c, s.kh, s.kw);
                GemmGeom gg{s.k, s.out_h, s.out_w, s.kh, s.kw, 1,
                            s.kh - 1 - pad, s.kw - 1 - pad, stride, s.h, s.w};
                std::vector<T> dx(static_cast<size_t>(in_sz));
                for (long b = 0; b < s.n; ++b) {
                    conv_gemm(wf.data(), s.c, self.grad.data() + b * out_sz, gg, dx.data());
                    T* gp = g.data() + b * in_sz;
                    for (long i = 0; i < in_sz; ++i) gp[i] += dx[static_cast<size_t>(i)];
                }
            }
            if (pw.needs) {
                auto& g = detail::ensure_grad<T>(pw);
                for (long b = 0; b < s.n; ++b) {
                    conv_gemm_weight(self.grad.data() + b * out_sz, s.k, s.out_h, s.out_w,
                                     px.data.data() + b * in_sz, s.c, s.h, s.w, s.kh, s.kw,
                                     stride, pad, g.data());
                }
            }
        });
    GemmGeom gg{s.c, s.h, s.w, s.kh, s.kw, stride, pad, pad, 1, s.out_h, s.out_w};
    long in_sz = s.c * s.h * s.w;
    long out_sz = s.k * s.out_h * s.out_w;
    for (long b = 0; b < s.n; ++b) {
        conv_gemm(weight.data().data(), s.k, x.data().data() + b * in_sz, gg,
                  out.raw_data().data() + b * out_sz);
    }
    return out;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, long stride,
                           long pad) {
    ConvShape s = conv_shapes(x, weight, stride, pad, true, "conv_transpose2d");
    auto out = detail::make_op_node<T>(
        conv_out_shape(s), {x.node(), weight.node()}, [s, stride, pad](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            long in_sz = s.c * s.h * s.w;
            long out_sz = s.k * s.out_h * s.out_w;
            if (px.needs) {
                auto& g = detail::ensure_grad<T>(px);
                // Plain correlation of dOut with the weight read as
                // [C, K*kh*kw]; no flip, stride/pad as in the forward.
                GemmGeom gg{s.k, s.out_h, s.out_w, s.kh, s.kw, stride, pad, pad, 1, s.h, s.w};
                std::vector<T> dx(static_cast<size_t>(in_sz));
                for (long b = 0; b < s.n; ++b) {
                    conv_gemm(pw.data.data(), s.c, self.grad.data() + b * out_sz, gg, dx.data());
                    T* gp = g.data() + b * in_sz;
                    for (long i = 0; i < in_sz; ++i) gp[i] += dx[static_cast<size_t>(i)];
                }
            }
            if (pw.needs) {
                auto& g = detail::ensure_grad<T>(pw);
                for (long b = 0; b < s.n; ++b) {
                    conv_gemm_weight(px.data.data() + b * in_sz, s.c, s.h, s.w,
                                     self.grad.data() + b * out_sz, s.k, s.out_h, s.out_w,
                                     s.kh, s.kw, stride, pad, g.data());
                }
            }
        });
    std::vector<T> wf = flip_swap_weight(weight.data().data(), s.c, s.k, s.kh, s.kw);
    GemmGeom gg{s.c, s.h, s.w, s.kh, s.kw, 1, s.kh - 1 - pad, s.kw - 1 - pad,
                stride, s.out_h, s.out_w};
    long in_sz = s.c * s.h * s.w;
    long out_sz = s.k * s.out_h * s.out_w;
    for (long b = 0; b < s.n; ++b) {
        conv_gemm(wf.data(), s.k, x.data().data() + b * in_sz, gg,
                  out.raw_data().data() + b * out_sz);
    }
    return out;
}

namespace {

inline uint64_t fnv1a(const unsigned char* bytes, size_t n) {
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

template <typename T>
Tensor<T> gram(const Tensor<T>& x) {
    if (x.rank() != 3) {
        throw std::invalid_argument(strf("gram: expected [C,H,W], got %s",
                                         shape_str(x.shape()).c_str()));
    }
    long c = x.dim(0), m = x.dim(1) * x.dim(2);
    const T* F = x.data().data();

    // Canonical spatial order: transpose to per-position rows, then sort
    // positions by row content (hash first, bytes as tie-break). Any
    // spatial permutation of x yields the same sorted buffer, so the
    // reduction below is bit-identical under permutation.
    std::vector<T> ft(static_cast<size_t>(m * c));
    for (long ch = 0; ch < c; ++ch) {
        const T* src = F + ch * m;
        for (long j = 0; j < m; ++j) ft[static_cast<size_t>(j * c + ch)] = src[j];
    }
    std::vector<uint64_t> hash(static_cast<size_t>(m));
    size_t row_bytes = static_cast<size_t>(c) * sizeof(T);
    for (long j = 0; j < m; ++j) {
        hash[static_cast<size_t>(j)] = fnv1a(
            reinterpret_cast<const unsigned char*>(ft.data() + j * c), row_bytes);
    }
    std::vector<long> order(static_cast<size_t>(m));
    std::iota(order.begin(), order.end(), 0L);
    std::sort(order.begin(), order.end(), [&](long a, long b) {
        if (hash[static_cast<size_t>(a)] != hash[static_cast<size_t>(b)]) {
            return hash[static_cast<size_t>(a)] < hash[static_cast<size_t>(b)];
        }
        return std::memcmp(ft.data() + a * c, ft.data() + b * c, row_bytes) < 0;
    });
    std::vector<T> fts(ft.size());
    for (long j = 0; j < m; ++j) {
        std::memcpy(fts.data() + j * c, ft.data() + order[static_cast<size_t>(j)] * c,
                    row_bytes);
    }

    auto out = detail::make_op_node<T>(
        {c, c}, {x.node()}, [c, m](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            auto& g = detail::ensure_grad<T>(p);
            // dF = (dG + dG^T) F; the permutation cancels, so the original
            // column order is used here.
            Eigen::Map<const RowMajorM<T>> dG(self.grad.data(), c, c);
            Eigen::Map<const RowMajorM<T>> Fm(p.data.data(), c, m);
            Eigen::Map<RowMajorM<T>> dFm(g.data(), c, m);
            dFm.noalias() += (dG + dG.transpose()) * Fm;
        });
    Eigen::Map<const RowMajorM<T>> fm(fts.data(), m, c);
    Eigen::Map<RowMajorM<T>> gm(out.raw_data().data(), c, c);
    gm.noalias() = fm.transpose() * fm;
    return out;
}

#define EYEPURIFY_INSTANTIATE_CONV(T)                                                  \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, long, long);      \
    template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&, long,   \
                                           long);                                      \
    template Tensor<T> gram<T>(const Tensor<T>&);

EYEPURIFY_INSTANTIATE_CONV(float)
EYEPURIFY_INSTANTIATE_CONV(double)
#undef EYEPURIFY_INSTANTIATE_CONV

}  // namespace eyepurify
