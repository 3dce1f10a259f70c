#include "eyepurify/tensor_ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace eyepurify {

namespace {

template <typename T>
using Node = typename Tensor<T>::Node;

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(strf("%s: shape mismatch %s vs %s", op,
                                         shape_str(a.shape()).c_str(),
                                         shape_str(b.shape()).c_str()));
    }
}

// Channel/spatial split for rank-3 ([C,H,W]) and rank-4 ([N,C,H,W]) inputs.
struct Dims {
    long n, c, h, w;
};

template <typename T>
Dims split_dims(const Tensor<T>& x, const char* op) {
    if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
    if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
    throw std::invalid_argument(strf("%s: expected rank 3 or 4, got shape %s", op,
                                     shape_str(x.shape()).c_str()));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    auto out = detail::make_op_node<T>(
        a.shape(), {a.node(), b.node()}, [](Node<T>& self) {
            for (int pi = 0; pi < 2; ++pi) {
                auto& p = *self.parents[pi];
                if (!p.needs) continue;
                auto& g = detail::ensure_grad<T>(p);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.raw_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    auto out = detail::make_op_node<T>(
        a.shape(), {a.node(), b.node()}, [](Node<T>& self) {
            auto& pa = *self.parents[0];
            if (pa.needs) {
                auto& g = detail::ensure_grad<T>(pa);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            auto& pb = *self.parents[1];
            if (pb.needs) {
                auto& g = detail::ensure_grad<T>(pb);
                for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.raw_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    auto out = detail::make_op_node<T>(
        a.shape(), {a.node(), b.node()}, [](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.needs) {
                auto& g = detail::ensure_grad<T>(pa);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
            }
            if (pb.needs) {
                auto& g = detail::ensure_grad<T>(pb);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
            }
        });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.raw_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
    T ts = static_cast<T>(s);
    auto out = detail::make_op_node<T>(
        a.shape(), {a.node()}, [ts](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            auto& g = detail::ensure_grad<T>(p);
            for (size_t i = 0; i < g.size(); ++i) g[i] += ts * self.grad[i];
        });
    const auto& av = a.data();
    auto& ov = out.raw_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = ts * av[i];
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    auto out = detail::make_op_node<T>(
        {1}, {a.node()}, [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            T g0 = self.grad[0];
            auto& g = detail::ensure_grad<T>(p);
            for (size_t i = 0; i < g.size(); ++i) g[i] += g0;
        });
    out.raw_data()[0] = pairwise_sum(a.data());
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

template <typename T>
Tensor<T> l2_diff_sum(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "l2_diff_sum");
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<T> diff(av.size());
    for (size_t i = 0; i < diff.size(); ++i) diff[i] = av[i] - bv[i];
    std::vector<T> sq(diff.size());
    for (size_t i = 0; i < sq.size(); ++i) sq[i] = diff[i] * diff[i];
    T total = pairwise_sum(sq);
    auto out = detail::make_op_node<T>(
        {1}, {a.node(), b.node()}, [diff = std::move(diff)](Node<T>& self) {
            T g0 = self.grad[0];
            auto& pa = *self.parents[0];
            if (pa.needs) {
                auto& g = detail::ensure_grad<T>(pa);
                for (size_t i = 0; i < g.size(); ++i) g[i] += T(2) * g0 * diff[i];
            }
            auto& pb = *self.parents[1];
            if (pb.needs) {
                auto& g = detail::ensure_grad<T>(pb);
                for (size_t i = 0; i < g.size(); ++i) g[i] -= T(2) * g0 * diff[i];
            }
        });
    out.raw_data()[0] = total;
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    auto out = detail::make_op_node<T>(
        a.shape(), {a.node()}, [](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            auto& g = detail::ensure_grad<T>(p);
            // Subgradient 0 at exactly 0.
            for (size_t i = 0; i < g.size(); ++i) {
                if (p.data[i] > T(0)) g[i] += self.grad[i];
            }
        });
    const auto& av = a.data();
    auto& ov = out.raw_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
    return out;
}

template <typename T>
Tensor<T> scaled_tanh(const Tensor<T>& a) {
    const auto& av = a.data();
    std::vector<T> th(av.size());
    for (size_t i = 0; i < th.size(); ++i) th[i] = std::tanh(av[i]);
    auto out = detail::make_op_node<T>(
        a.shape(), {a.node()}, [th](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            auto& g = detail::ensure_grad<T>(p);
            for (size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * T(127.5) * (T(1) - th[i] * th[i]);
            }
        });
    auto& ov = out.raw_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = T(127.5) * (th[i] + T(1));
    return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, SeededRng& rng) {
    if (p < 0.0 || p >= 1.0) {
        throw std::invalid_argument(strf("dropout: p must be in [0,1), got %g", p));
    }
    if (p == 0.0) {
        // Identity; no draws, so the rng stream is untouched.
        auto out = detail::make_op_node<T>(
            a.shape(), {a.node()}, [](Node<T>& self) {
                auto& pr = *self.parents[0];
                if (!pr.needs) return;
                auto& g = detail::ensure_grad<T>(pr);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            });
        out.raw_data() = a.data();
        return out;
    }
    T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(a.data().size());
    for (size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.uniform() >= p ? keep_scale : T(0);
    }
    auto out = detail::make_op_node<T>(
        a.shape(), {a.node()}, [mask](Node<T>& self) {
            auto& pr = *self.parents[0];
            if (!pr.needs) return;
            auto& g = detail::ensure_grad<T>(pr);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
        });
    const auto& av = a.data();
    auto& ov = out.raw_data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * mask[i];
    return out;
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, long n) {
    if (x.rank() != 4) {
        throw std::invalid_argument(strf("slice_batch: expected rank 4, got %s",
                                         shape_str(x.shape()).c_str()));
    }
    if (n < 0 || n >= x.dim(0)) {
        throw std::invalid_argument(strf("slice_batch: index %ld out of range [0,%ld)",
                                         n, x.dim(0)));
    }
    long per = x.dim(1) * x.dim(2) * x.dim(3);
    long offset = n * per;
    auto out = detail::make_op_node<T>(
        {x.dim(1), x.dim(2), x.dim(3)}, {x.node()}, [offset](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            auto& g = detail::ensure_grad<T>(p);
            for (size_t i = 0; i < self.grad.size(); ++i) {
                g[static_cast<size_t>(offset) + i] += self.grad[i];
            }
        });
    const auto& xv = x.data();
    auto& ov = out.raw_data();
    std::copy(xv.begin() + offset, xv.begin() + offset + per, ov.begin());
    return out;
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, long top, long left, long out_h, long out_w) {
    Dims d = split_dims(x, "crop2d");
    if (top < 0 || left < 0 || out_h <= 0 || out_w <= 0 || top + out_h > d.h ||
        left + out_w > d.w) {
        throw std::invalid_argument(
            strf("crop2d: window (%ld,%ld,%ldx%ld) outside input %s", top, left, out_h,
                 out_w, shape_str(x.shape()).c_str()));
    }
    std::vector<long> out_shape = x.shape();
    out_shape[out_shape.size() - 2] = out_h;
    out_shape[out_shape.size() - 1] = out_w;
    long planes = d.n * d.c;
    long in_hw = d.h * d.w, out_hw = out_h * out_w;
    long in_w = d.w;
    auto out = detail::make_op_node<T>(
        out_shape, {x.node()},
        [planes, in_hw, out_hw, in_w, out_h, out_w, top, left](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            auto& g = detail::ensure_grad<T>(p);
            for (long pl = 0; pl < planes; ++pl) {
                const T* src = self.grad.data() + pl * out_hw;
                T* dst = g.data() + pl * in_hw + top * in_w + left;
                for (long y = 0; y < out_h; ++y) {
                    for (long xx = 0; xx < out_w; ++xx) dst[y * in_w + xx] += src[y * out_w + xx];
                }
            }
        });
    const T* src = x.data().data();
    T* dst = out.raw_data().data();
    for (long pl = 0; pl < planes; ++pl) {
        const T* s = src + pl * in_hw + top * in_w + left;
        T* o = dst + pl * out_hw;
        for (long y = 0; y < out_h; ++y) {
            std::copy(s + y * in_w, s + y * in_w + out_w, o + y * out_w);
        }
    }
    return out;
}

namespace {
inline long reflect_index(long i, long n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
}
}  // namespace

template <typename T>
Tensor<T> reflection_pad2d(const Tensor<T>& x, long pad) {
    Dims d = split_dims(x, "reflection_pad2d");
    if (pad < 0) throw std::invalid_argument("reflection_pad2d: negative pad");
    if (pad > d.h - 1 || pad > d.w - 1) {
        throw std::invalid_argument(
            strf("reflection_pad2d: pad %ld too large for input %s", pad,
                 shape_str(x.shape()).c_str()));
    }
    long oh = d.h + 2 * pad, ow = d.w + 2 * pad;
    std::vector<long> out_shape = x.shape();
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    long planes = d.n * d.c;
    long ih = d.h, iw = d.w;
    auto out = detail::make_op_node<T>(
        out_shape, {x.node()}, [planes, ih, iw, oh, ow, pad](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            auto& g = detail::ensure_grad<T>(p);
            for (long pl = 0; pl < planes; ++pl) {
                const T* src = self.grad.data() + pl * oh * ow;
                T* dst = g.data() + pl * ih * iw;
                for (long y = 0; y < oh; ++y) {
                    long sy = reflect_index(y - pad, ih);
                    for (long xx = 0; xx < ow; ++xx) {
                        dst[sy * iw + reflect_index(xx - pad, iw)] += src[y * ow + xx];
                    }
                }
            }
        });
    const T* src = x.data().data();
    T* dst = out.raw_data().data();
    for (long pl = 0; pl < planes; ++pl) {
        const T* s = src + pl * ih * iw;
        T* o = dst + pl * oh * ow;
        for (long y = 0; y < oh; ++y) {
            long sy = reflect_index(y - pad, ih);
            for (long xx = 0; xx < ow; ++xx) {
                o[y * ow + xx] = s[sy * iw + reflect_index(xx - pad, iw)];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> mask_mul(const Tensor<T>& x, const Tensor<T>& mask) {
    if (x.rank() != 3 || mask.rank() != 2 || mask.dim(0) != x.dim(1) ||
        mask.dim(1) != x.dim(2)) {
        throw std::invalid_argument(strf("mask_mul: incompatible shapes %s and %s",
                                         shape_str(x.shape()).c_str(),
                                         shape_str(mask.shape()).c_str()));
    }
    if (mask.needs_grad()) {
        throw std::invalid_argument("mask_mul: mask is constant data and must not need grad");
    }
    long c = x.dim(0), hw = x.dim(1) * x.dim(2);
    auto out = detail::make_op_node<T>(
        x.shape(), {x.node(), mask.node()}, [c, hw](Node<T>& self) {
            auto& px = *self.parents[0];
            if (!px.needs) return;
            const auto& mv = self.parents[1]->data;
            auto& g = detail::ensure_grad<T>(px);
            for (long ch = 0; ch < c; ++ch) {
                T* gp = g.data() + ch * hw;
                const T* sp = self.grad.data() + ch * hw;
                for (long i = 0; i < hw; ++i) gp[i] += sp[i] * mv[static_cast<size_t>(i)];
            }
        });
    const auto& xv = x.data();
    const auto& mv = mask.data();
    auto& ov = out.raw_data();
    for (long ch = 0; ch < c; ++ch) {
        const T* xp = xv.data() + ch * hw;
        T* op = ov.data() + ch * hw;
        for (long i = 0; i < hw; ++i) op[i] = xp[i] * mv[static_cast<size_t>(i)];
    }
    return out;
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    Dims d = split_dims(x, "add_channel_bias");
    if (bias.rank() != 1 || bias.dim(0) != d.c) {
        throw std::invalid_argument(strf("add_channel_bias: bias %s does not match channels %ld",
                                         shape_str(bias.shape()).c_str(), d.c));
    }
    long n = d.n, c = d.c, hw = d.h * d.w;
    auto out = detail::make_op_node<T>(
        x.shape(), {x.node(), bias.node()}, [n, c, hw](Node<T>& self) {
            auto& px = *self.parents[0];
            if (px.needs) {
                auto& g = detail::ensure_grad<T>(px);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            auto& pb = *self.parents[1];
            if (pb.needs) {
                auto& g = detail::ensure_grad<T>(pb);
                std::vector<T> slice(static_cast<size_t>(n * hw));
                for (long ch = 0; ch < c; ++ch) {
                    for (long b = 0; b < n; ++b) {
                        const T* sp = self.grad.data() + (b * c + ch) * hw;
                        std::copy(sp, sp + hw, slice.data() + b * hw);
                    }
                    g[static_cast<size_t>(ch)] += pairwise_sum(slice);
                }
            }
        });
    const auto& xv = x.data();
    const auto& bv = bias.data();
    auto& ov = out.raw_data();
    for (long b = 0; b < n; ++b) {
        for (long ch = 0; ch < c; ++ch) {
            const T* xp = xv.data() + (b * c + ch) * hw;
            T* op = ov.data() + (b * c + ch) * hw;
            T bc = bv[static_cast<size_t>(ch)];
            for (long i = 0; i < hw; ++i) op[i] = xp[i] + bc;
        }
    }
    return out;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
    Dims d = split_dims(x, "maxpool2d");
    if (d.h < 2 || d.w < 2) {
        throw std::invalid_argument(strf("maxpool2d: input %s smaller than the 2x2 window",
                                         shape_str(x.shape()).c_str()));
    }
    long oh = d.h / 2, ow = d.w / 2;
    std::vector<long> out_shape = x.shape();
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    long planes = d.n * d.c;
    long ih = d.h, iw = d.w;
    std::vector<long> argmax(static_cast<size_t>(planes * oh * ow));
    const T* src = x.data().data();
    std::vector<T> vals(argmax.size());
    for (long pl = 0; pl < planes; ++pl) {
        const T* s = src + pl * ih * iw;
        for (long y = 0; y < oh; ++y) {
            for (long xx = 0; xx < ow; ++xx) {
                long base = 2 * y * iw + 2 * xx;
                long best = base;
                T bv = s[base];
                // Row-major patch order; strict > keeps the first max on ties.
                if (s[base + 1] > bv) { bv = s[base + 1]; best = base + 1; }
                if (s[base + iw] > bv) { bv = s[base + iw]; best = base + iw; }
                if (s[base + iw + 1] > bv) { bv = s[base + iw + 1]; best = base + iw + 1; }
                size_t oi = static_cast<size_t>(pl * oh * ow + y * ow + xx);
                argmax[oi] = pl * ih * iw + best;
                vals[oi] = bv;
            }
        }
    }
    auto out = detail::make_op_node<T>(
        out_shape, {x.node()}, [argmax = std::move(argmax)](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            auto& g = detail::ensure_grad<T>(p);
            for (size_t i = 0; i < self.grad.size(); ++i) {
                g[static_cast<size_t>(argmax[i])] += self.grad[i];
            }
        });
    out.raw_data() = std::move(vals);
    return out;
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>& state, bool training, double momentum,
                       double eps) {
    if (x.rank() != 4) {
        throw std::invalid_argument(strf("batch_norm2d: expected rank 4, got %s",
                                         shape_str(x.shape()).c_str()));
    }
    long n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
        throw std::invalid_argument("batch_norm2d: gamma/beta must be [C]");
    }
    if (static_cast<long>(state.running_mean.size()) != c ||
        static_cast<long>(state.running_var.size()) != c) {
        throw std::invalid_argument("batch_norm2d: running stats must be [C]");
    }
    long m = n * hw;  // elements per channel
    if (training && m < 2) {
        throw NumericError("batch_norm2d: training mode needs at least 2 elements per channel");
    }

    const auto& xv = x.data();
    std::vector<T> mean_c(static_cast<size_t>(c));
    std::vector<T> inv_std(static_cast<size_t>(c));
    auto xhat_sp = std::make_shared<std::vector<T>>(xv.size());
    std::vector<T>& xhat = *xhat_sp;
    std::vector<T> buf(static_cast<size_t>(m));

    for (long ch = 0; ch < c; ++ch) {
        if (training) {
            for (long b = 0; b < n; ++b) {
                const T* sp = xv.data() + (b * c + ch) * hw;
                std::copy(sp, sp + hw, buf.data() + b * hw);
            }
            T mu = pairwise_sum(buf) / static_cast<T>(m);
            for (long i = 0; i < m; ++i) buf[static_cast<size_t>(i)] -= mu;
            std::vector<T> sq(buf.size());
            for (size_t i = 0; i < sq.size(); ++i) sq[i] = buf[i] * buf[i];
            T var = pairwise_sum(sq) / static_cast<T>(m);  // biased, used for normalization
            mean_c[static_cast<size_t>(ch)] = mu;
            inv_std[static_cast<size_t>(ch)] =
                T(1) / std::sqrt(var + static_cast<T>(eps));
            T unbiased = var * static_cast<T>(m) / static_cast<T>(m - 1);
            state.running_mean[static_cast<size_t>(ch)] =
                static_cast<T>((1.0 - momentum) * state.running_mean[static_cast<size_t>(ch)] +
                               momentum * mu);
            state.running_var[static_cast<size_t>(ch)] =
                static_cast<T>((1.0 - momentum) * state.running_var[static_cast<size_t>(ch)] +
                               momentum * unbiased);
        } else {
            mean_c[static_cast<size_t>(ch)] = state.running_mean[static_cast<size_t>(ch)];
            inv_std[static_cast<size_t>(ch)] =
                T(1) / std::sqrt(state.running_var[static_cast<size_t>(ch)] +
                                 static_cast<T>(eps));
        }
        T mu = mean_c[static_cast<size_t>(ch)];
        T inv = inv_std[static_cast<size_t>(ch)];
        for (long b = 0; b < n; ++b) {
            const T* sp = xv.data() + (b * c + ch) * hw;
            T* hp = xhat.data() + (b * c + ch) * hw;
            for (long i = 0; i < hw; ++i) hp[i] = (sp[i] - mu) * inv;
        }
    }

    auto out = detail::make_op_node<T>(
        x.shape(), {x.node(), gamma.node(), beta.node()},
        [n, c, hw, m, xhat_sp, inv_std, use_batch_stats = training](Node<T>& self) {
            const std::vector<T>& xhat = *xhat_sp;
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const auto& gv = pg.data;
            std::vector<T> buf(static_cast<size_t>(m));
            std::vector<T> s1(static_cast<size_t>(c)), s2(static_cast<size_t>(c));
            for (long ch = 0; ch < c; ++ch) {
                // s1 = sum g, s2 = sum g*xhat over the channel slice.
                for (long b = 0; b < n; ++b) {
                    const T* sp = self.grad.data() + (b * c + ch) * hw;
                    std::copy(sp, sp + hw, buf.data() + b * hw);
                }
                s1[static_cast<size_t>(ch)] = pairwise_sum(buf);
                for (long b = 0; b < n; ++b) {
                    const T* sp = self.grad.data() + (b * c + ch) * hw;
                    const T* hp = xhat.data() + (b * c + ch) * hw;
                    T* bp = buf.data() + b * hw;
                    for (long i = 0; i < hw; ++i) bp[i] = sp[i] * hp[i];
                }
                s2[static_cast<size_t>(ch)] = pairwise_sum(buf);
            }
            if (pb.needs) {
                auto& g = detail::ensure_grad<T>(pb);
                for (long ch = 0; ch < c; ++ch) g[static_cast<size_t>(ch)] += s1[static_cast<size_t>(ch)];
            }
            if (pg.needs) {
                auto& g = detail::ensure_grad<T>(pg);
                for (long ch = 0; ch < c; ++ch) g[static_cast<size_t>(ch)] += s2[static_cast<size_t>(ch)];
            }
            if (px.needs) {
                auto& g = detail::ensure_grad<T>(px);
                for (long ch = 0; ch < c; ++ch) {
                    T ga = gv[static_cast<size_t>(ch)];
                    T inv = inv_std[static_cast<size_t>(ch)];
                    if (use_batch_stats) {
                        T k = ga * inv / static_cast<T>(m);
                        T a1 = s1[static_cast<size_t>(ch)];
                        T a2 = s2[static_cast<size_t>(ch)];
                        for (long b = 0; b < n; ++b) {
                            const T* sp = self.grad.data() + (b * c + ch) * hw;
                            const T* hp = xhat.data() + (b * c + ch) * hw;
                            T* gp = g.data() + (b * c + ch) * hw;
                            for (long i = 0; i < hw; ++i) {
                                gp[i] += k * (static_cast<T>(m) * sp[i] - a1 - hp[i] * a2);
                            }
                        }
                    } else {
                        T k = ga * inv;
                        for (long b = 0; b < n; ++b) {
                            const T* sp = self.grad.data() + (b * c + ch) * hw;
                            T* gp = g.data() + (b * c + ch) * hw;
                            for (long i = 0; i < hw; ++i) gp[i] += k * sp[i];
                        }
                    }
                }
            }
        });

    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    auto& ov = out.raw_data();
    for (long b = 0; b < n; ++b) {
        for (long ch = 0; ch < c; ++ch) {
            const T* hp = xhat.data() + (b * c + ch) * hw;
            T* op = ov.data() + (b * c + ch) * hw;
            T ga = gv[static_cast<size_t>(ch)], be = bv[static_cast<size_t>(ch)];
            for (long i = 0; i < hw; ++i) op[i] = ga * hp[i] + be;
        }
    }
    return out;
}

template <typename T>
Tensor<T> tv_loss(const Tensor<T>& x) {
    if (x.rank() != 3) {
        throw std::invalid_argument(strf("tv_loss: expected [C,H,W], got %s",
                                         shape_str(x.shape()).c_str()));
    }
    long c = x.dim(0), h = x.dim(1), w = x.dim(2);
    // Pixel-count normalization; channels are summed, not averaged.
    double norm = 1.0 / static_cast<double>(h * w);
    const T* xv = x.data().data();
    // Per-(channel,row) partials keep the reduction order fixed.
    std::vector<T> partials;
    partials.reserve(static_cast<size_t>(c * h * 2));
    for (long ch = 0; ch < c; ++ch) {
        const T* p = xv + ch * h * w;
        for (long y = 0; y < h; ++y) {
            T acc = T(0);
            for (long xx = 0; xx + 1 < w; ++xx) {
                T d = p[y * w + xx + 1] - p[y * w + xx];
                acc += d * d;
            }
            partials.push_back(acc);
        }
        for (long y = 0; y + 1 < h; ++y) {
            T acc = T(0);
            for (long xx = 0; xx < w; ++xx) {
                T d = p[(y + 1) * w + xx] - p[y * w + xx];
                acc += d * d;
            }
            partials.push_back(acc);
        }
    }
    T total = static_cast<T>(pairwise_sum(partials) * static_cast<T>(norm));
    auto out = detail::make_op_node<T>(
        {1}, {x.node()}, [c, h, w, norm](Node<T>& self) {
            auto& p = *self.parents[0];
            if (!p.needs) return;
            auto& g = detail::ensure_grad<T>(p);
            T k = static_cast<T>(2.0 * norm) * self.grad[0];
            for (long ch = 0; ch < c; ++ch) {
                const T* xp = p.data.data() + ch * h * w;
                T* gp = g.data() + ch * h * w;
                for (long y = 0; y < h; ++y) {
                    for (long xx = 0; xx < w; ++xx) {
                        T acc = T(0);
                        if (xx + 1 < w) acc -= xp[y * w + xx + 1] - xp[y * w + xx];
                        if (xx > 0) acc += xp[y * w + xx] - xp[y * w + xx - 1];
                        if (y + 1 < h) acc -= xp[(y + 1) * w + xx] - xp[y * w + xx];
                        if (y > 0) acc += xp[y * w + xx] - xp[(y - 1) * w + xx];
                        gp[y * w + xx] += k * acc;
                    }
                }
            }
        });
    out.raw_data()[0] = total;
    return out;
}

#define EYEPURIFY_INSTANTIATE_OPS(T)                                               \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> scale<T>(const Tensor<T>&, double);                         \
    template Tensor<T> sum<T>(const Tensor<T>&);                                   \
    template Tensor<T> mean<T>(const Tensor<T>&);                                  \
    template Tensor<T> l2_diff_sum<T>(const Tensor<T>&, const Tensor<T>&);         \
    template Tensor<T> relu<T>(const Tensor<T>&);                                  \
    template Tensor<T> scaled_tanh<T>(const Tensor<T>&);                           \
    template Tensor<T> dropout<T>(const Tensor<T>&, double, SeededRng&);           \
    template Tensor<T> slice_batch<T>(const Tensor<T>&, long);                     \
    template Tensor<T> crop2d<T>(const Tensor<T>&, long, long, long, long);        \
    template Tensor<T> reflection_pad2d<T>(const Tensor<T>&, long);                \
    template Tensor<T> mask_mul<T>(const Tensor<T>&, const Tensor<T>&);            \
    template Tensor<T> add_channel_bias<T>(const Tensor<T>&, const Tensor<T>&);    \
    template Tensor<T> maxpool2d<T>(const Tensor<T>&);                             \
    template Tensor<T> batch_norm2d<T>(const Tensor<T>&, const Tensor<T>&,         \
                                       const Tensor<T>&, BatchNormState<T>&, bool, \
                                       double, double);                            \
    template Tensor<T> tv_loss<T>(const Tensor<T>&);

EYEPURIFY_INSTANTIATE_OPS(float)
EYEPURIFY_INSTANTIATE_OPS(double)
#undef EYEPURIFY_INSTANTIATE_OPS

}  // namespace eyepurify
