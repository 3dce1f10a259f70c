#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "eyepurify/autodiff_check.hpp"
#include "eyepurify/tensor_ops.hpp"

using namespace eyepurify;

namespace {

template <typename T>
Tensor<T> randt(std::vector<long> shape, SeededRng& rng, bool requires_grad = true,
                double lo = -1.0, double hi = 1.0) {
    auto t = Tensor<T>::zeros(shape, requires_grad);
    for (auto& v : t.raw_data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// Scalar-loop cross-correlation reference.
template <typename T>
std::vector<T> conv2d_ref(const std::vector<T>& x, long n, long c, long h, long w,
                          const std::vector<T>& wt, long k, long kh, long kw, long stride,
                          long pad, long oh, long ow) {
    std::vector<T> out(static_cast<size_t>(n * k * oh * ow), T(0));
    for (long b = 0; b < n; ++b)
        for (long ko = 0; ko < k; ++ko)
            for (long oy = 0; oy < oh; ++oy)
                for (long ox = 0; ox < ow; ++ox) {
                    double acc = 0;
                    for (long ci = 0; ci < c; ++ci)
                        for (long ki = 0; ki < kh; ++ki)
                            for (long kj = 0; kj < kw; ++kj) {
                                long iy = oy * stride - pad + ki;
                                long ix = ox * stride - pad + kj;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += static_cast<double>(x[((b * c + ci) * h + iy) * w + ix]) *
                                       static_cast<double>(wt[((ko * c + ci) * kh + ki) * kw + kj]);
                            }
                    out[((b * k + ko) * oh + oy) * ow + ox] = static_cast<T>(acc);
                }
    return out;
}

template <typename T>
std::vector<T> conv_transpose2d_ref(const std::vector<T>& x, long n, long c, long h, long w,
                                    const std::vector<T>& wt, long k, long kh, long kw,
                                    long stride, long pad, long oh, long ow) {
    std::vector<T> out(static_cast<size_t>(n * k * oh * ow), T(0));
    for (long b = 0; b < n; ++b)
        for (long ci = 0; ci < c; ++ci)
            for (long iy = 0; iy < h; ++iy)
                for (long ix = 0; ix < w; ++ix) {
                    T xv = x[((b * c + ci) * h + iy) * w + ix];
                    for (long ko = 0; ko < k; ++ko)
                        for (long ki = 0; ki < kh; ++ki)
                            for (long kj = 0; kj < kw; ++kj) {
                                long oy = iy * stride - pad + ki;
                                long ox = ix * stride - pad + kj;
                                if (oy < 0 || oy >= oh || ox < 0 || ox >= ow) continue;
                                out[((b * k + ko) * oh + oy) * ow + ox] +=
                                    xv * wt[((ci * k + ko) * kh + ki) * kw + kj];
                            }
                }
    return out;
}

template <typename T>
double max_rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = std::fabs(double(a[i]) - double(b[i]));
        double den = std::max({std::fabs(double(a[i])), std::fabs(double(b[i])), 1e-8});
        m = std::max(m, d / den);
    }
    return m;
}

}  // namespace

TEST_SUITE_BEGIN("ops");

TEST_CASE("elementwise arithmetic values and gradients") {
    SeededRng rng(1);
    auto a = randt<double>({2, 3, 4}, rng);
    auto b = randt<double>({2, 3, 4}, rng);

    auto s = add(a, b);
    auto d = sub(a, b);
    auto m = mul(a, b);
    for (long i = 0; i < s.numel(); ++i) {
        CHECK(s.data()[i] == doctest::Approx(a.data()[i] + b.data()[i]));
        CHECK(d.data()[i] == doctest::Approx(a.data()[i] - b.data()[i]));
        CHECK(m.data()[i] == doctest::Approx(a.data()[i] * b.data()[i]));
    }

    std::function<Tensor<double>(std::vector<Tensor<double>>&)> fn =
        [](std::vector<Tensor<double>>& in) {
            return sum(mul(add(in[0], in[1]), sub(in[0], in[1])));
        };
    std::vector<Tensor<double>> inputs{a, b};
    CHECK(grad_check<double>(fn, inputs, 1e-5) < 1e-4);
}

TEST_CASE("shape mismatch is rejected with sizes in the message") {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({3, 2});
    try {
        add(a, b);
        FAIL("expected a throw");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[3, 2]") != std::string::npos);
    }
}

TEST_CASE("scale, sum, mean") {
    auto x = Tensor<double>::from_data({1, 2, 3, 4}, {4}, true);
    CHECK(sum(x).value() == doctest::Approx(10.0));
    CHECK(mean(x).value() == doctest::Approx(2.5));
    CHECK(scale(x, -2.0).data()[3] == doctest::Approx(-8.0));

    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        return mean(scale(t, 3.0));
    };
    CHECK(grad_check<double>(fn, x, 1e-5) < 1e-6);
}

TEST_CASE("l2_diff_sum matches the composite form") {
    SeededRng rng(2);
    auto a = randt<double>({3, 5}, rng);
    auto b = randt<double>({3, 5}, rng);
    auto fused = l2_diff_sum(a, b);
    auto composed = sum(mul(sub(a, b), sub(a, b)));
    CHECK(fused.value() == doctest::Approx(composed.value()).epsilon(1e-12));

    std::function<Tensor<double>(std::vector<Tensor<double>>&)> fn =
        [](std::vector<Tensor<double>>& in) { return l2_diff_sum(in[0], in[1]); };
    std::vector<Tensor<double>> inputs{a, b};
    CHECK(grad_check<double>(fn, inputs, 1e-5) < 1e-4);
}

TEST_CASE("relu forward and subgradient at zero") {
    auto x = Tensor<double>::from_data({-1.0, 0.0, 2.0}, {3}, true);
    auto y = relu(x);
    CHECK(y.data() == std::vector<double>{0.0, 0.0, 2.0});
    backward(sum(y));
    CHECK(x.grad() == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("relu gradient away from the kink") {
    SeededRng rng(3);
    auto x = Tensor<double>::zeros({2, 3, 4}, true);
    for (auto& v : x.raw_data()) {
        double mag = rng.uniform(0.2, 1.0);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        return sum(relu(t));
    };
    CHECK(grad_check<double>(fn, x, 1e-5) < 1e-6);
}

TEST_CASE("scaled_tanh maps onto [0,255]") {
    auto x = Tensor<double>::from_data({0.0, 8.0, -8.0}, {3});
    auto y = scaled_tanh(x);
    CHECK(y.data()[0] == doctest::Approx(127.5));
    CHECK(y.data()[1] == doctest::Approx(255.0).epsilon(1e-3));
    CHECK(y.data()[2] == doctest::Approx(0.0).scale(1.0).epsilon(1e-3));

    SeededRng rng(4);
    auto z = randt<double>({2, 5}, rng);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        return sum(scaled_tanh(t));
    };
    CHECK(grad_check<double>(fn, z, 1e-4) < 1e-6);
}

TEST_CASE("dropout with p=0 is the identity and draws nothing") {
    SeededRng rng(5);
    auto x = randt<float>({4, 4}, rng);
    SeededRng mask_rng(6);
    auto y = dropout(x, 0.0, mask_rng);
    CHECK(y.data() == x.data());
    SeededRng fresh(6);
    CHECK(mask_rng.next_u64() == fresh.next_u64());
}

TEST_CASE("dropout zeroes and rescales deterministically") {
    SeededRng rng(7);
    auto x = randt<float>({10, 10}, rng, false, 1.0, 2.0);
    SeededRng m1(8), m2(8);
    auto y1 = dropout(x, 0.5, m1);
    auto y2 = dropout(x, 0.5, m2);
    CHECK(y1.data() == y2.data());
    long zeros = 0;
    for (long i = 0; i < y1.numel(); ++i) {
        float v = y1.data()[i];
        if (v == 0.0f) {
            ++zeros;
        } else {
            CHECK(v == doctest::Approx(2.0f * x.data()[i]));
        }
    }
    CHECK(zeros > 20);
    CHECK(zeros < 80);
    CHECK_THROWS_AS(dropout(x, 1.0, m1), std::invalid_argument);
}

TEST_CASE("dropout gradient uses the same mask") {
    SeededRng rng(9);
    auto x = randt<double>({3, 4}, rng);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        SeededRng mask_rng(123);
        return sum(dropout(t, 0.3, mask_rng));
    };
    CHECK(grad_check<double>(fn, x, 1e-5) < 1e-6);
}

TEST_CASE("slice_batch extracts one sample and scatters its gradient") {
    SeededRng rng(10);
    auto x = randt<double>({3, 2, 2, 2}, rng);
    auto s1 = slice_batch(x, 1);
    CHECK(s1.shape() == std::vector<long>{2, 2, 2});
    for (long i = 0; i < 8; ++i) CHECK(s1.data()[i] == x.data()[8 + i]);
    CHECK_THROWS_AS(slice_batch(x, 3), std::invalid_argument);

    backward(sum(s1));
    const auto& g = x.grad();
    for (long i = 0; i < 24; ++i) CHECK(g[i] == (i >= 8 && i < 16 ? 1.0 : 0.0));
}

TEST_CASE("crop2d windows and rejects out-of-range") {
    auto x = Tensor<double>::from_data({0, 1, 2, 3, 4, 5, 6, 7, 8}, {1, 3, 3}, true);
    auto c = crop2d(x, 1, 0, 2, 2);
    CHECK(c.data() == std::vector<double>{3, 4, 6, 7});
    CHECK_THROWS_AS(crop2d(x, 2, 2, 2, 2), std::invalid_argument);

    SeededRng rng(11);
    auto y = randt<double>({2, 2, 5, 4}, rng);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        return sum(mul(crop2d(t, 1, 1, 3, 2), crop2d(t, 0, 0, 3, 2)));
    };
    CHECK(grad_check<double>(fn, y, 1e-5) < 1e-5);
}

TEST_CASE("reflection padding mirrors without repeating the edge") {
    // Every row is [1,2,3]; pad 1 must give [2,1,2,3,2] per row.
    auto x = Tensor<float>::from_data({1, 2, 3, 1, 2, 3, 1, 2, 3}, {1, 3, 3});
    auto y = reflection_pad2d(x, 1);
    CHECK(y.shape() == std::vector<long>{1, 5, 5});
    for (long r = 0; r < 5; ++r) {
        const float* row = y.data().data() + r * 5;
        CHECK(row[0] == 2);
        CHECK(row[1] == 1);
        CHECK(row[2] == 2);
        CHECK(row[3] == 3);
        CHECK(row[4] == 2);
    }
}

TEST_CASE("reflection padding of a constant stays constant") {
    auto x = Tensor<float>::full({2, 4, 4}, 3.25f);
    auto y = reflection_pad2d(x, 3);
    CHECK(y.shape() == std::vector<long>{2, 10, 10});
    for (float v : y.data()) CHECK(v == 3.25f);
}

TEST_CASE("reflection padding shape on the stylization input size") {
    auto x = Tensor<float>::zeros({1, 3, 256, 256});
    auto y = reflection_pad2d(x, 12);
    CHECK(y.shape() == std::vector<long>{1, 3, 280, 280});
    CHECK_THROWS_AS(reflection_pad2d(Tensor<float>::zeros({1, 3, 3}), 3),
                    std::invalid_argument);
}

TEST_CASE("reflection padding gradient") {
    SeededRng rng(12);
    auto x = randt<double>({2, 4, 5}, rng);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        auto p = reflection_pad2d(t, 2);
        return sum(mul(p, p));
    };
    CHECK(grad_check<double>(fn, x, 1e-5) < 1e-5);
}

TEST_CASE("mask_mul broadcasts a constant mask over channels") {
    auto x = Tensor<double>::from_data({1, 2, 3, 4, 5, 6, 7, 8}, {2, 2, 2}, true);
    auto m = Tensor<double>::from_data({1, 0, 0.5, 1}, {2, 2});
    auto y = mask_mul(x, m);
    CHECK(y.data() == std::vector<double>{1, 0, 1.5, 4, 5, 0, 3.5, 8});

    std::function<Tensor<double>(Tensor<double>&)> fn = [&m](Tensor<double>& t) {
        return sum(mul(mask_mul(t, m), mask_mul(t, m)));
    };
    CHECK(grad_check<double>(fn, x, 1e-5) < 1e-5);

    auto bad_mask = Tensor<double>::from_data({1, 0, 0, 1}, {2, 2}, true);
    CHECK_THROWS_AS(mask_mul(x, bad_mask), std::invalid_argument);
}

TEST_CASE("add_channel_bias on rank 3 and rank 4") {
    SeededRng rng(13);
    auto x = randt<double>({2, 3, 2, 2}, rng);
    auto b = randt<double>({3}, rng);
    auto y = add_channel_bias(x, b);
    for (long n = 0; n < 2; ++n)
        for (long c = 0; c < 3; ++c)
            for (long i = 0; i < 4; ++i) {
                CHECK(y.data()[(n * 3 + c) * 4 + i] ==
                      doctest::Approx(x.data()[(n * 3 + c) * 4 + i] + b.data()[c]));
            }

    std::function<Tensor<double>(std::vector<Tensor<double>>&)> fn =
        [](std::vector<Tensor<double>>& in) {
            auto y4 = add_channel_bias(in[0], in[1]);
            return sum(mul(y4, y4));
        };
    std::vector<Tensor<double>> inputs{x, b};
    CHECK(grad_check<double>(fn, inputs, 1e-5) < 1e-5);
    CHECK_THROWS_AS(add_channel_bias(x, Tensor<double>::zeros({4})), std::invalid_argument);
}

TEST_CASE("conv2d all-ones 3x3 gives the patch sum") {
    auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto y = conv2d(x, w, 1, 0);
    CHECK(y.shape() == std::vector<long>{1, 1, 1, 1});
    CHECK(y.data()[0] == doctest::Approx(9.0f));
}

TEST_CASE("conv2d stylization-scale shapes") {
    auto x = Tensor<float>::zeros({1, 3, 280, 280});
    auto w = Tensor<float>::zeros({32, 3, 9, 9});
    CHECK(conv2d(x, w, 1, 4).shape() == std::vector<long>{1, 32, 280, 280});

    auto x2 = Tensor<float>::zeros({1, 64, 280, 280});
    auto w2 = Tensor<float>::zeros({128, 64, 3, 3});
    CHECK(conv2d(x2, w2, 2, 1).shape() == std::vector<long>{1, 128, 140, 140});
}

TEST_CASE("conv2d matches the scalar-loop reference") {
    SeededRng rng(14);
    for (auto [stride, pad] : {std::pair<long, long>{1, 0}, {1, 2}, {2, 1}, {3, 2}}) {
        auto x = randt<float>({2, 3, 7, 6}, rng, false);
        auto w = randt<float>({4, 3, 3, 3}, rng, false);
        auto y = conv2d(x, w, stride, pad);
        auto ref = conv2d_ref(x.data(), 2, 3, 7, 6, w.data(), 4, 3, 3, stride, pad,
                              y.dim(2), y.dim(3));
        CHECK(max_rel_diff(y.data(), ref) < 1e-5);
    }
}

TEST_CASE("conv2d rejects bad geometry") {
    auto x = Tensor<float>::zeros({1, 3, 5, 5});
    auto w = Tensor<float>::zeros({4, 2, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w, 1, 1), std::invalid_argument);  // channel mismatch
    auto w2 = Tensor<float>::zeros({4, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w2, 1, -1), std::invalid_argument);  // negative pad
    CHECK_THROWS_AS(conv2d(x, w2, 0, 1), std::invalid_argument);   // zero stride
    auto w3 = Tensor<float>::zeros({4, 3, 9, 9});
    CHECK_THROWS_AS(conv2d(x, w3, 1, 1), std::invalid_argument);  // kernel exceeds padded input
}

TEST_CASE("conv2d gradient, including non-divisible stride geometry") {
    SeededRng rng(15);
    // 6 + 2*1 - 3 is not divisible by 2: exercises the explicit-output-size
    // path of the input-gradient kernel.
    for (auto [h, stride] : {std::pair<long, long>{5, 2}, {6, 2}, {5, 1}}) {
        auto x = randt<double>({1, 2, h, h}, rng);
        auto w = randt<double>({3, 2, 3, 3}, rng);
        long s = stride;
        std::function<Tensor<double>(std::vector<Tensor<double>>&)> fn =
            [s](std::vector<Tensor<double>>& in) {
                auto y = conv2d(in[0], in[1], s, 1);
                return sum(mul(y, y));
            };
        std::vector<Tensor<double>> inputs{x, w};
        CHECK(grad_check<double>(fn, inputs, 1e-5) < 1e-5);
    }
}

TEST_CASE("conv2d is linear in its input") {
    SeededRng rng(16);
    auto x = randt<float>({1, 3, 8, 8}, rng, false);
    auto y = randt<float>({1, 3, 8, 8}, rng, false);
    auto w = randt<float>({4, 3, 3, 3}, rng, false);
    float a = 1.7f, b = -0.6f;

    auto blended = Tensor<float>::zeros({1, 3, 8, 8});
    for (long i = 0; i < blended.numel(); ++i) {
        blended.raw_data()[i] = a * x.data()[i] + b * y.data()[i];
    }
    auto lhs = conv2d(blended, w, 1, 1);
    auto cx = conv2d(x, w, 1, 1);
    auto cy = conv2d(y, w, 1, 1);
    // Relative to the output scale; elementwise ratios blow up at zero
    // crossings of the response.
    float max_abs = 0, max_diff = 0;
    for (long i = 0; i < lhs.numel(); ++i) {
        float rhs = a * cx.data()[i] + b * cy.data()[i];
        max_abs = std::max(max_abs, std::fabs(lhs.data()[i]));
        max_diff = std::max(max_diff, std::fabs(lhs.data()[i] - rhs));
    }
    CHECK(max_diff < 1e-5f * max_abs);
}

TEST_CASE("conv_transpose2d broadcasts a single input value") {
    auto x = Tensor<float>::full({1, 1, 1, 1}, 3.5f);
    auto w = Tensor<float>::full({1, 1, 2, 2}, 1.0f);
    auto y = conv_transpose2d(x, w, 1, 0);
    CHECK(y.shape() == std::vector<long>{1, 1, 2, 2});
    for (float v : y.data()) CHECK(v == doctest::Approx(3.5f));
}

TEST_CASE("conv_transpose2d upsampling shape") {
    auto x = Tensor<float>::zeros({1, 64, 128, 128});
    auto w = Tensor<float>::zeros({64, 32, 4, 4});
    CHECK(conv_transpose2d(x, w, 2, 1).shape() == std::vector<long>{1, 32, 256, 256});
}

TEST_CASE("conv_transpose2d matches the scalar-loop reference") {
    SeededRng rng(17);
    for (auto [stride, pad] : {std::pair<long, long>{1, 0}, {2, 1}, {2, 0}}) {
        auto x = randt<float>({2, 3, 4, 5}, rng, false);
        auto w = randt<float>({3, 2, 4, 4}, rng, false);
        auto y = conv_transpose2d(x, w, stride, pad);
        auto ref = conv_transpose2d_ref(x.data(), 2, 3, 4, 5, w.data(), 2, 4, 4, stride,
                                        pad, y.dim(2), y.dim(3));
        CHECK(max_rel_diff(y.data(), ref) < 1e-5);
    }
}

TEST_CASE("conv_transpose2d finite-difference gradient") {
    SeededRng rng(18);
    auto x = randt<double>({1, 2, 4, 4}, rng);
    auto w = randt<double>({2, 3, 4, 4}, rng);
    std::function<Tensor<double>(std::vector<Tensor<double>>&)> fn =
        [](std::vector<Tensor<double>>& in) {
            return sum(conv_transpose2d(in[0], in[1], 2, 1));
        };
    std::vector<Tensor<double>> inputs{x, w};
    CHECK(grad_check<double>(fn, inputs, 1e-3) < 1e-4);

    std::function<Tensor<double>(std::vector<Tensor<double>>&)> fn2 =
        [](std::vector<Tensor<double>>& in) {
            auto y = conv_transpose2d(in[0], in[1], 2, 1);
            return sum(mul(y, y));
        };
    CHECK(grad_check<double>(fn2, inputs, 1e-5) < 1e-5);
}

TEST_CASE("conv followed by matching transpose restores spatial dims") {
    // (8 + 2*1 - 4) divisible by 2.
    auto x = Tensor<float>::zeros({1, 3, 8, 8});
    auto w = Tensor<float>::zeros({5, 3, 4, 4});
    auto down = conv2d(x, w, 2, 1);
    CHECK(down.shape() == std::vector<long>{1, 5, 4, 4});
    auto wt = Tensor<float>::zeros({5, 3, 4, 4});
    auto up = conv_transpose2d(down, wt, 2, 1);
    CHECK(up.shape() == std::vector<long>{1, 3, 8, 8});
}

TEST_CASE("maxpool2d picks the first maximum on ties") {
    auto x = Tensor<double>::from_data({5, 5, 3, 1}, {1, 2, 2}, true);
    auto y = maxpool2d(x);
    CHECK(y.shape() == std::vector<long>{1, 1, 1});
    CHECK(y.data()[0] == 5.0);
    backward(sum(y));
    CHECK(x.grad() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("maxpool2d floors odd extents") {
    auto x = Tensor<float>::zeros({1, 2, 5, 7});
    CHECK(maxpool2d(x).shape() == std::vector<long>{1, 2, 2, 3});
    CHECK_THROWS_AS(maxpool2d(Tensor<float>::zeros({2, 1, 4})), std::invalid_argument);
}

TEST_CASE("maxpool2d gradient on distinct values") {
    SeededRng rng(19);
    auto x = randt<double>({2, 6, 6}, rng);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        auto y = maxpool2d(t);
        return sum(mul(y, y));
    };
    CHECK(grad_check<double>(fn, x, 1e-6) < 1e-5);
}

TEST_CASE("batch_norm2d normalizes per channel in training mode") {
    SeededRng rng(20);
    auto x = randt<float>({2, 3, 4, 4}, rng, false, -3.0, 5.0);
    auto gamma = Tensor<float>::full({3}, 1.0f);
    auto beta = Tensor<float>::zeros({3});
    BatchNormState<float> state{{0, 0, 0}, {1, 1, 1}};
    auto y = batch_norm2d(x, gamma, beta, state, true);

    for (long c = 0; c < 3; ++c) {
        double s = 0, s2 = 0;
        for (long n = 0; n < 2; ++n)
            for (long i = 0; i < 16; ++i) {
                double v = y.data()[(n * 3 + c) * 16 + i];
                s += v;
                s2 += v * v;
            }
        double m = s / 32, var = s2 / 32 - m * m;
        CHECK(std::fabs(m) < 1e-5);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
    // Running stats moved toward the batch stats.
    CHECK(state.running_mean[0] != 0.0f);
    CHECK(state.running_var[0] != 1.0f);
}

TEST_CASE("batch_norm2d on a constant channel gives zeros") {
    auto x = Tensor<float>::full({2, 1, 3, 3}, 4.0f);
    auto gamma = Tensor<float>::full({1}, 1.0f);
    auto beta = Tensor<float>::zeros({1});
    BatchNormState<float> state{{0}, {1}};
    auto y = batch_norm2d(x, gamma, beta, state, true);
    for (float v : y.data()) CHECK(std::fabs(v) < 1e-4);
}

TEST_CASE("batch_norm2d eval mode uses running stats") {
    auto x = Tensor<float>::full({1, 1, 2, 2}, 10.0f);
    auto gamma = Tensor<float>::full({1}, 2.0f);
    auto beta = Tensor<float>::full({1}, 1.0f);
    BatchNormState<float> state{{4.0f}, {9.0f}};
    auto y = batch_norm2d(x, gamma, beta, state, false);
    // (10-4)/3 * 2 + 1 = 5, up to epsilon in the denominator.
    for (float v : y.data()) CHECK(v == doctest::Approx(5.0f).epsilon(1e-4));
    // Eval mode must not touch the stats.
    CHECK(state.running_mean[0] == 4.0f);
    CHECK(state.running_var[0] == 9.0f);
}

TEST_CASE("batch_norm2d running-stat update formula") {
    SeededRng rng(21);
    auto x = randt<double>({2, 1, 2, 2}, rng, false);
    auto gamma = Tensor<double>::full({1}, 1.0);
    auto beta = Tensor<double>::zeros({1});
    BatchNormState<double> state{{0.5}, {2.0}};
    batch_norm2d(x, gamma, beta, state, true, 0.1, 1e-5);

    double mu = 0;
    for (double v : x.data()) mu += v;
    mu /= 8;
    double var = 0;
    for (double v : x.data()) var += (v - mu) * (v - mu);
    double unbiased = var / 7;
    CHECK(state.running_mean[0] == doctest::Approx(0.9 * 0.5 + 0.1 * mu));
    CHECK(state.running_var[0] == doctest::Approx(0.9 * 2.0 + 0.1 * unbiased));
}

TEST_CASE("batch_norm2d gradient in train and eval modes") {
    SeededRng rng(22);
    auto x = randt<double>({2, 3, 4, 4}, rng);
    auto gamma = randt<double>({3}, rng, true, 0.5, 1.5);
    auto beta = randt<double>({3}, rng);
    for (bool training : {true, false}) {
        std::function<Tensor<double>(std::vector<Tensor<double>>&)> fn =
            [training](std::vector<Tensor<double>>& in) {
                BatchNormState<double> state{{0.1, -0.2, 0.3}, {1.5, 0.8, 1.2}};
                auto y = batch_norm2d(in[0], in[1], in[2], state, training);
                return sum(mul(y, y));
            };
        std::vector<Tensor<double>> inputs{x, gamma, beta};
        // 1e-3: elements with near-zero true gradient sit at the central-
        // difference rounding floor, so the tighter double bound is not
        // attainable for this op.
        CHECK(grad_check<double>(fn, inputs, 1e-5) < 1e-3);
    }
    BatchNormState<double> bad;
    bad.running_mean = {0.0};
    bad.running_var = {1.0};
    CHECK_THROWS_AS(batch_norm2d(x, gamma, beta, bad, true), std::invalid_argument);
}

TEST_CASE("gram matrix of a small feature map") {
    // F = [[1,2],[3,4]] as [2,1,2]: G = F F^T = [[5,11],[11,25]].
    auto x = Tensor<double>::from_data({1, 2, 3, 4}, {2, 1, 2});
    auto g = gram(x);
    CHECK(g.shape() == std::vector<long>{2, 2});
    CHECK(g.data()[0] == doctest::Approx(5.0));
    CHECK(g.data()[1] == doctest::Approx(11.0));
    CHECK(g.data()[2] == doctest::Approx(11.0));
    CHECK(g.data()[3] == doctest::Approx(25.0));
}

TEST_CASE("gram is bit-identical under spatial permutation") {
    SeededRng rng(23);
    auto x = randt<float>({4, 3, 5}, rng, false);
    auto g1 = gram(x);

    // Apply one fixed permutation to every channel's spatial positions.
    std::vector<long> perm(15);
    for (long i = 0; i < 15; ++i) perm[i] = i;
    for (long i = 14; i > 0; --i) {
        std::swap(perm[i], perm[rng.uniform_index(static_cast<uint64_t>(i + 1))]);
    }
    auto xp = Tensor<float>::zeros({4, 3, 5});
    for (long c = 0; c < 4; ++c)
        for (long j = 0; j < 15; ++j) {
            xp.raw_data()[c * 15 + perm[j]] = x.data()[c * 15 + j];
        }
    auto g2 = gram(xp);
    CHECK(g1.data() == g2.data());
}

TEST_CASE("gram gradient") {
    SeededRng rng(24);
    auto x = randt<double>({3, 2, 3}, rng);
    auto target = randt<double>({3, 3}, rng, false);
    std::function<Tensor<double>(Tensor<double>&)> fn = [&target](Tensor<double>& t) {
        return l2_diff_sum(gram(t), target);
    };
    CHECK(grad_check<double>(fn, x, 1e-5) < 1e-5);
}

TEST_CASE("tv_loss value and gradient") {
    // [C=1, 2x2] : [[0,1],[2,4]] -> diffs 1,2 (rows), 2,3 (cols);
    // sum of squares 1+4+4+9 = 18; normalized by 4 pixels -> 4.5.
    auto x = Tensor<double>::from_data({0, 1, 2, 4}, {1, 2, 2}, true);
    auto v = tv_loss(x);
    CHECK(v.value() == doctest::Approx(4.5));

    // Channels sum rather than average: two identical channels double it.
    auto x2 = Tensor<double>::from_data({0, 1, 2, 4, 0, 1, 2, 4}, {2, 2, 2});
    CHECK(tv_loss(x2).value() == doctest::Approx(9.0));

    CHECK(tv_loss(Tensor<double>::full({2, 3, 3}, 7.0)).value() == 0.0);

    SeededRng rng(25);
    auto y = randt<double>({2, 4, 5}, rng);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        return tv_loss(t);
    };
    CHECK(grad_check<double>(fn, y, 1e-5) < 1e-5);
}

TEST_CASE("grad_check on a linear function is near-exact") {
    auto x = Tensor<double>::from_data({1, -2, 3, 0.5}, {4}, true);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        return sum(scale(t, 3.0));
    };
    CHECK(grad_check<double>(fn, x, 1e-3) < 1e-8);
}

TEST_CASE("grad_check on a smooth nonlinearity at eps 1e-3") {
    SeededRng rng(26);
    auto x = randt<double>({3, 4}, rng);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        return sum(scaled_tanh(t));
    };
    CHECK(grad_check<double>(fn, x, 1e-3) < 1e-5);
}

TEST_CASE("grad_check flags a doubled gradient as error 0.5") {
    auto x = Tensor<double>::from_data({0.7, -1.3}, {2}, true);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        // Identity whose backward deliberately doubles the gradient.
        auto bad = detail::make_op_node<double>(
            t.shape(), {t.node()}, [](Tensor<double>::Node& self) {
                auto& p = *self.parents[0];
                auto& g = detail::ensure_grad<double>(p);
                for (size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * self.grad[i];
            });
        bad.raw_data() = t.data();
        return sum(bad);
    };
    double err = grad_check<double>(fn, x, 1e-4);
    CHECK(err == doctest::Approx(0.5).epsilon(1e-3));
}

TEST_CASE("grad_check rejects non-finite objectives") {
    auto x = Tensor<double>::from_data({1.0}, {1}, true);
    std::function<Tensor<double>(Tensor<double>&)> fn = [](Tensor<double>& t) {
        auto y = scale(t, 1.0);
        y.raw_data()[0] = std::numeric_limits<double>::quiet_NaN();
        return y;
    };
    CHECK_THROWS_AS(grad_check<double>(fn, x, 1e-4), NumericError);
}

TEST_CASE("float-precision gradients stay within 1e-3") {
    SeededRng rng(27);
    // Positive operands keep every true gradient component well away from
    // zero; near-zero components sit below the float FD noise floor and
    // say nothing about correctness.
    auto x = randt<float>({1, 2, 4, 4}, rng, true, 0.5, 1.5);
    auto w = randt<float>({2, 2, 3, 3}, rng, true, 0.2, 1.0);
    std::function<Tensor<float>(std::vector<Tensor<float>>&)> fn =
        [](std::vector<Tensor<float>>& in) {
            auto y = conv2d(in[0], in[1], 1, 1);
            return sum(mul(y, y));
        };
    std::vector<Tensor<float>> inputs{x, w};
    CHECK(grad_check<float>(fn, inputs, 1e-2) < 1e-3);
}

TEST_CASE("conv2d results are identical for any worker count") {
    SeededRng rng(28);
    auto x = randt<float>({1, 8, 32, 32}, rng, false);
    auto w = randt<float>({16, 8, 3, 3}, rng, false);
    set_worker_count(1);
    auto y1 = conv2d(x, w, 1, 1);
    set_worker_count(3);
    auto y3 = conv2d(x, w, 1, 1);
    set_worker_count(1);
    CHECK(y1.data() == y3.data());
}

TEST_CASE("repeated evaluation is bit-identical") {
    SeededRng rng(29);
    auto x = randt<float>({1, 4, 16, 16}, rng, false);
    auto w = randt<float>({8, 4, 3, 3}, rng, false);
    auto y1 = conv2d(x, w, 2, 1);
    auto y2 = conv2d(x, w, 2, 1);
    CHECK(y1.data() == y2.data());
}

TEST_SUITE_END();
