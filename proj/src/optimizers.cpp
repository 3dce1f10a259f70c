#include "eyepurify/optimizers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>
#include <filesystem>
#include <numeric>

#include "eyepurify/image_io.hpp"
#include "eyepurify/masks.hpp"
#include "eyepurify/tensor_ops.hpp"

namespace eyepurify {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

void axpy(std::vector<double>& y, double a, const std::vector<double>& x) {
    for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

template <typename T>
struct ObjEval {
    double f = 0.0;
    std::vector<double> g;
    LossBreakdown terms;

    bool finite() const {
        if (!std::isfinite(f)) return false;
        for (double v : g) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }
};

// One objective evaluation at x: fresh grad leaf, forward, backward.
template <typename T>
ObjEval<T> eval_objective(const BoxObjective<T>& obj, const std::vector<double>& x,
                          const std::vector<long>& shape) {
    auto leaf = Tensor<T>::zeros(shape, true);
    auto& rd = leaf.raw_data();
    for (size_t i = 0; i < x.size(); ++i) rd[i] = static_cast<T>(x[i]);

    ObjEval<T> ev;
    Tensor<T> val = obj(leaf, &ev.terms);
    if (val.numel() != 1) {
        throw std::invalid_argument("objective must evaluate to a scalar");
    }
    ev.f = static_cast<double>(val.data()[0]);
    ev.g.assign(x.size(), 0.0);
    if (std::isfinite(ev.f) && val.needs_grad()) {
        backward(val);
        if (leaf.has_grad()) {
            const auto& g = leaf.grad();
            for (size_t i = 0; i < x.size(); ++i) ev.g[i] = static_cast<double>(g[i]);
        }
    }
    return ev;
}

}  // namespace

template <typename T>
Tensor<T> white_noise_image(long h, long w, uint64_t seed) {
    if (h < 1 || w < 1) {
        throw std::invalid_argument(strf("noise image size %ldx%ld is not positive", h, w));
    }
    SeededRng rng(seed);
    auto t = Tensor<T>::zeros({3, h, w});
    for (auto& v : t.raw_data()) v = static_cast<T>(rng.uniform(0.0, 255.0));
    return t;
}

template <typename T>
LbfgsResult<T> projected_lbfgs(const BoxObjective<T>& objective, const Tensor<T>& init,
                               const LbfgsOptions& opt) {
    if (opt.memory < 1) throw ConfigError("lbfgs memory must be >= 1");
    if (opt.max_iter < 0) throw ConfigError("lbfgs iteration limit must be >= 0");
    if (!(opt.box_lo < opt.box_hi)) throw ConfigError("lbfgs box is empty");
    if (!(opt.tolerance >= 0.0)) throw ConfigError("lbfgs tolerance must be >= 0");

    const auto shape = init.shape();
    const size_t n = static_cast<size_t>(init.numel());
    auto clip = [&](double v) { return std::min(opt.box_hi, std::max(opt.box_lo, v)); };
    auto make_image = [&](const std::vector<double>& v) {
        auto t = Tensor<T>::zeros(shape);
        for (size_t i = 0; i < n; ++i) t.raw_data()[i] = static_cast<T>(v[i]);
        return t;
    };

    std::vector<double> x(n);
    for (size_t i = 0; i < n; ++i) x[i] = clip(static_cast<double>(init.data()[i]));

    ObjEval<T> cur = eval_objective(objective, x, shape);
    if (!cur.finite()) throw NumericError("objective is not finite at the initial point");

    std::vector<OptimizeReport> reports;
    reports.push_back({0, cur.f, cur.terms, 0.0});

    std::deque<std::vector<double>> S, Y;
    std::deque<double> rho;  // 1/(s.y), kept alongside the pairs
    const double c1 = 1e-4;

    for (long it = 1; it <= opt.max_iter; ++it) {
        const auto t0 = std::chrono::steady_clock::now();

        // Two-loop recursion with gamma-scaled initial Hessian.
        std::vector<double> d = cur.g;
        std::vector<double> alpha(S.size(), 0.0);
        for (long i = static_cast<long>(S.size()) - 1; i >= 0; --i) {
            alpha[i] = rho[i] * dot(S[i], d);
            axpy(d, -alpha[i], Y[i]);
        }
        double gamma = 1.0;
        if (!S.empty()) {
            gamma = dot(S.back(), Y.back()) / std::max(dot(Y.back(), Y.back()), 1e-300);
        }
        for (auto& v : d) v *= gamma;
        for (size_t i = 0; i < S.size(); ++i) {
            const double beta = rho[i] * dot(Y[i], d);
            axpy(d, alpha[i] - beta, S[i]);
        }
        for (auto& v : d) v = -v;
        if (dot(d, cur.g) >= 0.0) {
            // Curvature went stale; restart from steepest descent.
            S.clear();
            Y.clear();
            rho.clear();
            for (size_t i = 0; i < n; ++i) d[i] = -cur.g[i];
        }

        // Backtracking Armijo, tested at the projected trial point with the
        // actual displacement x_t - x. With no curvature history the
        // direction is raw steepest descent at whatever scale the objective
        // has, so the first trial step is normalized to unit length.
        std::vector<double> xt(n);
        ObjEval<T> trial;
        bool accepted = false;
        double step = 1.0;
        if (S.empty()) {
            const double gn = std::sqrt(dot(d, d));
            if (gn > 1.0) step = 1.0 / gn;
        }
        for (int ls = 0; ls < 60; ++ls) {
            double gdx = 0.0;
            for (size_t i = 0; i < n; ++i) {
                xt[i] = clip(x[i] + step * d[i]);
                gdx += cur.g[i] * (xt[i] - x[i]);
            }
            if (gdx < 0.0) {
                trial = eval_objective(objective, xt, shape);
                if (!trial.finite()) {
                    throw DivergenceError<T>(
                        strf("objective became non-finite at iteration %ld", it),
                        make_image(x));
                }
                if (trial.f <= cur.f + c1 * gdx) {
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if (!accepted) break;  // no feasible descent left: stationary for the box

        // One interpolation polish: the slopes at 0 and at the accepted step
        // pin the 1-d quadratic minimizer along d, which is exact for
        // quadratic objectives. Kept only when it passes Armijo and beats
        // the accepted point, so monotonicity is untouched.
        {
            const double sl0 = dot(cur.g, d);
            const double slt = dot(trial.g, d);
            if (slt > sl0 && sl0 < 0.0) {
                const double upol = step * sl0 / (sl0 - slt);
                if (std::isfinite(upol) && upol > 0.0 && upol <= 10.0 * step &&
                    std::abs(upol - step) > 1e-3 * step) {
                    std::vector<double> xp(n);
                    double gdxp = 0.0;
                    for (size_t i = 0; i < n; ++i) {
                        xp[i] = clip(x[i] + upol * d[i]);
                        gdxp += cur.g[i] * (xp[i] - x[i]);
                    }
                    if (gdxp < 0.0) {
                        ObjEval<T> pol = eval_objective(objective, xp, shape);
                        if (pol.finite() && pol.f < trial.f &&
                            pol.f <= cur.f + c1 * gdxp) {
                            trial = std::move(pol);
                            xt.swap(xp);
                        }
                    }
                }
            }
        }

        std::vector<double> snew(n), ynew(n);
        for (size_t i = 0; i < n; ++i) {
            snew[i] = xt[i] - x[i];
            ynew[i] = trial.g[i] - cur.g[i];
        }
        const double sy = dot(snew, ynew);
        if (sy > 1e-10) {
            S.push_back(std::move(snew));
            Y.push_back(std::move(ynew));
            rho.push_back(1.0 / sy);
            if (static_cast<long>(S.size()) > opt.memory) {
                S.pop_front();
                Y.pop_front();
                rho.pop_front();
            }
        }

        const double f_prev = cur.f;
        x.swap(xt);
        cur = std::move(trial);
        reports.push_back({it, cur.f, cur.terms, elapsed_ms(t0)});

        if (std::abs(f_prev - cur.f) <= opt.tolerance * std::max(1.0, std::abs(f_prev))) break;
        if (dot(cur.g, cur.g) < 1e-28) break;
    }
    return {make_image(x), std::move(reports)};
}

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params,
               const std::vector<const std::vector<T>*>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("parameter and gradient counts differ");
    }
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
            state.v[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw std::invalid_argument("optimizer state does not match the parameter list");
    }

    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->raw_data();
        const auto& g = *grads[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (g.size() != p.size() || m.size() != p.size()) {
            throw std::invalid_argument(strf("shape mismatch at parameter %zu", i));
        }
        for (size_t j = 0; j < p.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            p[j] -= static_cast<T>(lr * mh / (std::sqrt(vh) + eps));
        }
    }
}

std::string train_curve_csv(const std::vector<TrainRow>& curve) {
    std::string text = "iter,total,content,style,tv,ms\n";
    for (const auto& r : curve) {
        text += strf("%ld,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.iter, r.total, r.content,
                     r.style, r.tv, r.ms);
    }
    return text;
}

namespace {

// Corpus listing: images are .png/.ppm files that are not themselves masks;
// each pairs with `<stem>_mask.png`.
struct CorpusEntry {
    std::string image_path;
    std::string mask_path;
    std::string name;
};

std::vector<CorpusEntry> list_corpus(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) {
        throw IoError(strf("corpus directory %s does not exist", dir.c_str()));
    }
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        const std::string ext = entry.path().extension().string();
        if (ext != ".png" && ext != ".ppm") continue;
        if (name.size() >= 9 && name.compare(name.size() - 9, 9, "_mask.png") == 0) continue;
        names.push_back(name);
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) {
        throw IoError(strf("corpus directory %s contains no images", dir.c_str()));
    }

    std::vector<CorpusEntry> entries;
    std::string missing;
    for (const auto& name : names) {
        const std::string stem = fs::path(name).stem().string();
        const std::string mask = (fs::path(dir) / (stem + "_mask.png")).string();
        if (!file_exists(mask)) {
            if (!missing.empty()) missing += ", ";
            missing += name;
            continue;
        }
        entries.push_back({(fs::path(dir) / name).string(), mask, name});
    }
    if (!missing.empty()) {
        throw IoError(strf("corpus images missing masks: %s", missing.c_str()));
    }
    return entries;
}

}  // namespace

template <typename T>
TrainResult<T> train_transform(const std::string& corpus_dir, const Tensor<T>& style_image,
                               const SemanticMask& style_mask, const TrainConfig& cfg,
                               const LossNet<T>& loss_net, const std::string& out_model,
                               const std::string& out_csv) {
    if (cfg.batch < 1) throw ConfigError("training batch size must be >= 1");
    if (cfg.iterations < 1) throw ConfigError("training iteration count must be >= 1");
    if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (cfg.log_every < 1) throw ConfigError("log interval must be >= 1");

    const auto entries = list_corpus(corpus_dir);
    const long s = cfg.image_size;

    // Everything constant per corpus image is computed once up front: the
    // resized input, its repaired mask, and the loss context holding input
    // features and style Grams.
    std::vector<Tensor<T>> inputs;
    std::vector<LossContext<T>> contexts;
    inputs.reserve(entries.size());
    contexts.reserve(entries.size());
    for (const auto& e : entries) {
        Image img = resize_bilinear(read_image(e.image_path), s, s);
        SemanticMask mask = repair_orphans(decode_mask(read_image(e.mask_path)));
        mask = resize_mask(mask, s, s);
        inputs.push_back(img.to_tensor<T>());
        contexts.push_back(LossContext<T>::build(loss_net, inputs.back(), style_image, mask,
                                                 style_mask, cfg.loss));
    }

    auto net = TransformNet<T>::build(cfg.net, cfg.seed);
    auto params = net.parameters();
    AdamState adam;

    // Separate derived streams so shuffling never perturbs dropout draws.
    SeededRng shuffle_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 1);
    SeededRng dropout_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 2);

    std::vector<size_t> order(entries.size());
    std::iota(order.begin(), order.end(), size_t{0});
    size_t pos = order.size();  // first use reshuffles
    auto next_index = [&]() {
        if (pos >= order.size()) {
            for (size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);
            }
            pos = 0;
        }
        return order[pos++];
    };

    const size_t plane = static_cast<size_t>(3 * s * s);
    std::vector<TrainRow> curve;
    for (long it = 1; it <= cfg.iterations; ++it) {
        const auto t0 = std::chrono::steady_clock::now();

        std::vector<size_t> idx(static_cast<size_t>(cfg.batch));
        auto batch = Tensor<T>::zeros({cfg.batch, 3, s, s});
        for (size_t b = 0; b < idx.size(); ++b) {
            idx[b] = next_index();
            std::memcpy(batch.raw_data().data() + b * plane, inputs[idx[b]].data().data(),
                        plane * sizeof(T));
        }

        auto out = net.train_forward(batch, dropout_rng);
        Tensor<T> total_node;
        double total = 0.0, content = 0.0, style = 0.0, tv = 0.0;
        for (size_t b = 0; b < idx.size(); ++b) {
            auto lv = contexts[idx[b]].evaluate(slice_batch(out, static_cast<long>(b)));
            total_node = b == 0 ? lv.node : add(total_node, lv.node);
            total += lv.breakdown.total;
            content += lv.breakdown.content;
            style += lv.breakdown.style;
            tv += lv.breakdown.tv;
        }
        const double inv = 1.0 / static_cast<double>(cfg.batch);
        total *= inv;
        content *= inv;
        style *= inv;
        tv *= inv;
        if (cfg.batch > 1) total_node = scale(total_node, inv);
        if (!std::isfinite(total)) {
            throw NumericError(
                strf("loss became non-finite at iteration %ld (content=%g, style=%g, tv=%g)",
                     it, content, style, tv));
        }

        backward(total_node);
        std::vector<const std::vector<T>*> grads;
        grads.reserve(params.size());
        for (auto* p : params) {
            if (!p->has_grad()) p->zero_grad();
            grads.push_back(&p->grad());
        }
        adam_step(params, grads, adam, cfg.lr);
        for (auto* p : params) p->zero_grad();

        if (it % cfg.log_every == 0 || it == cfg.iterations) {
            curve.push_back({it, total, content, style, tv, elapsed_ms(t0)});
        }
    }

    if (!out_model.empty()) net.save(out_model);
    if (!out_csv.empty()) atomic_write_file(out_csv, train_curve_csv(curve));
    return {std::move(net), std::move(curve)};
}

#define EYEPURIFY_INST_OPTIMIZERS(T)                                                        \
    template Tensor<T> white_noise_image<T>(long, long, uint64_t);                          \
    template LbfgsResult<T> projected_lbfgs<T>(const BoxObjective<T>&, const Tensor<T>&,    \
                                               const LbfgsOptions&);                        \
    template void adam_step<T>(const std::vector<Tensor<T>*>&,                              \
                               const std::vector<const std::vector<T>*>&, AdamState&,       \
                               double, double, double, double);                             \
    template TrainResult<T> train_transform<T>(                                             \
        const std::string&, const Tensor<T>&, const SemanticMask&, const TrainConfig&,      \
        const LossNet<T>&, const std::string&, const std::string&);

EYEPURIFY_INST_OPTIMIZERS(float)
EYEPURIFY_INST_OPTIMIZERS(double)
#undef EYEPURIFY_INST_OPTIMIZERS

}  // namespace eyepurify
