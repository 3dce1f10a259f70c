#include "eyepurify/eval_metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <new>

#include "eyepurify/image_io.hpp"
#include "eyepurify/masks.hpp"

namespace eyepurify {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Mean and sample stddev of raw values.
std::pair<double, double> mean_std(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    if (v.size() > 1) {
        for (double x : v) var += (x - mean) * (x - mean);
        var /= static_cast<double>(v.size() - 1);
    }
    return {mean, std::sqrt(var)};
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Ellipse fit_ellipse(const std::vector<std::array<double, 2>>& points) {
    const size_t n = points.size();
    if (n < 6) {
        throw NumericError(strf("ellipse fit needs at least 6 points, got %zu", n));
    }

    // Centroid/scale normalization keeps the scatter matrices conditioned for
    // pixel-coordinate input.
    double mx = 0.0, my = 0.0;
    for (const auto& p : points) {
        mx += p[0];
        my += p[1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double scale = 0.0;
    for (const auto& p : points) scale += std::hypot(p[0] - mx, p[1] - my);
    scale /= static_cast<double>(n);
    if (!(scale > 0.0)) throw NumericError("ellipse fit input is degenerate");

    Eigen::MatrixXd d1(static_cast<long>(n), 3), d2(static_cast<long>(n), 3);
    for (size_t i = 0; i < n; ++i) {
        const double x = (points[i][0] - mx) / scale;
        const double y = (points[i][1] - my) / scale;
        d1(static_cast<long>(i), 0) = x * x;
        d1(static_cast<long>(i), 1) = x * y;
        d1(static_cast<long>(i), 2) = y * y;
        d2(static_cast<long>(i), 0) = x;
        d2(static_cast<long>(i), 1) = y;
        d2(static_cast<long>(i), 2) = 1.0;
    }

    // Block-decomposed direct least squares: solve the reduced 3x3
    // eigenproblem for the quadratic half of the conic, with the ellipse
    // constraint selecting the admissible eigenvector.
    const Eigen::Matrix3d s1 = d1.transpose() * d1;
    const Eigen::Matrix3d s2 = d1.transpose() * d2;
    const Eigen::Matrix3d s3 = d2.transpose() * d2;
    Eigen::FullPivLU<Eigen::Matrix3d> lu(s3);
    if (!lu.isInvertible()) throw NumericError("ellipse fit input is degenerate");
    const Eigen::Matrix3d t = -lu.solve(s2.transpose());
    const Eigen::Matrix3d m = s1 + s2 * t;
    Eigen::Matrix3d mr;
    mr.row(0) = m.row(2) / 2.0;
    mr.row(1) = -m.row(1);
    mr.row(2) = m.row(0) / 2.0;

    Eigen::EigenSolver<Eigen::Matrix3d> es(mr);
    int pick = -1;
    double best = 0.0;
    for (int k = 0; k < 3; ++k) {
        if (std::abs(es.eigenvalues()[k].imag()) >
            1e-8 * (1.0 + std::abs(es.eigenvalues()[k].real()))) {
            continue;
        }
        const Eigen::Vector3d v = es.eigenvectors().col(k).real();
        const double cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if (cond > best) {
            best = cond;
            pick = k;
        }
    }
    if (pick < 0) throw NumericError("ellipse fit input is degenerate");

    const Eigen::Vector3d q = es.eigenvectors().col(pick).real();
    const Eigen::Vector3d l = t * q;
    double ca = q[0], cb = q[1], cc = q[2];
    double cd = l[0], ce = l[1], cf = l[2];
    if (ca + cc < 0.0) {
        ca = -ca;
        cb = -cb;
        cc = -cc;
        cd = -cd;
        ce = -ce;
        cf = -cf;
    }

    const double den = cb * cb - 4.0 * ca * cc;
    if (!(den < 0.0)) throw NumericError("ellipse fit input is degenerate");
    const double ncx = (2.0 * cc * cd - cb * ce) / den;
    const double ncy = (2.0 * ca * ce - cb * cd) / den;
    const double g = ca * ncx * ncx + cb * ncx * ncy + cc * ncy * ncy + cd * ncx +
                     ce * ncy + cf;

    Eigen::Matrix2d quad;
    quad << ca, cb / 2.0, cb / 2.0, cc;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> qs(quad);
    const double l1 = qs.eigenvalues()[0];
    const double l2 = qs.eigenvalues()[1];
    if (!(l1 > 0.0) || !(g < 0.0)) throw NumericError("ellipse fit input is degenerate");

    double theta = std::atan2(qs.eigenvectors().col(0)[1], qs.eigenvectors().col(0)[0]);
    while (theta > M_PI / 2.0) theta -= M_PI;
    while (theta <= -M_PI / 2.0) theta += M_PI;

    Ellipse e;
    e.cx = mx + scale * ncx;
    e.cy = my + scale * ncy;
    e.a = scale * std::sqrt(-g / l1);
    e.b = scale * std::sqrt(-g / l2);
    e.theta = theta;
    if (!std::isfinite(e.a) || !std::isfinite(e.b) || e.b <= 0.0) {
        throw NumericError("ellipse fit input is degenerate");
    }
    return e;
}

std::vector<std::array<double, 2>> pupil_contour(const SemanticMask& mask) {
    const long h = mask.height;
    const long w = mask.width;
    auto on = [&](long y, long x) {
        return y >= 0 && y < h && x >= 0 && x < w &&
               mask.pupil[static_cast<size_t>(y * w + x)] >= 0.5f;
    };
    std::vector<std::array<double, 2>> pts;
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            if (!on(y, x)) continue;
            if (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1)) {
                pts.push_back({static_cast<double>(x), static_cast<double>(y)});
            }
        }
    }
    return pts;
}

Ellipse fit_pupil(const SemanticMask& mask) {
    const auto pts = pupil_contour(mask);
    if (pts.empty()) throw NumericError("pupil channel is empty");
    return fit_ellipse(pts);
}

double pupil_center_diff(const SemanticMask& a, const SemanticMask& b) {
    const Ellipse ea = fit_pupil(a);
    const Ellipse eb = fit_pupil(b);
    return std::hypot(ea.cx - eb.cx, ea.cy - eb.cy);
}

std::vector<PairRow> pupil_center_batch(const std::string& dir_a, const std::string& dir_b) {
    namespace fs = std::filesystem;
    for (const std::string& dir : {dir_a, dir_b}) {
        if (!fs::is_directory(dir)) {
            throw IoError(strf("mask directory %s does not exist", dir.c_str()));
        }
    }
    std::vector<std::string> names;
    for (const auto& ent : fs::directory_iterator(dir_a)) {
        if (!ent.is_regular_file()) continue;
        const std::string name = ent.path().filename().string();
        if (name.size() > 4 && name.rfind(".png") == name.size() - 4) {
            names.push_back(name);
        }
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) {
        throw IoError(strf("mask directory %s contains no images", dir_a.c_str()));
    }
    std::string missing;
    for (const auto& name : names) {
        if (!file_exists(dir_b + "/" + name)) {
            if (!missing.empty()) missing += ", ";
            missing += name;
        }
    }
    if (!missing.empty()) {
        throw IoError(strf("masks missing counterparts in %s: %s", dir_b.c_str(),
                           missing.c_str()));
    }

    std::vector<PairRow> rows;
    for (const auto& name : names) {
        const SemanticMask ma = repair_orphans(decode_mask(read_image(dir_a + "/" + name)));
        const SemanticMask mb = repair_orphans(decode_mask(read_image(dir_b + "/" + name)));
        rows.push_back({name, pupil_center_diff(ma, mb)});
    }
    return rows;
}

MeanStd summary_stats(const std::vector<PairRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("summary needs at least one row");
    std::vector<double> v;
    v.reserve(rows.size());
    for (const auto& r : rows) v.push_back(r.px);
    const auto [mean, sd] = mean_std(v);
    return {mean, sd};
}

std::string pupil_center_csv(const std::vector<PairRow>& rows) {
    std::string out = "name,center_px\n";
    for (const auto& r : rows) out += strf("%s,%.17g\n", r.name.c_str(), r.px);
    return out;
}

ParityCurve objective_parity(const TransformNet<float>& net, const LossContext<float>& ctx,
                             const Tensor<float>& content, long iters, uint64_t seed) {
    if (content.rank() != 3 || content.dim(0) != 3) {
        throw std::invalid_argument(strf("parity content must be [3,H,W], got %s",
                                         shape_str(content.shape()).c_str()));
    }
    ParityCurve curve;
    {
        NoGradGuard guard;
        const Tensor<float> out = net.forward(content);
        if (out.shape() != content.shape()) {
            throw ConfigError(strf("model output %s does not match the objective input %s",
                                   shape_str(out.shape()).c_str(),
                                   shape_str(content.shape()).c_str()));
        }
        curve.feedforward = ctx.evaluate(out).breakdown.total;
    }

    BoxObjective<float> obj = [&ctx](const Tensor<float>& x, LossBreakdown* terms) {
        auto lv = ctx.evaluate(x);
        if (terms) *terms = lv.breakdown;
        return lv.node;
    };
    LbfgsOptions opt;
    opt.max_iter = iters;
    opt.tolerance = 0.0;
    auto res = projected_lbfgs<float>(
        obj, white_noise_image<float>(content.dim(1), content.dim(2), seed), opt);
    curve.lbfgs = std::move(res.reports);
    for (const auto& r : curve.lbfgs) {
        if (r.objective < curve.feedforward) {
            curve.crossover = r.iter;
            break;
        }
    }
    return curve;
}

std::string parity_csv(const std::vector<ParityCurve>& curves) {
    if (curves.empty()) throw std::invalid_argument("parity csv needs at least one curve");
    size_t iters = 0;
    for (const auto& c : curves) {
        if (c.lbfgs.empty()) throw std::invalid_argument("parity curve has no reports");
        iters = std::max(iters, c.lbfgs.size());
    }
    std::vector<double> ffs;
    ffs.reserve(curves.size());
    for (const auto& c : curves) ffs.push_back(c.feedforward);
    const auto [fm, fs] = mean_std(ffs);

    std::string out = "iter,lbfgs_mean,lbfgs_std,ff_mean,ff_std\n";
    for (size_t i = 0; i < iters; ++i) {
        std::vector<double> vals;
        vals.reserve(curves.size());
        for (const auto& c : curves) {
            const auto& r = c.lbfgs;
            vals.push_back(i < r.size() ? r[i].objective : r.back().objective);
        }
        const auto [m, s] = mean_std(vals);
        out += strf("%zu,%.17g,%.17g,%.17g,%.17g\n", i, m, s, fm, fs);
    }
    return out;
}

BenchReport bench_rows(const TransformNet<float>& net, const LossNet<float>& loss_net,
                       const std::vector<long>& sizes, long lbfgs_iters, int ff_runs) {
    if (ff_runs < 1) throw ConfigError("bench needs at least one feed-forward run");
    if (lbfgs_iters < 0) throw ConfigError("bench lbfgs iteration count must be >= 0");

    BenchReport rep;
    for (long size : sizes) {
        try {
            // Refuse absurd sizes before the allocator can overcommit.
            if (static_cast<double>(size) * static_cast<double>(size) * 12.0 > 64e9) {
                throw std::bad_alloc();
            }
            const auto content = synthetic_eye(size, size, 101).to_tensor<float>();
            const auto style = synthetic_eye(size, size, 202).to_tensor<float>();
            const auto mask = synthetic_eye_mask(size, size);

            std::vector<double> passes;
            {
                NoGradGuard guard;
                (void)net.forward(content);  // warm-up
                for (int r = 0; r < ff_runs; ++r) {
                    const auto t0 = std::chrono::steady_clock::now();
                    (void)net.forward(content);
                    passes.push_back(seconds_since(t0));
                }
            }
            const double ff_sec = median(passes);

            const auto ctx =
                LossContext<float>::build(loss_net, content, style, mask, mask, LossConfig{});
            BoxObjective<float> obj = [&ctx](const Tensor<float>& x, LossBreakdown* terms) {
                auto lv = ctx.evaluate(x);
                if (terms) *terms = lv.breakdown;
                return lv.node;
            };
            LbfgsOptions opt;
            opt.max_iter = lbfgs_iters;
            opt.tolerance = 0.0;
            const auto t0 = std::chrono::steady_clock::now();
            (void)projected_lbfgs<float>(obj, white_noise_image<float>(size, size, 303), opt);
            const double lb_sec = seconds_since(t0);

            rep.rows.push_back({"feed-forward", size, ff_sec, lb_sec / ff_sec});
            rep.rows.push_back({strf("lbfgs-%ld-iters", lbfgs_iters), size, lb_sec, 1.0});
        } catch (const std::bad_alloc&) {
            rep.skipped.push_back(strf("%ldx%ld skipped: allocation failed", size, size));
        } catch (const std::length_error&) {
            rep.skipped.push_back(strf("%ldx%ld skipped: allocation failed", size, size));
        }
    }
    return rep;
}

std::string bench_table(const BenchReport& report) {
    std::vector<long> sizes;
    std::vector<std::string> methods;
    for (const auto& row : report.rows) {
        if (std::find(sizes.begin(), sizes.end(), row.resolution) == sizes.end()) {
            sizes.push_back(row.resolution);
        }
        if (std::find(methods.begin(), methods.end(), row.method) == methods.end()) {
            methods.push_back(row.method);
        }
    }

    auto cell = [&](const std::string& method, long size) -> std::string {
        for (const auto& row : report.rows) {
            if (row.method == method && row.resolution == size) {
                return strf("%.4gs", row.seconds);
            }
        }
        return "-";
    };
    auto speedup_cell = [&](long size) -> std::string {
        for (const auto& row : report.rows) {
            if (row.resolution == size && row.method == "feed-forward") {
                return strf("%.1fx", row.speedup);
            }
        }
        return "-";
    };

    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header = {"method"};
    for (long s : sizes) header.push_back(strf("%ldx%ld", s, s));
    grid.push_back(header);
    for (const auto& method : methods) {
        std::vector<std::string> line = {method};
        for (long s : sizes) line.push_back(cell(method, s));
        grid.push_back(line);
    }
    std::vector<std::string> sp = {"speedup"};
    for (long s : sizes) sp.push_back(speedup_cell(s));
    grid.push_back(sp);

    std::vector<size_t> widths(grid[0].size(), 0);
    for (const auto& line : grid) {
        for (size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], line[i].size());
    }
    std::string out;
    for (const auto& line : grid) {
        for (size_t i = 0; i < line.size(); ++i) {
            out += line[i];
            if (i + 1 < line.size()) {
                out.append(widths[i] - line[i].size() + 2, ' ');
            }
        }
        out += '\n';
    }
    for (const auto& note : report.skipped) out += note + "\n";
    return out;
}

Image synthetic_eye(long h, long w, uint64_t seed) {
    if (h < 1 || w < 1) {
        throw std::invalid_argument(strf("eye fixture size %ldx%ld is not positive", h, w));
    }
    SeededRng rng(seed);
    Image img(h, w, 0.0f);
    const double cy = (h - 1) / 2.0;
    const double cx = (w - 1) / 2.0;
    const double ri = std::min(h, w) / 3.0;
    const double rp = ri / 2.5;
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            const double r = std::hypot(y - cy, x - cx);
            for (int c = 0; c < 3; ++c) {
                double v;
                if (r <= rp) {
                    v = 30.0 + 6.0 * c;
                } else if (r <= ri) {
                    v = 95.0 - 18.0 * c + 22.0 * std::cos(0.35 * (x + y) + c);
                } else {
                    v = 150.0 + 55.0 * (x / std::max(1.0, w - 1.0)) -
                        25.0 * (y / std::max(1.0, h - 1.0)) - 20.0 * c;
                }
                v += rng.uniform(-6.0, 6.0);
                img.at(c, y, x) = static_cast<float>(std::min(255.0, std::max(0.0, v)));
            }
        }
    }
    return img;
}

SemanticMask synthetic_eye_mask(long h, long w) {
    if (h < 1 || w < 1) {
        throw std::invalid_argument(strf("eye fixture size %ldx%ld is not positive", h, w));
    }
    SemanticMask m(h, w);
    const double cy = (h - 1) / 2.0;
    const double cx = (w - 1) / 2.0;
    const double ri = std::min(h, w) / 3.0;
    const double rp = ri / 2.5;
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            const double r = std::hypot(y - cy, x - cx);
            if (r <= ri) m.iris[static_cast<size_t>(y * w + x)] = 1.0f;
            if (r <= rp) m.pupil[static_cast<size_t>(y * w + x)] = 1.0f;
        }
    }
    return m;
}

}  // namespace eyepurify
