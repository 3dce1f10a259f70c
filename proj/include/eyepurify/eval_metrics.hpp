#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "eyepurify/image.hpp"
#include "eyepurify/losses.hpp"
#include "eyepurify/optimizers.hpp"
#include "eyepurify/transform_net.hpp"

namespace eyepurify {

// Geometric ellipse in pixel coordinates; a is the semi-major axis and theta
// the major-axis angle in (-pi/2, pi/2].
struct Ellipse {
    double cx = 0.0;
    double cy = 0.0;
    double a = 0.0;
    double b = 0.0;
    double theta = 0.0;
};

// Direct least-squares conic fit constrained to ellipses. Needs at least six
// points that are not collinear or otherwise degenerate.
Ellipse fit_ellipse(const std::vector<std::array<double, 2>>& points);

// 4-connected boundary pixels of the binarized (>= 0.5) pupil channel, as
// (x, y) pixel centers in scan order.
std::vector<std::array<double, 2>> pupil_contour(const SemanticMask& mask);

// Ellipse fitted to the pupil boundary.
Ellipse fit_pupil(const SemanticMask& mask);

// Euclidean distance between the fitted pupil centers of two masks.
double pupil_center_diff(const SemanticMask& a, const SemanticMask& b);

struct PairRow {
    std::string name;
    double px = 0.0;
};

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // sample stddev; 0 for a single row
};

// Pairs mask images between two directories by file name and runs the pupil
// metric on each pair (decode + orphan repair included).
std::vector<PairRow> pupil_center_batch(const std::string& dir_a, const std::string& dir_b);

MeanStd summary_stats(const std::vector<PairRow>& rows);

// Header `name,center_px`, one row per pair.
std::string pupil_center_csv(const std::vector<PairRow>& rows);

// One image's parity experiment: the L-BFGS objective trace from white noise
// against the single feed-forward objective of the model's output.
struct ParityCurve {
    std::vector<OptimizeReport> lbfgs;
    double feedforward = 0.0;
    long crossover = -1;  // first iteration beating feedforward; -1 if never
};

ParityCurve objective_parity(const TransformNet<float>& net, const LossContext<float>& ctx,
                             const Tensor<float>& content, long iters, uint64_t seed);

// Aggregates curves across images: per-iteration mean and sample stddev of
// the L-BFGS objective, with shorter curves carrying their final value
// forward, plus the feed-forward mean/stddev.
std::string parity_csv(const std::vector<ParityCurve>& curves);

struct BenchRow {
    std::string method;
    long resolution = 0;
    double seconds = 0.0;
    double speedup = 1.0;  // lbfgs seconds / feed-forward seconds
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::vector<std::string> skipped;  // diagnostics for resolutions that failed
};

// Per resolution: median of ff_runs timed feed-forward passes and one timed
// L-BFGS run of lbfgs_iters iterations on the full objective. Resolutions
// that fail allocation are skipped with a diagnostic instead of aborting.
BenchReport bench_rows(const TransformNet<float>& net, const LossNet<float>& loss_net,
                       const std::vector<long>& sizes, long lbfgs_iters, int ff_runs = 5);

// Aligned plain-text table: one column per resolution, rows for each method's
// seconds and a final speedup row.
std::string bench_table(const BenchReport& report);

// Deterministic synthetic eye fixture: gradient backdrop, iris and pupil
// discs, mild seeded grain. The mask matches the disc geometry.
Image synthetic_eye(long h, long w, uint64_t seed);
SemanticMask synthetic_eye_mask(long h, long w);

}  // namespace eyepurify
