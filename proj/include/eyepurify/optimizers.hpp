#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "eyepurify/losses.hpp"
#include "eyepurify/lossnet.hpp"
#include "eyepurify/tensor.hpp"
#include "eyepurify/transform_net.hpp"

namespace eyepurify {

// One accepted iterate of the image optimizer. Row 0 is the initial point.
struct OptimizeReport {
    long iter = 0;
    double objective = 0.0;
    LossBreakdown breakdown;  // zero-filled when the objective reports no terms
    double ms = 0.0;
};

// Differentiable scalar objective over an image tensor. The callable may
// fill `terms` (when non-null) with its per-term breakdown; the optimizer
// requests it on every evaluation and keeps the accepted one.
template <typename T>
using BoxObjective = std::function<Tensor<T>(const Tensor<T>& image, LossBreakdown* terms)>;

struct LbfgsOptions {
    long max_iter = 500;
    long memory = 10;
    double tolerance = 1e-9;  // relative objective-change stop
    double box_lo = 0.0;
    double box_hi = 255.0;
};

// Raised when the objective or its gradient goes non-finite mid-run. The
// last accepted iterate rides along so callers can still save something.
template <typename T>
class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& msg, Tensor<T> last)
        : NumericError(msg), last_good_(std::move(last)) {}
    const Tensor<T>& last_good() const { return last_good_; }

private:
    Tensor<T> last_good_;
};

template <typename T>
struct LbfgsResult {
    Tensor<T> image;
    std::vector<OptimizeReport> reports;
};

// I.i.d. uniform pixels in [0,255], shape [3,h,w].
template <typename T>
Tensor<T> white_noise_image(long h, long w, uint64_t seed);

// Limited-memory BFGS with box projection: two-loop-recursion direction,
// backtracking Armijo line search evaluated at the projected trial point,
// curvature pairs skipped when s.y <= 1e-10. Accepted objective values are
// strictly non-increasing and every reported iterate lies inside the box.
template <typename T>
LbfgsResult<T> projected_lbfgs(const BoxObjective<T>& objective, const Tensor<T>& init,
                               const LbfgsOptions& opt = {});

// First and second moments in double, one slot per parameter tensor. Sized
// lazily on the first step; later steps must match.
struct AdamState {
    long t = 0;
    std::vector<std::vector<double>> m, v;
};

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params,
               const std::vector<const std::vector<T>*>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct TrainConfig {
    long batch = 4;
    long iterations = 200;
    double lr = 1e-4;
    uint64_t seed = 0;
    long image_size = 256;
    LossConfig loss;
    TransformNetConfig net;
    long log_every = 1;  // curve row interval; the final iteration always logs
};

struct TrainRow {
    long iter = 0;
    double total = 0.0, content = 0.0, style = 0.0, tv = 0.0, ms = 0.0;
};

template <typename T>
struct TrainResult {
    TransformNet<T> net;
    std::vector<TrainRow> curve;
};

std::string train_curve_csv(const std::vector<TrainRow>& curve);

// Trains a fresh transform net on the corpus directory. Each image
// `name.png`/`name.ppm` pairs with a mask `name_mask.png`; every pairing
// problem is reported in one error before any compute starts. Corpus images
// and masks are resized to cfg.image_size; the style pair is used as given.
// Writes the model to out_model and, when out_csv is non-empty, the loss
// curve. Deterministic per seed: same seed, corpus, and build produce
// byte-identical model files.
template <typename T>
TrainResult<T> train_transform(const std::string& corpus_dir, const Tensor<T>& style_image,
                               const SemanticMask& style_mask, const TrainConfig& cfg,
                               const LossNet<T>& loss_net, const std::string& out_model,
                               const std::string& out_csv = "");

#define EYEPURIFY_EXTERN_OPTIMIZERS(T)                                                      \
    extern template Tensor<T> white_noise_image<T>(long, long, uint64_t);                   \
    extern template LbfgsResult<T> projected_lbfgs<T>(const BoxObjective<T>&,               \
                                                      const Tensor<T>&, const LbfgsOptions&); \
    extern template void adam_step<T>(const std::vector<Tensor<T>*>&,                       \
                                      const std::vector<const std::vector<T>*>&, AdamState&, \
                                      double, double, double, double);                      \
    extern template TrainResult<T> train_transform<T>(                                      \
        const std::string&, const Tensor<T>&, const SemanticMask&, const TrainConfig&,      \
        const LossNet<T>&, const std::string&, const std::string&);

EYEPURIFY_EXTERN_OPTIMIZERS(float)
EYEPURIFY_EXTERN_OPTIMIZERS(double)
#undef EYEPURIFY_EXTERN_OPTIMIZERS

}  // namespace eyepurify
