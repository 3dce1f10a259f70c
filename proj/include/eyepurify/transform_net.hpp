#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "eyepurify/tensor_ops.hpp"

namespace eyepurify {

// shape-preserving: pad-1 residual convs, output size equals input size.
// table-faithful: pad-0 residual convs with identity cropping; spatial size
// follows the published trace (280 -> 140 -> 70 -> 66 -> 62 -> 58 -> 54 for
// a 256 input), so the output is smaller than the input.
enum class TransformPreset { ShapePreserving, TableFaithful };

// Architecture scale. Defaults reproduce the published configuration; tests
// shrink the ladder to keep finite-difference sweeps tractable.
struct TransformNetConfig {
    TransformPreset preset = TransformPreset::ShapePreserving;
    long base_filters = 32;  // channel ladder: base, 2x, 4x
    long res_blocks = 4;
    double dropout_p = 0.1;  // training-mode only; not persisted in files
};

struct ShapeRow {
    std::string layer;
    std::array<long, 3> chw;
};

// The feed-forward purification network: 9x9 conv, two stride-2 convs,
// residual body, two stride-2 deconvs, 9x9 output conv, scaled tanh.
// Batch norm and ReLU follow every non-residual conv except the output.
// Inputs are [0,255] images; outputs land in [0,255] by construction.
template <typename T>
class TransformNet {
public:
    // Deterministic He fan-in initialization from the seed; batch-norm
    // scales start at one, shifts and running means at zero, running
    // variances at one.
    static TransformNet build(const TransformNetConfig& cfg, uint64_t seed);
    static TransformNet build(TransformPreset preset, uint64_t seed);

    // Model files store f32 tensors (double nets truncate on save) plus
    // batch-norm running stats; the preset rides in the header tag and the
    // channel ladder is recovered from the tensor shapes.
    static TransformNet load(const std::string& path);
    void save(const std::string& path) const;

    // Eval-mode passes: running batch-norm stats, dropout off. The graph is
    // still recorded when grad mode is on (the parameters are grad leaves);
    // wrap in NoGradGuard for pure inference.
    Tensor<T> forward(const Tensor<T>& image) const;        // [3,H,W]
    Tensor<T> forward_batch(const Tensor<T>& batch) const;  // [N,3,H,W]

    // Training-mode pass: batch statistics (running stats updated in
    // place), dropout draws from rng in layer order.
    Tensor<T> train_forward(const Tensor<T>& batch, SeededRng& rng);

    // Pure layer-by-layer activation shapes for one [3,h,w] input,
    // beginning with ("input", ...) and ending with ("output", ...).
    // Throws when the input is below the minimum size for the preset.
    static std::vector<ShapeRow> shape_plan(const TransformNetConfig& cfg, long h, long w);
    std::vector<ShapeRow> shape_plan(long h, long w) const { return shape_plan(cfg_, h, w); }

    const TransformNetConfig& config() const { return cfg_; }

    // Trainable leaves in fixed order (conv weights and biases, batch-norm
    // scales and shifts). Running stats are state, not parameters.
    std::vector<Tensor<T>*> parameters();
    long param_count() const;

private:
    struct Conv {
        Tensor<T> w, b;
    };
    struct Bn {
        Tensor<T> gamma, beta;
        mutable BatchNormState<T> state;
    };
    struct ResBlock {
        Conv c1, c2;
        Bn b1, b2;
    };

    TransformNet() = default;

    Tensor<T> run(const Tensor<T>& batch, bool training, SeededRng* rng) const;
    Tensor<T> apply_bn(const Bn& bn, const Tensor<T>& x, bool training) const;
    Tensor<T> res_forward(const ResBlock& blk, const Tensor<T>& x, bool training,
                          SeededRng* rng) const;

    TransformNetConfig cfg_;
    long pad_in_ = 4;     // reflection padding before the first conv
    long conv1_pad_ = 0;  // zero padding inside the first conv
    long res_pad_ = 1;

    Conv conv1_, conv2_, conv3_;
    Bn bn1_, bn2_, bn3_;
    std::vector<ResBlock> blocks_;
    Conv dec1_, dec2_;
    Bn bn4_, bn5_;
    Conv out_;
};

extern template class TransformNet<float>;
extern template class TransformNet<double>;

}  // namespace eyepurify
