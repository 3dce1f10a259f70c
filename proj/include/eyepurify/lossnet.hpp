#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "eyepurify/tensor.hpp"

namespace eyepurify {

// Per-layer feature maps [N_l, h_l, w_l]; rows are channels, the trailing
// two dims are the flattened spatial axis (M_l = h_l * w_l).
template <typename T>
using FeatureStack = std::map<std::string, Tensor<T>>;

// Fixed 19-layer-topology feature extractor. Weights are frozen at
// construction: seeded orthogonal draws, or an external weight file in the
// model container format. Features are post-activation responses.
template <typename T>
class LossNet {
public:
    struct LayerDef {
        const char* name;
        long in_ch;
        long out_ch;
        bool pool_before;  // 2x2 max pool applied to this layer's input
        long stride;       // cumulative downsampling at this layer's output
    };

    // conv1_1 .. conv5_4 with 2x2 pools between blocks.
    static const std::vector<LayerDef>& layer_defs();
    static bool has_layer(const std::string& name);
    static const LayerDef& layer(const std::string& name);

    // Cumulative strides for downsample_masks, in the given order.
    static std::vector<std::pair<std::string, long>> layer_strides(
        const std::vector<std::string>& names);

    // Orthogonal rows/columns per layer (gain sqrt 2), zero biases, no input
    // mean. Same seed gives bit-identical weights.
    static LossNet seeded(uint64_t seed);

    // Loads frozen weights saved in the model container format. The file
    // carries per-channel input means which are subtracted before conv1_1.
    static LossNet load(const std::string& path);
    void save(const std::string& path) const;

    // Runs the image [3,H,W] (values in [0,255]) through the stack and
    // returns the requested post-activation maps. The forward pass stops at
    // the deepest requested layer. Differentiable w.r.t. the image when it
    // requires grad; never w.r.t. the weights.
    FeatureStack<T> extract(const Tensor<T>& image,
                            const std::vector<std::string>& names) const;

    const Tensor<T>& weight(size_t layer_index) const { return weights_[layer_index]; }
    const Tensor<T>& bias(size_t layer_index) const { return biases_[layer_index]; }
    const std::array<T, 3>& input_mean() const { return input_mean_; }

private:
    LossNet() = default;

    std::vector<Tensor<T>> weights_;  // [out, in, 3, 3] each
    std::vector<Tensor<T>> biases_;   // [out] each
    std::array<T, 3> input_mean_{T(0), T(0), T(0)};
    bool subtract_mean_ = false;
};

extern template class LossNet<float>;
extern template class LossNet<double>;

}  // namespace eyepurify
