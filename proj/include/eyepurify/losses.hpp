#pragma once

#include <map>
#include <string>
#include <vector>

#include "eyepurify/lossnet.hpp"
#include "eyepurify/masks.hpp"
#include "eyepurify/tensor.hpp"

namespace eyepurify {

// Objective hyperparameters. Layer sets name loss-net layers; weights are
// uniform by default with optional per-layer overrides.
struct LossConfig {
    std::vector<std::string> content_layers_local{"conv4_2"};
    std::vector<std::string> content_layers_global{"conv3_2"};
    std::vector<std::string> style_layers_local{"conv1_1", "conv2_1", "conv3_1", "conv4_1",
                                                "conv5_1"};
    std::vector<std::string> style_layers_global{"conv1_2", "conv2_2", "conv3_3", "conv4_3",
                                                 "conv5_3"};
    double alpha = 1e2;
    double beta = 1e4;
    double lambda_g = 1.0;
    double lambda_l = 1.0;
    double theta = 1e-6;
    std::map<std::string, double> alpha_per_layer;
    std::map<std::string, double> beta_per_layer;
    // Baseline reproduction switch: per-element-normalized Grams compared
    // with a bare 1/4 factor instead of raw Grams under 1/(4 N^2 M^2).
    bool gram_by_elements = false;

    double alpha_for(const std::string& layer) const;
    double beta_for(const std::string& layer) const;
    // Non-negative weights, non-empty layer sets, known layer names.
    void validate() const;
    // Union of all configured layers in network order.
    std::vector<std::string> all_layers() const;
};

// Mask channels for one layer as constant [h,w] tensors.
template <typename T>
using MaskChannels = std::vector<Tensor<T>>;

// The two semantic channels (pupil, iris) as mask tensors.
template <typename T>
MaskChannels<T> mask_channels(const SemanticMask& m);

// Per-channel masked copies F_c = F (*) broadcast(S_c). The caller picks
// whose masks apply: the output image is always masked by the input image's
// masks, the style image by its own.
template <typename T>
std::vector<Tensor<T>> masked_features(const Tensor<T>& f, const MaskChannels<T>& masks);

// F F^T, raw or divided by N*M.
template <typename T>
Tensor<T> gram_matrix(const Tensor<T>& f, bool by_elements = false);

// Squared-error content distance, 1/(2 N M) normalization.
template <typename T>
Tensor<T> content_loss_global(const Tensor<T>& f_o, const Tensor<T>& f_i);

// Masked content distance summed over mask channels; masks come from the
// input image. Same normalization path as the global term, so a single
// all-ones channel reproduces it bit-exactly.
template <typename T>
Tensor<T> content_loss_local(const Tensor<T>& f_o, const Tensor<T>& f_i,
                             const MaskChannels<T>& masks_i);

// lambda_g * global + lambda_l * local on one layer's features.
template <typename T>
Tensor<T> feature_loss(const Tensor<T>& f_o, const Tensor<T>& f_i,
                       const MaskChannels<T>& masks_i, double lambda_g, double lambda_l);

// Gram distance, 1/(4 N^2 M^2) with M taken from the first argument.
template <typename T>
Tensor<T> style_loss_global(const Tensor<T>& f_o, const Tensor<T>& f_s,
                            bool by_elements = false);

// Masked Gram distance summed over mask channels; the first image's features
// take masks_i, the second's masks_s. Channel counts must agree.
template <typename T>
Tensor<T> style_loss_local(const Tensor<T>& f_o, const Tensor<T>& f_s,
                           const MaskChannels<T>& masks_i, const MaskChannels<T>& masks_s,
                           bool by_elements = false);

// lambda_g * global + lambda_l * local on one layer's features.
template <typename T>
Tensor<T> style_loss(const Tensor<T>& f_o, const Tensor<T>& f_s, const MaskChannels<T>& masks_i,
                     const MaskChannels<T>& masks_s, double lambda_g, double lambda_l,
                     bool by_elements = false);

// Per-term values for logging and curves, in evaluation order.
struct LossBreakdown {
    double total = 0.0;
    double content = 0.0;
    double style = 0.0;
    double tv = 0.0;
    std::vector<std::pair<std::string, double>> content_per_layer;
    std::vector<std::pair<std::string, double>> style_per_layer;
};

template <typename T>
struct LossValue {
    Tensor<T> node;  // scalar graph node, differentiable w.r.t. O
    LossBreakdown breakdown;
};

// Precomputed constant side of the objective: input and style features,
// style Grams, and per-layer mask tensors. Build once, evaluate per iterate.
template <typename T>
class LossContext {
public:
    // masks arrive at image resolution, already repaired; they are pooled
    // to each configured layer internally.
    static LossContext build(const LossNet<T>& net, const Tensor<T>& input,
                             const Tensor<T>& style, const SemanticMask& mask_input,
                             const SemanticMask& mask_style, const LossConfig& cfg);

    // Full objective at O: content + style + theta * tv.
    LossValue<T> evaluate(const Tensor<T>& out_image) const;

    const LossConfig& config() const { return cfg_; }

private:
    LossConfig cfg_;
    const LossNet<T>* net_ = nullptr;
    long in_h_ = 0, in_w_ = 0;
    FeatureStack<T> f_input_;
    FeatureStack<T> f_style_;
    std::map<std::string, MaskChannels<T>> masks_input_;
    std::map<std::string, MaskChannels<T>> masks_style_;
    // Precomputed style-side Gram constants, global and per mask channel.
    std::map<std::string, Tensor<T>> gram_style_global_;
    std::map<std::string, std::vector<Tensor<T>>> gram_style_local_;
};

// One-shot convenience over LossContext; masks are per-layer pyramids
// prepared by the caller. Missing or misshapen levels raise errors naming
// the layer.
template <typename T>
LossValue<T> total_loss(const LossNet<T>& net, const Tensor<T>& out_image,
                        const Tensor<T>& input, const Tensor<T>& style,
                        const LayerMasks& masks_input, const LayerMasks& masks_style,
                        const LossConfig& cfg);

#define EYEPURIFY_EXTERN_LOSSES(T)                                                          \
    extern template MaskChannels<T> mask_channels<T>(const SemanticMask&);                  \
    extern template std::vector<Tensor<T>> masked_features<T>(const Tensor<T>&,             \
                                                              const MaskChannels<T>&);     \
    extern template Tensor<T> gram_matrix<T>(const Tensor<T>&, bool);                       \
    extern template Tensor<T> content_loss_global<T>(const Tensor<T>&, const Tensor<T>&);   \
    extern template Tensor<T> content_loss_local<T>(const Tensor<T>&, const Tensor<T>&,     \
                                                    const MaskChannels<T>&);                \
    extern template Tensor<T> feature_loss<T>(const Tensor<T>&, const Tensor<T>&,           \
                                              const MaskChannels<T>&, double, double);      \
    extern template Tensor<T> style_loss_global<T>(const Tensor<T>&, const Tensor<T>&,      \
                                                   bool);                                   \
    extern template Tensor<T> style_loss_local<T>(const Tensor<T>&, const Tensor<T>&,       \
                                                  const MaskChannels<T>&,                   \
                                                  const MaskChannels<T>&, bool);            \
    extern template Tensor<T> style_loss<T>(const Tensor<T>&, const Tensor<T>&,             \
                                            const MaskChannels<T>&, const MaskChannels<T>&, \
                                            double, double, bool);                          \
    extern template class LossContext<T>;                                                   \
    extern template LossValue<T> total_loss<T>(                                             \
        const LossNet<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
        const LayerMasks&, const LayerMasks&, const LossConfig&);

EYEPURIFY_EXTERN_LOSSES(float)
EYEPURIFY_EXTERN_LOSSES(double)
#undef EYEPURIFY_EXTERN_LOSSES

}  // namespace eyepurify
