#include "eyepurify/losses.hpp"

#include <algorithm>

#include "eyepurify/tensor_ops.hpp"

namespace eyepurify {

namespace {

bool contains(const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
}

// Union of layer sets in network order, so evaluation order is independent
// of how the config lists them.
std::vector<std::string> union_in_net_order(
    std::initializer_list<const std::vector<std::string>*> sets) {
    std::vector<std::string> out;
    for (const auto& d : LossNet<float>::layer_defs()) {
        for (const auto* s : sets) {
            if (contains(*s, d.name)) {
                out.push_back(d.name);
                break;
            }
        }
    }
    return out;
}

void check_weight(double v, const char* name) {
    if (!(v >= 0.0)) {
        throw ConfigError(strf("loss weight %s must be >= 0, got %g", name, v));
    }
}

template <typename T>
long spatial_count(const Tensor<T>& f) {
    return f.dim(1) * f.dim(2);
}

template <typename T>
void check_feature_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.rank() != 3 || b.rank() != 3) {
        throw std::invalid_argument(strf("%s: features must be [N,h,w]", what));
    }
    if (a.dim(0) != b.dim(0)) {
        throw std::invalid_argument(strf("%s: channel counts differ (%ld vs %ld)", what,
                                         a.dim(0), b.dim(0)));
    }
}

// Weighted sum of scalar nodes; zero-weight terms are skipped entirely so a
// disabled term costs nothing and changes no bits of the rest.
template <typename T>
Tensor<T> weighted_sum(std::vector<std::pair<Tensor<T>, double>> terms) {
    Tensor<T> acc;
    bool first = true;
    for (auto& [node, w] : terms) {
        if (w == 0.0) continue;
        Tensor<T> t = w == 1.0 ? node : scale(node, w);
        acc = first ? t : add(acc, t);
        first = false;
    }
    if (first) return Tensor<T>::zeros({1});
    return acc;
}

}  // namespace

double LossConfig::alpha_for(const std::string& layer) const {
    auto it = alpha_per_layer.find(layer);
    return it == alpha_per_layer.end() ? alpha : it->second;
}

double LossConfig::beta_for(const std::string& layer) const {
    auto it = beta_per_layer.find(layer);
    return it == beta_per_layer.end() ? beta : it->second;
}

void LossConfig::validate() const {
    check_weight(alpha, "alpha");
    check_weight(beta, "beta");
    check_weight(lambda_g, "lambda_g");
    check_weight(lambda_l, "lambda_l");
    check_weight(theta, "theta");
    const struct {
        const char* what;
        const std::vector<std::string>* set;
    } sets[] = {
        {"content_layers_local", &content_layers_local},
        {"content_layers_global", &content_layers_global},
        {"style_layers_local", &style_layers_local},
        {"style_layers_global", &style_layers_global},
    };
    for (const auto& s : sets) {
        if (s.set->empty()) {
            throw ConfigError(strf("%s must not be empty", s.what));
        }
        for (const auto& name : *s.set) {
            if (!LossNet<float>::has_layer(name)) {
                throw ConfigError(strf("%s: unknown layer %s", s.what, name.c_str()));
            }
        }
    }
    for (const auto& [name, v] : alpha_per_layer) {
        if (!LossNet<float>::has_layer(name)) {
            throw ConfigError(strf("alpha override: unknown layer %s", name.c_str()));
        }
        check_weight(v, name.c_str());
    }
    for (const auto& [name, v] : beta_per_layer) {
        if (!LossNet<float>::has_layer(name)) {
            throw ConfigError(strf("beta override: unknown layer %s", name.c_str()));
        }
        check_weight(v, name.c_str());
    }
}

std::vector<std::string> LossConfig::all_layers() const {
    return union_in_net_order({&content_layers_local, &content_layers_global,
                               &style_layers_local, &style_layers_global});
}

template <typename T>
MaskChannels<T> mask_channels(const SemanticMask& m) {
    MaskChannels<T> out;
    for (const std::vector<float>* plane : {&m.pupil, &m.iris}) {
        std::vector<T> v(plane->size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>((*plane)[i]);
        out.push_back(Tensor<T>::from_data(std::move(v), {m.height, m.width}));
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> masked_features(const Tensor<T>& f, const MaskChannels<T>& masks) {
    if (f.rank() != 3) {
        throw std::invalid_argument(strf("masked_features: expected [N,h,w], got %s",
                                         shape_str(f.shape()).c_str()));
    }
    std::vector<Tensor<T>> out;
    out.reserve(masks.size());
    for (const auto& m : masks) {
        if (m.rank() != 2 || m.dim(0) != f.dim(1) || m.dim(1) != f.dim(2)) {
            throw std::invalid_argument(
                strf("masked_features: mask %s does not match feature grid %ldx%ld",
                     shape_str(m.shape()).c_str(), f.dim(1), f.dim(2)));
        }
        out.push_back(mask_mul(f, m));
    }
    return out;
}

template <typename T>
Tensor<T> gram_matrix(const Tensor<T>& f, bool by_elements) {
    Tensor<T> g = gram(f);
    if (!by_elements) return g;
    return scale(g, 1.0 / (static_cast<double>(f.dim(0)) * static_cast<double>(spatial_count(f))));
}

template <typename T>
Tensor<T> content_loss_global(const Tensor<T>& f_o, const Tensor<T>& f_i) {
    check_feature_pair(f_o, f_i, "content_loss_global");
    const double nm = static_cast<double>(f_o.dim(0)) * static_cast<double>(spatial_count(f_o));
    return scale(l2_diff_sum(f_o, f_i), 1.0 / (2.0 * nm));
}

template <typename T>
Tensor<T> content_loss_local(const Tensor<T>& f_o, const Tensor<T>& f_i,
                             const MaskChannels<T>& masks_i) {
    check_feature_pair(f_o, f_i, "content_loss_local");
    if (masks_i.empty()) {
        throw std::invalid_argument("content_loss_local: no mask channels");
    }
    const auto fo_c = masked_features(f_o, masks_i);
    const auto fi_c = masked_features(f_i, masks_i);
    Tensor<T> acc;
    for (size_t c = 0; c < masks_i.size(); ++c) {
        Tensor<T> term = content_loss_global(fo_c[c], fi_c[c]);
        acc = c == 0 ? term : add(acc, term);
    }
    return acc;
}

template <typename T>
Tensor<T> feature_loss(const Tensor<T>& f_o, const Tensor<T>& f_i,
                       const MaskChannels<T>& masks_i, double lambda_g, double lambda_l) {
    std::vector<std::pair<Tensor<T>, double>> terms;
    if (lambda_g != 0.0) terms.emplace_back(content_loss_global(f_o, f_i), lambda_g);
    if (lambda_l != 0.0) terms.emplace_back(content_loss_local(f_o, f_i, masks_i), lambda_l);
    return weighted_sum(std::move(terms));
}

template <typename T>
Tensor<T> style_loss_global(const Tensor<T>& f_o, const Tensor<T>& f_s, bool by_elements) {
    check_feature_pair(f_o, f_s, "style_loss_global");
    if (by_elements) {
        return scale(l2_diff_sum(gram_matrix(f_o, true), gram_matrix(f_s, true)), 0.25);
    }
    const double n = static_cast<double>(f_o.dim(0));
    const double m = static_cast<double>(spatial_count(f_o));
    return scale(l2_diff_sum(gram(f_o), gram(f_s)), 1.0 / (4.0 * n * n * m * m));
}

template <typename T>
Tensor<T> style_loss_local(const Tensor<T>& f_o, const Tensor<T>& f_s,
                           const MaskChannels<T>& masks_i, const MaskChannels<T>& masks_s,
                           bool by_elements) {
    check_feature_pair(f_o, f_s, "style_loss_local");
    if (masks_i.size() != masks_s.size()) {
        throw std::invalid_argument(
            strf("style_loss_local: mask channel count differs (%zu vs %zu)", masks_i.size(),
                 masks_s.size()));
    }
    if (masks_i.empty()) {
        throw std::invalid_argument("style_loss_local: no mask channels");
    }
    const auto fo_c = masked_features(f_o, masks_i);
    const auto fs_c = masked_features(f_s, masks_s);
    Tensor<T> acc;
    for (size_t c = 0; c < masks_i.size(); ++c) {
        Tensor<T> term = style_loss_global(fo_c[c], fs_c[c], by_elements);
        acc = c == 0 ? term : add(acc, term);
    }
    return acc;
}

template <typename T>
Tensor<T> style_loss(const Tensor<T>& f_o, const Tensor<T>& f_s, const MaskChannels<T>& masks_i,
                     const MaskChannels<T>& masks_s, double lambda_g, double lambda_l,
                     bool by_elements) {
    std::vector<std::pair<Tensor<T>, double>> terms;
    if (lambda_g != 0.0) terms.emplace_back(style_loss_global(f_o, f_s, by_elements), lambda_g);
    if (lambda_l != 0.0) {
        terms.emplace_back(style_loss_local(f_o, f_s, masks_i, masks_s, by_elements), lambda_l);
    }
    return weighted_sum(std::move(terms));
}

namespace {

// Style-side comparison constants: what the O-side term is measured against.
// by_elements stores per-element-normalized Grams (each with its own M).
template <typename T>
struct StyleConstants {
    std::map<std::string, Tensor<T>> global_grams;
    std::map<std::string, std::vector<Tensor<T>>> local_grams;
};

template <typename T>
StyleConstants<T> style_constants(const FeatureStack<T>& f_style,
                                  const std::map<std::string, MaskChannels<T>>& masks_style,
                                  const LossConfig& cfg) {
    NoGradGuard ng;
    StyleConstants<T> sc;
    for (const auto& l : cfg.style_layers_global) {
        sc.global_grams.emplace(l, gram_matrix(f_style.at(l), cfg.gram_by_elements));
    }
    for (const auto& l : cfg.style_layers_local) {
        const auto& masks = masks_style.at(l);
        std::vector<Tensor<T>> grams;
        grams.reserve(masks.size());
        for (const auto& fc : masked_features(f_style.at(l), masks)) {
            grams.push_back(gram_matrix(fc, cfg.gram_by_elements));
        }
        sc.local_grams.emplace(l, std::move(grams));
    }
    return sc;
}

// Core assembly shared by LossContext and the one-shot entry point. All
// style-side quantities arrive as constants.
template <typename T>
LossValue<T> assemble_objective(const FeatureStack<T>& f_o, const FeatureStack<T>& f_i,
                                const std::map<std::string, MaskChannels<T>>& masks_i,
                                const StyleConstants<T>& sc, const Tensor<T>& out_image,
                                const LossConfig& cfg) {
    LossValue<T> lv;
    std::vector<std::pair<Tensor<T>, double>> terms;

    for (const auto& l :
         union_in_net_order({&cfg.content_layers_global, &cfg.content_layers_local})) {
        std::vector<std::pair<Tensor<T>, double>> parts;
        if (cfg.lambda_g != 0.0 && contains(cfg.content_layers_global, l)) {
            parts.emplace_back(content_loss_global(f_o.at(l), f_i.at(l)), cfg.lambda_g);
        }
        if (cfg.lambda_l != 0.0 && contains(cfg.content_layers_local, l)) {
            parts.emplace_back(content_loss_local(f_o.at(l), f_i.at(l), masks_i.at(l)),
                               cfg.lambda_l);
        }
        const double a = cfg.alpha_for(l);
        if (parts.empty() || a == 0.0) continue;
        Tensor<T> feat = weighted_sum(std::move(parts));
        Tensor<T> weighted = a == 1.0 ? feat : scale(feat, a);
        lv.breakdown.content_per_layer.emplace_back(l, static_cast<double>(weighted.value()));
        lv.breakdown.content += lv.breakdown.content_per_layer.back().second;
        terms.emplace_back(weighted, 1.0);
    }

    for (const auto& l :
         union_in_net_order({&cfg.style_layers_global, &cfg.style_layers_local})) {
        std::vector<std::pair<Tensor<T>, double>> parts;
        if (cfg.lambda_g != 0.0 && contains(cfg.style_layers_global, l)) {
            const Tensor<T>& gs = sc.global_grams.at(l);
            const Tensor<T>& fo = f_o.at(l);
            Tensor<T> term;
            if (cfg.gram_by_elements) {
                term = scale(l2_diff_sum(gram_matrix(fo, true), gs), 0.25);
            } else {
                const double n = static_cast<double>(fo.dim(0));
                const double m = static_cast<double>(spatial_count(fo));
                term = scale(l2_diff_sum(gram(fo), gs), 1.0 / (4.0 * n * n * m * m));
            }
            parts.emplace_back(term, cfg.lambda_g);
        }
        if (cfg.lambda_l != 0.0 && contains(cfg.style_layers_local, l)) {
            const auto& gs_c = sc.local_grams.at(l);
            const auto& masks = masks_i.at(l);
            if (gs_c.size() != masks.size()) {
                throw std::invalid_argument(
                    strf("layer %s: mask channel count differs between input and style",
                         l.c_str()));
            }
            const auto fo_c = masked_features(f_o.at(l), masks);
            Tensor<T> acc;
            for (size_t c = 0; c < masks.size(); ++c) {
                Tensor<T> term;
                if (cfg.gram_by_elements) {
                    term = scale(l2_diff_sum(gram_matrix(fo_c[c], true), gs_c[c]), 0.25);
                } else {
                    const double n = static_cast<double>(fo_c[c].dim(0));
                    const double m = static_cast<double>(spatial_count(fo_c[c]));
                    term = scale(l2_diff_sum(gram(fo_c[c]), gs_c[c]),
                                 1.0 / (4.0 * n * n * m * m));
                }
                acc = c == 0 ? term : add(acc, term);
            }
            parts.emplace_back(acc, cfg.lambda_l);
        }
        const double b = cfg.beta_for(l);
        if (parts.empty() || b == 0.0) continue;
        Tensor<T> st = weighted_sum(std::move(parts));
        Tensor<T> weighted = b == 1.0 ? st : scale(st, b);
        lv.breakdown.style_per_layer.emplace_back(l, static_cast<double>(weighted.value()));
        lv.breakdown.style += lv.breakdown.style_per_layer.back().second;
        terms.emplace_back(weighted, 1.0);
    }

    if (cfg.theta != 0.0) {
        Tensor<T> tv = scale(tv_loss(out_image), cfg.theta);
        lv.breakdown.tv = static_cast<double>(tv.value());
        terms.emplace_back(tv, 1.0);
    }

    lv.node = weighted_sum(std::move(terms));
    lv.breakdown.total = static_cast<double>(lv.node.value());
    return lv;
}

template <typename T>
void check_image(const Tensor<T>& img, const char* what) {
    if (img.rank() != 3 || img.dim(0) != 3) {
        throw std::invalid_argument(strf("%s must be [3,H,W], got %s", what,
                                         shape_str(img.shape()).c_str()));
    }
}

template <typename T>
void check_mask_resolution(const SemanticMask& m, const Tensor<T>& img, const char* what) {
    if (m.height != img.dim(1) || m.width != img.dim(2)) {
        throw std::invalid_argument(strf("%s mask is %ldx%ld but the image is %ldx%ld", what,
                                         m.height, m.width, img.dim(1), img.dim(2)));
    }
}

// Pools image-resolution masks to the listed layers and converts to tensors.
template <typename T>
std::map<std::string, MaskChannels<T>> pooled_mask_tensors(
    const SemanticMask& mask, const std::vector<std::string>& layers) {
    std::map<std::string, MaskChannels<T>> out;
    if (layers.empty()) return out;
    const LayerMasks pyramid =
        downsample_masks(mask, LossNet<T>::layer_strides(layers));
    for (const auto& [name, level] : pyramid) out.emplace(name, mask_channels<T>(level));
    return out;
}

template <typename T>
void check_level_dims(const std::string& layer, const MaskChannels<T>& masks,
                      const Tensor<T>& feature) {
    for (const auto& m : masks) {
        if (m.dim(0) != feature.dim(1) || m.dim(1) != feature.dim(2)) {
            throw std::invalid_argument(
                strf("layer %s: mask level %s does not match feature grid %ldx%ld",
                     layer.c_str(), shape_str(m.shape()).c_str(), feature.dim(1),
                     feature.dim(2)));
        }
    }
}

}  // namespace

template <typename T>
LossContext<T> LossContext<T>::build(const LossNet<T>& net, const Tensor<T>& input,
                                     const Tensor<T>& style, const SemanticMask& mask_input,
                                     const SemanticMask& mask_style, const LossConfig& cfg) {
    cfg.validate();
    check_image(input, "input image");
    check_image(style, "style image");
    check_mask_resolution(mask_input, input, "input");
    check_mask_resolution(mask_style, style, "style");

    LossContext ctx;
    ctx.cfg_ = cfg;
    ctx.net_ = &net;
    ctx.in_h_ = input.dim(1);
    ctx.in_w_ = input.dim(2);

    const auto content_layers =
        union_in_net_order({&cfg.content_layers_global, &cfg.content_layers_local});
    const auto style_layers =
        union_in_net_order({&cfg.style_layers_global, &cfg.style_layers_local});
    {
        NoGradGuard ng;
        ctx.f_input_ = net.extract(input, content_layers);
        ctx.f_style_ = net.extract(style, style_layers);
    }

    // Pooled levels floor-halve exactly like the extractor's pooling, so
    // their dims match the feature dims by construction.
    const auto masked_layers =
        union_in_net_order({&cfg.content_layers_local, &cfg.style_layers_local});
    ctx.masks_input_ = pooled_mask_tensors<T>(mask_input, masked_layers);
    ctx.masks_style_ = pooled_mask_tensors<T>(mask_style, cfg.style_layers_local);

    StyleConstants<T> sc = style_constants(ctx.f_style_, ctx.masks_style_, cfg);
    ctx.gram_style_global_ = std::move(sc.global_grams);
    ctx.gram_style_local_ = std::move(sc.local_grams);
    return ctx;
}

template <typename T>
LossValue<T> LossContext<T>::evaluate(const Tensor<T>& out_image) const {
    check_image(out_image, "output image");
    if (out_image.dim(1) != in_h_ || out_image.dim(2) != in_w_) {
        throw std::invalid_argument(strf("output image is %ldx%ld but the context was built "
                                         "for %ldx%ld",
                                         out_image.dim(1), out_image.dim(2), in_h_, in_w_));
    }
    FeatureStack<T> f_o = net_->extract(out_image, cfg_.all_layers());
    StyleConstants<T> sc;
    sc.global_grams = gram_style_global_;
    sc.local_grams = gram_style_local_;
    return assemble_objective(f_o, f_input_, masks_input_, sc, out_image, cfg_);
}

template <typename T>
LossValue<T> total_loss(const LossNet<T>& net, const Tensor<T>& out_image,
                        const Tensor<T>& input, const Tensor<T>& style,
                        const LayerMasks& masks_input, const LayerMasks& masks_style,
                        const LossConfig& cfg) {
    cfg.validate();
    check_image(out_image, "output image");
    check_image(input, "input image");
    check_image(style, "style image");
    if (out_image.dim(1) != input.dim(1) || out_image.dim(2) != input.dim(2)) {
        throw std::invalid_argument("output and input image sizes differ");
    }

    const auto content_layers =
        union_in_net_order({&cfg.content_layers_global, &cfg.content_layers_local});
    const auto style_layers =
        union_in_net_order({&cfg.style_layers_global, &cfg.style_layers_local});

    std::map<std::string, MaskChannels<T>> m_i;
    std::map<std::string, MaskChannels<T>> m_s;
    for (const auto& l :
         union_in_net_order({&cfg.content_layers_local, &cfg.style_layers_local})) {
        auto it = masks_input.find(l);
        if (it == masks_input.end()) {
            throw std::invalid_argument(strf("missing input masks for layer %s", l.c_str()));
        }
        m_i.emplace(l, mask_channels<T>(it->second));
    }
    for (const auto& l : cfg.style_layers_local) {
        auto it = masks_style.find(l);
        if (it == masks_style.end()) {
            throw std::invalid_argument(strf("missing style masks for layer %s", l.c_str()));
        }
        m_s.emplace(l, mask_channels<T>(it->second));
    }

    FeatureStack<T> f_i, f_s;
    {
        NoGradGuard ng;
        f_i = net.extract(input, content_layers);
        f_s = net.extract(style, style_layers);
    }
    for (const auto& [name, channels] : m_s) check_level_dims(name, channels, f_s.at(name));

    FeatureStack<T> f_o = net.extract(out_image, cfg.all_layers());
    for (const auto& [name, channels] : m_i) check_level_dims(name, channels, f_o.at(name));

    const StyleConstants<T> sc = style_constants(f_s, m_s, cfg);
    return assemble_objective(f_o, f_i, m_i, sc, out_image, cfg);
}

#define EYEPURIFY_INSTANTIATE_LOSSES(T)                                                     \
    template MaskChannels<T> mask_channels<T>(const SemanticMask&);                         \
    template std::vector<Tensor<T>> masked_features<T>(const Tensor<T>&,                    \
                                                       const MaskChannels<T>&);            \
    template Tensor<T> gram_matrix<T>(const Tensor<T>&, bool);                              \
    template Tensor<T> content_loss_global<T>(const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> content_loss_local<T>(const Tensor<T>&, const Tensor<T>&,            \
                                             const MaskChannels<T>&);                       \
    template Tensor<T> feature_loss<T>(const Tensor<T>&, const Tensor<T>&,                  \
                                       const MaskChannels<T>&, double, double);             \
    template Tensor<T> style_loss_global<T>(const Tensor<T>&, const Tensor<T>&, bool);      \
    template Tensor<T> style_loss_local<T>(const Tensor<T>&, const Tensor<T>&,              \
                                           const MaskChannels<T>&, const MaskChannels<T>&,  \
                                           bool);                                           \
    template Tensor<T> style_loss<T>(const Tensor<T>&, const Tensor<T>&,                    \
                                     const MaskChannels<T>&, const MaskChannels<T>&,        \
                                     double, double, bool);                                 \
    template class LossContext<T>;                                                          \
    template LossValue<T> total_loss<T>(const LossNet<T>&, const Tensor<T>&,                \
                                        const Tensor<T>&, const Tensor<T>&,                 \
                                        const LayerMasks&, const LayerMasks&,               \
                                        const LossConfig&);

EYEPURIFY_INSTANTIATE_LOSSES(float)
EYEPURIFY_INSTANTIATE_LOSSES(double)
#undef EYEPURIFY_INSTANTIATE_LOSSES

}  // namespace eyepurify
