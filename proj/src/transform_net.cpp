#include "eyepurify/transform_net.hpp"

#include <cmath>

#include "eyepurify/model_format.hpp"

namespace eyepurify {

namespace {

long conv_out(long h, long k, long stride, long pad) {
    return (h + 2 * pad - k) / stride + 1;
}

long deconv_out(long h, long k, long stride, long pad) {
    return (h - 1) * stride - 2 * pad + k;
}

// He fan-in normal: std = sqrt(2 / (in_ch * kh * kw)). Weights draw in
// row-major order; biases stay zero, so the draw count per layer is exactly
// the weight element count.
template <typename T>
Tensor<T> he_weight(std::vector<long> shape, long fan_in, SeededRng& rng) {
    auto w = Tensor<T>::zeros(shape, true);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.raw_data()) v = static_cast<T>(std_dev * rng.normal());
    return w;
}

struct PresetGeometry {
    long pad_in;
    long conv1_pad;
    long res_pad;
};

PresetGeometry geometry(TransformPreset preset) {
    if (preset == TransformPreset::TableFaithful) return {12, 4, 0};
    return {4, 0, 1};
}

}  // namespace

template <typename T>
TransformNet<T> TransformNet<T>::build(TransformPreset preset, uint64_t seed) {
    TransformNetConfig cfg;
    cfg.preset = preset;
    return build(cfg, seed);
}

template <typename T>
TransformNet<T> TransformNet<T>::build(const TransformNetConfig& cfg, uint64_t seed) {
    if (cfg.base_filters < 1 || cfg.res_blocks < 1) {
        throw std::invalid_argument("transform net needs base_filters >= 1 and res_blocks >= 1");
    }
    if (cfg.dropout_p < 0.0 || cfg.dropout_p >= 1.0) {
        throw std::invalid_argument("transform net dropout probability must be in [0,1)");
    }
    TransformNet net;
    net.cfg_ = cfg;
    const PresetGeometry g = geometry(cfg.preset);
    net.pad_in_ = g.pad_in;
    net.conv1_pad_ = g.conv1_pad;
    net.res_pad_ = g.res_pad;

    const long c1 = cfg.base_filters, c2 = 2 * c1, c3 = 4 * c1;
    SeededRng rng(seed);
    auto conv = [&](long out_ch, long in_ch, long k) {
        Conv c;
        c.w = he_weight<T>({out_ch, in_ch, k, k}, in_ch * k * k, rng);
        c.b = Tensor<T>::zeros({out_ch}, true);
        return c;
    };
    // Deconv weights are input-major [in, out, k, k].
    auto deconv = [&](long in_ch, long out_ch, long k) {
        Conv c;
        c.w = he_weight<T>({in_ch, out_ch, k, k}, in_ch * k * k, rng);
        c.b = Tensor<T>::zeros({out_ch}, true);
        return c;
    };
    auto bn = [](long ch) {
        Bn b;
        b.gamma = Tensor<T>::full({ch}, T(1), true);
        b.beta = Tensor<T>::zeros({ch}, true);
        b.state.running_mean.assign(static_cast<size_t>(ch), T(0));
        b.state.running_var.assign(static_cast<size_t>(ch), T(1));
        return b;
    };

    net.conv1_ = conv(c1, 3, 9);
    net.bn1_ = bn(c1);
    net.conv2_ = conv(c2, c1, 3);
    net.bn2_ = bn(c2);
    net.conv3_ = conv(c3, c2, 3);
    net.bn3_ = bn(c3);
    for (long i = 0; i < cfg.res_blocks; ++i) {
        ResBlock blk;
        blk.c1 = conv(c3, c3, 3);
        blk.c2 = conv(c3, c3, 3);
        blk.b1 = bn(c3);
        blk.b2 = bn(c3);
        net.blocks_.push_back(std::move(blk));
    }
    net.dec1_ = deconv(c3, c2, 4);
    net.bn4_ = bn(c2);
    net.dec2_ = deconv(c2, c1, 4);
    net.bn5_ = bn(c1);
    net.out_ = conv(3, c1, 9);
    return net;
}

template <typename T>
std::vector<ShapeRow> TransformNet<T>::shape_plan(const TransformNetConfig& cfg, long h,
                                                  long w) {
    if (h < 32 || w < 32) {
        throw std::invalid_argument(strf("input %ldx%ld is too small (minimum 32x32)", h, w));
    }
    const PresetGeometry g = geometry(cfg.preset);
    const bool preserve = cfg.preset == TransformPreset::ShapePreserving;
    const long c1 = cfg.base_filters, c2 = 2 * c1, c3 = 4 * c1;

    std::vector<ShapeRow> rows;
    auto push = [&](const std::string& name, long c, long hh, long ww) {
        if (hh < 1 || ww < 1) {
            throw std::invalid_argument(strf(
                "input %ldx%ld is too small for this preset (layer %s would be %ldx%ld)", h, w,
                name.c_str(), hh, ww));
        }
        rows.push_back({name, {c, hh, ww}});
    };

    push("input", 3, h, w);
    long ch = h + 2 * g.pad_in, cw = w + 2 * g.pad_in;
    push("pad", 3, ch, cw);
    ch = conv_out(ch, 9, 1, g.conv1_pad);
    cw = conv_out(cw, 9, 1, g.conv1_pad);
    push("conv1", c1, ch, cw);
    const long t2h = ch, t2w = cw;  // deconv2 restores the conv1 grid
    ch = conv_out(ch, 3, 2, 1);
    cw = conv_out(cw, 3, 2, 1);
    push("conv2", c2, ch, cw);
    const long t1h = ch, t1w = cw;  // deconv1 restores the conv2 grid
    ch = conv_out(ch, 3, 2, 1);
    cw = conv_out(cw, 3, 2, 1);
    push("conv3", c3, ch, cw);
    for (long i = 0; i < cfg.res_blocks; ++i) {
        if (g.res_pad == 0) {
            ch -= 4;
            cw -= 4;
        }
        push(strf("res%ld", i + 1), c3, ch, cw);
    }
    // Strided convs ceil-halve, so doubling can overshoot by one row or
    // column; the preserving preset crops back to the encoder grid.
    ch = deconv_out(ch, 4, 2, 1);
    cw = deconv_out(cw, 4, 2, 1);
    if (preserve) {
        ch = std::min(ch, t1h);
        cw = std::min(cw, t1w);
    }
    push("deconv1", c2, ch, cw);
    ch = deconv_out(ch, 4, 2, 1);
    cw = deconv_out(cw, 4, 2, 1);
    if (preserve) {
        ch = std::min(ch, t2h);
        cw = std::min(cw, t2w);
    }
    push("deconv2", c1, ch, cw);
    ch = conv_out(ch, 9, 1, 4);
    cw = conv_out(cw, 9, 1, 4);
    push("out", 3, ch, cw);
    push("output", 3, ch, cw);
    return rows;
}

template <typename T>
Tensor<T> TransformNet<T>::apply_bn(const Bn& bn, const Tensor<T>& x, bool training) const {
    return batch_norm2d(x, bn.gamma, bn.beta, bn.state, training);
}

template <typename T>
Tensor<T> TransformNet<T>::res_forward(const ResBlock& blk, const Tensor<T>& x, bool training,
                                       SeededRng* rng) const {
    Tensor<T> y = add_channel_bias(conv2d(x, blk.c1.w, 1, res_pad_), blk.c1.b);
    if (training && cfg_.dropout_p > 0.0) y = dropout(y, cfg_.dropout_p, *rng);
    y = relu(apply_bn(blk.b1, y, training));
    y = add_channel_bias(conv2d(y, blk.c2.w, 1, res_pad_), blk.c2.b);
    y = apply_bn(blk.b2, y, training);
    Tensor<T> skip = x;
    if (res_pad_ == 0) {
        const long hh = x.dim(x.rank() - 2), ww = x.dim(x.rank() - 1);
        skip = crop2d(x, 2, 2, hh - 4, ww - 4);
    }
    return add(y, skip);
}

template <typename T>
Tensor<T> TransformNet<T>::run(const Tensor<T>& batch, bool training, SeededRng* rng) const {
    if (batch.rank() != 4 || batch.dim(1) != 3) {
        throw std::invalid_argument(strf("transform net input must be [N,3,H,W], got %s",
                                         shape_str(batch.shape()).c_str()));
    }
    // Size validation, and the decoder's crop targets (rows 2 and 3 are
    // conv1 and conv2).
    const auto plan = shape_plan(cfg_, batch.dim(2), batch.dim(3));
    auto fit = [](Tensor<T> t, const std::array<long, 3>& target) {
        if (t.dim(2) == target[1] && t.dim(3) == target[2]) return t;
        return crop2d(t, 0, 0, target[1], target[2]);
    };

    Tensor<T> x = reflection_pad2d(batch, pad_in_);
    x = add_channel_bias(conv2d(x, conv1_.w, 1, conv1_pad_), conv1_.b);
    x = relu(apply_bn(bn1_, x, training));
    x = add_channel_bias(conv2d(x, conv2_.w, 2, 1), conv2_.b);
    x = relu(apply_bn(bn2_, x, training));
    x = add_channel_bias(conv2d(x, conv3_.w, 2, 1), conv3_.b);
    x = relu(apply_bn(bn3_, x, training));
    for (const auto& blk : blocks_) x = res_forward(blk, x, training, rng);
    x = conv_transpose2d(x, dec1_.w, 2, 1);
    if (cfg_.preset == TransformPreset::ShapePreserving) x = fit(x, plan[3].chw);
    x = add_channel_bias(x, dec1_.b);
    x = relu(apply_bn(bn4_, x, training));
    x = conv_transpose2d(x, dec2_.w, 2, 1);
    if (cfg_.preset == TransformPreset::ShapePreserving) x = fit(x, plan[2].chw);
    x = add_channel_bias(x, dec2_.b);
    x = relu(apply_bn(bn5_, x, training));
    x = add_channel_bias(conv2d(x, out_.w, 1, 4), out_.b);
    return scaled_tanh(x);
}

template <typename T>
Tensor<T> TransformNet<T>::forward_batch(const Tensor<T>& batch) const {
    return run(batch, false, nullptr);
}

template <typename T>
Tensor<T> TransformNet<T>::forward(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument(strf("transform net image must be [3,H,W], got %s",
                                         shape_str(image.shape()).c_str()));
    }
    auto batch = Tensor<T>::zeros({1, 3, image.dim(1), image.dim(2)});
    batch.raw_data() = image.data();
    return slice_batch(run(batch, false, nullptr), 0);
}

template <typename T>
Tensor<T> TransformNet<T>::train_forward(const Tensor<T>& batch, SeededRng& rng) {
    return run(batch, true, &rng);
}

template <typename T>
std::vector<Tensor<T>*> TransformNet<T>::parameters() {
    std::vector<Tensor<T>*> ps;
    auto add_conv = [&](Conv& c) {
        ps.push_back(&c.w);
        ps.push_back(&c.b);
    };
    auto add_bn = [&](Bn& b) {
        ps.push_back(&b.gamma);
        ps.push_back(&b.beta);
    };
    add_conv(conv1_);
    add_bn(bn1_);
    add_conv(conv2_);
    add_bn(bn2_);
    add_conv(conv3_);
    add_bn(bn3_);
    for (auto& blk : blocks_) {
        add_conv(blk.c1);
        add_bn(blk.b1);
        add_conv(blk.c2);
        add_bn(blk.b2);
    }
    add_conv(dec1_);
    add_bn(bn4_);
    add_conv(dec2_);
    add_bn(bn5_);
    add_conv(out_);
    return ps;
}

template <typename T>
long TransformNet<T>::param_count() const {
    long n = 0;
    for (const auto* p : const_cast<TransformNet*>(this)->parameters()) n += p->numel();
    return n;
}

namespace {

template <typename T>
void append_tensor(ModelFile& m, const std::string& name, const Tensor<T>& t) {
    NamedTensor nt;
    nt.name = name;
    nt.shape = t.shape();
    nt.data.assign(t.data().begin(), t.data().end());
    m.tensors.push_back(std::move(nt));
}

template <typename T>
void append_state(ModelFile& m, const std::string& prefix, const BatchNormState<T>& s) {
    NamedTensor mean;
    mean.name = prefix + ".running_mean";
    mean.shape = {static_cast<long>(s.running_mean.size())};
    mean.data.assign(s.running_mean.begin(), s.running_mean.end());
    m.tensors.push_back(std::move(mean));
    NamedTensor var;
    var.name = prefix + ".running_var";
    var.shape = {static_cast<long>(s.running_var.size())};
    var.data.assign(s.running_var.begin(), s.running_var.end());
    m.tensors.push_back(std::move(var));
}

}  // namespace

template <typename T>
void TransformNet<T>::save(const std::string& path) const {
    ModelFile m;
    m.preset = cfg_.preset == TransformPreset::TableFaithful
                   ? ModelPreset::TransformTableFaithful
                   : ModelPreset::TransformShapePreserving;
    auto conv = [&](const std::string& name, const Conv& c) {
        append_tensor(m, name + ".weight", c.w);
        append_tensor(m, name + ".bias", c.b);
    };
    auto bn = [&](const std::string& name, const Bn& b) {
        append_tensor(m, name + ".gamma", b.gamma);
        append_tensor(m, name + ".beta", b.beta);
        append_state(m, name, b.state);
    };
    conv("conv1", conv1_);
    bn("bn1", bn1_);
    conv("conv2", conv2_);
    bn("bn2", bn2_);
    conv("conv3", conv3_);
    bn("bn3", bn3_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = strf("res%zu", i + 1);
        conv(p + ".conv1", blocks_[i].c1);
        bn(p + ".bn1", blocks_[i].b1);
        conv(p + ".conv2", blocks_[i].c2);
        bn(p + ".bn2", blocks_[i].b2);
    }
    conv("deconv1", dec1_);
    bn("bn4", bn4_);
    conv("deconv2", dec2_);
    bn("bn5", bn5_);
    conv("out", out_);
    write_model(m, path);
}

template <typename T>
TransformNet<T> TransformNet<T>::load(const std::string& path) {
    const ModelFile m = read_model(path);
    TransformNetConfig cfg;
    if (m.preset == ModelPreset::TransformShapePreserving) {
        cfg.preset = TransformPreset::ShapePreserving;
    } else if (m.preset == ModelPreset::TransformTableFaithful) {
        cfg.preset = TransformPreset::TableFaithful;
    } else {
        throw IoError(strf("%s: model preset is not a transform-net topology (found a "
                           "loss-net file?)",
                           path.c_str()));
    }

    // The channel ladder and block count are implied by the stored shapes.
    const NamedTensor* c1w = m.find("conv1.weight");
    if (!c1w || c1w->shape.size() != 4 || c1w->shape[1] != 3 || c1w->shape[2] != 9) {
        throw IoError(strf("%s: conv1.weight missing or misshapen", path.c_str()));
    }
    cfg.base_filters = c1w->shape[0];
    long blocks = 0;
    while (m.find(strf("res%ld.conv1.weight", blocks + 1))) ++blocks;
    if (blocks < 1) {
        throw IoError(strf("%s: no residual blocks found", path.c_str()));
    }
    cfg.res_blocks = blocks;

    TransformNet net = build(cfg, 0);
    size_t cursor = 0;
    auto take = [&](const std::string& name, const std::vector<long>& shape) -> const NamedTensor& {
        if (cursor >= m.tensors.size()) {
            throw IoError(strf("%s: missing tensor %s", path.c_str(), name.c_str()));
        }
        const NamedTensor& t = m.tensors[cursor++];
        if (t.name != name || t.shape != shape) {
            throw IoError(strf("%s: expected tensor %s %s, found %s %s", path.c_str(),
                               name.c_str(), shape_str(shape).c_str(), t.name.c_str(),
                               shape_str(t.shape).c_str()));
        }
        return t;
    };
    auto fill = [&](Tensor<T>& dst, const std::string& name) {
        const NamedTensor& t = take(name, dst.shape());
        for (size_t i = 0; i < t.data.size(); ++i) {
            dst.raw_data()[i] = static_cast<T>(t.data[i]);
        }
    };
    auto fill_vec = [&](std::vector<T>& dst, const std::string& name) {
        const NamedTensor& t = take(name, {static_cast<long>(dst.size())});
        for (size_t i = 0; i < t.data.size(); ++i) dst[i] = static_cast<T>(t.data[i]);
    };
    auto conv = [&](const std::string& name, Conv& c) {
        fill(c.w, name + ".weight");
        fill(c.b, name + ".bias");
    };
    auto bn = [&](const std::string& name, Bn& b) {
        fill(b.gamma, name + ".gamma");
        fill(b.beta, name + ".beta");
        fill_vec(b.state.running_mean, name + ".running_mean");
        fill_vec(b.state.running_var, name + ".running_var");
    };
    conv("conv1", net.conv1_);
    bn("bn1", net.bn1_);
    conv("conv2", net.conv2_);
    bn("bn2", net.bn2_);
    conv("conv3", net.conv3_);
    bn("bn3", net.bn3_);
    for (size_t i = 0; i < net.blocks_.size(); ++i) {
        const std::string p = strf("res%zu", i + 1);
        conv(p + ".conv1", net.blocks_[i].c1);
        bn(p + ".bn1", net.blocks_[i].b1);
        conv(p + ".conv2", net.blocks_[i].c2);
        bn(p + ".bn2", net.blocks_[i].b2);
    }
    conv("deconv1", net.dec1_);
    bn("bn4", net.bn4_);
    conv("deconv2", net.dec2_);
    bn("bn5", net.bn5_);
    conv("out", net.out_);
    if (cursor != m.tensors.size()) {
        throw IoError(strf("%s: unexpected extra tensor %s", path.c_str(),
                           m.tensors[cursor].name.c_str()));
    }
    return net;
}

template class TransformNet<float>;
template class TransformNet<double>;

}  // namespace eyepurify
