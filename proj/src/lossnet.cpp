#include "eyepurify/lossnet.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "eyepurify/model_format.hpp"
#include "eyepurify/tensor_ops.hpp"

namespace eyepurify {

namespace {

// Orthogonal rows (out <= in*k*k) or columns (otherwise), gain-scaled.
// The QR runs on the taller orientation; column signs follow the R diagonal
// so the result is unique given the Gaussian draw.
template <typename T>
void orthogonal_fill(std::vector<T>& dst, long rows, long cols, double gain, SeededRng& rng) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
    const bool tall = rows >= cols;
    const long m = tall ? rows : cols;
    const long n = tall ? cols : rows;
    Mat a(m, n);
    for (long i = 0; i < m; ++i) {
        for (long j = 0; j < n; ++j) a(i, j) = static_cast<T>(rng.normal());
    }
    Eigen::HouseholderQR<Mat> qr(a);
    Mat q = qr.householderQ() * Mat::Identity(m, n);
    const Mat& packed = qr.matrixQR();
    for (long j = 0; j < n; ++j) {
        if (packed(j, j) < T(0)) q.col(j) = -q.col(j);
    }
    dst.resize(static_cast<size_t>(rows * cols));
    const T g = static_cast<T>(gain);
    for (long r = 0; r < rows; ++r) {
        for (long c = 0; c < cols; ++c) {
            dst[static_cast<size_t>(r * cols + c)] = g * (tall ? q(r, c) : q(c, r));
        }
    }
}

}  // namespace

template <typename T>
const std::vector<typename LossNet<T>::LayerDef>& LossNet<T>::layer_defs() {
    static const std::vector<LayerDef> defs = {
        {"conv1_1", 3, 64, false, 1},    {"conv1_2", 64, 64, false, 1},
        {"conv2_1", 64, 128, true, 2},   {"conv2_2", 128, 128, false, 2},
        {"conv3_1", 128, 256, true, 4},  {"conv3_2", 256, 256, false, 4},
        {"conv3_3", 256, 256, false, 4}, {"conv3_4", 256, 256, false, 4},
        {"conv4_1", 256, 512, true, 8},  {"conv4_2", 512, 512, false, 8},
        {"conv4_3", 512, 512, false, 8}, {"conv4_4", 512, 512, false, 8},
        {"conv5_1", 512, 512, true, 16}, {"conv5_2", 512, 512, false, 16},
        {"conv5_3", 512, 512, false, 16}, {"conv5_4", 512, 512, false, 16},
    };
    return defs;
}

template <typename T>
bool LossNet<T>::has_layer(const std::string& name) {
    for (const auto& d : layer_defs()) {
        if (name == d.name) return true;
    }
    return false;
}

template <typename T>
const typename LossNet<T>::LayerDef& LossNet<T>::layer(const std::string& name) {
    for (const auto& d : layer_defs()) {
        if (name == d.name) return d;
    }
    throw std::invalid_argument(strf("unknown loss-net layer %s", name.c_str()));
}

template <typename T>
std::vector<std::pair<std::string, long>> LossNet<T>::layer_strides(
    const std::vector<std::string>& names) {
    std::vector<std::pair<std::string, long>> out;
    out.reserve(names.size());
    for (const auto& n : names) out.emplace_back(n, layer(n).stride);
    return out;
}

template <typename T>
LossNet<T> LossNet<T>::seeded(uint64_t seed) {
    LossNet net;
    SeededRng rng(seed);
    const double gain = std::sqrt(2.0);
    for (const auto& d : layer_defs()) {
        std::vector<T> w;
        orthogonal_fill<T>(w, d.out_ch, d.in_ch * 9, gain, rng);
        auto wt = Tensor<T>::zeros({d.out_ch, d.in_ch, 3, 3});
        wt.raw_data() = std::move(w);
        net.weights_.push_back(std::move(wt));
        net.biases_.push_back(Tensor<T>::zeros({d.out_ch}));
    }
    return net;
}

template <typename T>
FeatureStack<T> LossNet<T>::extract(const Tensor<T>& image,
                                    const std::vector<std::string>& names) const {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument(strf("loss-net input must be [3,H,W], got %s",
                                         shape_str(image.shape()).c_str()));
    }
    for (const auto& n : names) layer(n);  // unknown name -> error
    size_t deepest = 0;
    const auto& defs = layer_defs();
    for (size_t i = 0; i < defs.size(); ++i) {
        for (const auto& n : names) {
            if (n == defs[i].name) deepest = std::max(deepest, i + 1);
        }
    }

    FeatureStack<T> out;
    Tensor<T> x = image;
    if (subtract_mean_) {
        auto neg = Tensor<T>::zeros({3});
        for (int c = 0; c < 3; ++c) neg.raw_data()[static_cast<size_t>(c)] = -input_mean_[c];
        x = add_channel_bias(x, neg);
    }
    for (size_t i = 0; i < deepest; ++i) {
        if (defs[i].pool_before) x = maxpool2d(x);
        x = relu(add_channel_bias(conv2d(x, weights_[i], 1, 1), biases_[i]));
        for (const auto& n : names) {
            if (n == defs[i].name) out.emplace(n, x);
        }
    }
    return out;
}

template <typename T>
void LossNet<T>::save(const std::string& path) const {
    ModelFile model;
    model.preset = ModelPreset::LossNet;
    const auto& defs = layer_defs();
    for (size_t i = 0; i < defs.size(); ++i) {
        NamedTensor w;
        w.name = std::string(defs[i].name) + ".weight";
        w.shape = weights_[i].shape();
        w.data.assign(weights_[i].data().begin(), weights_[i].data().end());
        model.tensors.push_back(std::move(w));
        NamedTensor b;
        b.name = std::string(defs[i].name) + ".bias";
        b.shape = biases_[i].shape();
        b.data.assign(biases_[i].data().begin(), biases_[i].data().end());
        model.tensors.push_back(std::move(b));
    }
    if (subtract_mean_) {
        NamedTensor m;
        m.name = "input_mean";
        m.shape = {3};
        m.data = {static_cast<float>(input_mean_[0]), static_cast<float>(input_mean_[1]),
                  static_cast<float>(input_mean_[2])};
        model.tensors.push_back(std::move(m));
    }
    write_model(model, path);
}

template <typename T>
LossNet<T> LossNet<T>::load(const std::string& path) {
    const ModelFile model = read_model(path);
    if (model.preset != ModelPreset::LossNet) {
        throw IoError(strf("%s: not a loss-net model file", path.c_str()));
    }
    const auto& defs = layer_defs();
    const size_t expect = 2 * defs.size();
    if (model.tensors.size() != expect && model.tensors.size() != expect + 1) {
        throw IoError(strf("%s: loss-net file has %zu tensors, expected %zu (first layer %s)",
                           path.c_str(), model.tensors.size(), expect, defs[0].name));
    }
    LossNet net;
    for (size_t i = 0; i < defs.size(); ++i) {
        const auto& d = defs[i];
        const NamedTensor& w = model.tensors[2 * i];
        const NamedTensor& b = model.tensors[2 * i + 1];
        const std::string wname = std::string(d.name) + ".weight";
        const std::string bname = std::string(d.name) + ".bias";
        if (w.name != wname || w.shape != std::vector<long>{d.out_ch, d.in_ch, 3, 3}) {
            throw IoError(strf("%s: layer %s mismatch (found tensor %s shape %s)", path.c_str(),
                               d.name, w.name.c_str(), shape_str(w.shape).c_str()));
        }
        if (b.name != bname || b.shape != std::vector<long>{d.out_ch}) {
            throw IoError(strf("%s: layer %s bias mismatch (found tensor %s shape %s)",
                               path.c_str(), d.name, b.name.c_str(),
                               shape_str(b.shape).c_str()));
        }
        auto wt = Tensor<T>::zeros(w.shape);
        for (size_t k = 0; k < w.data.size(); ++k) wt.raw_data()[k] = static_cast<T>(w.data[k]);
        auto bt = Tensor<T>::zeros(b.shape);
        for (size_t k = 0; k < b.data.size(); ++k) bt.raw_data()[k] = static_cast<T>(b.data[k]);
        net.weights_.push_back(std::move(wt));
        net.biases_.push_back(std::move(bt));
    }
    if (const NamedTensor* m = model.find("input_mean")) {
        if (m->shape != std::vector<long>{3}) {
            throw IoError(strf("%s: input_mean must have shape [3]", path.c_str()));
        }
        for (int c = 0; c < 3; ++c) net.input_mean_[c] = static_cast<T>(m->data[static_cast<size_t>(c)]);
        net.subtract_mean_ = true;
    } else if (model.tensors.size() == expect + 1) {
        throw IoError(strf("%s: unexpected extra tensor %s", path.c_str(),
                           model.tensors.back().name.c_str()));
    }
    return net;
}

template class LossNet<float>;
template class LossNet<double>;

}  // namespace eyepurify
