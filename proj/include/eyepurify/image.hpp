#pragma once

#include <string>
#include <vector>

#include "eyepurify/tensor.hpp"

namespace eyepurify {

// RGB raster with float values in [0,255], planar [3, H, W] row-major.
struct Image {
    long height = 0;
    long width = 0;
    std::vector<float> data;

    Image() = default;
    Image(long h, long w, float fill = 0.0f)
        : height(h), width(w), data(static_cast<size_t>(3 * h * w), fill) {}

    long pixels() const { return height * width; }

    float& at(int c, long y, long x) {
        return data[static_cast<size_t>((c * height + y) * width + x)];
    }
    float at(int c, long y, long x) const {
        return data[static_cast<size_t>((c * height + y) * width + x)];
    }

    template <typename T>
    Tensor<T> to_tensor(bool requires_grad = false) const {
        auto t = Tensor<T>::zeros({3, height, width}, requires_grad);
        for (size_t i = 0; i < data.size(); ++i) t.raw_data()[i] = static_cast<T>(data[i]);
        return t;
    }

    template <typename T>
    static Image from_tensor(const Tensor<T>& t) {
        if (t.rank() != 3 || t.dim(0) != 3) {
            throw std::invalid_argument(strf("image tensor must be [3,H,W], got %s",
                                             shape_str(t.shape()).c_str()));
        }
        Image img(t.dim(1), t.dim(2));
        for (size_t i = 0; i < img.data.size(); ++i) {
            img.data[i] = static_cast<float>(t.data()[i]);
        }
        return img;
    }
};

// Two soft semantic maps at image resolution, values in [0,1].
struct SemanticMask {
    enum class Provenance { Decoded, Repaired };

    long height = 0;
    long width = 0;
    std::vector<float> pupil;
    std::vector<float> iris;
    Provenance provenance = Provenance::Decoded;

    SemanticMask() = default;
    SemanticMask(long h, long w)
        : height(h),
          width(w),
          pupil(static_cast<size_t>(h * w), 0.0f),
          iris(static_cast<size_t>(h * w), 0.0f) {}

    long pixels() const { return height * width; }
};

}  // namespace eyepurify
