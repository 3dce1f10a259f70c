#include "eyepurify/masks.hpp"

#include <algorithm>
#include <cmath>

#include "eyepurify/common.hpp"
#include "eyepurify/image_io.hpp"

namespace eyepurify {

namespace {

long support_area(const std::vector<float>& plane) {
    long n = 0;
    for (float v : plane) {
        if (v >= 0.5f) ++n;
    }
    return n;
}

// One 2x2 average-pool step with floor output dims; odd trailing row/col
// is dropped, same as the feature extractor's pooling.
void pool2(std::vector<float>& plane, long& h, long& w) {
    const long oh = h / 2;
    const long ow = w / 2;
    std::vector<float> out(static_cast<size_t>(oh * ow));
    for (long y = 0; y < oh; ++y) {
        for (long x = 0; x < ow; ++x) {
            const float* r0 = &plane[static_cast<size_t>(2 * y * w + 2 * x)];
            const float* r1 = r0 + w;
            out[static_cast<size_t>(y * ow + x)] = 0.25f * (r0[0] + r0[1] + r1[0] + r1[1]);
        }
    }
    plane = std::move(out);
    h = oh;
    w = ow;
}

}  // namespace

SemanticMask decode_mask(const Image& img, const MaskOptions& opt) {
    SemanticMask mask(img.height, img.width);
    for (long y = 0; y < img.height; ++y) {
        for (long x = 0; x < img.width; ++x) {
            const float r = img.at(0, y, x);
            const float g = img.at(1, y, x);
            const float b = img.at(2, y, x);
            const bool white = r >= opt.white_min && g >= opt.white_min && b >= opt.white_min;
            const bool red = r >= opt.red_min && g <= opt.red_other_max && b <= opt.red_other_max;
            const size_t i = static_cast<size_t>(y * img.width + x);
            if (white) mask.pupil[i] = 1.0f;
            if (white || red) mask.iris[i] = 1.0f;
        }
    }
    return mask;
}

SemanticMask repair_orphans(const SemanticMask& mask, const MaskOptions& opt) {
    SemanticMask out = mask;
    const long iris_area = support_area(out.iris);
    if (iris_area == 0) {
        if (support_area(out.pupil) == 0) {
            throw IoError("mask has no eye region: both channels empty");
        }
        throw IoError("mask has no eye region: pupil labeled without any iris");
    }

    bool changed = false;
    for (size_t i = 0; i < out.pupil.size(); ++i) {
        if (out.pupil[i] > out.iris[i]) {
            out.pupil[i] = out.iris[i];
            changed = true;
        }
    }

    if (support_area(out.pupil) == 0) {
        double cy = 0.0, cx = 0.0;
        for (long y = 0; y < out.height; ++y) {
            for (long x = 0; x < out.width; ++x) {
                if (out.iris[static_cast<size_t>(y * out.width + x)] >= 0.5f) {
                    cy += y;
                    cx += x;
                }
            }
        }
        cy /= static_cast<double>(iris_area);
        cx /= static_cast<double>(iris_area);
        const double r_iris = std::sqrt(static_cast<double>(iris_area) / M_PI);
        const double r_pupil = opt.pupil_ratio * r_iris;
        const double r2 = r_pupil * r_pupil;
        for (long y = 0; y < out.height; ++y) {
            for (long x = 0; x < out.width; ++x) {
                const double dy = y - cy;
                const double dx = x - cx;
                const size_t i = static_cast<size_t>(y * out.width + x);
                if (dy * dy + dx * dx <= r2 && out.iris[i] >= 0.5f) {
                    out.pupil[i] = out.iris[i];
                }
            }
        }
        // Disc centered outside the support (ring or crescent shapes) can
        // miss entirely; fall back to the iris pixel nearest the centroid.
        if (support_area(out.pupil) == 0) {
            double best = 0.0;
            size_t best_i = 0;
            bool found = false;
            for (long y = 0; y < out.height; ++y) {
                for (long x = 0; x < out.width; ++x) {
                    const size_t i = static_cast<size_t>(y * out.width + x);
                    if (out.iris[i] < 0.5f) continue;
                    const double dy = y - cy;
                    const double dx = x - cx;
                    const double d = dy * dy + dx * dx;
                    if (!found || d < best) {
                        best = d;
                        best_i = i;
                        found = true;
                    }
                }
            }
            out.pupil[best_i] = out.iris[best_i];
        }
        changed = true;
    }

    if (changed) out.provenance = SemanticMask::Provenance::Repaired;
    return out;
}

LayerMasks downsample_masks(const SemanticMask& mask,
                            const std::vector<std::pair<std::string, long>>& layer_strides) {
    LayerMasks out;
    for (const auto& [name, stride] : layer_strides) {
        if (stride <= 0 || (stride & (stride - 1)) != 0) {
            throw std::invalid_argument(
                strf("layer %s: cumulative stride %ld is not a power of two", name.c_str(),
                     stride));
        }
        SemanticMask level = mask;
        for (long s = stride; s > 1; s /= 2) {
            long ph = level.height, pw = level.width;
            pool2(level.pupil, ph, pw);
            long ih = level.height, iw = level.width;
            pool2(level.iris, ih, iw);
            level.height = ph;
            level.width = pw;
        }
        out.emplace(name, std::move(level));
    }
    return out;
}

SemanticMask resize_mask(const SemanticMask& mask, long out_h, long out_w) {
    // Ride the image resizer so both paths share one interpolation recipe.
    Image packed(mask.height, mask.width, 0.0f);
    const size_t n = static_cast<size_t>(mask.height * mask.width);
    std::copy(mask.pupil.begin(), mask.pupil.end(), packed.data.begin());
    std::copy(mask.iris.begin(), mask.iris.end(), packed.data.begin() + n);
    Image scaled = resize_bilinear(packed, out_h, out_w);
    SemanticMask out(out_h, out_w);
    const size_t m = static_cast<size_t>(out_h * out_w);
    std::copy(scaled.data.begin(), scaled.data.begin() + m, out.pupil.begin());
    std::copy(scaled.data.begin() + m, scaled.data.begin() + 2 * m, out.iris.begin());
    out.provenance = mask.provenance;
    return out;
}

Image encode_mask(const SemanticMask& mask) {
    Image img(mask.height, mask.width, 0.0f);
    for (long y = 0; y < mask.height; ++y) {
        for (long x = 0; x < mask.width; ++x) {
            const size_t i = static_cast<size_t>(y * mask.width + x);
            if (mask.pupil[i] >= 0.5f) {
                img.at(0, y, x) = 255.0f;
                img.at(1, y, x) = 255.0f;
                img.at(2, y, x) = 255.0f;
            } else if (mask.iris[i] >= 0.5f) {
                img.at(0, y, x) = 255.0f;
            }
        }
    }
    return img;
}

}  // namespace eyepurify
