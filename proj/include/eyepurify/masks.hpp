#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "eyepurify/image.hpp"

namespace eyepurify {

// Thresholds and the painted-pupil ratio. Defaults tolerate lossy encoding.
struct MaskOptions {
    float white_min = 250.0f;
    float red_min = 200.0f;
    float red_other_max = 80.0f;
    float pupil_ratio = 0.4f;
};

// Per-layer mask pyramid; each level keeps the two soft channels at that
// layer's feature resolution.
using LayerMasks = std::map<std::string, SemanticMask>;

// White pixels (all channels >= white_min) mark the pupil. Red pixels
// (R >= red_min, G and B <= red_other_max) mark the iris. The pupil is part
// of the iris region, so white pixels set both channels; this keeps
// pupil <= iris by construction and makes encode/decode a round trip.
SemanticMask decode_mask(const Image& img, const MaskOptions& opt = {});

// Clips pupil to iris support. When the pupil comes back empty and the iris
// is not (an orphan label), paints a filled pupil disc of radius
// pupil_ratio * sqrt(iris_area/pi) at the iris centroid. A mask with no
// usable eye region raises IoError.
SemanticMask repair_orphans(const SemanticMask& mask, const MaskOptions& opt = {});

// Average-pools both channels down to each listed layer's resolution.
// layer_strides maps layer name to its cumulative stride (a power of two);
// each halving is a 2x2 average pool with floor semantics, matching the
// feature extractor's pooling arithmetic. Values stay soft.
LayerMasks downsample_masks(const SemanticMask& mask,
                            const std::vector<std::pair<std::string, long>>& layer_strides);

// Bilinear resample of both soft channels with the image resizer's
// corner-aligned arithmetic. Values stay in [0,1]; provenance carries over.
SemanticMask resize_mask(const SemanticMask& mask, long out_h, long out_w);

// White where pupil >= 0.5, else red where iris >= 0.5, else black.
Image encode_mask(const SemanticMask& mask);

}  // namespace eyepurify
