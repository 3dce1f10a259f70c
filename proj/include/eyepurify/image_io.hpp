#pragma once

#include <string>

#include "eyepurify/image.hpp"

namespace eyepurify {

// Reads a PNG (8-bit RGB, gray, or palette; gray is replicated to three
// channels) or a binary PPM (P6, maxval 255). Format is sniffed from the
// file's magic bytes, not the extension. 16-bit PNG depth is rejected with
// a descriptive error rather than silently truncated.
Image read_image(const std::string& path);

// Writes 8-bit RGB; the format is chosen by extension (.png or .ppm).
// Values are rounded then clamped to [0,255], so integer-valued images
// round-trip bit-exactly. The file appears atomically or not at all.
void write_image(const Image& img, const std::string& path);

// Bilinear resample; output corner samples align with input corners and
// coordinates are edge-clamped. A same-size call returns a bit-identical
// copy.
Image resize_bilinear(const Image& img, long out_h, long out_w);

}  // namespace eyepurify
