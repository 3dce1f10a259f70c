#include "eyepurify/image_io.hpp"

#include <png.h>

#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstring>

#include "eyepurify/common.hpp"

namespace eyepurify {

namespace {

struct MemCursor {
    const unsigned char* data;
    size_t size;
    size_t pos;
};

void png_mem_read(png_structp png, png_bytep out, png_size_t n) {
    auto* cur = static_cast<MemCursor*>(png_get_io_ptr(png));
    if (cur->pos + n > cur->size) {
        png_error(png, "unexpected end of stream");
    }
    std::memcpy(out, cur->data + cur->pos, n);
    cur->pos += n;
}

void png_mem_write(png_structp png, png_bytep in, png_size_t n) {
    auto* buf = static_cast<std::string*>(png_get_io_ptr(png));
    buf->append(reinterpret_cast<const char*>(in), n);
}

void png_mem_flush(png_structp) {}

void png_fail(png_structp png, png_const_charp msg) {
    auto* err = static_cast<std::string*>(png_get_error_ptr(png));
    *err = msg ? msg : "unknown png error";
    longjmp(png_jmpbuf(png), 1);
}

void png_warn_ignore(png_structp, png_const_charp) {}

Image read_png(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::string err;
    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn_ignore);
    if (!png) throw IoError("png reader allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png reader allocation failed");
    }

    std::vector<unsigned char> interleaved;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(strf("%s: png decode failed: %s", path.c_str(), err.c_str()));
    }

    MemCursor cur{bytes.data(), bytes.size(), 0};
    png_set_read_fn(png, &cur, png_mem_read);
    png_read_info(png, info);

    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(strf("%s: 16-bit png depth is unsupported, convert to 8-bit first",
                           path.c_str()));
    }

    const int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_gray_to_rgb(png);
    }
    png_set_interlace_handling(png);
    png_read_update_info(png, info);

    const long h = static_cast<long>(png_get_image_height(png, info));
    const long w = static_cast<long>(png_get_image_width(png, info));
    if (png_get_channels(png, info) != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(strf("%s: unsupported png channel layout", path.c_str()));
    }

    interleaved.resize(static_cast<size_t>(h) * w * 3);
    rows.resize(static_cast<size_t>(h));
    for (long y = 0; y < h; ++y) {
        rows[static_cast<size_t>(y)] = interleaved.data() + static_cast<size_t>(y) * w * 3;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(h, w);
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            const unsigned char* px = &interleaved[static_cast<size_t>((y * w + x) * 3)];
            for (int c = 0; c < 3; ++c) {
                img.at(c, y, x) = static_cast<float>(px[c]);
            }
        }
    }
    return img;
}

// P6 header fields may be separated by any whitespace and '#' comments.
long ppm_token(const std::vector<unsigned char>& bytes, size_t& pos, const std::string& path) {
    while (pos < bytes.size()) {
        if (std::isspace(bytes[pos])) {
            ++pos;
        } else if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
    long value = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
        value = value * 10 + (bytes[pos] - '0');
        ++pos;
        any = true;
        if (value > 1000000000) throw IoError(strf("%s: ppm header field overflow", path.c_str()));
    }
    if (!any) throw IoError(strf("%s: malformed ppm header", path.c_str()));
    return value;
}

Image read_ppm(const std::string& path, const std::vector<unsigned char>& bytes) {
    size_t pos = 2;
    const long w = ppm_token(bytes, pos, path);
    const long h = ppm_token(bytes, pos, path);
    const long maxval = ppm_token(bytes, pos, path);
    if (maxval != 255) {
        throw IoError(strf("%s: ppm maxval %ld unsupported, expected 255", path.c_str(), maxval));
    }
    if (w <= 0 || h <= 0) throw IoError(strf("%s: empty ppm raster", path.c_str()));
    ++pos;  // single whitespace byte after maxval
    const size_t need = static_cast<size_t>(h) * w * 3;
    if (pos + need > bytes.size()) {
        throw IoError(strf("%s: ppm raster truncated", path.c_str()));
    }
    Image img(h, w);
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            const unsigned char* px = &bytes[pos + static_cast<size_t>((y * w + x) * 3)];
            for (int c = 0; c < 3; ++c) {
                img.at(c, y, x) = static_cast<float>(px[c]);
            }
        }
    }
    return img;
}

unsigned char quantize(float v) {
    const float r = std::round(v);
    if (r <= 0.0f) return 0;
    if (r >= 255.0f) return 255;
    return static_cast<unsigned char>(r);
}

std::string encode_png(const Image& img) {
    std::string err;
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn_ignore);
    if (!png) throw IoError("png writer allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png writer allocation failed");
    }

    std::string out;
    std::vector<unsigned char> interleaved(static_cast<size_t>(img.pixels()) * 3);
    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError(strf("png encode failed: %s", err.c_str()));
    }

    png_set_write_fn(png, &out, png_mem_write, png_mem_flush);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    for (long y = 0; y < img.height; ++y) {
        for (long x = 0; x < img.width; ++x) {
            unsigned char* px = &interleaved[static_cast<size_t>((y * img.width + x) * 3)];
            for (int c = 0; c < 3; ++c) px[c] = quantize(img.at(c, y, x));
        }
        rows[static_cast<size_t>(y)] = &interleaved[static_cast<size_t>(y * img.width * 3)];
    }
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
    return out;
}

std::string encode_ppm(const Image& img) {
    std::string out = strf("P6\n%ld %ld\n255\n", img.width, img.height);
    out.reserve(out.size() + static_cast<size_t>(img.pixels()) * 3);
    for (long y = 0; y < img.height; ++y) {
        for (long x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                out.push_back(static_cast<char>(quantize(img.at(c, y, x))));
            }
        }
    }
    return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Image read_image(const std::string& path) {
    const std::vector<unsigned char> bytes = read_file_bytes(path);
    if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) {
        return read_png(path, bytes);
    }
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') {
        return read_ppm(path, bytes);
    }
    throw IoError(strf("%s: not a png or binary ppm file", path.c_str()));
}

void write_image(const Image& img, const std::string& path) {
    if (img.height <= 0 || img.width <= 0) {
        throw std::invalid_argument("cannot write an empty image");
    }
    std::string payload;
    if (ends_with(path, ".png")) {
        payload = encode_png(img);
    } else if (ends_with(path, ".ppm")) {
        payload = encode_ppm(img);
    } else {
        throw ConfigError(strf("%s: unknown image extension, use .png or .ppm", path.c_str()));
    }
    atomic_write_file(path, payload);
}

Image resize_bilinear(const Image& img, long out_h, long out_w) {
    if (img.height <= 0 || img.width <= 0) {
        throw std::invalid_argument("cannot resize an empty image");
    }
    if (out_h <= 0 || out_w <= 0) {
        throw std::invalid_argument(strf("resize target %ldx%ld is empty", out_h, out_w));
    }
    if (out_h == img.height && out_w == img.width) return img;

    // Endpoint-aligned sampling: output corners hit input corners, interior
    // samples are spaced evenly between them, and coordinates are clamped to
    // the grid as a rounding guard. A singleton output axis samples the
    // input axis center.
    auto src_coord = [](long i, long out_n, long in_n) -> float {
        float f = out_n > 1 ? static_cast<float>(i) * static_cast<float>(in_n - 1) /
                                  static_cast<float>(out_n - 1)
                            : 0.5f * static_cast<float>(in_n - 1);
        if (f < 0.0f) f = 0.0f;
        const float last = static_cast<float>(in_n - 1);
        if (f > last) f = last;
        return f;
    };

    Image out(out_h, out_w);
    for (long y = 0; y < out_h; ++y) {
        const float fy = src_coord(y, out_h, img.height);
        const long y0 = static_cast<long>(fy);
        const long y1 = y0 + 1 < img.height ? y0 + 1 : img.height - 1;
        const float wy = fy - static_cast<float>(y0);
        for (long x = 0; x < out_w; ++x) {
            const float fx = src_coord(x, out_w, img.width);
            const long x0 = static_cast<long>(fx);
            const long x1 = x0 + 1 < img.width ? x0 + 1 : img.width - 1;
            const float wx = fx - static_cast<float>(x0);
            for (int c = 0; c < 3; ++c) {
                const float top = img.at(c, y0, x0) * (1.0f - wx) + img.at(c, y0, x1) * wx;
                const float bot = img.at(c, y1, x0) * (1.0f - wx) + img.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1.0f - wy) + bot * wy;
            }
        }
    }
    return out;
}

}  // namespace eyepurify
