#include "facet/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <memory>

#include "facet/errors.hpp"

namespace facet {

double srgb_to_linear(double s) {
    return s <= 0.04045 ? s / 12.92 : std::pow((s + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double l) {
    return l <= 0.0031308 ? 12.92 * l : 1.055 * std::pow(l, 1.0 / 2.4) - 0.055;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

} // namespace

Image load_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("load_png: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("load_png: libpng init failed for " + path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("load_png: libpng init failed for " + path);
    }
    std::vector<png_byte> storage;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("load_png: corrupt or unsupported file " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16) png_set_swap(png); // file is big-endian; host is little
    png_read_update_info(png, info);
    depth = png_get_bit_depth(png, info);
    const std::size_t file_channels = png_get_channels(png, info);

    const std::size_t stride = png_get_rowbytes(png, info);
    storage.assign(stride * h, 0);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = storage.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, info);
    png_destroy_read_struct(&png, &info, nullptr);

    // Alpha (if any) is dropped; gray stays 1 channel, color becomes 3.
    const std::size_t keep = file_channels >= 3 ? 3 : 1;
    Image img(keep, h, w);
    const bool sixteen = depth == 16;
    const double scale = sixteen ? 1.0 / 65535.0 : 1.0 / 255.0;
    for (std::size_t y = 0; y < h; ++y) {
        const png_byte* row = storage.data() + y * stride;
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < keep; ++c) {
                double v;
                if (sixteen) {
                    const png_uint_16* p16 = reinterpret_cast<const png_uint_16*>(row);
                    v = static_cast<double>(p16[x * file_channels + c]) * scale;
                } else {
                    v = static_cast<double>(row[x * file_channels + c]) * scale;
                }
                // 8-bit files carry display-encoded values; 16-bit are linear.
                img.at(c, y, x) = sixteen ? v : srgb_to_linear(v);
            }
        }
    }
    return img;
}

namespace {

void save_png_impl(const std::string& path, const Image& img, bool sixteen) {
    if (img.channels != 1 && img.channels != 3)
        throw ContractError("save_png: image must have 1 or 3 channels, has " +
                            std::to_string(img.channels));
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("save_png: cannot open " + path + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("save_png: libpng init failed for " + path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("save_png: libpng init failed for " + path);
    }
    std::vector<png_byte> storage;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("save_png: write failed for " + path);
    }
    png_init_io(png, fp.get());
    const int color = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), sixteen ? 16 : 8, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (sixteen) png_set_swap(png);

    const std::size_t stride = img.width * img.channels * (sixteen ? 2 : 1);
    storage.assign(stride * img.height, 0);
    for (std::size_t y = 0; y < img.height; ++y) {
        png_byte* row = storage.data() + y * stride;
        for (std::size_t x = 0; x < img.width; ++x) {
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double lin = clamp01(img.at(c, y, x));
                if (sixteen) {
                    const auto q = static_cast<png_uint_16>(std::lround(lin * 65535.0));
                    reinterpret_cast<png_uint_16*>(row)[x * img.channels + c] = q;
                } else {
                    const double enc = clamp01(linear_to_srgb(lin));
                    row[x * img.channels + c] =
                        static_cast<png_byte>(std::lround(enc * 255.0));
                }
            }
        }
    }
    rows.resize(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = storage.data() + y * stride;
    png_write_image(png, rows.data());
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
}

} // namespace

void save_png8(const std::string& path, const Image& img) { save_png_impl(path, img, false); }
void save_png16(const std::string& path, const Image& img) { save_png_impl(path, img, true); }

void save_raw_dump(const std::string& path, const Image& img) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("save_raw_dump: cannot open " + path + " for writing");
    const std::string header = "FDUMP " + std::to_string(img.channels) + " " +
                               std::to_string(img.height) + " " + std::to_string(img.width) +
                               "\n";
    if (std::fwrite(header.data(), 1, header.size(), fp.get()) != header.size() ||
        std::fwrite(img.data.data(), sizeof(double), img.data.size(), fp.get()) !=
            img.data.size())
        throw IoError("save_raw_dump: write failed for " + path);
}

Image box_downsample(const Image& img, std::size_t out_h, std::size_t out_w) {
    check(out_h > 0 && out_w > 0 && img.height % out_h == 0 && img.width % out_w == 0,
          "box_downsample: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
              " does not evenly divide " + std::to_string(img.height) + "x" +
              std::to_string(img.width));
    const std::size_t fy = img.height / out_h;
    const std::size_t fx = img.width / out_w;
    const double inv = 1.0 / static_cast<double>(fy * fx);
    Image out(img.channels, out_h, out_w);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < out_h; ++y)
            for (std::size_t x = 0; x < out_w; ++x) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < fy; ++dy)
                    for (std::size_t dx = 0; dx < fx; ++dx)
                        acc += img.at(c, y * fy + dy, x * fx + dx);
                out.at(c, y, x) = acc * inv;
            }
    return out;
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
    check(out_h > 0 && out_w > 0, "resize_bilinear: empty output");
    Image out(img.channels, out_h, out_w);
    const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
    const long last_y = static_cast<long>(img.height) - 1;
    const long last_x = static_cast<long>(img.width) - 1;
    for (std::size_t y = 0; y < out_h; ++y) {
        const double cy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        const double fy = std::floor(cy);
        const double wy = cy - fy;
        const std::size_t y0 = static_cast<std::size_t>(std::clamp(static_cast<long>(fy), 0L, last_y));
        const std::size_t y1 =
            static_cast<std::size_t>(std::clamp(static_cast<long>(fy) + 1, 0L, last_y));
        for (std::size_t x = 0; x < out_w; ++x) {
            const double cx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            const double fx = std::floor(cx);
            const double wx = cx - fx;
            const std::size_t x0 =
                static_cast<std::size_t>(std::clamp(static_cast<long>(fx), 0L, last_x));
            const std::size_t x1 =
                static_cast<std::size_t>(std::clamp(static_cast<long>(fx) + 1, 0L, last_x));
            for (std::size_t c = 0; c < img.channels; ++c) {
                out.at(c, y, x) = (1.0 - wy) * ((1.0 - wx) * img.at(c, y0, x0) +
                                                wx * img.at(c, y0, x1)) +
                                  wy * ((1.0 - wx) * img.at(c, y1, x0) +
                                        wx * img.at(c, y1, x1));
            }
        }
    }
    return out;
}

double psnr(const Image& a, const Image& b) {
    check(a.channels == b.channels && a.height == b.height && a.width == b.width,
          "psnr: image dimensions differ");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

} // namespace facet
