#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace facet {

// Dense image in channel-major (CHW) layout, matching tensor conventions.
// Values are linear-light floats, nominally in [0,1].
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
        : channels(c), height(h), width(w), data(c * h * w, fill) {}

    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return data[(c * height + y) * width + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * height + y) * width + x];
    }
    std::size_t size() const { return data.size(); }
};

// sRGB transfer function (display encoding <-> linear light).
double srgb_to_linear(double s);
double linear_to_srgb(double l);

// PNG I/O. 8-bit files are treated as sRGB-encoded and converted to linear;
// 16-bit files are treated as already linear. Alpha channels are dropped on
// load. Throws IoError with the path on failure.
Image load_png(const std::string& path);
void save_png8(const std::string& path, const Image& img);  // linear -> sRGB, 8-bit
void save_png16(const std::string& path, const Image& img); // linear, 16-bit

// Raw float dump for debugging: text header "FDUMP <C> <H> <W>\n" followed by
// little-endian doubles.
void save_raw_dump(const std::string& path, const Image& img);

// Box-average downsample by integer factors (exact partition of the source).
Image box_downsample(const Image& img, std::size_t out_h, std::size_t out_w);

// Bilinear resize with half-texel centers and border clamp — the same
// convention as the differentiable upsample op, which keeps pyramid analysis
// and synthesis consistent.
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);

// Peak signal-to-noise ratio over all channels, MAX = 1. Identical images
// return +infinity.
double psnr(const Image& a, const Image& b);

} // namespace facet
