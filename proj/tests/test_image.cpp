#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "facet/errors.hpp"
#include "facet/image.hpp"
#include "facet/ops.hpp"
#include "facet/rng.hpp"
#include "facet/tensor.hpp"

using namespace facet;

namespace {

// Unique-enough scratch path in the test working directory.
std::string tmp_path(const std::string& stem) { return "img_test_" + stem; }

Image random_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
    Image img(c, h, w);
    Rng rng(seed);
    for (double& v : img.data) v = rng.uniform(0.0, 1.0);
    return img;
}

} // namespace

TEST_CASE("srgb transfer: frozen values and inverse") {
    // 8-bit code 128 is the canonical mid-gray check.
    CHECK(srgb_to_linear(128.0 / 255.0) == doctest::Approx(0.21586050011389923).epsilon(1e-12));
    CHECK(srgb_to_linear(0.0) == 0.0);
    CHECK(srgb_to_linear(1.0) == doctest::Approx(1.0).epsilon(1e-12));
    // Linear segment below the knee.
    CHECK(srgb_to_linear(0.04) == doctest::Approx(0.04 / 12.92).epsilon(1e-12));
    // Branch continuity at the knee.
    CHECK(srgb_to_linear(0.04045) == doctest::Approx(0.04045 / 12.92).epsilon(1e-6));

    for (double s : {0.0, 0.003, 0.1, 0.5, 0.97, 1.0})
        CHECK(linear_to_srgb(srgb_to_linear(s)) == doctest::Approx(s).epsilon(1e-12));
    // The standard's rounded constants leave a ~1.4e-8 seam at the knee.
    CHECK(linear_to_srgb(srgb_to_linear(0.04045)) == doctest::Approx(0.04045).epsilon(1e-7));
    for (double l : {0.0, 0.001, 0.2, 0.5, 1.0})
        CHECK(srgb_to_linear(linear_to_srgb(l)) == doctest::Approx(l).epsilon(1e-12));
}

TEST_CASE("png8 round-trip is exact on code-aligned values") {
    Image img(3, 4, 5);
    Rng rng(11);
    for (double& v : img.data)
        v = srgb_to_linear(static_cast<double>(rng.uniform_int(0, 255)) / 255.0);
    const std::string path = tmp_path("rt8.png");
    save_png8(path, img);
    Image back = load_png(path);
    REQUIRE(back.channels == 3);
    REQUIRE(back.height == 4);
    REQUIRE(back.width == 5);
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(back.data[i] == doctest::Approx(img.data[i]).epsilon(1e-12));
    std::remove(path.c_str());
}

TEST_CASE("png8 quantization error is bounded") {
    Image img = random_image(3, 6, 7, 22);
    const std::string path = tmp_path("q8.png");
    save_png8(path, img);
    Image back = load_png(path);
    for (std::size_t i = 0; i < img.size(); ++i) {
        // Quantization happens in sRGB space: half a code either way.
        const double s0 = linear_to_srgb(img.data[i]);
        const double s1 = linear_to_srgb(back.data[i]);
        CHECK(std::abs(s0 - s1) <= 0.5 / 255.0 + 1e-12);
    }
    std::remove(path.c_str());
}

TEST_CASE("png16 stores linear values to 16-bit precision") {
    Image img(3, 3, 4);
    Rng rng(33);
    for (double& v : img.data)
        v = static_cast<double>(rng.uniform_int(0, 65535)) / 65535.0;
    const std::string path = tmp_path("rt16.png");
    save_png16(path, img);
    Image back = load_png(path);
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(back.data[i] == doctest::Approx(img.data[i]).epsilon(1e-12));

    Image arb = random_image(1, 5, 5, 44);
    save_png16(path, arb);
    Image back2 = load_png(path);
    REQUIRE(back2.channels == 1);
    for (std::size_t i = 0; i < arb.size(); ++i)
        CHECK(std::abs(back2.data[i] - arb.data[i]) <= 0.5 / 65535.0 + 1e-12);
    std::remove(path.c_str());
}

TEST_CASE("png io failure paths") {
    CHECK_THROWS_AS(load_png("no_such_dir/missing.png"), IoError);
    Image img(3, 2, 2, 0.5);
    CHECK_THROWS_AS(save_png8("no_such_dir/out.png", img), IoError);
    // Not a PNG: write junk bytes and try to load them.
    const std::string path = tmp_path("junk.png");
    std::FILE* f = std::fopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("definitely not a png", f);
    std::fclose(f);
    CHECK_THROWS_AS(load_png(path), IoError);
    std::remove(path.c_str());
}

TEST_CASE("box_downsample averages exact blocks") {
    Image img(2, 4, 6);
    for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = static_cast<double>(i) * 0.01;
    Image small = box_downsample(img, 2, 3);
    REQUIRE(small.height == 2);
    REQUIRE(small.width == 3);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t x = 0; x < 3; ++x) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx)
                        acc += img.at(c, 2 * y + dy, 2 * x + dx);
                CHECK(small.at(c, y, x) == doctest::Approx(acc / 4.0).epsilon(1e-12));
            }
    CHECK_THROWS_AS(box_downsample(img, 3, 3), ContractError); // 4/3 not integer
}

TEST_CASE("resize_bilinear: identity at same size") {
    Image img = random_image(2, 5, 7, 55);
    Image same = resize_bilinear(img, 5, 7);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(same.data[i] == img.data[i]);
}

TEST_CASE("resize_bilinear matches the differentiable upsample op") {
    Image img = random_image(2, 5, 7, 66);
    ad::Tape tp;
    ad::Tensor tex = tp.leaf({2, 5, 7}, std::vector<double>(img.data), false);
    for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{9, 11}, {3, 4}, {5, 14}}) {
        Image host = resize_bilinear(img, oh, ow);
        ad::Tensor dev = ad::upsample_bilinear(tex, oh, ow);
        REQUIRE(host.size() == dev.size());
        for (std::size_t i = 0; i < host.size(); ++i)
            CHECK(host.data[i] == doctest::Approx(dev.values()[i]).epsilon(1e-12));
    }
}

TEST_CASE("psnr oracle values") {
    Image a(1, 4, 4, 0.0);
    Image b(1, 4, 4, 0.1);
    // MSE = 0.01 against MAX = 1 is exactly 20 dB.
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(std::isinf(psnr(a, a)));
    Image c(1, 2, 2, 0.0);
    CHECK_THROWS_AS(psnr(a, c), ContractError);
}

TEST_CASE("raw dump writes header and payload") {
    Image img = random_image(3, 2, 2, 77);
    const std::string path = tmp_path("dump.bin");
    save_raw_dump(path, img);
    std::FILE* f = std::fopen(path.c_str(), "rb");
    REQUIRE(f != nullptr);
    char header[32] = {};
    REQUIRE(std::fgets(header, sizeof header, f) != nullptr);
    CHECK(std::string(header) == "FDUMP 3 2 2\n");
    std::vector<double> payload(img.size());
    REQUIRE(std::fread(payload.data(), sizeof(double), payload.size(), f) == payload.size());
    std::fclose(f);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(payload[i] == img.data[i]);
    std::remove(path.c_str());
}
