#include <algorithm>
#include <cmath>
#include <vector>

#include "facet/reflectance.hpp"
#include "facet/rng.hpp"

// Procedural skin-like reflectance sets used as a training corpus and as
// flat-tone matching targets. Everything here is host-side and seeded.

namespace facet {
namespace {

double sq(double x) { return x * x; }

double smoothstep01(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

// Periodic value-noise lattice with cosine-eased bilinear sampling.
struct ValueNoise {
    std::size_t g = 1;
    std::vector<double> lattice;

    ValueNoise(Rng& rng, std::size_t grid) : g(std::max<std::size_t>(grid, 1)), lattice(g * g) {
        for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
    }

    double at(double u, double v) const {
        const double x = u * static_cast<double>(g), y = v * static_cast<double>(g);
        const double xf = std::floor(x), yf = std::floor(y);
        const std::size_t x0 = static_cast<std::size_t>(xf) % g;
        const std::size_t y0 = static_cast<std::size_t>(yf) % g;
        const std::size_t x1 = (x0 + 1) % g, y1 = (y0 + 1) % g;
        const double fx = 0.5 - 0.5 * std::cos(M_PI * (x - xf));
        const double fy = 0.5 - 0.5 * std::cos(M_PI * (y - yf));
        const double a = lattice[y0 * g + x0], b = lattice[y0 * g + x1];
        const double c = lattice[y1 * g + x0], d = lattice[y1 * g + x1];
        return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
    }
};

// A couple of octaves of value noise.
struct NoiseBank {
    std::vector<ValueNoise> oct;
    std::vector<double> amp;

    NoiseBank(Rng& rng, std::initializer_list<std::size_t> grids,
              std::initializer_list<double> amps) {
        auto a = amps.begin();
        for (std::size_t grid : grids) {
            oct.emplace_back(rng, grid);
            amp.push_back(*a++);
        }
    }

    double at(double u, double v) const {
        double s = 0.0;
        for (std::size_t i = 0; i < oct.size(); ++i) s += amp[i] * oct[i].at(u, v);
        return s;
    }
};

// Soft ellipse membership: 1 well inside, 0 well outside.
double ellipse(double u, double v, double cu, double cv, double ru, double rv,
               double soft) {
    const double q = sq((u - cu) / ru) + sq((v - cv) / rv);
    return 1.0 - smoothstep01((q - (1.0 - soft)) / (2.0 * soft));
}

// Affine-calibrate a field to the requested mean/std, then clamp.
void calibrate(std::vector<double>& v, double mean_target, double std_target, double lo,
               double hi) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += sq(x - m);
    var /= static_cast<double>(v.size());
    const double s = std::sqrt(std::max(var, 1e-12));
    for (double& x : v) x = std::clamp((x - m) * (std_target / s) + mean_target, lo, hi);
}

// Facial layout in UV space, v = 0 at the top of the map.
struct FaceFeatures {
    double brow, eye, lip, nose_ridge, nostril, tzone, cheek;

    FaceFeatures(double u, double v) {
        const double bl = ellipse(u, v, 0.35, 0.36, 0.095, 0.028, 0.6);
        const double br = ellipse(u, v, 0.65, 0.36, 0.095, 0.028, 0.6);
        brow = std::max(bl, br);
        const double el = ellipse(u, v, 0.36, 0.46, 0.06, 0.032, 0.6);
        const double er = ellipse(u, v, 0.64, 0.46, 0.06, 0.032, 0.6);
        eye = std::max(el, er);
        lip = ellipse(u, v, 0.5, 0.74, 0.13, 0.05, 0.7);
        // ridge running down the middle of the face, widening to the tip
        const double band = smoothstep01((v - 0.40) / 0.08) * (1.0 - smoothstep01((v - 0.62) / 0.06));
        nose_ridge = band * std::exp(-sq((u - 0.5) / (0.035 + 0.06 * (v - 0.40))));
        const double nl = ellipse(u, v, 0.455, 0.625, 0.022, 0.016, 0.8);
        const double nr = ellipse(u, v, 0.545, 0.625, 0.022, 0.016, 0.8);
        nostril = std::max(nl, nr);
        tzone = std::max(std::exp(-sq((u - 0.5) / 0.09)) * smoothstep01((v - 0.3) / 0.1),
                         1.0 - smoothstep01((v - 0.22) / 0.1));
        cheek = std::max(ellipse(u, v, 0.30, 0.58, 0.14, 0.12, 0.8),
                         ellipse(u, v, 0.70, 0.58, 0.14, 0.12, 0.8));
    }
};

ReflectanceMaps make_sample(Rng& rng, std::size_t res) {
    const std::size_t r2 = res * res;
    ReflectanceMaps maps;
    maps.res = res;
    maps.diffuse.resize(3 * r2);
    maps.specular.resize(r2);
    maps.normals.resize(3 * r2);

    // melanin ramp, geometric interpolation light -> dark
    const double tone = rng.uniform();
    const double light[3] = {0.52, 0.40, 0.32}, dark[3] = {0.10, 0.072, 0.058};
    double base[3];
    for (int c = 0; c < 3; ++c) base[c] = light[c] * std::pow(dark[c] / light[c], tone);

    const std::size_t fine_grid = std::min<std::size_t>(64, std::max<std::size_t>(res / 2, 4));
    NoiseBank macro(rng, {4, 8}, {1.0, 0.45});
    NoiseBank mid(rng, {16, 32}, {1.0, 0.5});
    NoiseBank fine(rng, {fine_grid}, {1.0});
    NoiseBank spec_noise(rng, {8, 24}, {1.0, 0.4});
    NoiseBank relief(rng, {6, 12}, {1.0, 0.55});
    NoiseBank pores(rng, {fine_grid, std::min<std::size_t>(96, res)}, {1.0, 0.6});
    const double freckle_strength = std::max(0.0, rng.uniform(-0.3, 0.6));
    const double asym = 0.2; // residual left/right asymmetry of the noise fields

    std::vector<double> height(r2);
    for (std::size_t y = 0; y < res; ++y) {
        for (std::size_t x = 0; x < res; ++x) {
            const std::size_t i = y * res + x;
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(res);
            const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(res);
            auto sym = [&](const NoiseBank& nb) {
                const double mirrored = 0.5 * (nb.at(u, v) + nb.at(1.0 - u, v));
                return (1.0 - asym) * mirrored + asym * nb.at(u, v);
            };
            const FaceFeatures f(u, v);

            const double shade = std::exp(0.22 * sym(macro) + 0.07 * sym(mid));
            const double freckle =
                freckle_strength * f.cheek * std::pow(std::max(0.0, fine.at(u, v)), 3.0);
            const double dark_mul = (1.0 - 0.55 * f.brow) * (1.0 - 0.6 * f.eye) *
                                    (1.0 - 0.5 * f.nostril) * (1.0 - 0.45 * freckle);
            const double lip_mul[3] = {1.0 + 0.18 * f.lip, 1.0 - 0.22 * f.lip,
                                       1.0 - 0.28 * f.lip};
            for (int c = 0; c < 3; ++c)
                maps.diffuse[static_cast<std::size_t>(c) * r2 + i] =
                    base[c] * shade * dark_mul * lip_mul[c];

            maps.specular[i] = std::exp(0.3 * sym(spec_noise)) *
                               (0.2 + 0.16 * f.tzone + 0.1 * f.lip - 0.1 * f.brow -
                                0.08 * f.eye);

            height[i] = 1.1 * sym(relief) + 0.8 * f.brow + 1.6 * f.nose_ridge -
                        0.9 * f.nostril + 0.5 * f.lip + 0.3 * pores.at(u, v);
        }
    }

    calibrate(maps.diffuse, std::clamp(0.24 + 0.045 * rng.normal(), 0.14, 0.36),
              std::clamp(0.12 + 0.02 * rng.normal(), 0.07, 0.17), 0.02, 0.98);
    calibrate(maps.specular, std::clamp(0.24 + 0.04 * rng.normal(), 0.15, 0.33),
              std::clamp(0.11 + 0.02 * rng.normal(), 0.06, 0.16), 0.02, 0.98);

    // Relief-derived normals. The amplitude is bisected so the encoded-normal
    // mean of this sample lands on its target; the mean is monotone in the
    // amplitude because only nz shrinks while nx/ny stay sign-symmetric.
    std::vector<double> hx(r2), hy(r2);
    for (std::size_t y = 0; y < res; ++y) {
        for (std::size_t x = 0; x < res; ++x) {
            const std::size_t i = y * res + x;
            const std::size_t xm = x > 0 ? x - 1 : x, xp = x + 1 < res ? x + 1 : x;
            const std::size_t ym = y > 0 ? y - 1 : y, yp = y + 1 < res ? y + 1 : y;
            hx[i] = (height[y * res + xp] - height[y * res + xm]) /
                    static_cast<double>(xp - xm);
            hy[i] = (height[yp * res + x] - height[ym * res + x]) /
                    static_cast<double>(yp - ym);
        }
    }
    auto write_normals = [&](double amp) {
        double acc = 0.0;
        for (std::size_t i = 0; i < r2; ++i) {
            const double gx = amp * hx[i], gy = amp * hy[i];
            const double inv = 1.0 / std::sqrt(1.0 + gx * gx + gy * gy);
            const double nx = -gx * inv, ny = -gy * inv;
            // floor z with margin so samples are exact fixed points of the
            // generator's decode path (its z-floor sits at 0.05)
            const double zf = std::max(inv, 0.06);
            const double len = std::sqrt(nx * nx + ny * ny + zf * zf);
            maps.normals[i] = nx / len;
            maps.normals[r2 + i] = ny / len;
            maps.normals[2 * r2 + i] = zf / len;
            acc += ((nx + ny + zf) / len + 3.0) / 2.0;
        }
        return acc / static_cast<double>(3 * r2);
    };
    const double mean_target = std::clamp(0.61 + 0.012 * rng.normal(), 0.578, 0.642);
    double lo = 0.0, hi = 1.0;
    while (write_normals(hi) > mean_target && hi < 1e6) {
        lo = hi;
        hi *= 2.0;
    }
    for (int it = 0; it < 60; ++it) {
        const double amp = 0.5 * (lo + hi);
        (write_normals(amp) > mean_target ? lo : hi) = amp;
    }
    write_normals(hi);

    maps.validate();
    return maps;
}

} // namespace

std::vector<ReflectanceMaps> make_synthetic_reflectance_corpus(std::uint64_t seed,
                                                               std::size_t count,
                                                               std::size_t res) {
    check(count >= 1, "make_synthetic_reflectance_corpus: count must be positive");
    check(res >= 8, "make_synthetic_reflectance_corpus: resolution must be at least 8");
    Rng root(seed);
    std::vector<ReflectanceMaps> corpus;
    corpus.reserve(count);
    // fork per sample so a count prefix is stable across corpus sizes
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = root.fork(1000 + i);
        corpus.push_back(make_sample(rng, res));
    }
    return corpus;
}

std::vector<SkinToneTarget> make_mst_targets(std::uint64_t seed, std::size_t res,
                                             std::size_t count) {
    check(count >= 2, "make_mst_targets: need at least two tones");
    check(res >= 4, "make_mst_targets: resolution must be at least 4");
    const double light[3] = {0.55, 0.42, 0.34}, dark[3] = {0.08, 0.057, 0.046};
    Rng root(seed);
    std::vector<SkinToneTarget> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = root.fork(i + 1);
        NoiseBank tex(rng, {8, 16}, {1.0, 0.4});
        const double t = static_cast<double>(i) / static_cast<double>(count - 1);
        SkinToneTarget tgt;
        tgt.mst_label = static_cast<int>(i) + 1;
        tgt.albedo = Image(3, res, res);
        for (std::size_t y = 0; y < res; ++y) {
            for (std::size_t x = 0; x < res; ++x) {
                const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(res);
                const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(res);
                const double m = 1.0 + 0.05 * tex.at(u, v) + 0.03 * (v - 0.5);
                for (int c = 0; c < 3; ++c)
                    tgt.albedo.at(static_cast<std::size_t>(c), y, x) = std::clamp(
                        light[c] * std::pow(dark[c] / light[c], t) * m, 0.02, 0.98);
            }
        }
        out.push_back(std::move(tgt));
    }
    return out;
}

} // namespace facet
