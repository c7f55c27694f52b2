#pragma once

// Latent-to-reflectance generation: a multi-resolution linear pyramid maps a
// per-level latent matrix W to diffuse albedo, specular albedo and
// tangent-space normal maps. Each pyramid level holds one shared coefficient
// row (the trunk) feeding three per-modality bases (the branches), fitted by
// greedy residual PCA over a reflectance corpus. The module also houses the
// histogram-matching skin-tone augmentation and latent-space PCA analysis.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "facet/image.hpp"
#include "facet/shape_model.hpp" // Diagnostics
#include "facet/tensor.hpp"

namespace facet {

// A full reflectance set on a shared square UV grid, channel-major.
// Normals are stored as unit object vectors of the tangent frame (z up);
// on disk and inside the pyramid they live in the (n+1)/2 encoding.
struct ReflectanceMaps {
    std::size_t res = 0;
    std::vector<double> diffuse;  // [3,R,R], linear RGB in [0,1]
    std::vector<double> specular; // [1,R,R], in [0,1]
    std::vector<double> normals;  // [3,R,R], unit per texel, z > 0

    void validate() const;
};

// Three 16-bit linear PNGs (<prefix>_diffuse/_specular/_normals.png, normals
// encoded) plus a small text manifest recording the colorspace.
void save_reflectance_maps(const std::string& prefix, const ReflectanceMaps& maps);
ReflectanceMaps load_reflectance_maps(const std::string& prefix);

// Per-level latent coefficients, one row per pyramid level.
struct LatentW {
    std::size_t levels = 0;
    std::size_t dim = 0;
    std::vector<double> w; // levels*dim, row-major

    void validate() const;
    static LatentW zeros(std::size_t levels, std::size_t dim);
};

// One pyramid level: a residual model at `res` in the concatenated modality
// layout [diffuse 3r^2 | specular r^2 | normals(encoded) 3r^2].
struct PyramidLevel {
    std::size_t res = 0;
    std::size_t rank = 0; // effective components; basis columns >= rank are zero
    std::shared_ptr<std::vector<double>> mean;  // 7*res*res
    std::shared_ptr<std::vector<double>> basis; // (7*res*res) x dim, row-major
};

struct PyramidGenerator {
    std::size_t res = 0;        // top (output) resolution R
    std::size_t num_levels = 0; // L, one latent row per level
    std::size_t dim = 0;        // D, coefficients per level
    std::vector<PyramidLevel> levels;
    std::vector<double> tune_offsets; // L*dim additive deltas, zero-initialized

    void validate() const;

    // Level resolutions: R halved per step going down, floored at 4, so the
    // lowest levels may repeat 4 when L exceeds log2(R/4)+1.
    static std::vector<std::size_t> level_resolutions(std::size_t num_levels,
                                                      std::size_t top_res);

    // Levels whose tune offsets the restricted tuning stage may touch:
    // [L/4, 3L/4), the middle half; the outer quarters stay frozen.
    std::pair<std::size_t, std::size_t> tunable_range() const;
};

// Documented binary container (magic "FMGN"): header, level table, then
// per-level means/bases and the tune offsets. Round-trips bit-exactly.
void save_generator(const std::string& path, const PyramidGenerator& gen);
PyramidGenerator load_generator(const std::string& path);

// Output of the on-tape generator. `pre_*` are the raw pyramid sums before
// squashing/normalization (the maps are affine in W up to that point);
// `diffuse`/`specular` are squashed into [0,1] and `normals` is the decoded,
// z-floored, renormalized unit field.
struct GeneratedMaps {
    ad::Tensor diffuse;  // [3,R,R]
    ad::Tensor specular; // [1,R,R]
    ad::Tensor normals;  // [3,R,R] unit, z > 0
    ad::Tensor pre_diffuse, pre_specular, pre_normals;
};

// Builds the generator output on the tape of `w` ([L,D]). `offsets` must be
// [L,D] on the same tape; the overload without it uses the generator's own
// tune_offsets as constants. Differentiable in both.
GeneratedMaps generate(const PyramidGenerator& gen, ad::Tensor w, ad::Tensor offsets);
GeneratedMaps generate(const PyramidGenerator& gen, ad::Tensor w);

// The generator's tune offsets as a constant [L,D] tensor.
ad::Tensor offsets_tensor(ad::Tape& tape, const PyramidGenerator& gen);

// Host-side convenience: run the generator on a scratch tape and copy the
// squashed maps out.
ReflectanceMaps generate_host(const PyramidGenerator& gen, const LatentW& w);

// Greedy per-level projection of a reflectance set onto the pyramid bases;
// exact for corpus members when rank was not truncated.
LatentW project_latent(const PyramidGenerator& gen, const ReflectanceMaps& maps);

// Fits means and per-level trunk-coupled bases by greedy residual PCA over
// the corpus. A corpus whose rank is below `dim` yields truncated bases and
// a diagnostic record.
PyramidGenerator fit_generator(const std::vector<ReflectanceMaps>& corpus,
                               std::size_t num_levels, std::size_t dim,
                               Diagnostics* diag = nullptr);

// ---------------------------------------------------------------------------
// Skin-tone augmentation (host-side data preparation)
// ---------------------------------------------------------------------------

// UV-space axis-aligned rectangle, 0 <= u0 < u1 <= 1 (likewise v), v down.
struct UVRect {
    double u0 = 0.0, v0 = 0.0, u1 = 1.0, v1 = 1.0;
    void validate() const;
};

// Default forehead region of the synthetic face layout.
UVRect default_forehead_rect();

// Soft skin mask from the distance to the mean forehead tone: texels close
// to the reference tone get M ~ 1, distant (non-skin) texels fall to 0 via
// 1 - smoothstep(d; d_lo, d_hi). Returns H*W values in [0,1].
std::vector<double> skin_mask(const Image& albedo, const UVRect& forehead,
                              double d_lo = 0.15, double d_hi = 0.40);

// Per-channel CDF matching with 256 bins and linear interpolation between
// bin edges; both images must be in [0,1].
Image histogram_match(const Image& a, const Image& target);

// Masked skin-tone transfer: out = M (.) histogram_match(a, target) +
// (1-M) (.) a, with M per pixel shared across channels.
Image augment_with_mask(const Image& a, const Image& target,
                        const std::vector<double>& mask);

// Full augmentation: mask from skin_mask, then the masked blend.
Image augment_albedo(const Image& a, const Image& target, const UVRect& forehead,
                     double d_lo = 0.15, double d_hi = 0.40);

// 1-Wasserstein distance between the value distributions of two arrays over
// [0,1], computed on 256-bin histograms (units: value, i.e. 1 = full range).
double emd_histogram(const std::vector<double>& a, const std::vector<double>& b,
                     int bins = 256);

// A seeded stand-in for the Monk-scale reference albedos: `count` flat-ish
// skin tones from light to dark with mild texture.
struct SkinToneTarget {
    Image albedo;  // [3,R,R] in [0,1]
    int mst_label = 0;
};
std::vector<SkinToneTarget> make_mst_targets(std::uint64_t seed, std::size_t res,
                                             std::size_t count = 10);

// ---------------------------------------------------------------------------
// Latent analysis and synthetic data
// ---------------------------------------------------------------------------

// PCA of standard-normal latent samples (flattened L*D), for manipulation
// sliders. Components are orthonormal rows sorted by explained variance.
struct LatentPca {
    std::size_t dim = 0;            // L*D
    std::vector<double> components; // dim x dim, row-major
    std::vector<double> variances;  // dim, non-increasing
};
LatentPca latent_pca(const PyramidGenerator& gen, std::size_t n_samples = 10000,
                     std::uint64_t seed = 0);

// Seeded procedural reflectance corpus: skin-tone fields with freckles,
// brow/lip/eye features and relief-derived normals, calibrated per sample so
// the aggregate statistics sit near the published albedo mean 0.24 and
// encoded-normal mean 0.61.
std::vector<ReflectanceMaps> make_synthetic_reflectance_corpus(std::uint64_t seed,
                                                               std::size_t count,
                                                               std::size_t res);

} // namespace facet
