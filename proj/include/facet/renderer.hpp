#pragma once

// Differentiable rendering: z-buffered pinhole rasterization with detached
// visibility, followed by on-tape Blinn-Phong shading with separate diffuse
// and specular normal fields.  The rasterizer assigns fragments from current
// (detached) values each call; gradients flow through shading, sampling,
// normals, view directions and landmark projection, not through coverage.

#include <array>
#include <cstdint>
#include <vector>

#include "facet/camera.hpp"
#include "facet/shape_model.hpp"
#include "facet/tensor.hpp"

namespace facet {

// Host-side light rig parameters.  Directions are stored raw (normalized at
// use), intensities and ambient are stored as softplus pre-images so the
// optimizer can roam freely while the effective values stay nonnegative, and
// shininess is stored as log s.
struct Lighting {
    double ambient_raw = 0.0;
    std::vector<double> dir_raw;       // 3 per light, unnormalized
    std::vector<double> intensity_raw; // 3 per light (RGB), softplus pre-image
    double log_shininess = 0.0;

    std::size_t count() const { return dir_raw.size() / 3; }
    void validate() const; // >= 1 light, matching sizes, finite values

    // One white frontal light (+z, toward the face) with unit intensity,
    // unit ambient, shininess 20.
    static Lighting default_frontal();
};

// softplus and its inverse, used for the nonnegativity reparameterization.
double softplus_value(double x);
double inv_softplus(double y);

// Leaf tensors holding the raw lighting parameters (what the optimizer
// steps), and the derived quantities shading consumes.
struct LightingLeaves {
    ad::Tensor ambient_raw;   // [1]
    ad::Tensor dir_raw;       // [L,3]
    ad::Tensor intensity_raw; // [L,3]
    ad::Tensor log_s;         // [1]
};

struct ShadingLights {
    ad::Tensor ambient;   // [1], c_a >= 0
    ad::Tensor dirs;      // [L,3], unit rows
    ad::Tensor intensity; // [L,3], >= 0
    ad::Tensor log_s;     // [1]
};

LightingLeaves lighting_leaves(ad::Tape& tape, const Lighting& lighting, bool requires_grad);
ShadingLights shading_lights(const LightingLeaves& leaves);
// Reads current leaf values back into a host struct.
Lighting lighting_from_leaves(const LightingLeaves& leaves);

// Reflectance maps as tape tensors on a shared square UV grid.  The normal
// map stores tangent-space normals encoded as (n+1)/2.
struct MapsOnTape {
    ad::Tensor diffuse;  // [3,R,R] linear diffuse albedo
    ad::Tensor specular; // [1,R,R] specular albedo
    ad::Tensor normals;  // [3,R,R] encoded tangent normals
};

// Detached per-pixel fragment assignment.  `pixels` lists covered pixel
// offsets (y*W + x) in ascending order; the per-fragment arrays run parallel
// to it.  The tangent/bitangent weights reproduce the triangle's UV-derived
// frame vectors as linear combinations of its corner positions; they are
// all-zero for triangles that are degenerate in UV space (those pixels get a
// fallback frame downstream).
struct FragmentBuffer {
    std::size_t width = 0, height = 0;
    std::vector<std::uint32_t> pixels;
    std::vector<std::uint32_t> tri;          // triangle id per fragment
    std::vector<std::uint32_t> corner_ids;   // 3 vertex ids per fragment
    std::vector<double> bary;                // 3 perspective-correct weights
    std::vector<double> uv;                  // 2 interpolated texture coords
    std::vector<double> tangent_w;           // 3 coeffs: T = sum w_k P_k
    std::vector<double> bitangent_w;         // 3 coeffs: B = sum w_k P_k
    std::vector<double> tangent_sign;        // +-1 handedness per fragment
    std::vector<std::uint8_t> degenerate_uv; // 1 where the frame fell back

    std::vector<std::int32_t> tri_map; // H*W, triangle id or -1
    std::vector<double> depth_map;     // H*W, +inf where background

    std::size_t covered() const { return pixels.size(); }
};

// Z-buffered scanline rasterization from detached vertex positions (3V
// world-space values).  Triangles with any vertex at z <= near are skipped.
// A fully off-screen mesh yields an empty buffer and a warning.
FragmentBuffer rasterize(const std::vector<double>& positions,
                         const std::vector<std::uint32_t>& triangles,
                         const std::vector<double>& uv, const Camera& cam,
                         Diagnostics* diag = nullptr);

// Interpolates a [V,C] per-vertex attribute tensor to [P,C] fragments using
// the given per-fragment corner weights (3 per fragment, detached).
ad::Tensor interpolate_attr(ad::Tensor attr, const std::vector<std::uint32_t>& corner_ids,
                            const std::vector<double>& weights);

// Orthonormal per-fragment frame: t/b/n with n the (normalized) interpolated
// shape normal, t the Gram-Schmidt-projected UV tangent and b = sign·(n x t).
struct FragmentFrames {
    ad::Tensor t, b, n; // each [P,3]
};

FragmentFrames fragment_frames(ad::Tensor positions, ad::Tensor shape_normals,
                               const FragmentBuffer& frags);

// n_obj = normalize(t·n_s.x + b·n_s.y + n·n_s.z).
ad::Tensor tangent_to_object(ad::Tensor ns_tangent, const FragmentFrames& frames);

// U_D = c_a · A_D · sum_j max(N_D·l_j, 0) c_j, per fragment.
ad::Tensor shade_diffuse(ad::Tensor albedo, ad::Tensor normals, const ShadingLights& lights);

// U_S = A_S · sum_j max(N_S·h_j, 0)^s c_j with h_j the l/view half vector.
ad::Tensor shade_specular(ad::Tensor spec_albedo, ad::Tensor normals, ad::Tensor view_dirs,
                          const ShadingLights& lights);

struct RenderOptions {
    std::array<double, 3> background{0.0, 0.0, 0.0};
    int diffuse_smooth_iters = 2; // one-ring smoothing rounds for N_D
    Diagnostics* diag = nullptr;
};

struct RenderResult {
    ad::Tensor image;    // [3,H,W], tone-clamped to [0,1]
    ad::Tensor radiance; // [P,3] pre-clamp shaded fragments (invalid if offscreen)
    FragmentBuffer frags;
    bool offscreen = false;
};

// Full forward render: rasterize from current values, interpolate, sample
// the maps, shade both paths, add, clamp, scatter over the background.
RenderResult render(ad::Tensor positions, const PcaShapeModel& model, ad::Tensor rot,
                    ad::Tensor trans, ad::Tensor focal, const Camera& geom,
                    const MapsOnTape& maps, const ShadingLights& lights,
                    const RenderOptions& opt = {});

} // namespace facet
