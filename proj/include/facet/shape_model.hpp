#pragma once

// Linear PCA face geometry model: a mean shape plus orthonormal identity and
// expression bases with per-mode variances.  Reconstruction, normal
// computation, Laplacian-style normal smoothing and landmark projection are
// all expressed through tape ops so shape coefficients receive gradients.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "facet/camera.hpp"
#include "facet/tensor.hpp"

namespace facet {

// Collector for non-fatal conditions hit inside geometry routines (isolated
// vertices, degenerate UV triangles, ...).  Callers that pass nullptr simply
// drop the messages.
struct Diagnostics {
    std::vector<std::string> warnings;

    void warn(std::string message) { warnings.push_back(std::move(message)); }
};

// PCA shape model with V vertices, Ks identity modes and Ke expression modes.
// Basis matrices are stored row-major as (3V x K); each column has unit L2
// norm and the associated eigenvalue carries the mode variance.  Large arrays
// live behind shared_ptr so tape constants can alias them without copying.
struct PcaShapeModel {
    std::size_t num_vertices = 0;   // V
    std::size_t num_identity = 0;   // Ks
    std::size_t num_expression = 0; // Ke
    std::size_t num_triangles = 0;  // T

    std::shared_ptr<std::vector<double>> mean;    // 3V, xyz interleaved
    std::shared_ptr<std::vector<double>> basis_s; // 3V x Ks row-major
    std::shared_ptr<std::vector<double>> basis_e; // 3V x Ke row-major
    std::vector<double> eig_s;                    // Ks, positive non-increasing
    std::vector<double> eig_e;                    // Ke, positive non-increasing

    std::vector<std::uint32_t> triangles;    // 3T vertex indices, CCW outward
    std::vector<double> uv;                  // 2V texture coords in [0,1]
    std::vector<std::uint32_t> landmark_idx; // 68 vertex indices

    // Throws ContractError if dimensions, index ranges, eigenvalue ordering
    // or basis column norms are inconsistent.
    void validate() const;
};

// Binary model container (magic "FMSM", version 1).  Load validates before
// returning; save writes the model as-is.
PcaShapeModel load_shape_model(const std::string& path);
void save_shape_model(const std::string& path, const PcaShapeModel& model);

// S(p_s, p_e) = mean + U_s p_s + U_e p_e, returned as a [V,3] tensor on the
// tape of p_s.  p_s must be [Ks], p_e must be [Ke]; both may require grad.
ad::Tensor reconstruct_shape(const PcaShapeModel& model, ad::Tensor p_s, ad::Tensor p_e);

// Area-weighted vertex normals: each triangle's cross product (unnormalised,
// so proportional to area) is accumulated onto its three corners, then the
// sums are normalised.  Isolated vertices get the fixed normal (0,0,1), do
// not propagate gradients, and are reported through diag.
ad::Tensor vertex_normals(ad::Tensor positions, const std::vector<std::uint32_t>& triangles,
                          Diagnostics* diag = nullptr);

// One-ring normal smoothing: each iteration replaces n_i by the normalised
// sum of n_i and its edge-connected neighbours.  iterations == 0 returns the
// input unchanged.
ad::Tensor smooth_normals(ad::Tensor normals, const std::vector<std::uint32_t>& triangles,
                          int iterations);

// Tikhonov energy sum_k p_k^2 / eig_k as a scalar tensor.  Sizes must match
// and eigenvalues must be positive.
ad::Tensor shape_regularizer(ad::Tensor p, const std::vector<double>& eig);

// Projects the model's 68 landmark vertices to pixel coordinates, returned
// as [68,2].  positions is the full [V,3] vertex tensor; rot/trans/focal are
// the camera parameters as used by project_to_pixels.
ad::Tensor project_landmarks(ad::Tensor positions, const PcaShapeModel& model, ad::Tensor rot,
                             ad::Tensor trans, ad::Tensor focal, const Camera& cam);

// Writes a Wavefront OBJ with v/vt/vn records and faces indexing all three.
// positions and normals are 3V value arrays, uv is 2V.
void export_obj(const std::string& path, const std::vector<double>& positions,
                const std::vector<double>& uv, const std::vector<double>& normals,
                const std::vector<std::uint32_t>& triangles);

// Deterministic synthetic model for tests and demos: a deformed icosphere
// (subdivisions=3 gives V=642, T=1280) with smooth random bump bases,
// decaying variances, spherical UVs and 68 farthest-point landmarks on the
// +z hemisphere.  The same seed always produces the same model.
PcaShapeModel make_synthetic_shape_model(std::uint64_t seed, int subdivisions = 3,
                                         std::size_t num_identity = 20,
                                         std::size_t num_expression = 10);

} // namespace facet
