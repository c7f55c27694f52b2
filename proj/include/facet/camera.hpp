#pragma once

#include <array>
#include <cstddef>

#include "facet/tensor.hpp"

namespace facet {

// Pinhole camera. Convention: X_cam = R(rotation)·X_world + translation with
// +z forward and image y down; pixels u = f·x/z + cx. `rotation` is an
// exponential-map (axis times angle, radians) 3-vector.
struct Camera {
    std::array<double, 3> rotation{0.0, 0.0, 0.0};
    std::array<double, 3> translation{0.0, 0.0, 0.0};
    double focal = 0.0;                     // pixels
    std::array<double, 2> principal{0.0, 0.0}; // pixels
    std::size_t width = 0, height = 0;
    double near = 1e-3;

    void validate() const; // focal > 0, size >= 8x8

    double diagonal() const;
};

// Plain 3x3 row-major rotation matrix from the exponential map, and back.
std::array<double, 9> rotation_matrix(const std::array<double, 3>& r);
std::array<double, 3> axis_angle_from_matrix(const std::array<double, 9>& m);

// ---- on-tape camera chain ----
// Rotates [N,3] points by the exponential-map vector `rot` [3] (Rodrigues via
// the rot_coeff series ops, smooth at the identity).
ad::Tensor rodrigues_rotate(ad::Tensor pts, ad::Tensor rot);

// X_cam = R·X_world + t.
ad::Tensor camera_transform(ad::Tensor world_pts, ad::Tensor rot, ad::Tensor trans);

// Camera center in world space, −Rᵀ·t, as a [3] tensor.
ad::Tensor camera_center(ad::Tensor rot, ad::Tensor trans);

// Full world-to-pixel projection [N,3] -> [N,2]; principal point and near
// plane come from `geom`. Throws DomainError for points at z <= near.
ad::Tensor project_to_pixels(ad::Tensor world_pts, ad::Tensor rot, ad::Tensor trans,
                             ad::Tensor focal, const Camera& geom);

// Weak-perspective pose initialization: least-squares 2D similarity between
// the model-space (x, -y) of 5 reference vertices and their target pixels,
// lifted to a 6-DoF camera at the given focal length. Throws DomainError when
// the target points are degenerate (near-collinear).
Camera init_camera_from_landmarks(const std::array<std::array<double, 3>, 5>& model_pts,
                                  const std::array<std::array<double, 2>, 5>& image_pts,
                                  std::size_t width, std::size_t height, double focal);

} // namespace facet
