#pragma once

#include <cstdint>
#include <vector>

#include "facet/tensor.hpp"

// Differentiable operations recorded on a Tape. Broadcasting in binary ops is
// deliberately narrow: equal shapes, one scalar operand, or one operand whose
// shape equals a trailing suffix of the other's. Everything else is a
// contract violation; dedicated ops (scale_rows, rowdot, ...) cover the
// remaining patterns with hand-written vector-Jacobian products.
//
// Every op's backward accumulates gradients in a fixed element order, so
// results are bit-deterministic across runs.

namespace facet::ad {

// ---- elementwise binary ----
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor div(Tensor a, Tensor b); // throws DomainError on division by zero

Tensor add(Tensor a, double b);
Tensor sub(double a, Tensor b);
Tensor mul(Tensor a, double b);

// y = scale * x + offset
Tensor affine(Tensor a, double scale, double offset);

// ---- elementwise unary ----
Tensor max0(Tensor a);               // d/dx at 0 defined as 0
Tensor exp(Tensor a);
Tensor log(Tensor a);                // throws DomainError on non-positive input
Tensor abs(Tensor a);                // d/dx at 0 defined as 0
Tensor pow_scalar(Tensor a, double exponent);
Tensor softplus(Tensor a);
// Hard clamp to [0,1] except for C1 quadratic ramps of half-width `band`
// around both borders; identity on [band, 1-band].
Tensor smooth_clamp01(Tensor a, double band = 0.01);
// C1 saturation at 1 only: identity below 1-band, quadratic blend across
// (1-band, 1+band], constant 1 beyond. Lower clamping is left to max0.
Tensor smooth_saturate1(Tensor a, double band = 0.01);
// sqrt(x) for x >= eps, C1 quadratic continuation below; keeps gradients
// finite at exactly-zero residuals.
Tensor sqrt_smooth(Tensor a, double eps = 1e-12);
// Rotation coefficients of the exponential map as functions of u = theta^2:
// a(u) = sin(sqrt u)/sqrt u, b(u) = (1 - cos(sqrt u))/u, with series
// expansions near u = 0 so the map is smooth at the identity.
Tensor rot_coeff_a(Tensor u);
Tensor rot_coeff_b(Tensor u);

// x^s with a tensor-valued exponent stored as log s; x <= 0 maps to 0.
Tensor pow_tensor_exp(Tensor base, Tensor log_exponent);

// ---- reductions ----
Tensor reduce_sum(Tensor a, const std::vector<std::size_t>& axes = {});
Tensor reduce_mean(Tensor a, const std::vector<std::size_t>& axes = {});

// ---- linear algebra ----
Tensor matvec(Tensor A, Tensor x); // [m,n] * [n] -> [m]

// ---- geometry ----
Tensor normalize3(Tensor v, double eps = 1e-12);     // [...,3], unit rows
Tensor normalize_ch3(Tensor v, double eps = 1e-12);  // [3,H,W], unit per pixel
Tensor cross3(Tensor a, Tensor b);                   // [N,3]x[N,3], either may be [3]
Tensor rowdot(Tensor a, Tensor b);                   // [N,C].[N,C] or [C] -> [N,1]
Tensor scale_rows(Tensor a, Tensor s);               // [N,C] * [N,1] -> [N,C]
Tensor gather_rows(Tensor a, std::vector<std::uint32_t> idx); // [V,C] -> [N,C]
// Pinhole projection of camera-space points; +z is forward. Throws
// DomainError when a point's depth is <= near.
Tensor pinhole_project(Tensor pts_cam, Tensor focal, double cx, double cy, double near);

// ---- image ops (CHW layout) ----
// uv in [0,1]^2, half-texel centers, border clamp. tex [C,H,W], uv [P,2].
Tensor bilinear_sample(Tensor tex, Tensor uv);
// Zero-padded same-size convolution with frozen filters [K,C,kh,kw].
Tensor conv2d(Tensor img, Tensor filters);
Tensor maxpool2(Tensor img); // 2x2 stride 2; dims must be even
Tensor upsample_bilinear(Tensor tex, std::size_t out_h, std::size_t out_w);
Tensor flip_w(Tensor img);   // mirror along the width axis
// Writes rows of vals [P,C] into a [C,H,W] image at the given pixel offsets
// (y*W+x, unique); remaining pixels take the background color.
Tensor scatter_pixels(Tensor vals, std::vector<std::uint32_t> pixel_offsets, std::size_t h,
                      std::size_t w, const std::vector<double>& background);

// ---- shape plumbing ----
Tensor reshape(Tensor a, const Shape& shape);
Tensor slice_axis0(Tensor a, std::size_t from, std::size_t to);
Tensor concat_axis0(const std::vector<Tensor>& parts);

} // namespace facet::ad
