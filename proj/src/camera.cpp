#include "facet/camera.hpp"

#include <algorithm>
#include <cmath>

#include "facet/errors.hpp"
#include "facet/ops.hpp"

namespace facet {

using ad::Tensor;

void Camera::validate() const {
    check(focal > 0.0, "Camera: focal must be positive");
    check(width >= 8 && height >= 8, "Camera: image size must be at least 8x8");
}

double Camera::diagonal() const {
    return std::sqrt(static_cast<double>(width * width + height * height));
}

std::array<double, 9> rotation_matrix(const std::array<double, 3>& r) {
    const double x = r[0], y = r[1], z = r[2];
    const double u = x * x + y * y + z * z;
    double a, b;
    if (u < 1e-2) {
        a = 1.0 - u / 6.0 + u * u / 120.0 - u * u * u / 5040.0;
        b = 0.5 - u / 24.0 + u * u / 720.0 - u * u * u / 40320.0;
    } else {
        const double s = std::sqrt(u);
        a = std::sin(s) / s;
        b = (1.0 - std::cos(s)) / u;
    }
    // R = I + a K + b K^2 with K the cross-product matrix of r
    return {1.0 + b * (-z * z - y * y), -a * z + b * x * y,        a * y + b * x * z,
            a * z + b * x * y,          1.0 + b * (-z * z - x * x), -a * x + b * y * z,
            -a * y + b * x * z,         a * x + b * y * z,          1.0 + b * (-y * y - x * x)};
}

std::array<double, 3> axis_angle_from_matrix(const std::array<double, 9>& m) {
    const double tr = m[0] + m[4] + m[8];
    const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
    const double theta = std::acos(c);
    const double sx = m[7] - m[5], sy = m[2] - m[6], sz = m[3] - m[1]; // 2 sin(theta) n
    const double sn = std::sqrt(sx * sx + sy * sy + sz * sz);
    if (theta < 1e-7) return {0.5 * sx, 0.5 * sy, 0.5 * sz};
    if (sn > 1e-7) {
        const double k = theta / sn;
        return {k * sx, k * sy, k * sz};
    }
    // theta ~ pi: acos is square-root ill-conditioned at -1, so refine the
    // angle from the (tiny) skew part instead, then recover the axis from
    // the diagonal, largest component first.
    const double theta_pi = M_PI - std::asin(std::min(0.5 * sn, 1.0));
    const double nx2 = std::max(0.0, (m[0] + 1.0) / 2.0);
    const double ny2 = std::max(0.0, (m[4] + 1.0) / 2.0);
    const double nz2 = std::max(0.0, (m[8] + 1.0) / 2.0);
    double nx, ny, nz;
    if (nx2 >= ny2 && nx2 >= nz2) {
        nx = std::sqrt(nx2);
        ny = (m[1] + m[3]) / (4.0 * nx);
        nz = (m[2] + m[6]) / (4.0 * nx);
    } else if (ny2 >= nz2) {
        ny = std::sqrt(ny2);
        nx = (m[1] + m[3]) / (4.0 * ny);
        nz = (m[5] + m[7]) / (4.0 * ny);
    } else {
        nz = std::sqrt(nz2);
        nx = (m[2] + m[6]) / (4.0 * nz);
        ny = (m[5] + m[7]) / (4.0 * nz);
    }
    // Just below pi the skew part still carries the axis sign; at exactly pi
    // both signs are equivalent and the noise-level choice is harmless.
    if (nx * sx + ny * sy + nz * sz < 0.0) {
        nx = -nx;
        ny = -ny;
        nz = -nz;
    }
    const double nn = std::sqrt(nx * nx + ny * ny + nz * nz);
    return {theta_pi * nx / nn, theta_pi * ny / nn, theta_pi * nz / nn};
}

Tensor rodrigues_rotate(Tensor pts, Tensor rot) {
    check(rot.shape() == ad::Shape{3}, "rodrigues_rotate: rotation must be a [3] vector");
    const ad::Shape& ps = pts.shape();
    check(ps.size() == 2 && ps[1] == 3,
          "rodrigues_rotate: points must be [N,3], got " + ad::shape_str(ps));
    Tensor u = ad::reduce_sum(ad::mul(rot, rot));
    Tensor a = ad::rot_coeff_a(u);
    Tensor b = ad::rot_coeff_b(u);
    Tensor rxp = ad::cross3(rot, pts);
    Tensor rxrxp = ad::cross3(rot, rxp);
    return ad::add(pts, ad::add(ad::mul(rxp, a), ad::mul(rxrxp, b)));
}

Tensor camera_transform(Tensor world_pts, Tensor rot, Tensor trans) {
    check(trans.shape() == ad::Shape{3}, "camera_transform: translation must be a [3] vector");
    return ad::add(rodrigues_rotate(world_pts, rot), trans);
}

Tensor camera_center(Tensor rot, Tensor trans) {
    // -R^T t = R(-r)·(-t)
    Tensor neg_t = ad::reshape(ad::mul(trans, -1.0), {1, 3});
    return ad::reshape(rodrigues_rotate(neg_t, ad::mul(rot, -1.0)), {3});
}

Tensor project_to_pixels(Tensor world_pts, Tensor rot, Tensor trans, Tensor focal,
                         const Camera& geom) {
    return ad::pinhole_project(camera_transform(world_pts, rot, trans), focal,
                               geom.principal[0], geom.principal[1], geom.near);
}

Camera init_camera_from_landmarks(const std::array<std::array<double, 3>, 5>& model_pts,
                                  const std::array<std::array<double, 2>, 5>& image_pts,
                                  std::size_t width, std::size_t height, double focal) {
    check(focal > 0.0, "init_camera_from_landmarks: focal must be positive");

    // Source points are the model's (x, -y): a frontal camera flips y (image
    // y runs down) and z (camera looks along +z at a +z-facing head).
    double amx = 0.0, amy = 0.0, bmx = 0.0, bmy = 0.0;
    for (int i = 0; i < 5; ++i) {
        amx += model_pts[i][0];
        amy += -model_pts[i][1];
        bmx += image_pts[i][0];
        bmy += image_pts[i][1];
    }
    amx /= 5.0; amy /= 5.0; bmx /= 5.0; bmy /= 5.0;

    double dot = 0.0, crs = 0.0, anorm = 0.0;
    double cxx = 0.0, cxy = 0.0, cyy = 0.0;
    for (int i = 0; i < 5; ++i) {
        const double ax = model_pts[i][0] - amx;
        const double ay = -model_pts[i][1] - amy;
        const double bx = image_pts[i][0] - bmx;
        const double by = image_pts[i][1] - bmy;
        dot += ax * bx + ay * by;
        crs += ax * by - ay * bx;
        anorm += ax * ax + ay * ay;
        cxx += bx * bx; cxy += bx * by; cyy += by * by;
    }
    check(anorm > 1e-12, "init_camera_from_landmarks: reference vertices are degenerate");

    // Degenerate target constellations (all-equal or collinear pixels) leave
    // the pose unconstrained.
    const double eig_min =
        0.5 * (cxx + cyy - std::sqrt((cxx - cyy) * (cxx - cyy) + 4.0 * cxy * cxy));
    if (eig_min / 5.0 < 1e-6)
        throw DomainError("init_camera_from_landmarks: target landmarks are collinear");

    const double theta = std::atan2(crs, dot);
    const double scale = std::sqrt(dot * dot + crs * crs) / anorm;
    if (!(scale > 1e-12) || !std::isfinite(scale))
        throw DomainError("init_camera_from_landmarks: similarity scale collapsed");
    const double ct = std::cos(theta), st = std::sin(theta);
    const double tx2 = bmx - scale * (ct * amx - st * amy);
    const double ty2 = bmy - scale * (st * amx + ct * amy);

    Camera cam;
    cam.width = width;
    cam.height = height;
    cam.focal = focal;
    cam.principal = {static_cast<double>(width) / 2.0, static_cast<double>(height) / 2.0};
    // Full camera rotation: in-plane roll composed with the frontal flip
    // Rz(theta)·Rx(pi).
    const std::array<double, 9> m = {ct, st, 0.0, st, -ct, 0.0, 0.0, 0.0, -1.0};
    cam.rotation = axis_angle_from_matrix(m);
    const double depth = focal / scale;
    cam.translation = {(tx2 - cam.principal[0]) / scale, (ty2 - cam.principal[1]) / scale,
                       depth};
    cam.validate();
    return cam;
}

} // namespace facet
