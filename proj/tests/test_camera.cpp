#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "facet/camera.hpp"
#include "facet/gradcheck.hpp"
#include "facet/ops.hpp"
#include "facet/rng.hpp"
#include "facet/tensor.hpp"

using namespace facet;
using namespace facet::ad;

namespace {

Tensor weighted_sum(Tensor y, Rng& rng) {
    std::vector<double> w(y.size());
    for (double& x : w) x = rng.uniform(-1.0, 1.0);
    Tensor wc = y.tape()->constant(y.shape(), std::move(w));
    return reduce_sum(mul(y, wc));
}

std::array<double, 3> apply(const std::array<double, 9>& m, const std::array<double, 3>& p) {
    return {m[0] * p[0] + m[1] * p[1] + m[2] * p[2],
            m[3] * p[0] + m[4] * p[1] + m[5] * p[2],
            m[6] * p[0] + m[7] * p[1] + m[8] * p[2]};
}

std::array<double, 3> random_axis(Rng& rng) {
    for (;;) {
        const double x = rng.uniform(-1.0, 1.0), y = rng.uniform(-1.0, 1.0),
                     z = rng.uniform(-1.0, 1.0);
        const double n2 = x * x + y * y + z * z;
        if (n2 > 1e-3 && n2 <= 1.0) {
            const double n = std::sqrt(n2);
            return {x / n, y / n, z / n};
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Host-side rotation math
// ---------------------------------------------------------------------------

TEST_CASE("rotation_matrix: fixed-angle oracles") {
    const auto ident = rotation_matrix({0.0, 0.0, 0.0});
    const double expect_i[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    for (int i = 0; i < 9; ++i) CHECK(ident[i] == expect_i[i]);

    // Half-turn about x flips y and z.
    const auto flip = rotation_matrix({M_PI, 0.0, 0.0});
    const double expect_f[9] = {1, 0, 0, 0, -1, 0, 0, 0, -1};
    for (int i = 0; i < 9; ++i) CHECK(flip[i] == doctest::Approx(expect_f[i]).epsilon(1e-12));

    // Quarter-turn about z maps x to y.
    const auto quart = rotation_matrix({0.0, 0.0, M_PI / 2.0});
    const double expect_q[9] = {0, -1, 0, 1, 0, 0, 0, 0, 1};
    for (int i = 0; i < 9; ++i) CHECK(quart[i] == doctest::Approx(expect_q[i]).epsilon(1e-12));
}

TEST_CASE("rotation_matrix: orthonormal with unit determinant") {
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const auto axis = random_axis(rng);
        const double theta = rng.uniform(-3.1, 3.1);
        const auto m = rotation_matrix({axis[0] * theta, axis[1] * theta, axis[2] * theta});
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                double dot = 0.0;
                for (int k = 0; k < 3; ++k) dot += m[3 * r + k] * m[3 * c + k];
                CHECK(dot == doctest::Approx(r == c ? 1.0 : 0.0).epsilon(1e-12));
            }
        const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) -
                           m[1] * (m[3] * m[8] - m[5] * m[6]) +
                           m[2] * (m[3] * m[7] - m[4] * m[6]);
        CHECK(det == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("axis_angle_from_matrix round-trips across the angle range") {
    Rng rng(20);
    std::vector<double> angles{1e-9, 1e-5, 1e-3, 0.5, 1.7, 2.9,
                               M_PI - 1e-4, M_PI - 1e-9, M_PI};
    for (double theta : angles)
        for (int trial = 0; trial < 5; ++trial) {
            const auto axis = random_axis(rng);
            const std::array<double, 3> r{axis[0] * theta, axis[1] * theta, axis[2] * theta};
            const auto m = rotation_matrix(r);
            const auto back = axis_angle_from_matrix(m);
            const auto m2 = rotation_matrix(back);
            for (int i = 0; i < 9; ++i) CHECK(std::abs(m2[i] - m[i]) < 1e-9);
        }

    // Exact half-turns about coordinate axes exercise the diagonal branch.
    for (auto axis : {std::array<double, 3>{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}) {
        const std::array<double, 3> r{axis[0] * M_PI, axis[1] * M_PI, axis[2] * M_PI};
        const auto m = rotation_matrix(r);
        const auto m2 = rotation_matrix(axis_angle_from_matrix(m));
        for (int i = 0; i < 9; ++i) CHECK(std::abs(m2[i] - m[i]) < 1e-9);
    }
}

// ---------------------------------------------------------------------------
// On-tape camera chain
// ---------------------------------------------------------------------------

TEST_CASE("rodrigues_rotate agrees with the host rotation matrix") {
    Rng rng(30);
    for (double theta : {1e-8, 1e-4, 0.09, 0.11, 1.2, 3.0}) { // both series branches
        const auto axis = random_axis(rng);
        const std::array<double, 3> r{axis[0] * theta, axis[1] * theta, axis[2] * theta};
        const auto m = rotation_matrix(r);

        std::vector<double> pts(12);
        for (double& v : pts) v = rng.uniform(-2.0, 2.0);

        Tape tp;
        Tensor rot = tp.leaf({3}, std::vector<double>(r.begin(), r.end()), false);
        Tensor p = tp.leaf({4, 3}, std::vector<double>(pts), false);
        Tensor out = rodrigues_rotate(p, rot);
        for (int i = 0; i < 4; ++i) {
            const auto expect = apply(m, {pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]});
            for (int k = 0; k < 3; ++k)
                CHECK(out.values()[3 * i + k] == doctest::Approx(expect[k]).epsilon(1e-12));
        }
    }
}

TEST_CASE("rodrigues_rotate gradients pass finite differences in both branches") {
    Rng rng(40);
    for (double theta : {3e-4, 1.3}) {
        const auto axis = random_axis(rng);
        Tape tp;
        Tensor rot = tp.leaf({3},
                             std::vector<double>{axis[0] * theta, axis[1] * theta,
                                                 axis[2] * theta},
                             true);
        std::vector<double> pts(9);
        for (double& v : pts) v = rng.uniform(-1.5, 1.5);
        Tensor p = tp.leaf({3, 3}, std::move(pts), true);
        Tensor root = weighted_sum(rodrigues_rotate(p, rot), rng);
        auto res = gradcheck(tp, root, {rot, p});
        CHECK_MESSAGE(res.max_rel_err <= 1e-5, res.worst);
    }
}

TEST_CASE("camera_transform applies rotation then translation") {
    Rng rng(50);
    const auto axis = random_axis(rng);
    const std::array<double, 3> r{axis[0] * 0.7, axis[1] * 0.7, axis[2] * 0.7};
    const std::array<double, 3> t{0.3, -1.2, 4.0};
    const auto m = rotation_matrix(r);

    std::vector<double> pts{0.5, -0.4, 0.2, -1.0, 0.8, -0.6};
    Tape tp;
    Tensor rot = tp.leaf({3}, std::vector<double>(r.begin(), r.end()), false);
    Tensor trans = tp.leaf({3}, std::vector<double>(t.begin(), t.end()), false);
    Tensor p = tp.leaf({2, 3}, std::vector<double>(pts), false);
    Tensor out = camera_transform(p, rot, trans);
    for (int i = 0; i < 2; ++i) {
        const auto rx = apply(m, {pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]});
        for (int k = 0; k < 3; ++k)
            CHECK(out.values()[3 * i + k] == doctest::Approx(rx[k] + t[k]).epsilon(1e-12));
    }
}

TEST_CASE("camera_center satisfies R c + t = 0") {
    Rng rng(60);
    for (int trial = 0; trial < 8; ++trial) {
        const auto axis = random_axis(rng);
        const double theta = rng.uniform(-3.0, 3.0);
        const std::array<double, 3> r{axis[0] * theta, axis[1] * theta, axis[2] * theta};
        const std::array<double, 3> t{rng.uniform(-2, 2), rng.uniform(-2, 2),
                                      rng.uniform(-2, 2)};
        Tape tp;
        Tensor rot = tp.leaf({3}, std::vector<double>(r.begin(), r.end()), false);
        Tensor trans = tp.leaf({3}, std::vector<double>(t.begin(), t.end()), false);
        Tensor c = camera_center(rot, trans);
        const auto m = rotation_matrix(r);
        const auto rc = apply(m, {c.values()[0], c.values()[1], c.values()[2]});
        for (int k = 0; k < 3; ++k) CHECK(std::abs(rc[k] + t[k]) < 1e-12);
    }
}

TEST_CASE("project_to_pixels: principal point, focal scaling, near-plane error") {
    Camera cam;
    cam.focal = 100.0;
    cam.principal = {32.0, 24.0};
    cam.width = 64;
    cam.height = 48;
    cam.validate();

    Tape tp;
    Tensor rot = tp.leaf({3}, std::vector<double>{0, 0, 0}, false);
    Tensor trans = tp.leaf({3}, std::vector<double>{0, 0, 0}, false);
    Tensor f = tp.leaf({1}, std::vector<double>{cam.focal}, false);

    Tensor axis_pt = tp.leaf({1, 3}, std::vector<double>{0, 0, 2.0}, false);
    Tensor px = project_to_pixels(axis_pt, rot, trans, f, cam);
    CHECK(px.values()[0] == doctest::Approx(32.0).epsilon(1e-12));
    CHECK(px.values()[1] == doctest::Approx(24.0).epsilon(1e-12));

    Tensor off_pt = tp.leaf({1, 3}, std::vector<double>{0.4, -0.3, 2.0}, false);
    Tensor f2 = tp.leaf({1}, std::vector<double>{2.0 * cam.focal}, false);
    Tensor p1 = project_to_pixels(off_pt, rot, trans, f, cam);
    Tensor p2 = project_to_pixels(off_pt, rot, trans, f2, cam);
    CHECK(p2.values()[0] - 32.0 ==
          doctest::Approx(2.0 * (p1.values()[0] - 32.0)).epsilon(1e-12));
    CHECK(p2.values()[1] - 24.0 ==
          doctest::Approx(2.0 * (p1.values()[1] - 24.0)).epsilon(1e-12));

    Tensor behind = tp.leaf({1, 3}, std::vector<double>{0, 0, -1.0}, false);
    CHECK_THROWS_AS(project_to_pixels(behind, rot, trans, f, cam), DomainError);
}

TEST_CASE("project_to_pixels gradients pass finite differences") {
    Camera cam;
    cam.focal = 150.0;
    cam.principal = {64.0, 64.0};
    cam.width = 128;
    cam.height = 128;

    Rng rng(70);
    Tape tp;
    Tensor rot = tp.leaf({3}, std::vector<double>{M_PI - 0.2, 0.1, -0.15}, true);
    Tensor trans = tp.leaf({3}, std::vector<double>{0.2, -0.1, 3.0}, true);
    Tensor f = tp.leaf({1}, std::vector<double>{150.0}, true);
    std::vector<double> pts(15);
    for (double& v : pts) v = rng.uniform(-0.5, 0.5);
    Tensor p = tp.leaf({5, 3}, std::move(pts), true);
    Tensor root = weighted_sum(project_to_pixels(p, rot, trans, f, cam), rng);
    auto res = gradcheck(tp, root, {rot, trans, f, p});
    CHECK_MESSAGE(res.max_rel_err <= 1e-4, res.worst);
}

// ---------------------------------------------------------------------------
// Pose initialization
// ---------------------------------------------------------------------------

namespace {

struct PoseFixture {
    std::array<std::array<double, 3>, 5> model;
    std::array<std::array<double, 2>, 5> pixels;
    double theta, depth, focal, tx2, ty2;
};

// Coplanar (z = 0) reference vertices seen by a rolled frontal camera: the
// weak-perspective similarity is exact, so init must recover the pose.
PoseFixture exact_pose_fixture() {
    PoseFixture fx;
    fx.model = {{{0.0, 0.05, 0.0},
                 {0.8, 0.1, 0.0},
                 {-0.7, 0.15, 0.0},
                 {0.3, -0.6, 0.0},
                 {-0.25, -0.55, 0.0}}};
    fx.theta = 0.25;
    fx.depth = 3.2;
    fx.focal = 250.0;
    fx.tx2 = 64.0 + 4.0;
    fx.ty2 = 64.0 - 6.0;
    const double s = fx.focal / fx.depth;
    const double c = std::cos(fx.theta), st = std::sin(fx.theta);
    for (int i = 0; i < 5; ++i) {
        const double ax = fx.model[i][0], ay = -fx.model[i][1];
        fx.pixels[i] = {s * (c * ax - st * ay) + fx.tx2, s * (st * ax + c * ay) + fx.ty2};
    }
    return fx;
}

} // namespace

TEST_CASE("init_camera_from_landmarks recovers an exact weak-perspective pose") {
    PoseFixture fx = exact_pose_fixture();
    Camera cam = init_camera_from_landmarks(fx.model, fx.pixels, 128, 128, fx.focal);

    CHECK(cam.translation[2] == doctest::Approx(fx.depth).epsilon(1e-9));

    // Rotation must equal Rz(theta)·Rx(pi).
    const double c = std::cos(fx.theta), s = std::sin(fx.theta);
    const std::array<double, 9> expect{c, s, 0, s, -c, 0, 0, 0, -1};
    const auto m = rotation_matrix(cam.rotation);
    for (int i = 0; i < 9; ++i) CHECK(std::abs(m[i] - expect[i]) < 1e-9);

    // Reprojecting the reference vertices reproduces the target pixels.
    Tape tp;
    std::vector<double> pts;
    for (const auto& p : fx.model) pts.insert(pts.end(), p.begin(), p.end());
    Tensor pos = tp.leaf({5, 3}, std::move(pts), false);
    Tensor rot = tp.leaf({3}, std::vector<double>(cam.rotation.begin(), cam.rotation.end()),
                         false);
    Tensor trans = tp.leaf({3},
                           std::vector<double>(cam.translation.begin(), cam.translation.end()),
                           false);
    Tensor f = tp.leaf({1}, std::vector<double>{cam.focal}, false);
    Tensor px = project_to_pixels(pos, rot, trans, f, cam);
    for (int i = 0; i < 5; ++i) {
        CHECK(px.values()[2 * i] == doctest::Approx(fx.pixels[i][0]).epsilon(1e-6));
        CHECK(px.values()[2 * i + 1] == doctest::Approx(fx.pixels[i][1]).epsilon(1e-6));
    }
}

TEST_CASE("init_camera_from_landmarks rejects degenerate targets") {
    PoseFixture fx = exact_pose_fixture();
    // All target pixels on one line: pose is unconstrained.
    std::array<std::array<double, 2>, 5> line;
    for (int i = 0; i < 5; ++i) line[i] = {10.0 + 7.0 * i, 20.0 + 3.5 * i};
    CHECK_THROWS_AS(init_camera_from_landmarks(fx.model, line, 128, 128, fx.focal),
                    DomainError);

    std::array<std::array<double, 2>, 5> same;
    same.fill({40.0, 40.0});
    CHECK_THROWS_AS(init_camera_from_landmarks(fx.model, same, 128, 128, fx.focal),
                    DomainError);

    CHECK_THROWS_AS(init_camera_from_landmarks(fx.model, fx.pixels, 128, 128, -1.0),
                    ContractError);
}

TEST_CASE("Camera validation and diagonal") {
    Camera cam;
    cam.focal = 100.0;
    cam.width = 96;
    cam.height = 128;
    cam.validate();
    CHECK(cam.diagonal() == doctest::Approx(160.0).epsilon(1e-12)); // 3-4-5 triangle

    Camera bad_focal = cam;
    bad_focal.focal = 0.0;
    CHECK_THROWS_AS(bad_focal.validate(), ContractError);

    Camera tiny = cam;
    tiny.width = 4;
    CHECK_THROWS_AS(tiny.validate(), ContractError);
}
