#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "facet/camera.hpp"
#include "facet/gradcheck.hpp"
#include "facet/ops.hpp"
#include "facet/renderer.hpp"
#include "facet/rng.hpp"
#include "facet/shape_model.hpp"
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

// Shading rig built from plain constants: exact-value oracles need full
// control over every number, bypassing the softplus reparameterization.
ShadingLights const_lights(Tape& tp, double ambient, std::vector<double> unit_dirs,
                           std::vector<double> intensity, double log_s) {
    const std::size_t nl = unit_dirs.size() / 3;
    ShadingLights s;
    s.ambient = tp.constant({1}, std::vector<double>{ambient});
    s.dirs = tp.constant({nl, 3}, std::move(unit_dirs));
    s.intensity = tp.constant({nl, 3}, std::move(intensity));
    s.log_s = tp.constant({1}, std::vector<double>{log_s});
    return s;
}

Camera identity_camera(std::size_t side, double focal) {
    Camera cam;
    cam.focal = focal;
    cam.principal = {static_cast<double>(side) / 2.0, static_cast<double>(side) / 2.0};
    cam.width = cam.height = side;
    return cam;
}

// Unit quad centered on the optical axis at depth z, facing the camera,
// with axis-aligned UVs. Triangles (0,1,2) and (0,2,3).
struct QuadMesh {
    std::vector<double> positions;
    std::vector<std::uint32_t> triangles{0, 1, 2, 0, 2, 3};
    std::vector<double> uv{0, 0, 1, 0, 1, 1, 0, 1};
};

QuadMesh make_quad(double z, double side = 1.0) {
    const double h = side / 2.0;
    QuadMesh q;
    q.positions = {-h, -h, z, h, -h, z, h, h, z, -h, h, z};
    return q;
}

// A deformed-icosphere head framed by a frontal camera, with mildly varying
// reflectance maps; shared by the full-render tests.
struct HeadFixture {
    PcaShapeModel model;
    Camera cam;
    std::vector<double> diffuse, specular, normals; // map payloads, R=8
    std::size_t res = 8;

    HeadFixture() : model(make_synthetic_shape_model(7)) {
        cam.rotation = {M_PI, 0.0, 0.0};
        cam.translation = {0.0, 0.0, 2.6};
        cam.focal = 52.0;
        cam.principal = {24.0, 24.0};
        cam.width = cam.height = 48;

        Rng rng(911);
        diffuse.resize(3 * res * res);
        for (double& x : diffuse) x = rng.uniform(0.2, 0.8);
        specular.resize(res * res);
        for (double& x : specular) x = rng.uniform(0.1, 0.4);
        normals.resize(3 * res * res);
        for (std::size_t i = 0; i < res * res; ++i) {
            normals[i] = 0.5 + rng.uniform(-0.08, 0.08);                   // x
            normals[res * res + i] = 0.5 + rng.uniform(-0.08, 0.08);      // y
            normals[2 * res * res + i] = 1.0;                              // z
        }
    }

    MapsOnTape maps_on(Tape& tp, bool requires_grad) const {
        MapsOnTape m;
        m.diffuse = tp.leaf({3, res, res}, std::vector<double>(diffuse), requires_grad);
        m.specular = tp.leaf({1, res, res}, std::vector<double>(specular), requires_grad);
        m.normals = tp.leaf({3, res, res}, std::vector<double>(normals), requires_grad);
        return m;
    }
};

} // namespace

TEST_CASE("softplus helpers invert each other") {
    for (double y : {1e-3, 0.5, 1.0, 20.0, 40.0})
        CHECK(softplus_value(inv_softplus(y)) == doctest::Approx(y).epsilon(1e-12));
    // matches the tape op
    Tape tp;
    Tensor x = tp.constant({3}, std::vector<double>{-2.0, 0.3, 4.0});
    Tensor y = softplus(x);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(y.values()[i] == doctest::Approx(softplus_value(x.values()[i])).epsilon(1e-15));
    CHECK_THROWS_AS(inv_softplus(0.0), ContractError);
    CHECK_THROWS_AS(inv_softplus(-1.0), ContractError);
}

TEST_CASE("lighting validates and round-trips through leaves") {
    Lighting l = Lighting::default_frontal();
    l.validate();
    CHECK(l.count() == 1);

    Tape tp;
    LightingLeaves lv = lighting_leaves(tp, l, true);
    Lighting back = lighting_from_leaves(lv);
    CHECK(back.ambient_raw == l.ambient_raw);
    CHECK(back.dir_raw == l.dir_raw);
    CHECK(back.intensity_raw == l.intensity_raw);
    CHECK(back.log_shininess == l.log_shininess);

    ShadingLights s = shading_lights(lv);
    CHECK(s.ambient.values()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.dirs.values()[2] == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(s.intensity.values()[i] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.log_s.values()[0] == doctest::Approx(std::log(20.0)).epsilon(1e-15));

    Lighting bad = l;
    bad.dir_raw.clear();
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = l;
    bad.intensity_raw.push_back(0.1);
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = l;
    bad.dir_raw = {0.0, 0.0, 0.0};
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = l;
    bad.ambient_raw = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("smooth_saturate1 is identity below the knee and saturates at 1") {
    Tape tp;
    const double d = 0.01;
    Tensor x = tp.constant(
        {6}, std::vector<double>{0.0, 0.5, 1.0 - d, 1.0, 1.0 + d, 2.0});
    Tensor y = smooth_saturate1(x, d);
    CHECK(y.values()[0] == 0.0);
    CHECK(y.values()[1] == 0.5);
    CHECK(y.values()[2] == 1.0 - d);
    CHECK(y.values()[3] == doctest::Approx(1.0 - d / 4.0).epsilon(1e-15));
    CHECK(y.values()[4] == 1.0);
    CHECK(y.values()[5] == 1.0);

    // C1 continuity at both knees
    const double eps = 1e-9;
    Tensor probe = tp.constant({4}, std::vector<double>{1.0 - d - eps, 1.0 - d + eps,
                                                        1.0 + d - eps, 1.0 + d + eps});
    Tensor py = smooth_saturate1(probe, d);
    CHECK(std::abs(py.values()[1] - py.values()[0]) < 1e-8);
    CHECK(std::abs(py.values()[3] - py.values()[2]) < 1e-8);

    // gradient away from the knees
    Tape tg;
    Tensor leaf = tg.leaf({3}, std::vector<double>{0.2, 0.97, 1.5}, true);
    Rng rng(5);
    Tensor loss = weighted_sum(smooth_saturate1(leaf), rng);
    auto res = gradcheck(tg, loss, {leaf});
    CHECK(res.max_rel_err <= 1e-6);
    CHECK_THROWS_AS(smooth_saturate1(leaf, 0.0), ContractError);
}

TEST_CASE("rasterize covers every pixel with a full-screen triangle") {
    Camera cam = identity_camera(16, 16.0);
    std::vector<double> pos{-5, -5, 2, 5, -5, 2, 0, 5, 2};
    std::vector<std::uint32_t> tris{0, 1, 2};
    std::vector<double> uv{0, 0, 1, 0, 0.5, 1};
    FragmentBuffer fb = rasterize(pos, tris, uv, cam);

    CHECK(fb.covered() == 256);
    for (std::size_t i = 0; i < fb.covered(); ++i) {
        CHECK(fb.pixels[i] == i); // ascending, dense
        CHECK(fb.tri[i] == 0);
        double sum = 0.0;
        for (int k = 0; k < 3; ++k) {
            CHECK(fb.bary[3 * i + k] >= 0.0);
            sum += fb.bary[3 * i + k];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(fb.uv[2 * i] >= 0.0);
        CHECK(fb.uv[2 * i] <= 1.0);
    }
    // flat triangle: every fragment sits at depth 2 exactly
    for (std::size_t off = 0; off < 256; ++off) {
        CHECK(fb.tri_map[off] == 0);
        CHECK(fb.depth_map[off] == doctest::Approx(2.0).epsilon(1e-12));
    }
}

TEST_CASE("rasterize z-buffer keeps the nearer triangle") {
    Camera cam = identity_camera(32, 32.0);
    // triangle 0: small, at z=2; triangle 1: larger, behind at z=3
    std::vector<double> pos{-0.2, -0.2, 2, 0.2, -0.2, 2, 0.0, 0.2, 2,
                            -0.8, -0.8, 3, 0.8, -0.8, 3, 0.0, 0.8, 3};
    std::vector<std::uint32_t> tris{0, 1, 2, 3, 4, 5};
    std::vector<double> uv{0, 0, 1, 0, 0.5, 1, 0, 0, 1, 0, 0.5, 1};
    FragmentBuffer fb = rasterize(pos, tris, uv, cam);

    std::size_t near_px = 0, far_px = 0;
    for (std::size_t i = 0; i < fb.covered(); ++i) {
        if (fb.tri[i] == 0) {
            ++near_px;
            CHECK(fb.depth_map[fb.pixels[i]] == doctest::Approx(2.0).epsilon(1e-12));
        } else {
            ++far_px;
            CHECK(fb.depth_map[fb.pixels[i]] == doctest::Approx(3.0).epsilon(1e-12));
        }
    }
    CHECK(near_px > 0);
    CHECK(far_px > 0);
    // the near triangle wins every pixel it covers: no far fragment inside
    // the near one's screen bounding box center region
    const double s = 32.0 / 2.0; // focal/z for z=2
    for (std::size_t i = 0; i < fb.covered(); ++i) {
        const double px = static_cast<double>(fb.pixels[i] % 32) + 0.5;
        const double py = static_cast<double>(fb.pixels[i] / 32) + 0.5;
        // inside the small triangle's projection (with margin)?
        const double x = (px - 16.0) / s, y = (py - 16.0) / s;
        const bool well_inside = std::abs(x) < 0.1 && y > -0.15 && y < 0.05 &&
                                 std::abs(x) * 2.0 + y < 0.1;
        if (well_inside) CHECK(fb.tri[i] == 0);
    }
}

TEST_CASE("rasterize coverage matches the projected-area prediction") {
    Camera cam = identity_camera(256, 160.0);
    QuadMesh q = make_quad(2.0);
    FragmentBuffer fb = rasterize(q.positions, q.triangles, q.uv, cam);
    const double predicted = (160.0 / 2.0) * (160.0 / 2.0); // (f·a/z)^2
    CHECK(std::abs(static_cast<double>(fb.covered()) - predicted) / predicted < 0.02);
}

TEST_CASE("rasterize barycentrics are perspective-correct") {
    // tilted triangle spanning a wide depth range; interpolating positions
    // with the stored weights must land back on each pixel's view ray
    Camera cam = identity_camera(64, 64.0);
    std::vector<double> pos{-0.8, -0.6, 1.5, 1.2, -0.5, 2.5, 0.1, 1.4, 4.0};
    std::vector<std::uint32_t> tris{0, 1, 2};
    std::vector<double> uv{0, 0, 1, 0, 0.5, 1};
    FragmentBuffer fb = rasterize(pos, tris, uv, cam);
    REQUIRE(fb.covered() > 100);

    for (std::size_t i = 0; i < fb.covered(); ++i) {
        double x = 0, y = 0, z = 0;
        for (int k = 0; k < 3; ++k) {
            const double w = fb.bary[3 * i + k];
            const std::uint32_t v = fb.corner_ids[3 * i + k];
            x += w * pos[3 * v];
            y += w * pos[3 * v + 1];
            z += w * pos[3 * v + 2];
        }
        CHECK(z == doctest::Approx(fb.depth_map[fb.pixels[i]]).epsilon(1e-9));
        const double px = static_cast<double>(fb.pixels[i] % 64) + 0.5;
        const double py = static_cast<double>(fb.pixels[i] / 64) + 0.5;
        CHECK(64.0 * x / z + 32.0 == doctest::Approx(px).epsilon(1e-6));
        CHECK(64.0 * y / z + 32.0 == doctest::Approx(py).epsilon(1e-6));
    }
}

TEST_CASE("rasterize rejects bad input and reports off-screen meshes") {
    Camera cam = identity_camera(16, 16.0);
    QuadMesh q = make_quad(2.0);

    std::vector<std::uint32_t> bad_tris{0, 1, 9};
    CHECK_THROWS_AS(rasterize(q.positions, bad_tris, q.uv, cam), ContractError);
    std::vector<double> bad_uv{0, 0, 1};
    CHECK_THROWS_AS(rasterize(q.positions, q.triangles, bad_uv, cam), ContractError);
    std::vector<double> nan_pos = q.positions;
    nan_pos[4] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(rasterize(nan_pos, q.triangles, q.uv, cam), ContractError);
    Camera bad_cam = cam;
    bad_cam.focal = 0.0;
    CHECK_THROWS_AS(rasterize(q.positions, q.triangles, q.uv, bad_cam), ContractError);

    // whole mesh behind the near plane
    QuadMesh behind = make_quad(-2.0);
    Diagnostics diag;
    FragmentBuffer fb = rasterize(behind.positions, behind.triangles, behind.uv, cam, &diag);
    CHECK(fb.covered() == 0);
    REQUIRE(diag.warnings.size() == 1);
    CHECK(diag.warnings[0].find("off-screen") != std::string::npos);
    for (double d : fb.depth_map) CHECK(d == std::numeric_limits<double>::infinity());
}

TEST_CASE("interpolate_attr matches a manual weighted sum and is differentiable") {
    Tape tp;
    Rng rng(77);
    std::vector<double> av(5 * 4);
    for (double& x : av) x = rng.uniform(-2.0, 2.0);
    Tensor attr = tp.leaf({5, 4}, std::vector<double>(av), true);

    std::vector<std::uint32_t> ids{0, 2, 4, 1, 1, 3, 2, 0, 4};
    std::vector<double> w{0.2, 0.3, 0.5, 0.6, 0.1, 0.3, 0.25, 0.25, 0.5};
    Tensor out = interpolate_attr(attr, ids, w);
    REQUIRE(out.shape() == Shape{3, 4});
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c) {
            double expect = 0.0;
            for (int k = 0; k < 3; ++k) expect += w[3 * r + k] * av[ids[3 * r + k] * 4 + c];
            CHECK(out.values()[r * 4 + c] == doctest::Approx(expect).epsilon(1e-12));
        }

    Tensor loss = weighted_sum(out, rng);
    auto res = gradcheck(tp, loss, {attr});
    CHECK(res.max_rel_err <= 1e-5); // linear map: pure finite-difference noise

    std::vector<std::uint32_t> bad{0, 2, 9};
    CHECK_THROWS_AS(interpolate_attr(attr, bad, {0.2, 0.3, 0.5}), ContractError);
}

TEST_CASE("fragment frames align with UV axes on a flat quad") {
    Camera cam = identity_camera(32, 32.0);
    QuadMesh q = make_quad(2.0);
    FragmentBuffer fb = rasterize(q.positions, q.triangles, q.uv, cam);
    REQUIRE(fb.covered() > 0);

    Tape tp;
    Tensor pos = tp.leaf({4, 3}, std::vector<double>(q.positions), true);
    Tensor n_vtx = vertex_normals(pos, q.triangles);
    FragmentFrames fr = fragment_frames(pos, n_vtx, fb);

    for (std::size_t i = 0; i < fb.covered(); ++i) {
        // u increases with +x, v with +y, normal is +z
        CHECK(fr.t.values()[3 * i] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::abs(fr.t.values()[3 * i + 1]) < 1e-12);
        CHECK(std::abs(fr.t.values()[3 * i + 2]) < 1e-12);
        CHECK(fr.b.values()[3 * i + 1] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(fr.n.values()[3 * i + 2] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(fb.tangent_sign[i] == 1.0);
    }

    // identity detail leaves the shape normal untouched; an x-tilted detail
    // normal swings the output toward +x
    const std::size_t p = fb.covered();
    std::vector<double> flat(3 * p), tilt(3 * p);
    for (std::size_t i = 0; i < p; ++i) {
        flat[3 * i + 2] = 1.0;
        tilt[3 * i] = 1.0 / std::sqrt(2.0);
        tilt[3 * i + 2] = 1.0 / std::sqrt(2.0);
    }
    Tensor n_flat = tangent_to_object(tp.constant({p, 3}, std::move(flat)), fr);
    Tensor n_tilt = tangent_to_object(tp.constant({p, 3}, std::move(tilt)), fr);
    for (std::size_t i = 0; i < p; ++i) {
        for (int k = 0; k < 3; ++k)
            CHECK(n_flat.values()[3 * i + k] ==
                  doctest::Approx(fr.n.values()[3 * i + k]).epsilon(1e-12));
        CHECK(n_tilt.values()[3 * i] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
        CHECK(n_tilt.values()[3 * i + 2] ==
              doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    }
}

TEST_CASE("degenerate UV triangles fall back to a stable frame") {
    Camera cam = identity_camera(16, 16.0);
    std::vector<double> pos{-2, -2, 2, 2, -2, 2, 0, 2, 2};
    std::vector<std::uint32_t> tris{0, 1, 2};
    std::vector<double> uv{0.3, 0.7, 0.3, 0.7, 0.3, 0.7}; // zero UV area
    Diagnostics diag;
    FragmentBuffer fb = rasterize(pos, tris, uv, cam, &diag);
    REQUIRE(fb.covered() > 0);
    REQUIRE(diag.warnings.size() == 1);
    CHECK(diag.warnings[0].find("degenerate") != std::string::npos);
    for (std::size_t i = 0; i < fb.covered(); ++i) {
        CHECK(fb.degenerate_uv[i] == 1);
        for (int k = 0; k < 3; ++k) CHECK(fb.tangent_w[3 * i + k] == 0.0);
    }

    Tape tp;
    Tensor pt = tp.leaf({3, 3}, std::vector<double>(pos), true);
    Tensor n_vtx = vertex_normals(pt, tris);
    FragmentFrames fr = fragment_frames(pt, n_vtx, fb);
    for (std::size_t i = 0; i < fb.covered(); ++i) {
        double tn = 0, bn = 0, tb = 0, tdotn = 0;
        for (int k = 0; k < 3; ++k) {
            tn += fr.t.values()[3 * i + k] * fr.t.values()[3 * i + k];
            bn += fr.b.values()[3 * i + k] * fr.b.values()[3 * i + k];
            tb += fr.t.values()[3 * i + k] * fr.b.values()[3 * i + k];
            tdotn += fr.t.values()[3 * i + k] * fr.n.values()[3 * i + k];
        }
        CHECK(tn == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(bn == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(std::abs(tb) < 1e-9);
        CHECK(std::abs(tdotn) < 1e-9);
    }
}

TEST_CASE("tangent frame chain passes a finite-difference check") {
    Camera cam = identity_camera(24, 24.0);
    QuadMesh q = make_quad(2.0);
    // jitter so nothing is axis-aligned
    Rng rng(31);
    for (double& x : q.positions) x += rng.uniform(-0.05, 0.05);
    FragmentBuffer fb = rasterize(q.positions, q.triangles, q.uv, cam);
    REQUIRE(fb.covered() > 0);

    Tape tp;
    Tensor pos = tp.leaf({4, 3}, std::vector<double>(q.positions), true);
    Tensor n_vtx = vertex_normals(pos, q.triangles);
    FragmentFrames fr = fragment_frames(pos, n_vtx, fb);
    const std::size_t p = fb.covered();
    std::vector<double> ns(3 * p);
    for (std::size_t i = 0; i < p; ++i) {
        ns[3 * i] = 0.25;
        ns[3 * i + 1] = -0.15;
        ns[3 * i + 2] = 0.95;
    }
    Tensor out = tangent_to_object(tp.constant({p, 3}, std::move(ns)), fr);
    Tensor loss = weighted_sum(out, rng);
    GradCheckOptions opt;
    opt.max_probes = 12;
    opt.seed = 5;
    auto res = gradcheck(tp, loss, {pos}, opt);
    INFO(res.worst);
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("diffuse shading oracles") {
    Tape tp;
    const std::size_t p = 3;
    Rng rng(123);
    std::vector<double> av(3 * p);
    for (double& x : av) x = rng.uniform(0.1, 0.9);
    Tensor albedo = tp.constant({p, 3}, std::vector<double>(av));

    // mirror: N = l, unit ambient and intensity -> U_D = A_D
    std::vector<double> n_up(3 * p, 0.0);
    for (std::size_t i = 0; i < p; ++i) n_up[3 * i + 2] = 1.0;
    Tensor normals = tp.constant({p, 3}, std::vector<double>(n_up));
    ShadingLights one = const_lights(tp, 1.0, {0, 0, 1}, {1, 1, 1}, std::log(20.0));
    Tensor ud = shade_diffuse(albedo, normals, one);
    for (std::size_t i = 0; i < 3 * p; ++i)
        CHECK(ud.values()[i] == doctest::Approx(av[i]).epsilon(1e-12));

    // orthogonal light -> exactly zero
    ShadingLights ortho = const_lights(tp, 1.0, {1, 0, 0}, {1, 1, 1}, std::log(20.0));
    Tensor uz = shade_diffuse(albedo, normals, ortho);
    for (std::size_t i = 0; i < 3 * p; ++i) CHECK(uz.values()[i] == 0.0);

    // light from behind -> clamped to zero, not negative
    ShadingLights behind = const_lights(tp, 1.0, {0, 0, -1}, {1, 1, 1}, std::log(20.0));
    Tensor ub = shade_diffuse(albedo, normals, behind);
    for (std::size_t i = 0; i < 3 * p; ++i) CHECK(ub.values()[i] == 0.0);

    // ambient scales the whole sum
    ShadingLights dim = const_lights(tp, 0.25, {0, 0, 1}, {1, 1, 1}, std::log(20.0));
    Tensor um = shade_diffuse(albedo, normals, dim);
    for (std::size_t i = 0; i < 3 * p; ++i)
        CHECK(um.values()[i] == doctest::Approx(0.25 * av[i]).epsilon(1e-12));
}

TEST_CASE("two-light superposition matches summed single-light shading") {
    Tape tp;
    const std::size_t p = 4;
    Rng rng(321);
    std::vector<double> av(3 * p), nv(3 * p);
    for (double& x : av) x = rng.uniform(0.1, 0.9);
    for (std::size_t i = 0; i < p; ++i) {
        double n[3];
        double s2 = 0;
        for (double& c : n) {
            c = rng.uniform(-1.0, 1.0);
            s2 += c * c;
        }
        for (int k = 0; k < 3; ++k) nv[3 * i + k] = n[k] / std::sqrt(s2);
    }
    Tensor albedo = tp.constant({p, 3}, std::vector<double>(av));
    Tensor normals = tp.constant({p, 3}, std::vector<double>(nv));

    const std::vector<double> d1{0, 0, 1}, d2{0.6, 0, 0.8};
    const std::vector<double> c1{0.9, 0.4, 0.3}, c2{0.2, 0.7, 1.1};
    ShadingLights both = const_lights(tp, 0.8, {0, 0, 1, 0.6, 0, 0.8},
                                      {0.9, 0.4, 0.3, 0.2, 0.7, 1.1}, std::log(20.0));
    ShadingLights la = const_lights(tp, 0.8, d1, c1, std::log(20.0));
    ShadingLights lb = const_lights(tp, 0.8, d2, c2, std::log(20.0));

    Tensor u_both = shade_diffuse(albedo, normals, both);
    Tensor u_sum = add(shade_diffuse(albedo, normals, la), shade_diffuse(albedo, normals, lb));
    for (std::size_t i = 0; i < 3 * p; ++i)
        CHECK(u_both.values()[i] == doctest::Approx(u_sum.values()[i]).epsilon(1e-12));

    // same superposition for the specular path
    std::vector<double> spec(p), view(3 * p, 0.0);
    for (double& x : spec) x = rng.uniform(0.05, 0.5);
    for (std::size_t i = 0; i < p; ++i) view[3 * i + 2] = 1.0;
    Tensor sp = tp.constant({p, 1}, std::vector<double>(spec));
    Tensor vw = tp.constant({p, 3}, std::vector<double>(view));
    Tensor s_both = shade_specular(sp, normals, vw, both);
    Tensor s_sum =
        add(shade_specular(sp, normals, vw, la), shade_specular(sp, normals, vw, lb));
    for (std::size_t i = 0; i < 3 * p; ++i)
        CHECK(s_both.values()[i] == doctest::Approx(s_sum.values()[i]).epsilon(1e-12));
}

TEST_CASE("specular shading oracles") {
    Tape tp;
    const std::size_t p = 2;
    std::vector<double> spec{0.4, 0.7};
    Tensor sp = tp.constant({p, 1}, std::vector<double>(spec));
    std::vector<double> up(3 * p, 0.0);
    for (std::size_t i = 0; i < p; ++i) up[3 * i + 2] = 1.0;
    Tensor n_up = tp.constant({p, 3}, std::vector<double>(up));
    Tensor view = tp.constant({p, 3}, std::vector<double>(up));

    // mirror: v = l = n -> h = n, (N·h)^s = 1 for any s
    const std::vector<double> cj{0.8, 0.5, 1.2};
    ShadingLights mirror = const_lights(tp, 1.0, {0, 0, 1}, cj, 1.7);
    Tensor us = shade_specular(sp, n_up, view, mirror);
    for (std::size_t i = 0; i < p; ++i)
        for (int k = 0; k < 3; ++k)
            CHECK(us.values()[3 * i + k] == doctest::Approx(spec[i] * cj[k]).epsilon(1e-12));

    // N perpendicular to h -> exactly zero
    std::vector<double> nx(3 * p, 0.0);
    for (std::size_t i = 0; i < p; ++i) nx[3 * i] = 1.0;
    Tensor n_side = tp.constant({p, 3}, std::vector<double>(nx));
    Tensor uz = shade_specular(sp, n_side, view, mirror);
    for (std::size_t i = 0; i < 3 * p; ++i) CHECK(uz.values()[i] == 0.0);

    // halving N·h at s=2 scales the lobe by exactly 1/4
    ShadingLights s2 = const_lights(tp, 1.0, {0, 0, 1}, {1, 1, 1}, std::log(2.0));
    std::vector<double> n08{0.6, 0, 0.8, 0.6, 0, 0.8};
    std::vector<double> n04{std::sqrt(0.84), 0, 0.4, std::sqrt(0.84), 0, 0.4};
    Tensor u08 = shade_specular(sp, tp.constant({p, 3}, std::move(n08)), view, s2);
    Tensor u04 = shade_specular(sp, tp.constant({p, 3}, std::move(n04)), view, s2);
    for (std::size_t i = 0; i < 3 * p; ++i)
        CHECK(u04.values()[i] == doctest::Approx(0.25 * u08.values()[i]).epsilon(1e-12));

    // increasing s strictly dims off-peak pixels, leaves the mirror pixel alone
    ShadingLights s20 = const_lights(tp, 1.0, {0, 0, 1}, {1, 1, 1}, std::log(20.0));
    ShadingLights s30 = const_lights(tp, 1.0, {0, 0, 1}, {1, 1, 1}, std::log(30.0));
    std::vector<double> mixed{0.0, 0.0, 1.0, std::sqrt(1.0 - 0.81), 0, 0.9};
    Tensor nm = tp.constant({p, 3}, std::move(mixed));
    Tensor a20 = shade_specular(sp, nm, view, s20);
    Tensor a30 = shade_specular(sp, nm, view, s30);
    CHECK(a30.values()[0] == doctest::Approx(a20.values()[0]).epsilon(1e-12)); // N·h = 1
    CHECK(a30.values()[3] < a20.values()[3]);                                  // N·h = 0.9
    CHECK(a30.values()[3] > 0.0);
}

TEST_CASE("specular term is symmetric under light/view swap") {
    Tape tp;
    Rng rng(55);
    const std::size_t p = 5;
    std::vector<double> spec(p), nv(3 * p);
    for (double& x : spec) x = rng.uniform(0.1, 0.8);
    for (std::size_t i = 0; i < p; ++i) {
        double n[3];
        double s2 = 0;
        for (double& c : n) {
            c = rng.uniform(-1.0, 1.0);
            s2 += c * c;
        }
        for (int k = 0; k < 3; ++k) nv[3 * i + k] = n[k] / std::sqrt(s2);
    }
    const std::array<double, 3> l{0.48, 0.6, 0.64}, v{-0.3, 0.4, 0.866025403784439};
    // both unit up to rounding; swap roles exactly
    std::vector<double> v_rows(3 * p), l_rows(3 * p);
    for (std::size_t i = 0; i < p; ++i)
        for (int k = 0; k < 3; ++k) {
            v_rows[3 * i + k] = v[k];
            l_rows[3 * i + k] = l[k];
        }
    Tensor sp = tp.constant({p, 1}, std::vector<double>(spec));
    Tensor normals = tp.constant({p, 3}, std::vector<double>(nv));
    ShadingLights with_l = const_lights(tp, 1.0, {l[0], l[1], l[2]}, {1, 0.7, 0.9}, 2.3);
    ShadingLights with_v = const_lights(tp, 1.0, {v[0], v[1], v[2]}, {1, 0.7, 0.9}, 2.3);
    Tensor a = shade_specular(sp, normals, tp.constant({p, 3}, std::move(v_rows)), with_l);
    Tensor b = shade_specular(sp, normals, tp.constant({p, 3}, std::move(l_rows)), with_v);
    for (std::size_t i = 0; i < 3 * p; ++i)
        CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-12));
}

TEST_CASE("light intensity scaling is exactly linear pre-clamp") {
    Tape tp;
    Rng rng(99);
    const std::size_t p = 4;
    std::vector<double> av(3 * p), nv(3 * p), spec(p), view(3 * p, 0.0);
    for (double& x : av) x = rng.uniform(0.1, 0.9);
    for (double& x : spec) x = rng.uniform(0.1, 0.6);
    for (std::size_t i = 0; i < p; ++i) {
        double n[3];
        double s2 = 0;
        for (double& c : n) {
            c = rng.uniform(-1.0, 1.0);
            s2 += c * c;
        }
        for (int k = 0; k < 3; ++k) nv[3 * i + k] = n[k] / std::sqrt(s2);
        view[3 * i + 2] = 1.0;
    }
    Tensor albedo = tp.constant({p, 3}, std::vector<double>(av));
    Tensor normals = tp.constant({p, 3}, std::vector<double>(nv));
    Tensor sp = tp.constant({p, 1}, std::vector<double>(spec));
    Tensor vw = tp.constant({p, 3}, std::vector<double>(view));

    // doubling c_j doubles U bit-exactly (scaling by a power of two commutes
    // with every rounding step)
    ShadingLights base = const_lights(tp, 0.7, {0.6, 0, 0.8}, {0.9, 0.45, 0.3}, 2.0);
    ShadingLights twice = const_lights(tp, 0.7, {0.6, 0, 0.8}, {1.8, 0.9, 0.6}, 2.0);
    Tensor u1 = add(shade_diffuse(albedo, normals, base),
                    shade_specular(sp, normals, vw, base));
    Tensor u2 = add(shade_diffuse(albedo, normals, twice),
                    shade_specular(sp, normals, vw, twice));
    for (std::size_t i = 0; i < 3 * p; ++i) CHECK(u2.values()[i] == 2.0 * u1.values()[i]);

    // zero intensities kill the output entirely
    ShadingLights off = const_lights(tp, 0.7, {0.6, 0, 0.8}, {0, 0, 0}, 2.0);
    Tensor u0 = add(shade_diffuse(albedo, normals, off),
                    shade_specular(sp, normals, vw, off));
    for (std::size_t i = 0; i < 3 * p; ++i) CHECK(u0.values()[i] == 0.0);
}

TEST_CASE("render produces a plausible, deterministic head image") {
    HeadFixture fx;
    auto run = [&fx](std::vector<double>& image_out, FragmentBuffer& fb_out) {
        Tape tp;
        Tensor pos = tp.leaf(
            {fx.model.num_vertices, 3},
            std::vector<double>(fx.model.mean->begin(), fx.model.mean->end()), true);
        Tensor rot = tp.leaf({3}, std::vector<double>{M_PI, 0, 0}, true);
        Tensor trans = tp.leaf({3}, std::vector<double>{0, 0, 2.6}, true);
        Tensor focal = tp.leaf({1}, std::vector<double>{52.0}, true);
        MapsOnTape maps = fx.maps_on(tp, false);
        ShadingLights lights = shading_lights(lighting_leaves(tp, Lighting::default_frontal(), false));
        RenderOptions opt;
        opt.background = {0.1, 0.2, 0.3};
        RenderResult rr = render(pos, fx.model, rot, trans, focal, fx.cam, maps, lights, opt);
        CHECK(!rr.offscreen);
        image_out = rr.image.values();
        fb_out = rr.frags;
    };

    std::vector<double> img1, img2;
    FragmentBuffer fb1, fb2;
    run(img1, fb1);
    run(img2, fb2);

    const std::size_t hw = 48 * 48;
    REQUIRE(img1.size() == 3 * hw);
    CHECK(fb1.covered() > 200);
    CHECK(fb1.covered() < hw);

    std::vector<bool> covered(hw, false);
    for (std::uint32_t px : fb1.pixels) covered[px] = true;
    const double bg[3] = {0.1, 0.2, 0.3};
    double peak = 0.0;
    for (std::size_t off = 0; off < hw; ++off)
        for (std::size_t c = 0; c < 3; ++c) {
            const double x = img1[c * hw + off];
            if (covered[off]) {
                CHECK(x >= 0.0);
                CHECK(x <= 1.0);
                peak = std::max(peak, x);
            } else {
                CHECK(x == bg[c]);
            }
        }
    CHECK(peak > 0.05); // the lit side is clearly above black

    // bit-identical across runs
    REQUIRE(img1.size() == img2.size());
    CHECK(std::memcmp(img1.data(), img2.data(), img1.size() * sizeof(double)) == 0);
    CHECK(fb1.pixels == fb2.pixels);
    CHECK(fb1.bary == fb2.bary);
    CHECK(fb1.tangent_w == fb2.tangent_w);
}

TEST_CASE("render equals the manual diffuse+specular composition bit-for-bit") {
    HeadFixture fx;
    std::vector<double> mean(fx.model.mean->begin(), fx.model.mean->end());

    // the real path
    Tape ta;
    Tensor pos_a = ta.leaf({fx.model.num_vertices, 3}, std::vector<double>(mean), true);
    Tensor rot_a = ta.leaf({3}, std::vector<double>{M_PI, 0, 0}, true);
    Tensor trans_a = ta.leaf({3}, std::vector<double>{0, 0, 2.6}, true);
    Tensor focal_a = ta.leaf({1}, std::vector<double>{52.0}, true);
    MapsOnTape maps_a = fx.maps_on(ta, false);
    ShadingLights li_a = shading_lights(lighting_leaves(ta, Lighting::default_frontal(), false));
    RenderResult rr = render(pos_a, fx.model, rot_a, trans_a, focal_a, fx.cam, maps_a, li_a);

    // the same chain assembled by hand on a fresh tape
    Tape tb;
    Tensor pos = tb.leaf({fx.model.num_vertices, 3}, std::vector<double>(mean), true);
    Tensor rot = tb.leaf({3}, std::vector<double>{M_PI, 0, 0}, true);
    Tensor trans = tb.leaf({3}, std::vector<double>{0, 0, 2.6}, true);
    MapsOnTape maps = fx.maps_on(tb, false);
    ShadingLights li = shading_lights(lighting_leaves(tb, Lighting::default_frontal(), false));

    FragmentBuffer fb = rasterize(mean, fx.model.triangles, fx.model.uv, fx.cam);
    const std::size_t p = fb.covered();
    REQUIRE(p == rr.frags.covered());

    Tensor n_geo = vertex_normals(pos, fx.model.triangles);
    Tensor n_diff = smooth_normals(n_geo, fx.model.triangles, 2);
    Tensor n_d = normalize3(interpolate_attr(n_diff, fb.corner_ids, fb.bary));
    FragmentFrames frames = fragment_frames(pos, n_geo, fb);
    Tensor uv_t = tb.constant({p, 2}, std::vector<double>(fb.uv));
    Tensor a_d = bilinear_sample(maps.diffuse, uv_t);
    Tensor a_s = bilinear_sample(maps.specular, uv_t);
    Tensor n_s = tangent_to_object(affine(bilinear_sample(maps.normals, uv_t), 2.0, -1.0),
                                   frames);
    Tensor u_d = shade_diffuse(a_d, n_d, li);
    Tensor x_w = interpolate_attr(pos, fb.corner_ids, fb.bary);
    Tensor view = normalize3(sub(camera_center(rot, trans), x_w));
    Tensor u_s = shade_specular(a_s, n_s, view, li);
    Tensor img = scatter_pixels(smooth_saturate1(max0(add(u_d, u_s))),
                                std::vector<std::uint32_t>(fb.pixels), 48, 48, {0, 0, 0});

    const auto& got = rr.image.values();
    const auto& want = img.values();
    REQUIRE(got.size() == want.size());
    CHECK(std::memcmp(got.data(), want.data(), got.size() * sizeof(double)) == 0);

    // pre-clamp radiance of the two paths agrees as well
    const auto& ra = rr.radiance.values();
    const auto& rb = add(u_d, u_s).values();
    CHECK(std::memcmp(ra.data(), rb.data(), ra.size() * sizeof(double)) == 0);
}

TEST_CASE("render with all lights off keeps covered pixels black") {
    HeadFixture fx;
    Tape tp;
    Tensor pos = tp.leaf({fx.model.num_vertices, 3},
                         std::vector<double>(fx.model.mean->begin(), fx.model.mean->end()),
                         true);
    Tensor rot = tp.constant({3}, std::vector<double>{M_PI, 0, 0});
    Tensor trans = tp.constant({3}, std::vector<double>{0, 0, 2.6});
    Tensor focal = tp.constant({1}, std::vector<double>{52.0});
    MapsOnTape maps = fx.maps_on(tp, false);
    ShadingLights off = const_lights(tp, 0.0, {0, 0, 1}, {0, 0, 0}, std::log(20.0));
    RenderOptions opt;
    opt.background = {0.25, 0.5, 0.75};
    RenderResult rr = render(pos, fx.model, rot, trans, focal, fx.cam, maps, off, opt);

    const std::size_t hw = 48 * 48;
    std::vector<bool> covered(hw, false);
    for (std::uint32_t px : rr.frags.pixels) covered[px] = true;
    const double bg[3] = {0.25, 0.5, 0.75};
    for (std::size_t offp = 0; offp < hw; ++offp)
        for (std::size_t c = 0; c < 3; ++c) {
            const double x = rr.image.values()[c * hw + offp];
            if (covered[offp])
                CHECK(x == 0.0);
            else
                CHECK(x == bg[c]);
        }
}

TEST_CASE("render reports an off-screen mesh and fills the background") {
    HeadFixture fx;
    Tape tp;
    Tensor pos = tp.leaf({fx.model.num_vertices, 3},
                         std::vector<double>(fx.model.mean->begin(), fx.model.mean->end()),
                         true);
    Tensor rot = tp.constant({3}, std::vector<double>{M_PI, 0, 0});
    Tensor trans = tp.constant({3}, std::vector<double>{0, 0, -5.0}); // behind the camera
    Tensor focal = tp.constant({1}, std::vector<double>{52.0});
    MapsOnTape maps = fx.maps_on(tp, false);
    ShadingLights li = shading_lights(lighting_leaves(tp, Lighting::default_frontal(), false));
    Diagnostics diag;
    RenderOptions opt;
    opt.background = {0.4, 0.1, 0.6};
    opt.diag = &diag;
    RenderResult rr = render(pos, fx.model, rot, trans, focal, fx.cam, maps, li, opt);
    CHECK(rr.offscreen);
    CHECK(rr.frags.covered() == 0);
    CHECK(!rr.radiance.valid());
    REQUIRE(!diag.warnings.empty());
    const std::size_t hw = 48 * 48;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < hw; ++i)
            CHECK(rr.image.values()[c * hw + i] == opt.background[c]);
}

TEST_CASE("specular normals follow the shape normals under an identity detail map") {
    // N_S = (0,0,1) everywhere: the specular normal field must coincide with
    // the interpolated shape normals, so both shading paths share one field.
    HeadFixture fx;
    std::vector<double> mean(fx.model.mean->begin(), fx.model.mean->end());
    FragmentBuffer fb = rasterize(mean, fx.model.triangles, fx.model.uv, fx.cam);
    REQUIRE(fb.covered() > 0);

    Tape tp;
    Tensor pos = tp.leaf({fx.model.num_vertices, 3}, std::vector<double>(mean), true);
    Tensor n_geo = vertex_normals(pos, fx.model.triangles);
    FragmentFrames fr = fragment_frames(pos, n_geo, fb);
    const std::size_t p = fb.covered();
    std::vector<double> ident(3 * p, 0.0);
    for (std::size_t i = 0; i < p; ++i) ident[3 * i + 2] = 1.0;
    Tensor n_s = tangent_to_object(tp.constant({p, 3}, std::move(ident)), fr);
    Tensor n_d = normalize3(interpolate_attr(n_geo, fb.corner_ids, fb.bary));
    for (std::size_t i = 0; i < 3 * p; ++i)
        CHECK(n_s.values()[i] == doctest::Approx(n_d.values()[i]).epsilon(1e-12));
}

TEST_CASE("render gradients match finite differences") {
    HeadFixture fx;
    Tape tp;
    Tensor pos = tp.leaf({fx.model.num_vertices, 3},
                         std::vector<double>(fx.model.mean->begin(), fx.model.mean->end()),
                         true);
    Tensor rot = tp.leaf({3}, std::vector<double>{M_PI, 0, 0}, true);
    Tensor trans = tp.leaf({3}, std::vector<double>{0, 0, 2.6}, true);
    Tensor focal = tp.leaf({1}, std::vector<double>{52.0}, true);
    MapsOnTape maps = fx.maps_on(tp, true);
    LightingLeaves lv = lighting_leaves(tp, Lighting::default_frontal(), true);
    ShadingLights li = shading_lights(lv);
    RenderResult rr = render(pos, fx.model, rot, trans, focal, fx.cam, maps, li);
    REQUIRE(!rr.offscreen);

    Rng rng(17);
    Tensor loss = weighted_sum(rr.image, rng);
    GradCheckOptions opt;
    opt.max_probes = 8;
    opt.seed = 23;
    // Central differences on an O(10) loss carry an eps·|loss|/h roundoff
    // floor (~1e-9 absolute at h=2e-6), so the step sits near the optimum
    // and gradients below 1e-4 are gated absolutely (tol·floor = 1e-8)
    // instead of by ratio.
    opt.rel_floor = 1e-4;
    opt.step = 2e-6;
    auto res = gradcheck(tp, loss,
                         {maps.diffuse, maps.specular, maps.normals, lv.ambient_raw,
                          lv.intensity_raw, lv.dir_raw, lv.log_s},
                         opt);
    INFO(res.worst);
    CHECK(res.max_rel_err <= 1e-4);

    // geometry gradients flow through normals and view directions (fragment
    // assignment itself is intentionally frozen)
    GradCheckOptions gopt;
    gopt.max_probes = 6;
    gopt.seed = 29;
    gopt.rel_floor = 1e-4;
    gopt.step = 2e-6;
    auto gres = gradcheck(tp, loss, {pos, rot, trans}, gopt);
    INFO(gres.worst);
    CHECK(gres.max_rel_err <= 1e-4);
}
