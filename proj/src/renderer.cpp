#include "facet/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "facet/ops.hpp"

namespace facet {

using ad::Node;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

// ---------------------------------------------------------------------------
// Lighting parameters
// ---------------------------------------------------------------------------

double softplus_value(double x) {
    if (x > 35.0) return x;
    if (x < -35.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double inv_softplus(double y) {
    check(y > 0.0, "inv_softplus: argument must be positive");
    if (y > 35.0) return y;
    // x = y + log(1 - exp(-y))
    return y + std::log1p(-std::exp(-y));
}

void Lighting::validate() const {
    check(!dir_raw.empty() && dir_raw.size() % 3 == 0,
          "Lighting: need at least one light direction (3 values each)");
    check(intensity_raw.size() == dir_raw.size(),
          "Lighting: intensity array must match directions");
    auto finite = [](const std::vector<double>& v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    check(finite(dir_raw) && finite(intensity_raw) && std::isfinite(ambient_raw) &&
              std::isfinite(log_shininess),
          "Lighting: parameters must be finite");
    for (std::size_t j = 0; j < count(); ++j) {
        const double* d = dir_raw.data() + 3 * j;
        check(d[0] * d[0] + d[1] * d[1] + d[2] * d[2] > 1e-12,
              "Lighting: near-zero direction for light " + std::to_string(j));
    }
}

Lighting Lighting::default_frontal() {
    Lighting l;
    l.ambient_raw = inv_softplus(1.0);
    l.dir_raw = {0.0, 0.0, 1.0};
    l.intensity_raw = std::vector<double>(3, inv_softplus(1.0));
    l.log_shininess = std::log(20.0);
    return l;
}

LightingLeaves lighting_leaves(Tape& tape, const Lighting& lighting, bool requires_grad) {
    lighting.validate();
    const std::size_t nl = lighting.count();
    LightingLeaves lv;
    lv.ambient_raw = tape.leaf({1}, std::vector<double>{lighting.ambient_raw}, requires_grad);
    lv.dir_raw = tape.leaf({nl, 3}, std::vector<double>(lighting.dir_raw), requires_grad);
    lv.intensity_raw =
        tape.leaf({nl, 3}, std::vector<double>(lighting.intensity_raw), requires_grad);
    lv.log_s = tape.leaf({1}, std::vector<double>{lighting.log_shininess}, requires_grad);
    return lv;
}

ShadingLights shading_lights(const LightingLeaves& leaves) {
    ShadingLights s;
    s.ambient = ad::softplus(leaves.ambient_raw);
    s.dirs = ad::normalize3(leaves.dir_raw);
    s.intensity = ad::softplus(leaves.intensity_raw);
    s.log_s = leaves.log_s;
    return s;
}

Lighting lighting_from_leaves(const LightingLeaves& leaves) {
    Lighting l;
    l.ambient_raw = leaves.ambient_raw.values()[0];
    l.dir_raw = leaves.dir_raw.values();
    l.intensity_raw = leaves.intensity_raw.values();
    l.log_shininess = leaves.log_s.values()[0];
    return l;
}

// ---------------------------------------------------------------------------
// Rasterization (host side, detached)
// ---------------------------------------------------------------------------

namespace {

// Per-triangle UV frame data: T = sum_k at[k]·P_k, B = sum_k ab[k]·P_k.
struct TriFrame {
    std::array<double, 3> at{0, 0, 0};
    std::array<double, 3> ab{0, 0, 0};
    double sign = 1.0;
    bool degenerate = false;
};

std::array<double, 3> cross_h(const double* a, const double* b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

TriFrame triangle_frame(const std::vector<double>& pos, const std::vector<double>& uv,
                        std::uint32_t i0, std::uint32_t i1, std::uint32_t i2) {
    TriFrame f;
    const double du1 = uv[2 * i1] - uv[2 * i0], dv1 = uv[2 * i1 + 1] - uv[2 * i0 + 1];
    const double du2 = uv[2 * i2] - uv[2 * i0], dv2 = uv[2 * i2 + 1] - uv[2 * i0 + 1];
    const double det = du1 * dv2 - du2 * dv1;
    if (std::abs(det) < 1e-12) {
        f.degenerate = true;
        return f;
    }
    f.at = {(dv1 - dv2) / det, dv2 / det, -dv1 / det};
    f.ab = {(du2 - du1) / det, -du2 / det, du1 / det};

    // Handedness of b = n x t against the raw UV bitangent, from detached
    // geometry; fragments scale (n x t) by this sign.
    double e1[3], e2[3], t[3], b[3];
    for (int k = 0; k < 3; ++k) {
        e1[k] = pos[3 * i1 + k] - pos[3 * i0 + k];
        e2[k] = pos[3 * i2 + k] - pos[3 * i0 + k];
        t[k] = (dv2 * e1[k] - dv1 * e2[k]) / det;
        b[k] = (-du2 * e1[k] + du1 * e2[k]) / det;
    }
    const auto n = cross_h(e1, e2);
    const auto nxt = cross_h(n.data(), t);
    const double d = nxt[0] * b[0] + nxt[1] * b[1] + nxt[2] * b[2];
    if (d < 0.0) f.sign = -1.0;
    return f;
}

} // namespace

FragmentBuffer rasterize(const std::vector<double>& positions,
                         const std::vector<std::uint32_t>& triangles,
                         const std::vector<double>& uv, const Camera& cam, Diagnostics* diag) {
    cam.validate();
    check(positions.size() % 3 == 0 && !positions.empty(),
          "rasterize: positions must be a non-empty 3V array");
    const std::size_t v = positions.size() / 3;
    check(uv.size() == 2 * v, "rasterize: uv array must have 2V entries");
    check(!triangles.empty() && triangles.size() % 3 == 0,
          "rasterize: triangle array must be a non-empty multiple of 3");
    for (std::uint32_t t : triangles)
        check(t < v, "rasterize: triangle index " + std::to_string(t) + " out of range");
    for (double p : positions)
        check(std::isfinite(p), "rasterize: non-finite vertex position");

    const std::size_t w = cam.width, h = cam.height;
    const auto rot = rotation_matrix(cam.rotation);

    // Camera-space depths and screen positions; a vertex is usable only in
    // front of the near plane.
    std::vector<double> zc(v);
    std::vector<double> sx(v), sy(v);
    std::vector<std::uint8_t> usable(v, 0);
    for (std::size_t i = 0; i < v; ++i) {
        const double* p = positions.data() + 3 * i;
        const double x = rot[0] * p[0] + rot[1] * p[1] + rot[2] * p[2] + cam.translation[0];
        const double y = rot[3] * p[0] + rot[4] * p[1] + rot[5] * p[2] + cam.translation[1];
        const double z = rot[6] * p[0] + rot[7] * p[1] + rot[8] * p[2] + cam.translation[2];
        zc[i] = z;
        if (z > cam.near) {
            usable[i] = 1;
            sx[i] = cam.focal * x / z + cam.principal[0];
            sy[i] = cam.focal * y / z + cam.principal[1];
        }
    }

    FragmentBuffer fb;
    fb.width = w;
    fb.height = h;
    fb.tri_map.assign(w * h, -1);
    fb.depth_map.assign(w * h, std::numeric_limits<double>::infinity());
    std::vector<double> bary_map(3 * w * h, 0.0);

    for (std::size_t f = 0; f + 2 < triangles.size(); f += 3) {
        const std::uint32_t i0 = triangles[f], i1 = triangles[f + 1], i2 = triangles[f + 2];
        if (!usable[i0] || !usable[i1] || !usable[i2]) continue;
        const double ax = sx[i0], ay = sy[i0];
        const double bx = sx[i1], by = sy[i1];
        const double cx = sx[i2], cy = sy[i2];
        const double area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
        if (std::abs(area) < 1e-12) continue;

        const double minx = std::min({ax, bx, cx}), maxx = std::max({ax, bx, cx});
        const double miny = std::min({ay, by, cy}), maxy = std::max({ay, by, cy});
        if (maxx < 0.0 || maxy < 0.0 || minx > static_cast<double>(w) ||
            miny > static_cast<double>(h))
            continue;
        const long x0 = std::max(0L, static_cast<long>(std::floor(minx - 0.5)));
        const long x1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::ceil(maxx)));
        const long y0 = std::max(0L, static_cast<long>(std::floor(miny - 0.5)));
        const long y1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::ceil(maxy)));

        for (long py = y0; py <= y1; ++py) {
            for (long px = x0; px <= x1; ++px) {
                const double qx = static_cast<double>(px) + 0.5;
                const double qy = static_cast<double>(py) + 0.5;
                const double e0 = (cx - bx) * (qy - by) - (cy - by) * (qx - bx);
                const double e1 = (ax - cx) * (qy - cy) - (ay - cy) * (qx - cx);
                const double e2 = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax);
                const bool inside = area > 0.0 ? (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0)
                                               : (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0);
                if (!inside) continue;
                const double l0 = e0 / area, l1 = e1 / area, l2 = e2 / area;
                // Perspective-correct weights and view-space depth.
                const double w0 = l0 / zc[i0], w1 = l1 / zc[i1], w2 = l2 / zc[i2];
                const double ws = w0 + w1 + w2;
                const double depth = 1.0 / ws;
                const std::size_t off = static_cast<std::size_t>(py) * w +
                                        static_cast<std::size_t>(px);
                if (depth < fb.depth_map[off]) {
                    fb.depth_map[off] = depth;
                    fb.tri_map[off] = static_cast<std::int32_t>(f / 3);
                    bary_map[3 * off] = w0 / ws;
                    bary_map[3 * off + 1] = w1 / ws;
                    bary_map[3 * off + 2] = w2 / ws;
                }
            }
        }
    }

    // Per-triangle UV frames, precomputed in one deterministic pass.
    const std::size_t nt = triangles.size() / 3;
    std::vector<TriFrame> frames(nt);
    for (std::size_t t = 0; t < nt; ++t)
        frames[t] = triangle_frame(positions, uv, triangles[3 * t], triangles[3 * t + 1],
                                   triangles[3 * t + 2]);

    std::vector<std::uint8_t> degen_used(nt, 0);
    for (std::size_t off = 0; off < w * h; ++off) {
        if (fb.tri_map[off] < 0) continue;
        const auto t = static_cast<std::uint32_t>(fb.tri_map[off]);
        const std::uint32_t i0 = triangles[3 * t], i1 = triangles[3 * t + 1],
                            i2 = triangles[3 * t + 2];
        const double w0 = bary_map[3 * off], w1 = bary_map[3 * off + 1],
                     w2 = bary_map[3 * off + 2];
        fb.pixels.push_back(static_cast<std::uint32_t>(off));
        fb.tri.push_back(t);
        fb.corner_ids.insert(fb.corner_ids.end(), {i0, i1, i2});
        fb.bary.insert(fb.bary.end(), {w0, w1, w2});
        fb.uv.insert(fb.uv.end(),
                     {w0 * uv[2 * i0] + w1 * uv[2 * i1] + w2 * uv[2 * i2],
                      w0 * uv[2 * i0 + 1] + w1 * uv[2 * i1 + 1] + w2 * uv[2 * i2 + 1]});
        const TriFrame& tf = frames[t];
        fb.tangent_w.insert(fb.tangent_w.end(), tf.at.begin(), tf.at.end());
        fb.bitangent_w.insert(fb.bitangent_w.end(), tf.ab.begin(), tf.ab.end());
        fb.tangent_sign.push_back(tf.sign);
        fb.degenerate_uv.push_back(tf.degenerate ? 1 : 0);
        if (tf.degenerate) degen_used[t] = 1;
    }

    if (diag) {
        if (fb.pixels.empty()) {
            diag->warn("rasterize: mesh is fully off-screen; image is all background");
        } else {
            const auto degen_tris =
                static_cast<std::size_t>(std::count(degen_used.begin(), degen_used.end(), 1));
            if (degen_tris > 0)
                diag->warn("rasterize: " + std::to_string(degen_tris) +
                           " uv-degenerate triangle(s) visible; fallback tangent frames in use");
        }
    }
    return fb;
}

// ---------------------------------------------------------------------------
// Fragment interpolation (on tape, detached weights)
// ---------------------------------------------------------------------------

Tensor interpolate_attr(Tensor attr, const std::vector<std::uint32_t>& corner_ids,
                        const std::vector<double>& weights) {
    const Shape& as = attr.shape();
    check(as.size() == 2, "interpolate_attr: attribute must be [V,C], got " +
                              ad::shape_str(as));
    check(corner_ids.size() == weights.size() && corner_ids.size() % 3 == 0,
          "interpolate_attr: corner/weight arrays must hold 3 entries per fragment");
    const std::size_t v = as[0], c = as[1];
    const std::size_t p = corner_ids.size() / 3;
    check(p > 0, "interpolate_attr: no fragments");
    for (std::uint32_t id : corner_ids)
        check(id < v, "interpolate_attr: vertex id " + std::to_string(id) + " out of range");

    Tape& tp = *attr.tape();
    const int aid = attr.id();
    auto ids = std::make_shared<std::vector<std::uint32_t>>(corner_ids);
    auto wts = std::make_shared<std::vector<double>>(weights);
    Node n;
    n.op = "interpolate_attr";
    n.shape = {p, c};
    n.requires_grad = attr.requires_grad();
    n.inputs = {aid};
    n.forward = [aid, ids, wts, p, c](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        auto out = std::make_shared<std::vector<double>>(p * c, 0.0);
        for (std::size_t r = 0; r < p; ++r)
            for (int k = 0; k < 3; ++k) {
                const double wk = (*wts)[3 * r + k];
                const double* src = av.data() + (*ids)[3 * r + k] * c;
                double* dst = out->data() + r * c;
                for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += wk * src[ch];
            }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, ids, wts, p, c](Tape& t, int self) {
            const auto& g = t.node(self).grad;
            Node& an = t.node(aid);
            for (std::size_t r = 0; r < p; ++r)
                for (int k = 0; k < 3; ++k) {
                    const double wk = (*wts)[3 * r + k];
                    double* dst = an.grad.data() + (*ids)[3 * r + k] * c;
                    const double* src = g.data() + r * c;
                    for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += wk * src[ch];
                }
        };
    }
    return tp.emplace(std::move(n));
}

// ---------------------------------------------------------------------------
// Frames and shading
// ---------------------------------------------------------------------------

FragmentFrames fragment_frames(Tensor positions, Tensor shape_normals,
                               const FragmentBuffer& frags) {
    const std::size_t p = frags.covered();
    check(p > 0, "fragment_frames: empty fragment buffer");
    Tape& tp = *positions.tape();

    Tensor n = ad::normalize3(interpolate_attr(shape_normals, frags.corner_ids, frags.bary));
    Tensor t_pre = interpolate_attr(positions, frags.corner_ids, frags.tangent_w);

    // Degenerate-UV fragments carry zero tangent weights; give them a
    // constant helper axis (least aligned with the detached normal) so the
    // Gram-Schmidt step below still produces a frame, differentiable via n.
    bool any_degenerate = false;
    std::vector<double> helper(3 * p, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        if (!frags.degenerate_uv[i]) continue;
        any_degenerate = true;
        const double* nv = n.values().data() + 3 * i;
        int k = 0;
        if (std::abs(nv[1]) < std::abs(nv[k])) k = 1;
        if (std::abs(nv[2]) < std::abs(nv[k])) k = 2;
        helper[3 * i + k] = 1.0;
    }
    if (any_degenerate)
        t_pre = ad::add(t_pre, tp.constant({p, 3}, std::move(helper)));

    Tensor t = ad::normalize3(ad::sub(t_pre, ad::scale_rows(n, ad::rowdot(n, t_pre))));
    Tensor sign = tp.constant({p, 1}, std::vector<double>(frags.tangent_sign));
    Tensor b = ad::scale_rows(ad::cross3(n, t), sign);
    return {t, b, n};
}

Tensor tangent_to_object(Tensor ns_tangent, const FragmentFrames& frames) {
    const Shape& s = ns_tangent.shape();
    check(s.size() == 2 && s[1] == 3,
          "tangent_to_object: tangent normals must be [P,3], got " + ad::shape_str(s));
    Tape& tp = *ns_tangent.tape();
    Tensor ex = tp.constant({3}, std::vector<double>{1.0, 0.0, 0.0});
    Tensor ey = tp.constant({3}, std::vector<double>{0.0, 1.0, 0.0});
    Tensor ez = tp.constant({3}, std::vector<double>{0.0, 0.0, 1.0});
    Tensor mix = ad::add(ad::add(ad::scale_rows(frames.t, ad::rowdot(ns_tangent, ex)),
                                 ad::scale_rows(frames.b, ad::rowdot(ns_tangent, ey))),
                         ad::scale_rows(frames.n, ad::rowdot(ns_tangent, ez)));
    return ad::normalize3(mix);
}

namespace {

// d [P,1] times c [3] -> [P,3] (outer product via row replication).
Tensor outer_rows(Tensor d, Tensor c) {
    const std::size_t p = d.shape()[0];
    Tensor ones = d.tape()->constant({p, 3}, std::vector<double>(3 * p, 1.0));
    return ad::mul(ad::scale_rows(ones, d), c);
}

void check_shading_args(const Tensor& albedo, std::size_t albedo_ch, const Tensor& normals,
                        const ShadingLights& lights, const char* fn) {
    const Shape& as = albedo.shape();
    const Shape& ns = normals.shape();
    check(as.size() == 2 && as[1] == albedo_ch,
          std::string(fn) + ": albedo must be [P," + std::to_string(albedo_ch) + "], got " +
              ad::shape_str(as));
    check(ns.size() == 2 && ns[1] == 3 && ns[0] == as[0],
          std::string(fn) + ": normals must be [P,3] matching albedo rows");
    check(lights.dirs.valid() && lights.dirs.shape().size() == 2 &&
              lights.dirs.shape()[1] == 3 && lights.dirs.shape()[0] >= 1,
          std::string(fn) + ": need at least one light");
    check(lights.intensity.shape() == lights.dirs.shape(),
          std::string(fn) + ": light intensity/direction shapes differ");
}

} // namespace

Tensor shade_diffuse(Tensor albedo, Tensor normals, const ShadingLights& lights) {
    check_shading_args(albedo, 3, normals, lights, "shade_diffuse");
    const std::size_t nl = lights.dirs.shape()[0];
    Tensor sum;
    for (std::uint32_t j = 0; j < nl; ++j) {
        Tensor l = ad::reshape(ad::gather_rows(lights.dirs, {j}), {3});
        Tensor cj = ad::reshape(ad::gather_rows(lights.intensity, {j}), {3});
        Tensor term = outer_rows(ad::max0(ad::rowdot(normals, l)), cj);
        sum = (j == 0) ? term : ad::add(sum, term);
    }
    return ad::mul(ad::mul(albedo, sum), lights.ambient);
}

Tensor shade_specular(Tensor spec_albedo, Tensor normals, Tensor view_dirs,
                      const ShadingLights& lights) {
    check_shading_args(spec_albedo, 1, normals, lights, "shade_specular");
    const Shape& vs = view_dirs.shape();
    check(vs == normals.shape(), "shade_specular: view dirs must be [P,3] matching normals");
    const std::size_t nl = lights.dirs.shape()[0];
    Tensor sum;
    for (std::uint32_t j = 0; j < nl; ++j) {
        Tensor l = ad::reshape(ad::gather_rows(lights.dirs, {j}), {3});
        Tensor cj = ad::reshape(ad::gather_rows(lights.intensity, {j}), {3});
        Tensor half = ad::normalize3(ad::add(view_dirs, l));
        Tensor lobe = ad::pow_tensor_exp(ad::max0(ad::rowdot(normals, half)), lights.log_s);
        Tensor term = outer_rows(lobe, cj);
        sum = (j == 0) ? term : ad::add(sum, term);
    }
    return ad::scale_rows(sum, spec_albedo);
}

// ---------------------------------------------------------------------------
// Full render
// ---------------------------------------------------------------------------

RenderResult render(Tensor positions, const PcaShapeModel& model, Tensor rot, Tensor trans,
                    Tensor focal, const Camera& geom, const MapsOnTape& maps,
                    const ShadingLights& lights, const RenderOptions& opt) {
    Tape& tp = *positions.tape();
    check(maps.diffuse.valid() && maps.specular.valid() && maps.normals.valid(),
          "render: reflectance maps not set");
    const Shape& ds = maps.diffuse.shape();
    check(ds.size() == 3 && ds[0] == 3, "render: diffuse map must be [3,R,R]");
    check(maps.specular.shape() == Shape{1, ds[1], ds[2]},
          "render: specular map must be [1,R,R] at the diffuse resolution");
    check(maps.normals.shape() == ds, "render: normal map must be [3,R,R]");

    Camera cam = geom;
    cam.rotation = {rot.values()[0], rot.values()[1], rot.values()[2]};
    cam.translation = {trans.values()[0], trans.values()[1], trans.values()[2]};
    cam.focal = focal.values()[0];

    RenderResult res;
    res.frags = rasterize(positions.values(), model.triangles, model.uv, cam, opt.diag);
    const std::size_t w = cam.width, h = cam.height;
    const std::size_t p = res.frags.covered();

    if (p == 0) {
        res.offscreen = true;
        std::vector<double> bg(3 * h * w);
        for (std::size_t c = 0; c < 3; ++c)
            std::fill_n(bg.data() + c * h * w, h * w, opt.background[c]);
        res.image = tp.constant({3, h, w}, std::move(bg));
        return res;
    }

    Tensor n_geo = vertex_normals(positions, model.triangles, opt.diag);
    Tensor n_diff_vtx = smooth_normals(n_geo, model.triangles, opt.diffuse_smooth_iters);
    Tensor n_d = ad::normalize3(interpolate_attr(n_diff_vtx, res.frags.corner_ids,
                                                 res.frags.bary));
    FragmentFrames frames = fragment_frames(positions, n_geo, res.frags);

    Tensor uv_t = tp.constant({p, 2}, std::vector<double>(res.frags.uv));
    Tensor a_d = ad::bilinear_sample(maps.diffuse, uv_t);
    Tensor a_s = ad::bilinear_sample(maps.specular, uv_t);
    Tensor ns_tan = ad::affine(ad::bilinear_sample(maps.normals, uv_t), 2.0, -1.0);
    Tensor n_s = tangent_to_object(ns_tan, frames);

    Tensor u_d = shade_diffuse(a_d, n_d, lights);
    Tensor x_world = interpolate_attr(positions, res.frags.corner_ids, res.frags.bary);
    Tensor view = ad::normalize3(ad::sub(camera_center(rot, trans), x_world));
    Tensor u_s = shade_specular(a_s, n_s, view, lights);

    res.radiance = ad::add(u_d, u_s);
    // Hard clamp to [0, inf) then a C1 tone ramp into [0,1]; zero radiance
    // stays exactly black.
    Tensor clamped = ad::smooth_saturate1(ad::max0(res.radiance));
    res.image = ad::scatter_pixels(clamped, std::vector<std::uint32_t>(res.frags.pixels), h, w,
                                   {opt.background[0], opt.background[1], opt.background[2]});
    return res;
}

} // namespace facet
