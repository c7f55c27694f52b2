#include "facet/shape_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <utility>

#include "facet/ops.hpp"
#include "facet/rng.hpp"
#include "binio.hpp"

namespace facet {

using ad::Node;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

// ---------------------------------------------------------------------------
// Model validation and binary container
// ---------------------------------------------------------------------------

namespace {

void check_eigenvalues(const std::vector<double>& eig, const char* which) {
    for (std::size_t k = 0; k < eig.size(); ++k) {
        check(eig[k] > 0.0, std::string(which) + ": eigenvalue " + std::to_string(k) +
                                " is not positive");
        if (k > 0)
            check(eig[k] <= eig[k - 1], std::string(which) + ": eigenvalues must be "
                                            "non-increasing (violated at mode " +
                                            std::to_string(k) + ")");
    }
}

void check_unit_columns(const std::vector<double>& basis, std::size_t rows, std::size_t cols,
                        const char* which) {
    for (std::size_t k = 0; k < cols; ++k) {
        double sq = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            const double v = basis[r * cols + k];
            sq += v * v;
        }
        check(std::abs(std::sqrt(sq) - 1.0) < 1e-6,
              std::string(which) + ": column " + std::to_string(k) +
                  " does not have unit norm (|col| = " + std::to_string(std::sqrt(sq)) + ")");
    }
}

} // namespace

void PcaShapeModel::validate() const {
    const std::size_t v3 = 3 * num_vertices;
    check(num_vertices > 0, "shape model: no vertices");
    check(num_triangles > 0, "shape model: no triangles");
    check(mean && mean->size() == v3, "shape model: mean size mismatch");
    check(basis_s && basis_s->size() == v3 * num_identity,
          "shape model: identity basis size mismatch");
    check(basis_e && basis_e->size() == v3 * num_expression,
          "shape model: expression basis size mismatch");
    check(eig_s.size() == num_identity, "shape model: identity eigenvalue count mismatch");
    check(eig_e.size() == num_expression, "shape model: expression eigenvalue count mismatch");
    check(triangles.size() == 3 * num_triangles, "shape model: triangle array size mismatch");
    check(uv.size() == 2 * num_vertices, "shape model: uv array size mismatch");
    check(landmark_idx.size() == 68, "shape model: expected 68 landmark indices, got " +
                                         std::to_string(landmark_idx.size()));

    check_eigenvalues(eig_s, "shape model (identity)");
    check_eigenvalues(eig_e, "shape model (expression)");
    check_unit_columns(*basis_s, v3, num_identity, "shape model (identity basis)");
    check_unit_columns(*basis_e, v3, num_expression, "shape model (expression basis)");

    for (std::uint32_t t : triangles)
        check(t < num_vertices, "shape model: triangle index " + std::to_string(t) +
                                    " out of range");
    for (std::uint32_t l : landmark_idx)
        check(l < num_vertices, "shape model: landmark index " + std::to_string(l) +
                                    " out of range");
    for (double c : uv)
        check(c >= 0.0 && c <= 1.0, "shape model: uv coordinate outside [0,1]");
}

namespace {
constexpr char kShapeMagic[4] = {'F', 'M', 'S', 'M'};
constexpr std::uint32_t kShapeVersion = 1;
} // namespace

PcaShapeModel load_shape_model(const std::string& path) {
    BinReader in(path);
    in.expect_magic(kShapeMagic);
    const std::uint32_t version = in.u32();
    if (version != kShapeVersion)
        throw IoError(path + ": unsupported shape model version " + std::to_string(version));

    PcaShapeModel m;
    m.num_vertices = in.u32();
    m.num_identity = in.u32();
    m.num_expression = in.u32();
    m.num_triangles = in.u32();

    const std::size_t v3 = 3 * m.num_vertices;
    m.mean = std::make_shared<std::vector<double>>(in.f64s(v3));
    m.basis_s = std::make_shared<std::vector<double>>(in.f64s(v3 * m.num_identity));
    m.eig_s = in.f64s(m.num_identity);
    m.basis_e = std::make_shared<std::vector<double>>(in.f64s(v3 * m.num_expression));
    m.eig_e = in.f64s(m.num_expression);
    m.triangles = in.u32s(3 * m.num_triangles);
    m.uv = in.f64s(2 * m.num_vertices);
    m.landmark_idx = in.u32s(68);

    m.validate();
    return m;
}

void save_shape_model(const std::string& path, const PcaShapeModel& model) {
    model.validate();
    BinWriter out(path);
    out.magic(kShapeMagic);
    out.u32(kShapeVersion);
    out.u32(static_cast<std::uint32_t>(model.num_vertices));
    out.u32(static_cast<std::uint32_t>(model.num_identity));
    out.u32(static_cast<std::uint32_t>(model.num_expression));
    out.u32(static_cast<std::uint32_t>(model.num_triangles));
    out.f64s(*model.mean);
    out.f64s(*model.basis_s);
    out.f64s(model.eig_s);
    out.f64s(*model.basis_e);
    out.f64s(model.eig_e);
    out.u32s(model.triangles);
    out.f64s(model.uv);
    out.u32s(model.landmark_idx);
}

// ---------------------------------------------------------------------------
// Reconstruction and regularizer
// ---------------------------------------------------------------------------

Tensor reconstruct_shape(const PcaShapeModel& model, Tensor p_s, Tensor p_e) {
    check(p_s.valid() && p_e.valid(), "reconstruct_shape: invalid coefficient tensors");
    check(p_s.tape() == p_e.tape(), "reconstruct_shape: coefficients on different tapes");
    check(p_s.size() == model.num_identity,
          "reconstruct_shape: p_s length " + std::to_string(p_s.size()) +
              " does not match basis (" + std::to_string(model.num_identity) + ")");
    check(p_e.size() == model.num_expression,
          "reconstruct_shape: p_e length " + std::to_string(p_e.size()) +
              " does not match basis (" + std::to_string(model.num_expression) + ")");

    Tape& tp = *p_s.tape();
    const std::size_t v3 = 3 * model.num_vertices;
    // Constants alias the model's storage; no copies of the big arrays.
    Tensor mean = tp.constant({model.num_vertices, 3}, model.mean);
    Tensor us = tp.constant({v3, model.num_identity}, model.basis_s);
    Tensor ue = tp.constant({v3, model.num_expression}, model.basis_e);

    Tensor ds = ad::reshape(ad::matvec(us, p_s), {model.num_vertices, 3});
    Tensor de = ad::reshape(ad::matvec(ue, p_e), {model.num_vertices, 3});
    return ad::add(mean, ad::add(ds, de));
}

Tensor shape_regularizer(Tensor p, const std::vector<double>& eig) {
    check(p.valid(), "shape_regularizer: invalid tensor");
    check(p.size() == eig.size(), "shape_regularizer: coefficient/eigenvalue length mismatch");
    std::vector<double> inv(eig.size());
    for (std::size_t k = 0; k < eig.size(); ++k) {
        check(eig[k] > 0.0, "shape_regularizer: nonpositive eigenvalue");
        inv[k] = 1.0 / eig[k];
    }
    Tape& tp = *p.tape();
    Tensor w = tp.constant(p.shape(), std::move(inv));
    return ad::reduce_sum(ad::mul(ad::mul(p, p), w));
}

// ---------------------------------------------------------------------------
// Normals
// ---------------------------------------------------------------------------

namespace {

// Accumulates each triangle's unnormalised face normal (cross product of its
// edges, magnitude 2x area) onto the triangle's corners. Isolated vertices
// receive the fixed value (0,0,1) and no gradient.
Tensor face_normal_scatter(Tensor positions, std::shared_ptr<std::vector<std::uint32_t>> tris,
                           std::shared_ptr<std::vector<std::uint8_t>> isolated) {
    Tape& tp = *positions.tape();
    const int pid = positions.id();
    const std::size_t v = positions.shape()[0];
    Node n;
    n.op = "face_normal_scatter";
    n.shape = {v, 3};
    n.requires_grad = positions.requires_grad();
    n.inputs = {pid};
    n.forward = [pid, tris, isolated, v](Tape& t, int self) {
        const auto& pv = *t.node(pid).values;
        auto out = std::make_shared<std::vector<double>>(3 * v, 0.0);
        for (std::size_t f = 0; f + 2 < tris->size(); f += 3) {
            const std::size_t a = 3 * (*tris)[f], b = 3 * (*tris)[f + 1],
                              c = 3 * (*tris)[f + 2];
            const double e1x = pv[b] - pv[a], e1y = pv[b + 1] - pv[a + 1],
                         e1z = pv[b + 2] - pv[a + 2];
            const double e2x = pv[c] - pv[a], e2y = pv[c + 1] - pv[a + 1],
                         e2z = pv[c + 2] - pv[a + 2];
            const double nx = e1y * e2z - e1z * e2y;
            const double ny = e1z * e2x - e1x * e2z;
            const double nz = e1x * e2y - e1y * e2x;
            for (std::size_t o : {a, b, c}) {
                (*out)[o] += nx;
                (*out)[o + 1] += ny;
                (*out)[o + 2] += nz;
            }
        }
        for (std::size_t i = 0; i < v; ++i)
            if ((*isolated)[i]) (*out)[3 * i + 2] = 1.0;
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [pid, tris](Tape& t, int self) {
            const auto& g = t.node(self).grad;
            Node& pn = t.node(pid);
            const auto& pv = *pn.values;
            for (std::size_t f = 0; f + 2 < tris->size(); f += 3) {
                const std::size_t a = 3 * (*tris)[f], b = 3 * (*tris)[f + 1],
                                  c = 3 * (*tris)[f + 2];
                const double e1x = pv[b] - pv[a], e1y = pv[b + 1] - pv[a + 1],
                             e1z = pv[b + 2] - pv[a + 2];
                const double e2x = pv[c] - pv[a], e2y = pv[c + 1] - pv[a + 1],
                             e2z = pv[c + 2] - pv[a + 2];
                // The face normal reaches all three corners, so the incoming
                // cotangent is their sum.
                const double gx = g[a] + g[b] + g[c];
                const double gy = g[a + 1] + g[b + 1] + g[c + 1];
                const double gz = g[a + 2] + g[b + 2] + g[c + 2];
                // d(e1 x e2) pulled back: d_e1 = e2 x g, d_e2 = g x e1.
                const double d1x = e2y * gz - e2z * gy;
                const double d1y = e2z * gx - e2x * gz;
                const double d1z = e2x * gy - e2y * gx;
                const double d2x = gy * e1z - gz * e1y;
                const double d2y = gz * e1x - gx * e1z;
                const double d2z = gx * e1y - gy * e1x;
                pn.grad[a] -= d1x + d2x;
                pn.grad[a + 1] -= d1y + d2y;
                pn.grad[a + 2] -= d1z + d2z;
                pn.grad[b] += d1x;
                pn.grad[b + 1] += d1y;
                pn.grad[b + 2] += d1z;
                pn.grad[c] += d2x;
                pn.grad[c + 1] += d2y;
                pn.grad[c + 2] += d2z;
            }
        };
    }
    return tp.emplace(std::move(n));
}

// Sorted one-ring adjacency in CSR form (offsets has V+1 entries).
struct RingAdjacency {
    std::vector<std::uint32_t> offsets;
    std::vector<std::uint32_t> neighbors;
};

RingAdjacency build_ring_adjacency(std::size_t v, const std::vector<std::uint32_t>& triangles) {
    std::vector<std::vector<std::uint32_t>> ring(v);
    auto link = [&](std::uint32_t x, std::uint32_t y) {
        auto& r = ring[x];
        if (std::find(r.begin(), r.end(), y) == r.end()) r.push_back(y);
    };
    for (std::size_t f = 0; f + 2 < triangles.size(); f += 3) {
        const std::uint32_t a = triangles[f], b = triangles[f + 1], c = triangles[f + 2];
        link(a, b);
        link(a, c);
        link(b, a);
        link(b, c);
        link(c, a);
        link(c, b);
    }
    RingAdjacency adj;
    adj.offsets.resize(v + 1, 0);
    for (std::size_t i = 0; i < v; ++i) {
        std::sort(ring[i].begin(), ring[i].end());
        adj.offsets[i + 1] = adj.offsets[i] + static_cast<std::uint32_t>(ring[i].size());
    }
    adj.neighbors.reserve(adj.offsets[v]);
    for (std::size_t i = 0; i < v; ++i)
        adj.neighbors.insert(adj.neighbors.end(), ring[i].begin(), ring[i].end());
    return adj;
}

// out_i = n_i + sum over i's one-ring of n_j. The adjacency is symmetric, so
// the backward pass is the same stencil applied to the gradients.
Tensor ring_sum(Tensor normals, std::shared_ptr<RingAdjacency> adj) {
    Tape& tp = *normals.tape();
    const int nid = normals.id();
    const std::size_t v = normals.shape()[0];
    Node n;
    n.op = "ring_sum";
    n.shape = {v, 3};
    n.requires_grad = normals.requires_grad();
    n.inputs = {nid};
    n.forward = [nid, adj, v](Tape& t, int self) {
        const auto& nv = *t.node(nid).values;
        auto out = std::make_shared<std::vector<double>>(nv);
        for (std::size_t i = 0; i < v; ++i)
            for (std::uint32_t k = adj->offsets[i]; k < adj->offsets[i + 1]; ++k) {
                const std::size_t j = 3 * adj->neighbors[k];
                (*out)[3 * i] += nv[j];
                (*out)[3 * i + 1] += nv[j + 1];
                (*out)[3 * i + 2] += nv[j + 2];
            }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [nid, adj, v](Tape& t, int self) {
            const auto& g = t.node(self).grad;
            Node& in = t.node(nid);
            for (std::size_t i = 0; i < v; ++i) {
                in.grad[3 * i] += g[3 * i];
                in.grad[3 * i + 1] += g[3 * i + 1];
                in.grad[3 * i + 2] += g[3 * i + 2];
                for (std::uint32_t k = adj->offsets[i]; k < adj->offsets[i + 1]; ++k) {
                    const std::size_t j = 3 * adj->neighbors[k];
                    in.grad[j] += g[3 * i];
                    in.grad[j + 1] += g[3 * i + 1];
                    in.grad[j + 2] += g[3 * i + 2];
                }
            }
        };
    }
    return tp.emplace(std::move(n));
}

void check_mesh_args(const Tensor& positions, const std::vector<std::uint32_t>& triangles,
                     const char* fn) {
    check(positions.valid(), std::string(fn) + ": invalid positions tensor");
    const Shape& s = positions.shape();
    check(s.size() == 2 && s[1] == 3, std::string(fn) + ": positions must be [V,3], got " +
                                          ad::shape_str(s));
    check(!triangles.empty() && triangles.size() % 3 == 0,
          std::string(fn) + ": triangle array must be a non-empty multiple of 3");
    for (std::uint32_t t : triangles)
        check(t < s[0], std::string(fn) + ": triangle index " + std::to_string(t) +
                            " out of range");
}

} // namespace

Tensor vertex_normals(Tensor positions, const std::vector<std::uint32_t>& triangles,
                      Diagnostics* diag) {
    check_mesh_args(positions, triangles, "vertex_normals");
    const std::size_t v = positions.shape()[0];

    auto isolated = std::make_shared<std::vector<std::uint8_t>>(v, std::uint8_t{1});
    for (std::uint32_t t : triangles) (*isolated)[t] = 0;
    std::size_t n_isolated = 0;
    std::size_t first = 0;
    for (std::size_t i = 0; i < v; ++i)
        if ((*isolated)[i]) {
            if (n_isolated == 0) first = i;
            ++n_isolated;
        }
    if (n_isolated > 0 && diag)
        diag->warn("vertex_normals: " + std::to_string(n_isolated) +
                   " isolated vertex(es) (first: " + std::to_string(first) +
                   ") assigned fixed normal (0,0,1)");

    auto tris = std::make_shared<std::vector<std::uint32_t>>(triangles);
    return ad::normalize3(face_normal_scatter(positions, tris, isolated));
}

Tensor smooth_normals(Tensor normals, const std::vector<std::uint32_t>& triangles,
                      int iterations) {
    check_mesh_args(normals, triangles, "smooth_normals");
    check(iterations >= 0, "smooth_normals: iterations must be >= 0");
    if (iterations == 0) return normals;

    auto adj = std::make_shared<RingAdjacency>(
        build_ring_adjacency(normals.shape()[0], triangles));
    Tensor n = normals;
    for (int it = 0; it < iterations; ++it) n = ad::normalize3(ring_sum(n, adj));
    return n;
}

// ---------------------------------------------------------------------------
// Landmarks and OBJ export
// ---------------------------------------------------------------------------

Tensor project_landmarks(Tensor positions, const PcaShapeModel& model, Tensor rot, Tensor trans,
                         Tensor focal, const Camera& cam) {
    check(positions.valid(), "project_landmarks: invalid positions tensor");
    check(positions.shape().size() == 2 && positions.shape()[1] == 3 &&
              positions.shape()[0] == model.num_vertices,
          "project_landmarks: positions do not match the model's vertex count");
    Tensor pts = ad::gather_rows(positions, model.landmark_idx);
    try {
        return project_to_pixels(pts, rot, trans, focal, cam);
    } catch (const DomainError& e) {
        // pinhole_project reports the row index, which here is the landmark
        // number; reframe the message accordingly.
        throw DomainError("project_landmarks: landmark behind camera (" +
                          std::string(e.what()) + ")");
    }
}

void export_obj(const std::string& path, const std::vector<double>& positions,
                const std::vector<double>& uv, const std::vector<double>& normals,
                const std::vector<std::uint32_t>& triangles) {
    const std::size_t v = positions.size() / 3;
    check(positions.size() == 3 * v && uv.size() == 2 * v && normals.size() == 3 * v,
          "export_obj: array sizes disagree on vertex count");
    check(triangles.size() % 3 == 0, "export_obj: triangle array size not a multiple of 3");

    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw IoError("cannot open " + path + " for writing");
    for (std::size_t i = 0; i < v; ++i)
        std::fprintf(f, "v %.9g %.9g %.9g\n", positions[3 * i], positions[3 * i + 1],
                     positions[3 * i + 2]);
    for (std::size_t i = 0; i < v; ++i)
        std::fprintf(f, "vt %.9g %.9g\n", uv[2 * i], uv[2 * i + 1]);
    for (std::size_t i = 0; i < v; ++i)
        std::fprintf(f, "vn %.9g %.9g %.9g\n", normals[3 * i], normals[3 * i + 1],
                     normals[3 * i + 2]);
    for (std::size_t t = 0; t + 2 < triangles.size(); t += 3) {
        const unsigned a = triangles[t] + 1, b = triangles[t + 1] + 1,
                       c = triangles[t + 2] + 1;
        std::fprintf(f, "f %u/%u/%u %u/%u/%u %u/%u/%u\n", a, a, a, b, b, b, c, c, c);
    }
    if (std::fclose(f) != 0) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Synthetic model generator
// ---------------------------------------------------------------------------

namespace {

struct IcoMesh {
    std::vector<double> verts; // 3V, unit sphere
    std::vector<std::uint32_t> tris;
};

IcoMesh make_icosphere(int subdivisions) {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    IcoMesh m;
    const double raw[12][3] = {{-1, t, 0}, {1, t, 0},   {-1, -t, 0}, {1, -t, 0},
                               {0, -1, t}, {0, 1, t},   {0, -1, -t}, {0, 1, -t},
                               {t, 0, -1}, {t, 0, 1},   {-t, 0, -1}, {-t, 0, 1}};
    for (const auto& p : raw) {
        const double n = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        m.verts.insert(m.verts.end(), {p[0] / n, p[1] / n, p[2] / n});
    }
    m.tris = {0, 11, 5,  0, 5,  1,  0, 1, 7,  0, 7,  10, 0, 10, 11, 1, 5, 9, 5, 11,
              4, 11, 10, 2, 10, 7,  6, 7, 1,  8, 3,  9,  4, 3,  4,  2, 3, 2, 6, 3,
              6, 8,  3,  8, 9,  4,  9, 5, 2,  4, 11, 6,  2, 10, 8,  6, 7, 9, 8, 1};

    for (int s = 0; s < subdivisions; ++s) {
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> midpoint;
        auto mid = [&](std::uint32_t a, std::uint32_t b) -> std::uint32_t {
            const auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            const double x = m.verts[3 * a] + m.verts[3 * b];
            const double y = m.verts[3 * a + 1] + m.verts[3 * b + 1];
            const double z = m.verts[3 * a + 2] + m.verts[3 * b + 2];
            const double n = std::sqrt(x * x + y * y + z * z);
            const auto idx = static_cast<std::uint32_t>(m.verts.size() / 3);
            m.verts.insert(m.verts.end(), {x / n, y / n, z / n});
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<std::uint32_t> next;
        next.reserve(m.tris.size() * 4);
        for (std::size_t f = 0; f + 2 < m.tris.size(); f += 3) {
            const std::uint32_t a = m.tris[f], b = m.tris[f + 1], c = m.tris[f + 2];
            const std::uint32_t ab = mid(a, b), bc = mid(b, c), ca = mid(c, a);
            next.insert(next.end(), {a, ab, ca, b, bc, ab, c, ca, bc, ab, bc, ca});
        }
        m.tris = std::move(next);
    }
    return m;
}

// Smooth scalar bump field on the unit sphere, evaluated at direction d.
struct Bump {
    double cx, cy, cz, amp, inv_w2;
};

double bump_field(const std::vector<Bump>& bumps, double x, double y, double z) {
    double s = 0.0;
    for (const Bump& b : bumps) {
        const double dx = x - b.cx, dy = y - b.cy, dz = z - b.cz;
        s += b.amp * std::exp(-(dx * dx + dy * dy + dz * dz) * b.inv_w2);
    }
    return s;
}

std::array<double, 3> random_unit(Rng& rng) {
    for (;;) {
        const double x = rng.uniform(-1.0, 1.0), y = rng.uniform(-1.0, 1.0),
                     z = rng.uniform(-1.0, 1.0);
        const double n2 = x * x + y * y + z * z;
        if (n2 > 1e-4 && n2 <= 1.0) {
            const double n = std::sqrt(n2);
            return {x / n, y / n, z / n};
        }
    }
}

// 68 farthest-point-sampled vertices restricted to the front (+z) region.
std::vector<std::uint32_t> pick_landmarks(const std::vector<double>& sphere_dirs,
                                          const std::vector<double>& verts) {
    const std::size_t v = sphere_dirs.size() / 3;
    std::vector<std::uint32_t> front;
    for (std::size_t i = 0; i < v; ++i)
        if (sphere_dirs[3 * i + 2] > 0.15) front.push_back(static_cast<std::uint32_t>(i));
    check(front.size() >= 68, "synthetic model: not enough front-facing vertices for "
                              "landmark sampling");

    // Seed with the most +z vertex (nose-tip analog), then greedily add the
    // candidate farthest from all chosen so far.
    std::uint32_t seed_idx = front[0];
    for (std::uint32_t i : front)
        if (sphere_dirs[3 * i + 2] > sphere_dirs[3 * seed_idx + 2]) seed_idx = i;

    std::vector<std::uint32_t> chosen{seed_idx};
    std::vector<double> mind(front.size(), 1e30);
    auto dist2 = [&](std::uint32_t a, std::uint32_t b) {
        const double dx = verts[3 * a] - verts[3 * b];
        const double dy = verts[3 * a + 1] - verts[3 * b + 1];
        const double dz = verts[3 * a + 2] - verts[3 * b + 2];
        return dx * dx + dy * dy + dz * dz;
    };
    while (chosen.size() < 68) {
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t k = 0; k < front.size(); ++k) {
            mind[k] = std::min(mind[k], dist2(front[k], chosen.back()));
            if (mind[k] > best_d) {
                best_d = mind[k];
                best = k;
            }
        }
        chosen.push_back(front[best]);
    }
    return chosen;
}

} // namespace

PcaShapeModel make_synthetic_shape_model(std::uint64_t seed, int subdivisions,
                                         std::size_t num_identity, std::size_t num_expression) {
    check(subdivisions >= 1 && subdivisions <= 5,
          "make_synthetic_shape_model: subdivisions must be in [1,5]");
    check(num_identity >= 1 && num_expression >= 1,
          "make_synthetic_shape_model: need at least one mode per basis");

    IcoMesh ico = make_icosphere(subdivisions);
    const std::size_t v = ico.verts.size() / 3;
    const std::size_t v3 = 3 * v;

    // Enforce outward CCW winding regardless of the subdivision bookkeeping.
    for (std::size_t f = 0; f + 2 < ico.tris.size(); f += 3) {
        const std::size_t a = 3 * ico.tris[f], b = 3 * ico.tris[f + 1],
                          c = 3 * ico.tris[f + 2];
        const double e1x = ico.verts[b] - ico.verts[a], e1y = ico.verts[b + 1] - ico.verts[a + 1],
                     e1z = ico.verts[b + 2] - ico.verts[a + 2];
        const double e2x = ico.verts[c] - ico.verts[a], e2y = ico.verts[c + 1] - ico.verts[a + 1],
                     e2z = ico.verts[c + 2] - ico.verts[a + 2];
        const double nx = e1y * e2z - e1z * e2y, ny = e1z * e2x - e1x * e2z,
                     nz = e1x * e2y - e1y * e2x;
        const double mx = ico.verts[a] + ico.verts[b] + ico.verts[c];
        const double my = ico.verts[a + 1] + ico.verts[b + 1] + ico.verts[c + 1];
        const double mz = ico.verts[a + 2] + ico.verts[b + 2] + ico.verts[c + 2];
        if (nx * mx + ny * my + nz * mz < 0.0) std::swap(ico.tris[f + 1], ico.tris[f + 2]);
    }

    PcaShapeModel m;
    m.num_vertices = v;
    m.num_identity = num_identity;
    m.num_expression = num_expression;
    m.num_triangles = ico.tris.size() / 3;
    m.triangles = ico.tris;

    // Mean shape: axis-scaled sphere with a few broad radial bumps so the
    // "head" is not trivially symmetric.
    Rng mean_rng = Rng(seed).fork(0x6d65616e); // "mean"
    std::vector<Bump> mean_bumps;
    for (int k = 0; k < 6; ++k) {
        const auto d = random_unit(mean_rng);
        const double w = mean_rng.uniform(0.35, 0.8);
        mean_bumps.push_back({d[0], d[1], d[2], mean_rng.uniform(-0.08, 0.08), 1.0 / (w * w)});
    }
    m.mean = std::make_shared<std::vector<double>>(v3);
    for (std::size_t i = 0; i < v; ++i) {
        const double x = ico.verts[3 * i], y = ico.verts[3 * i + 1], z = ico.verts[3 * i + 2];
        const double r = 1.0 + bump_field(mean_bumps, x, y, z);
        (*m.mean)[3 * i] = 0.85 * x * r;
        (*m.mean)[3 * i + 1] = 1.0 * y * r;
        (*m.mean)[3 * i + 2] = 0.8 * z * r;
    }

    // Spherical UVs from the undeformed directions; the seam sits at the back
    // of the head (u wraps near z < 0, x = 0), away from the rendered face.
    m.uv.resize(2 * v);
    for (std::size_t i = 0; i < v; ++i) {
        const double x = ico.verts[3 * i], y = ico.verts[3 * i + 1], z = ico.verts[3 * i + 2];
        const double uu = 0.5 + std::atan2(x, z) / (2.0 * M_PI);
        const double vv = 0.5 - std::asin(std::clamp(y, -1.0, 1.0)) / M_PI;
        m.uv[2 * i] = std::clamp(uu, 0.0, 1.0);
        m.uv[2 * i + 1] = std::clamp(vv, 0.0, 1.0);
    }

    // Bases: smooth random bump displacement fields, jointly orthonormalized
    // (identity columns first, then expression) with modified Gram-Schmidt.
    Rng basis_rng = Rng(seed).fork(0x62617369); // "basi"
    const std::size_t total = num_identity + num_expression;
    std::vector<std::vector<double>> cols;
    cols.reserve(total);
    while (cols.size() < total) {
        std::vector<Bump> bx, by, bz;
        for (int j = 0; j < 4; ++j) {
            const auto c = random_unit(basis_rng);
            const double w = basis_rng.uniform(0.3, 0.7);
            const double iw2 = 1.0 / (2.0 * w * w);
            bx.push_back({c[0], c[1], c[2], basis_rng.normal(), iw2});
            by.push_back({c[0], c[1], c[2], basis_rng.normal(), iw2});
            bz.push_back({c[0], c[1], c[2], basis_rng.normal(), iw2});
        }
        std::vector<double> col(v3);
        for (std::size_t i = 0; i < v; ++i) {
            const double x = ico.verts[3 * i], y = ico.verts[3 * i + 1],
                         z = ico.verts[3 * i + 2];
            col[3 * i] = bump_field(bx, x, y, z);
            col[3 * i + 1] = bump_field(by, x, y, z);
            col[3 * i + 2] = bump_field(bz, x, y, z);
        }
        double orig = 0.0;
        for (double c : col) orig += c * c;
        // Two-pass modified Gram-Schmidt against the accepted columns.
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& q : cols) {
                double dot = 0.0;
                for (std::size_t r = 0; r < v3; ++r) dot += q[r] * col[r];
                for (std::size_t r = 0; r < v3; ++r) col[r] -= dot * q[r];
            }
        double nrm2 = 0.0;
        for (double c : col) nrm2 += c * c;
        if (nrm2 < 1e-12 * orig) continue; // numerically dependent; redraw
        const double inv = 1.0 / std::sqrt(nrm2);
        for (double& c : col) c *= inv;
        cols.push_back(std::move(col));
    }
    m.basis_s = std::make_shared<std::vector<double>>(v3 * num_identity);
    m.basis_e = std::make_shared<std::vector<double>>(v3 * num_expression);
    for (std::size_t r = 0; r < v3; ++r) {
        for (std::size_t k = 0; k < num_identity; ++k)
            (*m.basis_s)[r * num_identity + k] = cols[k][r];
        for (std::size_t k = 0; k < num_expression; ++k)
            (*m.basis_e)[r * num_expression + k] = cols[num_identity + k][r];
    }

    // Decaying variances; expression modes carry less energy than identity.
    m.eig_s.resize(num_identity);
    for (std::size_t k = 0; k < num_identity; ++k) m.eig_s[k] = std::pow(0.85, 2.0 * k);
    m.eig_e.resize(num_expression);
    for (std::size_t k = 0; k < num_expression; ++k)
        m.eig_e[k] = 0.25 * std::pow(0.9, 2.0 * k);

    m.landmark_idx = pick_landmarks(ico.verts, *m.mean);

    m.validate();
    return m;
}

} // namespace facet
