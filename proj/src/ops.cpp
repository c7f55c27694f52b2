#include "facet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>

namespace facet::ad {

namespace {

// ---------------------------------------------------------------------------
// broadcast plumbing
// ---------------------------------------------------------------------------

enum class Bcast { Same, AScalar, BScalar, ASuffix, BSuffix };

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i)
        if (small[i] != big[off + i]) return false;
    return true;
}

Bcast classify(const char* op, const Shape& a, const Shape& b) {
    if (a == b) return Bcast::Same;
    if (shape_size(a) == 1) return Bcast::AScalar;
    if (shape_size(b) == 1) return Bcast::BScalar;
    if (is_suffix(b, a)) return Bcast::BSuffix;
    if (is_suffix(a, b)) return Bcast::ASuffix;
    throw ContractError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " +
                        shape_str(b));
}

// ---------------------------------------------------------------------------
// generic elementwise builders
// ---------------------------------------------------------------------------

// f(x) -> y, df(x, y) -> dy/dx. Both are inlined per instantiation.
template <class F, class DF>
Tensor unary_op(const char* name, Tensor a, F f, DF df) {
    Tape& tp = *a.tape();
    const int aid = a.id();
    Node n;
    n.op = name;
    n.shape = a.shape();
    n.requires_grad = a.requires_grad();
    n.inputs = {aid};
    n.forward = [aid, f](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        auto out = std::make_shared<std::vector<double>>(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) (*out)[i] = f(av[i]);
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, df](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            const auto& av = *an.values;
            const auto& yv = *sn.values;
            for (std::size_t i = 0; i < av.size(); ++i)
                an.grad[i] += df(av[i], yv[i]) * sn.grad[i];
        };
    }
    return tp.emplace(std::move(n));
}

// f(a, b) -> y, dfa/dfb(a, b, y) -> partials. Handles the limited broadcast
// modes; gradient accumulation always walks the output in ascending order.
template <class F, class DA, class DB>
Tensor binary_op(const char* name, Tensor a, Tensor b, F f, DA dfa, DB dfb) {
    check(a.tape() == b.tape(), std::string(name) + ": operands on different tapes");
    Tape& tp = *a.tape();
    const Bcast mode = classify(name, a.shape(), b.shape());
    const int aid = a.id();
    const int bid = b.id();
    Node n;
    n.op = name;
    n.shape = (mode == Bcast::AScalar || mode == Bcast::ASuffix) ? b.shape() : a.shape();
    n.requires_grad = a.requires_grad() || b.requires_grad();
    n.inputs = {aid, bid};
    n.forward = [aid, bid, mode, f](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        const auto& bv = *t.node(bid).values;
        const std::size_t nout = std::max(av.size(), bv.size());
        auto out = std::make_shared<std::vector<double>>(nout);
        switch (mode) {
        case Bcast::Same:
            for (std::size_t i = 0; i < nout; ++i) (*out)[i] = f(av[i], bv[i]);
            break;
        case Bcast::AScalar:
            for (std::size_t i = 0; i < nout; ++i) (*out)[i] = f(av[0], bv[i]);
            break;
        case Bcast::BScalar:
            for (std::size_t i = 0; i < nout; ++i) (*out)[i] = f(av[i], bv[0]);
            break;
        case Bcast::ASuffix: {
            const std::size_t m = av.size();
            for (std::size_t i = 0; i < nout; ++i) (*out)[i] = f(av[i % m], bv[i]);
            break;
        }
        case Bcast::BSuffix: {
            const std::size_t m = bv.size();
            for (std::size_t i = 0; i < nout; ++i) (*out)[i] = f(av[i], bv[i % m]);
            break;
        }
        }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, bid, mode, dfa, dfb](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            Node& bn = t.node(bid);
            const auto& av = *an.values;
            const auto& bv = *bn.values;
            const auto& yv = *sn.values;
            const auto& g = sn.grad;
            const bool ga = an.requires_grad;
            const bool gb = bn.requires_grad;
            const std::size_t nout = yv.size();
            switch (mode) {
            case Bcast::Same:
                for (std::size_t i = 0; i < nout; ++i) {
                    if (ga) an.grad[i] += dfa(av[i], bv[i], yv[i]) * g[i];
                    if (gb) bn.grad[i] += dfb(av[i], bv[i], yv[i]) * g[i];
                }
                break;
            case Bcast::AScalar:
                for (std::size_t i = 0; i < nout; ++i) {
                    if (ga) an.grad[0] += dfa(av[0], bv[i], yv[i]) * g[i];
                    if (gb) bn.grad[i] += dfb(av[0], bv[i], yv[i]) * g[i];
                }
                break;
            case Bcast::BScalar:
                for (std::size_t i = 0; i < nout; ++i) {
                    if (ga) an.grad[i] += dfa(av[i], bv[0], yv[i]) * g[i];
                    if (gb) bn.grad[0] += dfb(av[i], bv[0], yv[i]) * g[i];
                }
                break;
            case Bcast::ASuffix: {
                const std::size_t m = av.size();
                for (std::size_t i = 0; i < nout; ++i) {
                    if (ga) an.grad[i % m] += dfa(av[i % m], bv[i], yv[i]) * g[i];
                    if (gb) bn.grad[i] += dfb(av[i % m], bv[i], yv[i]) * g[i];
                }
                break;
            }
            case Bcast::BSuffix: {
                const std::size_t m = bv.size();
                for (std::size_t i = 0; i < nout; ++i) {
                    if (ga) an.grad[i] += dfa(av[i], bv[i % m], yv[i]) * g[i];
                    if (gb) bn.grad[i % m] += dfb(av[i], bv[i % m], yv[i]) * g[i];
                }
                break;
            }
            }
        };
    }
    return tp.emplace(std::move(n));
}

// Row-major odometer walk over `dims`; fn(linear_index, mapped_index) where
// the mapped index advances by ostride[axis] per step of that axis. Used by
// the axis reductions in both directions.
template <class Fn>
void mapped_loop(const Shape& dims, const std::vector<std::size_t>& ostride, Fn&& fn) {
    const std::size_t n = shape_size(dims);
    std::vector<std::size_t> coord(dims.size(), 0);
    std::size_t oidx = 0;
    for (std::size_t i = 0; i < n; ++i) {
        fn(i, oidx);
        for (std::size_t ax = dims.size(); ax-- > 0;) {
            ++coord[ax];
            oidx += ostride[ax];
            if (coord[ax] < dims[ax]) break;
            oidx -= dims[ax] * ostride[ax];
            coord[ax] = 0;
        }
    }
}

Tensor reduce_impl(const char* name, Tensor a, const std::vector<std::size_t>& axes_in,
                   bool mean) {
    Tape& tp = *a.tape();
    const Shape& ashape = a.shape();
    const std::size_t rank = ashape.size();

    std::vector<std::size_t> axes = axes_in;
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    if (axes.empty())
        for (std::size_t ax = 0; ax < rank; ++ax) axes.push_back(ax);
    for (std::size_t ax : axes)
        check(ax < rank, std::string(name) + ": axis " + std::to_string(ax) + " out of range for " +
                             shape_str(ashape));

    std::vector<bool> reduced(rank, false);
    for (std::size_t ax : axes) reduced[ax] = true;

    Shape oshape;
    std::size_t count = 1;
    for (std::size_t ax = 0; ax < rank; ++ax) {
        if (reduced[ax]) count *= ashape[ax];
        else oshape.push_back(ashape[ax]);
    }
    if (oshape.empty()) oshape = {1};

    // Per input axis: stride in the output, 0 when the axis is reduced away.
    std::vector<std::size_t> ostride(rank, 0);
    std::size_t run = 1;
    for (std::size_t ax = rank; ax-- > 0;) {
        if (!reduced[ax]) {
            ostride[ax] = run;
            run *= ashape[ax];
        }
    }

    const double scale = mean ? 1.0 / static_cast<double>(count) : 1.0;
    const int aid = a.id();
    Node n;
    n.op = name;
    n.shape = oshape;
    n.requires_grad = a.requires_grad();
    n.inputs = {aid};
    const std::size_t osize = shape_size(oshape);
    n.forward = [aid, ashape, ostride, osize, scale](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        auto out = std::make_shared<std::vector<double>>(osize, 0.0);
        mapped_loop(ashape, ostride, [&](std::size_t i, std::size_t o) { (*out)[o] += av[i]; });
        if (scale != 1.0)
            for (double& v : *out) v *= scale;
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, ashape, ostride, scale](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            mapped_loop(ashape, ostride,
                        [&](std::size_t i, std::size_t o) { an.grad[i] += scale * sn.grad[o]; });
        };
    }
    return tp.emplace(std::move(n));
}

// Shared bilinear footprint: maps a continuous source coordinate (half-texel
// centers, border clamp) to two texel columns/rows and a blend weight.
struct TexAxis {
    std::size_t i0, i1;
    double frac;
};

TexAxis tex_axis(double coord_01_times_n_minus_half, std::size_t n) {
    const double c = coord_01_times_n_minus_half;
    const double f = std::floor(c);
    TexAxis r;
    r.frac = c - f;
    const long i0 = static_cast<long>(f);
    const long last = static_cast<long>(n) - 1;
    r.i0 = static_cast<std::size_t>(std::clamp(i0, 0L, last));
    r.i1 = static_cast<std::size_t>(std::clamp(i0 + 1, 0L, last));
    return r;
}

} // namespace

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

Tensor add(Tensor a, Tensor b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(Tensor a, Tensor b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(Tensor a, Tensor b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(Tensor a, Tensor b) {
    return binary_op(
        "div", a, b,
        [](double x, double y) {
            if (y == 0.0) throw DomainError("div: division by zero");
            return x / y;
        },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

Tensor affine(Tensor a, double scale, double offset) {
    return unary_op(
        "affine", a, [scale, offset](double x) { return scale * x + offset; },
        [scale](double, double) { return scale; });
}

Tensor add(Tensor a, double b) { return affine(a, 1.0, b); }
Tensor sub(double a, Tensor b) { return affine(b, -1.0, a); }
Tensor mul(Tensor a, double b) { return affine(a, b, 0.0); }

Tensor max0(Tensor a) {
    return unary_op(
        "max0", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(Tensor a) {
    return unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(Tensor a) {
    return unary_op(
        "log", a,
        [](double x) {
            if (x <= 0.0) throw DomainError("log: non-positive input " + std::to_string(x));
            return std::log(x);
        },
        [](double x, double) { return 1.0 / x; });
}

Tensor abs(Tensor a) {
    return unary_op(
        "abs", a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(Tensor a, double exponent) {
    const double p = exponent;
    return unary_op(
        "pow_scalar", a, [p](double x) { return std::pow(x, p); },
        [p](double x, double) {
            if (x == 0.0) return p == 1.0 ? 1.0 : (p > 1.0 ? 0.0 : std::pow(x, p - 1.0) * p);
            return p * std::pow(x, p - 1.0);
        });
}

Tensor softplus(Tensor a) {
    return unary_op(
        "softplus", a,
        [](double x) {
            if (x > 35.0) return x;
            if (x < -35.0) return std::exp(x);
            return std::log1p(std::exp(x));
        },
        [](double x, double) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        });
}

Tensor smooth_clamp01(Tensor a, double band) {
    check(band > 0.0 && band <= 0.5, "smooth_clamp01: band must be in (0, 0.5]");
    const double d = band;
    return unary_op(
        "smooth_clamp01", a,
        [d](double x) {
            if (x < -d) return 0.0;
            if (x < d) return (x + d) * (x + d) / (4.0 * d);
            if (x <= 1.0 - d) return x;
            if (x <= 1.0 + d) return 1.0 - (1.0 + d - x) * (1.0 + d - x) / (4.0 * d);
            return 1.0;
        },
        [d](double x, double) {
            if (x < -d) return 0.0;
            if (x < d) return (x + d) / (2.0 * d);
            if (x <= 1.0 - d) return 1.0;
            if (x <= 1.0 + d) return (1.0 + d - x) / (2.0 * d);
            return 0.0;
        });
}

Tensor smooth_saturate1(Tensor a, double band) {
    check(band > 0.0 && band <= 0.5, "smooth_saturate1: band must be in (0, 0.5]");
    const double d = band;
    return unary_op(
        "smooth_saturate1", a,
        [d](double x) {
            if (x <= 1.0 - d) return x;
            if (x <= 1.0 + d) return 1.0 - (1.0 + d - x) * (1.0 + d - x) / (4.0 * d);
            return 1.0;
        },
        [d](double x, double) {
            if (x <= 1.0 - d) return 1.0;
            if (x <= 1.0 + d) return (1.0 + d - x) / (2.0 * d);
            return 0.0;
        });
}

Tensor sqrt_smooth(Tensor a, double eps) {
    check(eps > 0.0, "sqrt_smooth: eps must be positive");
    const double rs = std::sqrt(eps);        // eps^(1/2)
    const double r32 = eps * rs;             // eps^(3/2)
    return unary_op(
        "sqrt_smooth", a,
        [eps, rs, r32](double x) {
            if (x >= eps) return std::sqrt(x);
            return 1.5 * x / rs - x * x / (2.0 * r32);
        },
        [eps, rs, r32](double x, double) {
            if (x >= eps) return 0.5 / std::sqrt(x);
            return 1.5 / rs - x / r32;
        });
}

// The closed forms lose precision to cancellation as u -> 0 (the b numerator
// behaves like u/2), so below u = 1e-2 both coefficients switch to their
// Taylor series; at the switch the branches agree to ~1e-11.
Tensor rot_coeff_a(Tensor u) {
    return unary_op(
        "rot_coeff_a", u,
        [](double x) {
            if (x < 1e-2) return 1.0 - x / 6.0 + x * x / 120.0 - x * x * x / 5040.0;
            const double s = std::sqrt(x);
            return std::sin(s) / s;
        },
        [](double x, double) {
            if (x < 1e-2) return -1.0 / 6.0 + x / 60.0 - x * x / 1680.0;
            const double s = std::sqrt(x);
            return (s * std::cos(s) - std::sin(s)) / (2.0 * x * s);
        });
}

Tensor rot_coeff_b(Tensor u) {
    return unary_op(
        "rot_coeff_b", u,
        [](double x) {
            if (x < 1e-2) return 0.5 - x / 24.0 + x * x / 720.0 - x * x * x / 40320.0;
            return (1.0 - std::cos(std::sqrt(x))) / x;
        },
        [](double x, double) {
            if (x < 1e-2) return -1.0 / 24.0 + x / 360.0 - x * x / 13440.0;
            const double s = std::sqrt(x);
            return (0.5 * s * std::sin(s) - (1.0 - std::cos(s))) / (x * x);
        });
}

Tensor pow_tensor_exp(Tensor base, Tensor log_exponent) {
    check(base.tape() == log_exponent.tape(), "pow_tensor_exp: operands on different tapes");
    check(log_exponent.size() == 1, "pow_tensor_exp: exponent must be a scalar tensor");
    Tape& tp = *base.tape();
    const int aid = base.id();
    const int eid = log_exponent.id();
    Node n;
    n.op = "pow_tensor_exp";
    n.shape = base.shape();
    n.requires_grad = base.requires_grad() || log_exponent.requires_grad();
    n.inputs = {aid, eid};
    n.forward = [aid, eid](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        const double s = std::exp((*t.node(eid).values)[0]);
        auto out = std::make_shared<std::vector<double>>(av.size());
        for (std::size_t i = 0; i < av.size(); ++i)
            (*out)[i] = av[i] > 0.0 ? std::pow(av[i], s) : 0.0;
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, eid](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            Node& en = t.node(eid);
            const auto& av = *an.values;
            const auto& yv = *sn.values;
            const double s = std::exp((*en.values)[0]);
            for (std::size_t i = 0; i < av.size(); ++i) {
                if (av[i] <= 0.0) continue;
                const double g = sn.grad[i];
                if (an.requires_grad) an.grad[i] += s * std::pow(av[i], s - 1.0) * g;
                if (en.requires_grad) en.grad[0] += yv[i] * std::log(av[i]) * s * g;
            }
        };
    }
    return tp.emplace(std::move(n));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor reduce_sum(Tensor a, const std::vector<std::size_t>& axes) {
    return reduce_impl("reduce_sum", a, axes, false);
}

Tensor reduce_mean(Tensor a, const std::vector<std::size_t>& axes) {
    return reduce_impl("reduce_mean", a, axes, true);
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matvec(Tensor A, Tensor x) {
    check(A.tape() == x.tape(), "matvec: operands on different tapes");
    const Shape& as = A.shape();
    check(as.size() == 2, "matvec: matrix must be rank 2, got " + shape_str(as));
    check(x.shape().size() == 1 && x.shape()[0] == as[1],
          "matvec: vector shape " + shape_str(x.shape()) + " does not match matrix " +
              shape_str(as));
    Tape& tp = *A.tape();
    const int aid = A.id();
    const int xid = x.id();
    const std::size_t m = as[0];
    const std::size_t k = as[1];
    Node n;
    n.op = "matvec";
    n.shape = {m};
    n.requires_grad = A.requires_grad() || x.requires_grad();
    n.inputs = {aid, xid};
    n.forward = [aid, xid, m, k](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        const auto& xv = *t.node(xid).values;
        auto out = std::make_shared<std::vector<double>>(m);
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            const double* row = av.data() + i * k;
            for (std::size_t j = 0; j < k; ++j) acc += row[j] * xv[j];
            (*out)[i] = acc;
        }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, xid, m, k](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            Node& xn = t.node(xid);
            const auto& av = *an.values;
            const auto& xv = *xn.values;
            for (std::size_t i = 0; i < m; ++i) {
                const double g = sn.grad[i];
                if (g == 0.0) continue;
                const double* row = av.data() + i * k;
                if (an.requires_grad) {
                    double* arow = an.grad.data() + i * k;
                    for (std::size_t j = 0; j < k; ++j) arow[j] += g * xv[j];
                }
                if (xn.requires_grad)
                    for (std::size_t j = 0; j < k; ++j) xn.grad[j] += g * row[j];
            }
        };
    }
    return tp.emplace(std::move(n));
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

namespace {

// Shared normalize kernel over `rows` vectors of 3 components at the given
// component stride. grad_v = (g - y (y.g)) / ||v||.
Tensor normalize_impl(const char* name, Tensor v, double eps, std::size_t rows,
                      std::size_t comp_stride, std::size_t row_stride) {
    Tape& tp = *v.tape();
    const int vid = v.id();
    Node n;
    n.op = name;
    n.shape = v.shape();
    n.requires_grad = v.requires_grad();
    n.inputs = {vid};
    const std::string opname = name;
    n.forward = [vid, eps, rows, comp_stride, row_stride, opname](Tape& t, int self) {
        const auto& av = *t.node(vid).values;
        auto out = std::make_shared<std::vector<double>>(av.size());
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t o = r * row_stride;
            const double x = av[o], y = av[o + comp_stride], z = av[o + 2 * comp_stride];
            const double nrm = std::sqrt(x * x + y * y + z * z);
            if (nrm < eps)
                throw DomainError(opname + ": near-zero vector at row " + std::to_string(r));
            (*out)[o] = x / nrm;
            (*out)[o + comp_stride] = y / nrm;
            (*out)[o + 2 * comp_stride] = z / nrm;
        }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [vid, rows, comp_stride, row_stride](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& vn = t.node(vid);
            const auto& av = *vn.values;
            const auto& yv = *sn.values;
            const auto& g = sn.grad;
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t o = r * row_stride;
                const std::size_t o1 = o + comp_stride, o2 = o + 2 * comp_stride;
                const double nrm =
                    std::sqrt(av[o] * av[o] + av[o1] * av[o1] + av[o2] * av[o2]);
                const double dot = yv[o] * g[o] + yv[o1] * g[o1] + yv[o2] * g[o2];
                vn.grad[o] += (g[o] - yv[o] * dot) / nrm;
                vn.grad[o1] += (g[o1] - yv[o1] * dot) / nrm;
                vn.grad[o2] += (g[o2] - yv[o2] * dot) / nrm;
            }
        };
    }
    return tp.emplace(std::move(n));
}

} // namespace

Tensor normalize3(Tensor v, double eps) {
    const Shape& s = v.shape();
    check(!s.empty() && s.back() == 3,
          "normalize3: trailing axis must be 3, got " + shape_str(s));
    return normalize_impl("normalize3", v, eps, v.size() / 3, 1, 3);
}

Tensor normalize_ch3(Tensor v, double eps) {
    const Shape& s = v.shape();
    check(s.size() == 3 && s[0] == 3, "normalize_ch3: expected [3,H,W], got " + shape_str(s));
    return normalize_impl("normalize_ch3", v, eps, s[1] * s[2], s[1] * s[2], 1);
}

Tensor cross3(Tensor a, Tensor b) {
    check(a.tape() == b.tape(), "cross3: operands on different tapes");
    auto rows_of = [](const Shape& s) -> std::size_t {
        check((s.size() == 1 && s[0] == 3) || (s.size() == 2 && s[1] == 3),
              "cross3: operand must be [3] or [N,3], got " + shape_str(s));
        return s.size() == 1 ? 1 : s[0];
    };
    const std::size_t ra = rows_of(a.shape());
    const std::size_t rb = rows_of(b.shape());
    check(ra == rb || ra == 1 || rb == 1, "cross3: row counts " + std::to_string(ra) + " vs " +
                                              std::to_string(rb) + " do not broadcast");
    const std::size_t rows = std::max(ra, rb);
    Tape& tp = *a.tape();
    const int aid = a.id();
    const int bid = b.id();
    Node n;
    n.op = "cross3";
    n.shape = rows == 1 && a.shape().size() == 1 && b.shape().size() == 1 ? Shape{3}
                                                                         : Shape{rows, 3};
    n.requires_grad = a.requires_grad() || b.requires_grad();
    n.inputs = {aid, bid};
    n.forward = [aid, bid, rows, ra, rb](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        const auto& bv = *t.node(bid).values;
        auto out = std::make_shared<std::vector<double>>(rows * 3);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* ap = av.data() + (ra == 1 ? 0 : r * 3);
            const double* bp = bv.data() + (rb == 1 ? 0 : r * 3);
            double* op = out->data() + r * 3;
            op[0] = ap[1] * bp[2] - ap[2] * bp[1];
            op[1] = ap[2] * bp[0] - ap[0] * bp[2];
            op[2] = ap[0] * bp[1] - ap[1] * bp[0];
        }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, bid, rows, ra, rb](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            Node& bn = t.node(bid);
            const auto& av = *an.values;
            const auto& bv = *bn.values;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* ap = av.data() + (ra == 1 ? 0 : r * 3);
                const double* bp = bv.data() + (rb == 1 ? 0 : r * 3);
                const double* g = sn.grad.data() + r * 3;
                if (an.requires_grad) { // d/da (a x b) . g = b x g
                    double* ag = an.grad.data() + (ra == 1 ? 0 : r * 3);
                    ag[0] += bp[1] * g[2] - bp[2] * g[1];
                    ag[1] += bp[2] * g[0] - bp[0] * g[2];
                    ag[2] += bp[0] * g[1] - bp[1] * g[0];
                }
                if (bn.requires_grad) { // d/db (a x b) . g = g x a
                    double* bg = bn.grad.data() + (rb == 1 ? 0 : r * 3);
                    bg[0] += g[1] * ap[2] - g[2] * ap[1];
                    bg[1] += g[2] * ap[0] - g[0] * ap[2];
                    bg[2] += g[0] * ap[1] - g[1] * ap[0];
                }
            }
        };
    }
    return tp.emplace(std::move(n));
}

Tensor rowdot(Tensor a, Tensor b) {
    check(a.tape() == b.tape(), "rowdot: operands on different tapes");
    const Shape& as = a.shape();
    check(as.size() == 2, "rowdot: left operand must be [N,C], got " + shape_str(as));
    const std::size_t rows = as[0];
    const std::size_t c = as[1];
    const Shape& bs = b.shape();
    const bool shared = bs.size() == 1;
    check((shared && bs[0] == c) || bs == as,
          "rowdot: right operand " + shape_str(bs) + " does not match " + shape_str(as));
    Tape& tp = *a.tape();
    const int aid = a.id();
    const int bid = b.id();
    Node n;
    n.op = "rowdot";
    n.shape = {rows, 1};
    n.requires_grad = a.requires_grad() || b.requires_grad();
    n.inputs = {aid, bid};
    n.forward = [aid, bid, rows, c, shared](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        const auto& bv = *t.node(bid).values;
        auto out = std::make_shared<std::vector<double>>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* ap = av.data() + r * c;
            const double* bp = bv.data() + (shared ? 0 : r * c);
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += ap[j] * bp[j];
            (*out)[r] = acc;
        }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, bid, rows, c, shared](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            Node& bn = t.node(bid);
            const auto& av = *an.values;
            const auto& bv = *bn.values;
            for (std::size_t r = 0; r < rows; ++r) {
                const double g = sn.grad[r];
                if (g == 0.0) continue;
                const double* ap = av.data() + r * c;
                const double* bp = bv.data() + (shared ? 0 : r * c);
                if (an.requires_grad) {
                    double* ag = an.grad.data() + r * c;
                    for (std::size_t j = 0; j < c; ++j) ag[j] += g * bp[j];
                }
                if (bn.requires_grad) {
                    double* bg = bn.grad.data() + (shared ? 0 : r * c);
                    for (std::size_t j = 0; j < c; ++j) bg[j] += g * ap[j];
                }
            }
        };
    }
    return tp.emplace(std::move(n));
}

Tensor scale_rows(Tensor a, Tensor s) {
    check(a.tape() == s.tape(), "scale_rows: operands on different tapes");
    const Shape& as = a.shape();
    check(as.size() == 2, "scale_rows: left operand must be [N,C], got " + shape_str(as));
    const std::size_t rows = as[0];
    const std::size_t c = as[1];
    check(s.size() == rows, "scale_rows: scale " + shape_str(s.shape()) + " does not have " +
                                std::to_string(rows) + " entries");
    Tape& tp = *a.tape();
    const int aid = a.id();
    const int sid = s.id();
    Node n;
    n.op = "scale_rows";
    n.shape = as;
    n.requires_grad = a.requires_grad() || s.requires_grad();
    n.inputs = {aid, sid};
    n.forward = [aid, sid, rows, c](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        const auto& sv = *t.node(sid).values;
        auto out = std::make_shared<std::vector<double>>(rows * c);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) (*out)[r * c + j] = av[r * c + j] * sv[r];
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, sid, rows, c](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            Node& scn = t.node(sid);
            const auto& av = *an.values;
            const auto& sv = *scn.values;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = sn.grad.data() + r * c;
                if (an.requires_grad) {
                    double* ag = an.grad.data() + r * c;
                    for (std::size_t j = 0; j < c; ++j) ag[j] += g[j] * sv[r];
                }
                if (scn.requires_grad) {
                    double acc = 0.0;
                    const double* ap = av.data() + r * c;
                    for (std::size_t j = 0; j < c; ++j) acc += g[j] * ap[j];
                    scn.grad[r] += acc;
                }
            }
        };
    }
    return tp.emplace(std::move(n));
}

Tensor gather_rows(Tensor a, std::vector<std::uint32_t> idx) {
    const Shape& as = a.shape();
    check(!as.empty(), "gather_rows: operand must have rank >= 1");
    const std::size_t v = as[0];
    const std::size_t row = a.size() / v;
    for (std::uint32_t i : idx)
        check(i < v, "gather_rows: index " + std::to_string(i) + " out of range for " +
                         shape_str(as));
    Tape& tp = *a.tape();
    const int aid = a.id();
    auto ids = std::make_shared<std::vector<std::uint32_t>>(std::move(idx));
    Shape oshape = as;
    oshape[0] = ids->size();
    Node n;
    n.op = "gather_rows";
    n.shape = oshape;
    n.requires_grad = a.requires_grad();
    n.inputs = {aid};
    n.forward = [aid, ids, row](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        auto out = std::make_shared<std::vector<double>>(ids->size() * row);
        for (std::size_t r = 0; r < ids->size(); ++r)
            std::copy_n(av.data() + (*ids)[r] * row, row, out->data() + r * row);
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, ids, row](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            for (std::size_t r = 0; r < ids->size(); ++r) {
                double* ag = an.grad.data() + (*ids)[r] * row;
                const double* g = sn.grad.data() + r * row;
                for (std::size_t j = 0; j < row; ++j) ag[j] += g[j];
            }
        };
    }
    return tp.emplace(std::move(n));
}

Tensor pinhole_project(Tensor pts_cam, Tensor focal, double cx, double cy, double near) {
    check(pts_cam.tape() == focal.tape(), "pinhole_project: operands on different tapes");
    const Shape& ps = pts_cam.shape();
    check(ps.size() == 2 && ps[1] == 3,
          "pinhole_project: points must be [N,3], got " + shape_str(ps));
    check(focal.size() == 1, "pinhole_project: focal must be a scalar tensor");
    Tape& tp = *pts_cam.tape();
    const int pid = pts_cam.id();
    const int fid = focal.id();
    const std::size_t rows = ps[0];
    Node n;
    n.op = "pinhole_project";
    n.shape = {rows, 2};
    n.requires_grad = pts_cam.requires_grad() || focal.requires_grad();
    n.inputs = {pid, fid};
    n.forward = [pid, fid, rows, cx, cy, near](Tape& t, int self) {
        const auto& pv = *t.node(pid).values;
        const double f = (*t.node(fid).values)[0];
        auto out = std::make_shared<std::vector<double>>(rows * 2);
        for (std::size_t r = 0; r < rows; ++r) {
            const double z = pv[r * 3 + 2];
            if (z <= near)
                throw DomainError("pinhole_project: point " + std::to_string(r) + " at depth " +
                                  std::to_string(z) + " is behind the near plane");
            (*out)[r * 2] = f * pv[r * 3] / z + cx;
            (*out)[r * 2 + 1] = f * pv[r * 3 + 1] / z + cy;
        }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [pid, fid, rows](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& pn = t.node(pid);
            Node& fn = t.node(fid);
            const auto& pv = *pn.values;
            const double f = (*fn.values)[0];
            for (std::size_t r = 0; r < rows; ++r) {
                const double x = pv[r * 3], y = pv[r * 3 + 1], z = pv[r * 3 + 2];
                const double gu = sn.grad[r * 2], gv = sn.grad[r * 2 + 1];
                if (pn.requires_grad) {
                    pn.grad[r * 3] += gu * f / z;
                    pn.grad[r * 3 + 1] += gv * f / z;
                    pn.grad[r * 3 + 2] += -f * (gu * x + gv * y) / (z * z);
                }
                if (fn.requires_grad) fn.grad[0] += (gu * x + gv * y) / z;
            }
        };
    }
    return tp.emplace(std::move(n));
}

// ---------------------------------------------------------------------------
// image ops
// ---------------------------------------------------------------------------

Tensor bilinear_sample(Tensor tex, Tensor uv) {
    check(tex.tape() == uv.tape(), "bilinear_sample: operands on different tapes");
    const Shape& ts = tex.shape();
    check(ts.size() == 3, "bilinear_sample: texture must be [C,H,W], got " + shape_str(ts));
    const Shape& us = uv.shape();
    check(us.size() == 2 && us[1] == 2,
          "bilinear_sample: coordinates must be [P,2], got " + shape_str(us));
    Tape& tp = *tex.tape();
    const int tid = tex.id();
    const int uid = uv.id();
    const std::size_t c = ts[0], h = ts[1], w = ts[2];
    const std::size_t p = us[0];
    Node n;
    n.op = "bilinear_sample";
    n.shape = {p, c};
    n.requires_grad = tex.requires_grad() || uv.requires_grad();
    n.inputs = {tid, uid};
    n.forward = [tid, uid, c, h, w, p](Tape& t, int self) {
        const auto& tv = *t.node(tid).values;
        const auto& uvv = *t.node(uid).values;
        auto out = std::make_shared<std::vector<double>>(p * c);
        for (std::size_t i = 0; i < p; ++i) {
            const TexAxis ax = tex_axis(uvv[i * 2] * static_cast<double>(w) - 0.5, w);
            const TexAxis ay = tex_axis(uvv[i * 2 + 1] * static_cast<double>(h) - 0.5, h);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* plane = tv.data() + ch * h * w;
                const double t00 = plane[ay.i0 * w + ax.i0];
                const double t10 = plane[ay.i0 * w + ax.i1];
                const double t01 = plane[ay.i1 * w + ax.i0];
                const double t11 = plane[ay.i1 * w + ax.i1];
                (*out)[i * c + ch] = (1.0 - ay.frac) * ((1.0 - ax.frac) * t00 + ax.frac * t10) +
                                     ay.frac * ((1.0 - ax.frac) * t01 + ax.frac * t11);
            }
        }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [tid, uid, c, h, w, p](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& tn = t.node(tid);
            Node& un = t.node(uid);
            const auto& tv = *tn.values;
            const auto& uvv = *un.values;
            for (std::size_t i = 0; i < p; ++i) {
                const TexAxis ax = tex_axis(uvv[i * 2] * static_cast<double>(w) - 0.5, w);
                const TexAxis ay = tex_axis(uvv[i * 2 + 1] * static_cast<double>(h) - 0.5, h);
                double du = 0.0, dv = 0.0;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double g = sn.grad[i * c + ch];
                    if (g == 0.0) continue;
                    const std::size_t base = ch * h * w;
                    const std::size_t k00 = base + ay.i0 * w + ax.i0;
                    const std::size_t k10 = base + ay.i0 * w + ax.i1;
                    const std::size_t k01 = base + ay.i1 * w + ax.i0;
                    const std::size_t k11 = base + ay.i1 * w + ax.i1;
                    if (tn.requires_grad) {
                        tn.grad[k00] += (1.0 - ay.frac) * (1.0 - ax.frac) * g;
                        tn.grad[k10] += (1.0 - ay.frac) * ax.frac * g;
                        tn.grad[k01] += ay.frac * (1.0 - ax.frac) * g;
                        tn.grad[k11] += ay.frac * ax.frac * g;
                    }
                    if (un.requires_grad) {
                        du += g * ((1.0 - ay.frac) * (tv[k10] - tv[k00]) +
                                   ay.frac * (tv[k11] - tv[k01]));
                        dv += g * ((1.0 - ax.frac) * (tv[k01] - tv[k00]) +
                                   ax.frac * (tv[k11] - tv[k10]));
                    }
                }
                if (un.requires_grad) {
                    un.grad[i * 2] += du * static_cast<double>(w);
                    un.grad[i * 2 + 1] += dv * static_cast<double>(h);
                }
            }
        };
    }
    return tp.emplace(std::move(n));
}

Tensor conv2d(Tensor img, Tensor filters) {
    check(img.tape() == filters.tape(), "conv2d: operands on different tapes");
    const Shape& is = img.shape();
    const Shape& fs = filters.shape();
    check(is.size() == 3, "conv2d: image must be [C,H,W], got " + shape_str(is));
    check(fs.size() == 4 && fs[1] == is[0],
          "conv2d: filters " + shape_str(fs) + " do not match image " + shape_str(is));
    check(fs[2] % 2 == 1 && fs[3] % 2 == 1, "conv2d: kernel dims must be odd");
    check(!filters.requires_grad(), "conv2d: filter gradients are not supported");
    Tape& tp = *img.tape();
    const int iid = img.id();
    const int fid = filters.id();
    const std::size_t c = is[0], h = is[1], w = is[2];
    const std::size_t kout = fs[0], kh = fs[2], kw = fs[3];
    const long ry = static_cast<long>(kh) / 2;
    const long rx = static_cast<long>(kw) / 2;
    Node n;
    n.op = "conv2d";
    n.shape = {kout, h, w};
    n.requires_grad = img.requires_grad();
    n.inputs = {iid, fid};
    n.forward = [iid, fid, c, h, w, kout, kh, kw, ry, rx](Tape& t, int self) {
        const auto& iv = *t.node(iid).values;
        const auto& fv = *t.node(fid).values;
        auto out = std::make_shared<std::vector<double>>(kout * h * w, 0.0);
        for (std::size_t k = 0; k < kout; ++k)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* plane = iv.data() + ch * h * w;
                const double* filt = fv.data() + (k * c + ch) * kh * kw;
                double* op = out->data() + k * h * w;
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) {
                        double acc = 0.0;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const long iy = static_cast<long>(y) + static_cast<long>(ky) - ry;
                            if (iy < 0 || iy >= static_cast<long>(h)) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long ix = static_cast<long>(x) + static_cast<long>(kx) - rx;
                                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                acc += plane[iy * static_cast<long>(w) + ix] * filt[ky * kw + kx];
                            }
                        }
                        op[y * w + x] += acc;
                    }
            }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [iid, fid, c, h, w, kout, kh, kw, ry, rx](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& in = t.node(iid);
            const auto& fv = *t.node(fid).values;
            for (std::size_t k = 0; k < kout; ++k)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double* ig = in.grad.data() + ch * h * w;
                    const double* filt = fv.data() + (k * c + ch) * kh * kw;
                    const double* g = sn.grad.data() + k * h * w;
                    for (std::size_t y = 0; y < h; ++y)
                        for (std::size_t x = 0; x < w; ++x) {
                            const double gv = g[y * w + x];
                            if (gv == 0.0) continue;
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const long iy = static_cast<long>(y) + static_cast<long>(ky) - ry;
                                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const long ix =
                                        static_cast<long>(x) + static_cast<long>(kx) - rx;
                                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                    ig[iy * static_cast<long>(w) + ix] += filt[ky * kw + kx] * gv;
                                }
                            }
                        }
                }
        };
    }
    return tp.emplace(std::move(n));
}

Tensor maxpool2(Tensor img) {
    const Shape& is = img.shape();
    check(is.size() == 3, "maxpool2: image must be [C,H,W], got " + shape_str(is));
    check(is[1] % 2 == 0 && is[2] % 2 == 0, "maxpool2: spatial dims must be even, got " +
                                                shape_str(is));
    Tape& tp = *img.tape();
    const int iid = img.id();
    const std::size_t c = is[0], h = is[1], w = is[2];
    const std::size_t oh = h / 2, ow = w / 2;
    // Winning input index per output element; rewritten on every forward so
    // replay stays consistent with the current values.
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(c * oh * ow);
    Node n;
    n.op = "maxpool2";
    n.shape = {c, oh, ow};
    n.requires_grad = img.requires_grad();
    n.inputs = {iid};
    n.forward = [iid, argmax, c, h, w, oh, ow](Tape& t, int self) {
        const auto& iv = *t.node(iid).values;
        auto out = std::make_shared<std::vector<double>>(c * oh * ow);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    // Scan order y0x0, y0x1, y1x0, y1x1; first max wins ties.
                    std::size_t best = (ch * h + 2 * y) * w + 2 * x;
                    double bv = iv[best];
                    const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
                    for (std::size_t k = 0; k < 3; ++k)
                        if (iv[cand[k]] > bv) {
                            bv = iv[cand[k]];
                            best = cand[k];
                        }
                    const std::size_t o = (ch * oh + y) * ow + x;
                    (*out)[o] = bv;
                    (*argmax)[o] = static_cast<std::uint32_t>(best);
                }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [iid, argmax](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& in = t.node(iid);
            for (std::size_t o = 0; o < argmax->size(); ++o)
                in.grad[(*argmax)[o]] += sn.grad[o];
        };
    }
    return tp.emplace(std::move(n));
}

Tensor upsample_bilinear(Tensor tex, std::size_t out_h, std::size_t out_w) {
    const Shape& ts = tex.shape();
    check(ts.size() == 3, "upsample_bilinear: texture must be [C,H,W], got " + shape_str(ts));
    check(out_h >= 1 && out_w >= 1, "upsample_bilinear: empty output");
    Tape& tp = *tex.tape();
    const int tid = tex.id();
    const std::size_t c = ts[0], h = ts[1], w = ts[2];
    Node n;
    n.op = "upsample_bilinear";
    n.shape = {c, out_h, out_w};
    n.requires_grad = tex.requires_grad();
    n.inputs = {tid};
    n.forward = [tid, c, h, w, out_h, out_w](Tape& t, int self) {
        const auto& tv = *t.node(tid).values;
        auto out = std::make_shared<std::vector<double>>(c * out_h * out_w);
        const double sy = static_cast<double>(h) / static_cast<double>(out_h);
        const double sx = static_cast<double>(w) / static_cast<double>(out_w);
        for (std::size_t y = 0; y < out_h; ++y) {
            const TexAxis ay = tex_axis((static_cast<double>(y) + 0.5) * sy - 0.5, h);
            for (std::size_t x = 0; x < out_w; ++x) {
                const TexAxis ax = tex_axis((static_cast<double>(x) + 0.5) * sx - 0.5, w);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double* plane = tv.data() + ch * h * w;
                    const double v =
                        (1.0 - ay.frac) * ((1.0 - ax.frac) * plane[ay.i0 * w + ax.i0] +
                                           ax.frac * plane[ay.i0 * w + ax.i1]) +
                        ay.frac * ((1.0 - ax.frac) * plane[ay.i1 * w + ax.i0] +
                                   ax.frac * plane[ay.i1 * w + ax.i1]);
                    (*out)[(ch * out_h + y) * out_w + x] = v;
                }
            }
        }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [tid, c, h, w, out_h, out_w](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& tn = t.node(tid);
            const double sy = static_cast<double>(h) / static_cast<double>(out_h);
            const double sx = static_cast<double>(w) / static_cast<double>(out_w);
            for (std::size_t y = 0; y < out_h; ++y) {
                const TexAxis ay = tex_axis((static_cast<double>(y) + 0.5) * sy - 0.5, h);
                for (std::size_t x = 0; x < out_w; ++x) {
                    const TexAxis ax = tex_axis((static_cast<double>(x) + 0.5) * sx - 0.5, w);
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double g = sn.grad[(ch * out_h + y) * out_w + x];
                        if (g == 0.0) continue;
                        double* pg = tn.grad.data() + ch * h * w;
                        pg[ay.i0 * w + ax.i0] += (1.0 - ay.frac) * (1.0 - ax.frac) * g;
                        pg[ay.i0 * w + ax.i1] += (1.0 - ay.frac) * ax.frac * g;
                        pg[ay.i1 * w + ax.i0] += ay.frac * (1.0 - ax.frac) * g;
                        pg[ay.i1 * w + ax.i1] += ay.frac * ax.frac * g;
                    }
                }
            }
        };
    }
    return tp.emplace(std::move(n));
}

Tensor flip_w(Tensor img) {
    const Shape& is = img.shape();
    check(is.size() == 3, "flip_w: image must be [C,H,W], got " + shape_str(is));
    Tape& tp = *img.tape();
    const int iid = img.id();
    const std::size_t c = is[0], h = is[1], w = is[2];
    Node n;
    n.op = "flip_w";
    n.shape = is;
    n.requires_grad = img.requires_grad();
    n.inputs = {iid};
    n.forward = [iid, c, h, w](Tape& t, int self) {
        const auto& iv = *t.node(iid).values;
        auto out = std::make_shared<std::vector<double>>(iv.size());
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    (*out)[(ch * h + y) * w + x] = iv[(ch * h + y) * w + (w - 1 - x)];
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [iid, c, h, w](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& in = t.node(iid);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x)
                        in.grad[(ch * h + y) * w + (w - 1 - x)] += sn.grad[(ch * h + y) * w + x];
        };
    }
    return tp.emplace(std::move(n));
}

Tensor scatter_pixels(Tensor vals, std::vector<std::uint32_t> pixel_offsets, std::size_t h,
                      std::size_t w, const std::vector<double>& background) {
    const Shape& vs = vals.shape();
    check(vs.size() == 2, "scatter_pixels: values must be [P,C], got " + shape_str(vs));
    const std::size_t p = vs[0];
    const std::size_t c = vs[1];
    check(pixel_offsets.size() == p, "scatter_pixels: offset count " +
                                         std::to_string(pixel_offsets.size()) +
                                         " does not match rows " + std::to_string(p));
    check(background.size() == c, "scatter_pixels: background channel count mismatch");
    for (std::uint32_t o : pixel_offsets)
        check(o < h * w, "scatter_pixels: offset " + std::to_string(o) + " outside " +
                             std::to_string(h) + "x" + std::to_string(w));
    Tape& tp = *vals.tape();
    const int vid = vals.id();
    auto offs = std::make_shared<std::vector<std::uint32_t>>(std::move(pixel_offsets));
    auto bg = std::make_shared<std::vector<double>>(background);
    Node n;
    n.op = "scatter_pixels";
    n.shape = {c, h, w};
    n.requires_grad = vals.requires_grad();
    n.inputs = {vid};
    n.forward = [vid, offs, bg, c, h, w](Tape& t, int self) {
        const auto& vv = *t.node(vid).values;
        auto out = std::make_shared<std::vector<double>>(c * h * w);
        for (std::size_t ch = 0; ch < c; ++ch)
            std::fill_n(out->data() + ch * h * w, h * w, (*bg)[ch]);
        for (std::size_t r = 0; r < offs->size(); ++r)
            for (std::size_t ch = 0; ch < c; ++ch)
                (*out)[ch * h * w + (*offs)[r]] = vv[r * c + ch];
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [vid, offs, c, h, w](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& vn = t.node(vid);
            for (std::size_t r = 0; r < offs->size(); ++r)
                for (std::size_t ch = 0; ch < c; ++ch)
                    vn.grad[r * c + ch] += sn.grad[ch * h * w + (*offs)[r]];
        };
    }
    return tp.emplace(std::move(n));
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

Tensor reshape(Tensor a, const Shape& shape) {
    check(shape_size(shape) == a.size(), "reshape: cannot view " + shape_str(a.shape()) +
                                             " as " + shape_str(shape));
    Tape& tp = *a.tape();
    const int aid = a.id();
    Node n;
    n.op = "reshape";
    n.shape = shape;
    n.requires_grad = a.requires_grad();
    n.inputs = {aid};
    // Shares the input's storage; only the shape changes.
    n.forward = [aid](Tape& t, int self) { t.node(self).values = t.node(aid).values; };
    if (n.requires_grad) {
        n.backward = [aid](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            for (std::size_t i = 0; i < an.grad.size(); ++i) an.grad[i] += sn.grad[i];
        };
    }
    return tp.emplace(std::move(n));
}

Tensor slice_axis0(Tensor a, std::size_t from, std::size_t to) {
    const Shape& as = a.shape();
    check(!as.empty(), "slice_axis0: operand must have rank >= 1");
    check(from < to && to <= as[0], "slice_axis0: range [" + std::to_string(from) + ", " +
                                        std::to_string(to) + ") invalid for " + shape_str(as));
    Tape& tp = *a.tape();
    const int aid = a.id();
    const std::size_t row = a.size() / as[0];
    Shape oshape = as;
    oshape[0] = to - from;
    Node n;
    n.op = "slice_axis0";
    n.shape = oshape;
    n.requires_grad = a.requires_grad();
    n.inputs = {aid};
    n.forward = [aid, from, to, row](Tape& t, int self) {
        const auto& av = *t.node(aid).values;
        auto out = std::make_shared<std::vector<double>>((to - from) * row);
        std::copy_n(av.data() + from * row, out->size(), out->data());
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [aid, from, row](Tape& t, int self) {
            Node& sn = t.node(self);
            Node& an = t.node(aid);
            for (std::size_t i = 0; i < sn.grad.size(); ++i) an.grad[from * row + i] += sn.grad[i];
        };
    }
    return tp.emplace(std::move(n));
}

Tensor concat_axis0(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_axis0: no operands");
    Tape& tp = *parts[0].tape();
    const Shape& first = parts[0].shape();
    check(!first.empty(), "concat_axis0: operands must have rank >= 1");
    Shape oshape = first;
    oshape[0] = 0;
    std::vector<int> ids;
    bool needs = false;
    for (const Tensor& part : parts) {
        check(part.tape() == &tp, "concat_axis0: operands on different tapes");
        const Shape& s = part.shape();
        check(s.size() == first.size(), "concat_axis0: rank mismatch");
        for (std::size_t ax = 1; ax < s.size(); ++ax)
            check(s[ax] == first[ax], "concat_axis0: trailing dims differ: " + shape_str(s) +
                                          " vs " + shape_str(first));
        oshape[0] += s[0];
        ids.push_back(part.id());
        needs = needs || part.requires_grad();
    }
    Node n;
    n.op = "concat_axis0";
    n.shape = oshape;
    n.requires_grad = needs;
    n.inputs = ids;
    n.forward = [ids](Tape& t, int self) {
        std::size_t total = 0;
        for (int id : ids) total += t.node(id).values->size();
        auto out = std::make_shared<std::vector<double>>(total);
        std::size_t off = 0;
        for (int id : ids) {
            const auto& v = *t.node(id).values;
            std::copy(v.begin(), v.end(), out->begin() + static_cast<long>(off));
            off += v.size();
        }
        t.node(self).values = std::move(out);
    };
    if (n.requires_grad) {
        n.backward = [ids](Tape& t, int self) {
            Node& sn = t.node(self);
            std::size_t off = 0;
            for (int id : ids) {
                Node& pn = t.node(id);
                const std::size_t sz = pn.values->size();
                if (pn.requires_grad)
                    for (std::size_t i = 0; i < sz; ++i) pn.grad[i] += sn.grad[off + i];
                off += sz;
            }
        };
    }
    return tp.emplace(std::move(n));
}

} // namespace facet::ad
