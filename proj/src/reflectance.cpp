#include "facet/reflectance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <Eigen/Dense>

#include "binio.hpp"
#include "facet/ops.hpp"
#include "facet/rng.hpp"

namespace facet {

using ad::Shape;
using ad::Tape;
using ad::Tensor;

namespace {

constexpr char kGeneratorMagic[4] = {'F', 'M', 'G', 'N'};
constexpr std::uint32_t kGeneratorVersion = 1;

// Concatenated-modality layout at resolution r:
// [diffuse 3r^2 | specular r^2 | normals(encoded) 3r^2].
std::size_t concat_dim(std::size_t r) { return 7 * r * r; }

bool is_pow2(std::size_t x) { return x > 0 && (x & (x - 1)) == 0; }

bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

} // namespace

// ---------------------------------------------------------------------------
// ReflectanceMaps
// ---------------------------------------------------------------------------

void ReflectanceMaps::validate() const {
    check(res >= 4, "ReflectanceMaps: resolution must be at least 4");
    const std::size_t r2 = res * res;
    check(diffuse.size() == 3 * r2, "ReflectanceMaps: diffuse must be 3*R*R");
    check(specular.size() == r2, "ReflectanceMaps: specular must be R*R");
    check(normals.size() == 3 * r2, "ReflectanceMaps: normals must be 3*R*R");
    for (double x : diffuse)
        check(x >= 0.0 && x <= 1.0, "ReflectanceMaps: diffuse albedo outside [0,1]");
    for (double x : specular)
        check(x >= 0.0 && x <= 1.0, "ReflectanceMaps: specular albedo outside [0,1]");
    for (std::size_t i = 0; i < r2; ++i) {
        const double x = normals[i], y = normals[r2 + i], z = normals[2 * r2 + i];
        const double n2 = x * x + y * y + z * z;
        check(std::abs(n2 - 1.0) <= 2e-6, "ReflectanceMaps: normal texel not unit length");
        check(z > 0.0, "ReflectanceMaps: normal texel with non-positive z");
    }
}

namespace {

Image to_image(const std::vector<double>& data, std::size_t channels, std::size_t res) {
    Image img(channels, res, res);
    img.data = data;
    return img;
}

} // namespace

void save_reflectance_maps(const std::string& prefix, const ReflectanceMaps& maps) {
    maps.validate();
    save_png16(prefix + "_diffuse.png", to_image(maps.diffuse, 3, maps.res));
    save_png16(prefix + "_specular.png", to_image(maps.specular, 1, maps.res));
    Image enc(3, maps.res, maps.res);
    for (std::size_t i = 0; i < maps.normals.size(); ++i)
        enc.data[i] = 0.5 * maps.normals[i] + 0.5;
    save_png16(prefix + "_normals.png", enc);

    std::ofstream manifest(prefix + "_maps.txt");
    if (!manifest) throw IoError("cannot write " + prefix + "_maps.txt");
    manifest << "colorspace = linear\n"
             << "resolution = " << maps.res << "\n"
             << "normals = encoded (n+1)/2\n";
}

ReflectanceMaps load_reflectance_maps(const std::string& prefix) {
    Image d = load_png(prefix + "_diffuse.png");
    Image s = load_png(prefix + "_specular.png");
    Image n = load_png(prefix + "_normals.png");
    check(d.channels == 3 && s.channels == 1 && n.channels == 3,
          "load_reflectance_maps: unexpected channel layout");
    check(d.height == d.width && d.height == s.height && d.height == n.height &&
              s.width == d.width && n.width == d.width,
          "load_reflectance_maps: images must be square and equally sized");
    ReflectanceMaps maps;
    maps.res = d.height;
    maps.diffuse = std::move(d.data);
    maps.specular = std::move(s.data);
    maps.normals.resize(n.data.size());
    const std::size_t r2 = maps.res * maps.res;
    // decode and renormalize: 16-bit quantization denormalizes slightly
    for (std::size_t i = 0; i < r2; ++i) {
        double v[3];
        for (int c = 0; c < 3; ++c) v[c] = 2.0 * n.data[c * r2 + i] - 1.0;
        const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        check(len > 1e-6, "load_reflectance_maps: degenerate normal texel");
        for (int c = 0; c < 3; ++c) maps.normals[c * r2 + i] = v[c] / len;
    }
    maps.validate();
    return maps;
}

// ---------------------------------------------------------------------------
// LatentW / PyramidGenerator structure
// ---------------------------------------------------------------------------

void LatentW::validate() const {
    check(levels >= 1 && dim >= 1, "LatentW: empty latent");
    check(w.size() == levels * dim, "LatentW: size must be levels*dim");
    check(all_finite(w), "LatentW: non-finite entry");
}

LatentW LatentW::zeros(std::size_t levels, std::size_t dim) {
    LatentW l;
    l.levels = levels;
    l.dim = dim;
    l.w.assign(levels * dim, 0.0);
    return l;
}

std::vector<std::size_t> PyramidGenerator::level_resolutions(std::size_t num_levels,
                                                             std::size_t top_res) {
    check(num_levels >= 1, "PyramidGenerator: need at least one level");
    check(is_pow2(top_res) && top_res >= 4,
          "PyramidGenerator: top resolution must be a power of two >= 4");
    std::vector<std::size_t> out(num_levels);
    for (std::size_t l = 0; l < num_levels; ++l) {
        const std::size_t shift = num_levels - 1 - l;
        const std::size_t r = shift >= 60 ? 0 : (top_res >> shift);
        out[l] = std::max<std::size_t>(4, r);
    }
    return out;
}

std::pair<std::size_t, std::size_t> PyramidGenerator::tunable_range() const {
    return {num_levels / 4, (3 * num_levels) / 4};
}

void PyramidGenerator::validate() const {
    const auto expect = level_resolutions(num_levels, res); // checks res/levels
    check(dim >= 1, "PyramidGenerator: latent dim must be positive");
    check(levels.size() == num_levels, "PyramidGenerator: level table size mismatch");
    check(tune_offsets.size() == num_levels * dim,
          "PyramidGenerator: tune_offsets must be L*D");
    check(all_finite(tune_offsets), "PyramidGenerator: non-finite tune offset");
    for (std::size_t l = 0; l < num_levels; ++l) {
        const PyramidLevel& lv = levels[l];
        check(lv.res == expect[l], "PyramidGenerator: level " + std::to_string(l) +
                                       " resolution mismatch");
        const std::size_t d = concat_dim(lv.res);
        check(lv.mean && lv.mean->size() == d,
              "PyramidGenerator: level " + std::to_string(l) + " mean size mismatch");
        check(lv.basis && lv.basis->size() == d * dim,
              "PyramidGenerator: level " + std::to_string(l) + " basis size mismatch");
        check(lv.rank <= dim, "PyramidGenerator: level rank exceeds latent dim");
        check(all_finite(*lv.mean) && all_finite(*lv.basis),
              "PyramidGenerator: non-finite level data");
        for (std::size_t k = 0; k < dim; ++k) {
            double n2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double b = (*lv.basis)[j * dim + k];
                n2 += b * b;
            }
            if (k < lv.rank)
                check(std::abs(n2 - 1.0) <= 1e-6,
                      "PyramidGenerator: basis column " + std::to_string(k) +
                          " of level " + std::to_string(l) + " is not unit");
            else
                check(n2 == 0.0, "PyramidGenerator: basis column beyond rank is nonzero");
        }
    }
    check(levels.back().res == res, "PyramidGenerator: top level must equal R");
}

void save_generator(const std::string& path, const PyramidGenerator& gen) {
    gen.validate();
    BinWriter w(path);
    w.magic(kGeneratorMagic);
    w.u32(kGeneratorVersion);
    w.u32(static_cast<std::uint32_t>(gen.res));
    w.u32(static_cast<std::uint32_t>(gen.num_levels));
    w.u32(static_cast<std::uint32_t>(gen.dim));
    for (const PyramidLevel& lv : gen.levels) {
        w.u32(static_cast<std::uint32_t>(lv.res));
        w.u32(static_cast<std::uint32_t>(lv.rank));
        w.f64s(*lv.mean);
        w.f64s(*lv.basis);
    }
    w.f64s(gen.tune_offsets);
}

PyramidGenerator load_generator(const std::string& path) {
    BinReader r(path);
    r.expect_magic(kGeneratorMagic);
    const std::uint32_t version = r.u32();
    if (version != kGeneratorVersion)
        throw IoError(path + ": unsupported generator version " + std::to_string(version));
    PyramidGenerator gen;
    gen.res = r.u32();
    gen.num_levels = r.u32();
    gen.dim = r.u32();
    if (gen.num_levels == 0 || gen.num_levels > 64 || gen.dim == 0 || gen.dim > 100000 ||
        !is_pow2(gen.res) || gen.res < 4 || gen.res > 16384)
        throw IoError(path + ": implausible generator header");
    gen.levels.resize(gen.num_levels);
    for (PyramidLevel& lv : gen.levels) {
        lv.res = r.u32();
        lv.rank = r.u32();
        if (lv.res < 4 || lv.res > gen.res) throw IoError(path + ": bad level resolution");
        const std::size_t d = concat_dim(lv.res);
        lv.mean = std::make_shared<std::vector<double>>(r.f64s(d));
        lv.basis = std::make_shared<std::vector<double>>(r.f64s(d * gen.dim));
    }
    gen.tune_offsets = r.f64s(gen.num_levels * gen.dim);
    try {
        gen.validate();
    } catch (const ContractError& e) {
        throw IoError(path + ": inconsistent generator data: " + e.what());
    }
    return gen;
}

// ---------------------------------------------------------------------------
// Generation (on tape)
// ---------------------------------------------------------------------------

Tensor offsets_tensor(Tape& tape, const PyramidGenerator& gen) {
    return tape.constant({gen.num_levels, gen.dim}, std::vector<double>(gen.tune_offsets));
}

GeneratedMaps generate(const PyramidGenerator& gen, Tensor w, Tensor offsets) {
    check(w.shape() == Shape{gen.num_levels, gen.dim},
          "generate: latent must be [L,D] = [" + std::to_string(gen.num_levels) + "," +
              std::to_string(gen.dim) + "], got " + ad::shape_str(w.shape()));
    check(offsets.shape() == w.shape(), "generate: offsets must match the latent shape");
    check(w.tape() == offsets.tape(), "generate: latent and offsets on different tapes");
    check(gen.levels.size() == gen.num_levels && !gen.levels.empty(),
          "generate: malformed generator");

    Tape& tp = *w.tape();
    Tensor coeffs = ad::add(w, offsets); // [L,D]

    Tensor d, s, n;
    std::size_t cur = 0;
    for (std::size_t l = 0; l < gen.num_levels; ++l) {
        const PyramidLevel& lv = gen.levels[l];
        const std::size_t r = lv.res, r2 = r * r;
        if (l > 0 && r != cur) {
            d = ad::upsample_bilinear(d, r, r);
            s = ad::upsample_bilinear(s, r, r);
            n = ad::upsample_bilinear(n, r, r);
        }
        Tensor basis = tp.constant({concat_dim(r), gen.dim}, lv.basis);
        Tensor mean = tp.constant({concat_dim(r)}, lv.mean);
        Tensor row = ad::reshape(ad::gather_rows(coeffs, {static_cast<std::uint32_t>(l)}),
                                 {gen.dim});
        Tensor resid = ad::add(ad::matvec(basis, row), mean);
        Tensor dl = ad::reshape(ad::slice_axis0(resid, 0, 3 * r2), {3, r, r});
        Tensor sl = ad::reshape(ad::slice_axis0(resid, 3 * r2, 4 * r2), {1, r, r});
        Tensor nl = ad::reshape(ad::slice_axis0(resid, 4 * r2, 7 * r2), {3, r, r});
        d = (l == 0) ? dl : ad::add(d, dl);
        s = (l == 0) ? sl : ad::add(s, sl);
        n = (l == 0) ? nl : ad::add(n, nl);
        cur = r;
    }

    GeneratedMaps out;
    out.pre_diffuse = d;
    out.pre_specular = s;
    out.pre_normals = n;
    out.diffuse = ad::smooth_clamp01(d);
    out.specular = ad::smooth_clamp01(s);
    // decode (n+1)/2 -> n, floor z away from the tangent plane, renormalize
    Tensor decoded = ad::affine(n, 2.0, -1.0);
    Tensor xy = ad::slice_axis0(decoded, 0, 2);
    Tensor z = ad::slice_axis0(decoded, 2, 3);
    Tensor zf = ad::add(ad::max0(ad::add(z, -0.05)), 0.05);
    out.normals = ad::normalize_ch3(ad::concat_axis0({xy, zf}));
    return out;
}

GeneratedMaps generate(const PyramidGenerator& gen, Tensor w) {
    return generate(gen, w, offsets_tensor(*w.tape(), gen));
}

ReflectanceMaps generate_host(const PyramidGenerator& gen, const LatentW& w) {
    w.validate();
    check(w.levels == gen.num_levels && w.dim == gen.dim,
          "generate_host: latent dims do not match the generator");
    Tape tp;
    Tensor wt = tp.constant({w.levels, w.dim}, std::vector<double>(w.w));
    GeneratedMaps g = generate(gen, wt);
    ReflectanceMaps maps;
    maps.res = gen.res;
    maps.diffuse = g.diffuse.values();
    maps.specular = g.specular.values();
    maps.normals = g.normals.values();
    return maps;
}

// ---------------------------------------------------------------------------
// Corpus analysis (host)
// ---------------------------------------------------------------------------

namespace {

// Host-side pyramid state for one sample: the three modality images at the
// current level resolution, stored concatenated.
struct ConcatImages {
    Image diffuse, specular, normals; // encoded normals

    std::vector<double> concat() const {
        std::vector<double> v;
        v.reserve(diffuse.size() + specular.size() + normals.size());
        v.insert(v.end(), diffuse.data.begin(), diffuse.data.end());
        v.insert(v.end(), specular.data.begin(), specular.data.end());
        v.insert(v.end(), normals.data.begin(), normals.data.end());
        return v;
    }

    void add_concat(const std::vector<double>& v) {
        const std::size_t nd = diffuse.size(), ns = specular.size();
        for (std::size_t i = 0; i < nd; ++i) diffuse.data[i] += v[i];
        for (std::size_t i = 0; i < ns; ++i) specular.data[i] += v[nd + i];
        for (std::size_t i = 0; i < normals.size(); ++i) normals.data[i] += v[nd + ns + i];
    }

    void upsample_to(std::size_t r) {
        diffuse = resize_bilinear(diffuse, r, r);
        specular = resize_bilinear(specular, r, r);
        normals = resize_bilinear(normals, r, r);
    }
};

ConcatImages encode_maps(const ReflectanceMaps& maps) {
    ConcatImages c;
    c.diffuse = Image(3, maps.res, maps.res);
    c.diffuse.data = maps.diffuse;
    c.specular = Image(1, maps.res, maps.res);
    c.specular.data = maps.specular;
    c.normals = Image(3, maps.res, maps.res);
    for (std::size_t i = 0; i < maps.normals.size(); ++i)
        c.normals.data[i] = 0.5 * maps.normals[i] + 0.5;
    return c;
}

ConcatImages downsample_level(const ConcatImages& full, std::size_t r) {
    ConcatImages c;
    c.diffuse = box_downsample(full.diffuse, r, r);
    c.specular = box_downsample(full.specular, r, r);
    c.normals = box_downsample(full.normals, r, r);
    return c;
}

ConcatImages zeros_level(std::size_t r) {
    ConcatImages c;
    c.diffuse = Image(3, r, r);
    c.specular = Image(1, r, r);
    c.normals = Image(3, r, r);
    return c;
}

} // namespace

PyramidGenerator fit_generator(const std::vector<ReflectanceMaps>& corpus,
                               std::size_t num_levels, std::size_t dim,
                               Diagnostics* diag) {
    check(!corpus.empty(), "fit_generator: corpus is empty");
    check(dim >= 1, "fit_generator: latent dim must be positive");
    const std::size_t n = corpus.size();
    const std::size_t top = corpus[0].res;
    for (const ReflectanceMaps& m : corpus) {
        m.validate();
        check(m.res == top, "fit_generator: corpus resolutions differ");
    }
    const auto res_list = PyramidGenerator::level_resolutions(num_levels, top);

    PyramidGenerator gen;
    gen.res = top;
    gen.num_levels = num_levels;
    gen.dim = dim;
    gen.levels.resize(num_levels);
    gen.tune_offsets.assign(num_levels * dim, 0.0);

    std::vector<ConcatImages> full(n);
    std::vector<ConcatImages> recon(n);
    for (std::size_t i = 0; i < n; ++i) {
        full[i] = encode_maps(corpus[i]);
        recon[i] = zeros_level(res_list[0]);
    }

    std::size_t min_rank = dim;
    std::size_t cur = res_list[0];
    for (std::size_t l = 0; l < num_levels; ++l) {
        const std::size_t r = res_list[l];
        const std::size_t d = concat_dim(r);
        if (r != cur)
            for (ConcatImages& rc : recon) rc.upsample_to(r);
        cur = r;

        // residuals of this level: target minus what the pyramid already built
        Eigen::MatrixXd resid(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<double> target = downsample_level(full[i], r).concat();
            const std::vector<double> rc = recon[i].concat();
            for (std::size_t j = 0; j < d; ++j)
                resid(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                    target[j] - rc[j];
        }
        Eigen::RowVectorXd mean = resid.colwise().mean();
        resid.rowwise() -= mean;

        // trunk-coupled PCA of the concatenated modalities via the Gram matrix
        Eigen::MatrixXd gram = resid * resid.transpose();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
        check(es.info() == Eigen::Success, "fit_generator: eigendecomposition failed");
        const Eigen::VectorXd& evals = es.eigenvalues(); // ascending
        const double lam_max = evals(static_cast<Eigen::Index>(n) - 1);
        const double tol = std::max(lam_max * 1e-10, 1e-24);

        PyramidLevel& lv = gen.levels[l];
        lv.res = r;
        lv.mean = std::make_shared<std::vector<double>>(mean.data(), mean.data() + d);
        lv.basis = std::make_shared<std::vector<double>>(d * dim, 0.0);

        std::size_t rank = 0;
        Eigen::MatrixXd coeffs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                                       static_cast<Eigen::Index>(dim));
        for (std::size_t k = 0; k < std::min(dim, n); ++k) {
            const Eigen::Index idx = static_cast<Eigen::Index>(n - 1 - k);
            if (evals(idx) <= tol) break;
            Eigen::VectorXd b = resid.transpose() * es.eigenvectors().col(idx);
            b /= b.norm();
            // deterministic sign: largest-magnitude entry positive
            Eigen::Index imax = 0;
            b.cwiseAbs().maxCoeff(&imax);
            if (b(imax) < 0.0) b = -b;
            for (std::size_t j = 0; j < d; ++j)
                (*lv.basis)[j * dim + k] = b(static_cast<Eigen::Index>(j));
            coeffs.col(static_cast<Eigen::Index>(k)) = resid * b;
            ++rank;
        }
        lv.rank = rank;
        min_rank = std::min(min_rank, rank);

        // fold this level's fitted reconstruction into the running state
        Eigen::MatrixXd basis_mat(static_cast<Eigen::Index>(d),
                                  static_cast<Eigen::Index>(dim));
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = 0; k < dim; ++k)
                basis_mat(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) =
                    (*lv.basis)[j * dim + k];
        for (std::size_t i = 0; i < n; ++i) {
            Eigen::VectorXd add_vec =
                basis_mat * coeffs.row(static_cast<Eigen::Index>(i)).transpose();
            std::vector<double> delta(d);
            for (std::size_t j = 0; j < d; ++j)
                delta[j] = (*lv.mean)[j] + add_vec(static_cast<Eigen::Index>(j));
            recon[i].add_concat(delta);
        }
    }

    if (diag && min_rank < dim)
        diag->warn("fit_generator: corpus supports only rank " + std::to_string(min_rank) +
                   " at some levels; bases truncated below D=" + std::to_string(dim));
    gen.validate();
    return gen;
}

LatentW project_latent(const PyramidGenerator& gen, const ReflectanceMaps& maps) {
    maps.validate();
    check(maps.res == gen.res, "project_latent: map resolution does not match generator");
    check(gen.levels.size() == gen.num_levels && !gen.levels.empty(),
          "project_latent: malformed generator");

    LatentW w = LatentW::zeros(gen.num_levels, gen.dim);
    ConcatImages full = encode_maps(maps);
    ConcatImages recon = zeros_level(gen.levels[0].res);
    std::size_t cur = gen.levels[0].res;
    for (std::size_t l = 0; l < gen.num_levels; ++l) {
        const PyramidLevel& lv = gen.levels[l];
        const std::size_t d = concat_dim(lv.res);
        if (lv.res != cur) recon.upsample_to(lv.res);
        cur = lv.res;

        const std::vector<double> target = downsample_level(full, lv.res).concat();
        const std::vector<double> rc = recon.concat();
        std::vector<double> resid(d);
        for (std::size_t j = 0; j < d; ++j) resid[j] = target[j] - rc[j] - (*lv.mean)[j];

        std::vector<double> delta(*lv.mean);
        for (std::size_t k = 0; k < lv.rank; ++k) {
            double c = 0.0;
            for (std::size_t j = 0; j < d; ++j) c += (*lv.basis)[j * gen.dim + k] * resid[j];
            w.w[l * gen.dim + k] = c;
            for (std::size_t j = 0; j < d; ++j) delta[j] += c * (*lv.basis)[j * gen.dim + k];
        }
        recon.add_concat(delta);
    }
    return w;
}

// ---------------------------------------------------------------------------
// Skin-tone augmentation
// ---------------------------------------------------------------------------

void UVRect::validate() const {
    check(std::isfinite(u0) && std::isfinite(v0) && std::isfinite(u1) && std::isfinite(v1),
          "UVRect: non-finite bound");
    check(u0 >= 0.0 && u0 < u1 && u1 <= 1.0 && v0 >= 0.0 && v0 < v1 && v1 <= 1.0,
          "UVRect: bounds must satisfy 0 <= lo < hi <= 1");
}

UVRect default_forehead_rect() { return {0.32, 0.10, 0.68, 0.27}; }

namespace {

void check_unit_range(const Image& img, const char* what) {
    for (double x : img.data)
        check(x >= 0.0 && x <= 1.0, std::string(what) + ": values must lie in [0,1]");
}

double smoothstep01(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

} // namespace

std::vector<double> skin_mask(const Image& albedo, const UVRect& forehead, double d_lo,
                              double d_hi) {
    check(albedo.channels == 3 && albedo.height > 0 && albedo.width > 0,
          "skin_mask: albedo must be a nonempty 3-channel image");
    check(d_lo >= 0.0 && d_lo < d_hi, "skin_mask: need 0 <= d_lo < d_hi");
    forehead.validate();
    const std::size_t h = albedo.height, w = albedo.width;

    const auto x0 = static_cast<std::size_t>(std::floor(forehead.u0 * static_cast<double>(w)));
    const auto x1 = static_cast<std::size_t>(std::ceil(forehead.u1 * static_cast<double>(w)));
    const auto y0 = static_cast<std::size_t>(std::floor(forehead.v0 * static_cast<double>(h)));
    const auto y1 = static_cast<std::size_t>(std::ceil(forehead.v1 * static_cast<double>(h)));
    check(x1 > x0 && y1 > y0 && x1 <= w && y1 <= h,
          "skin_mask: forehead rectangle selects no texels");

    double ref[3] = {0.0, 0.0, 0.0};
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x) ref[c] += albedo.at(c, y, x);
        ref[c] /= static_cast<double>((x1 - x0) * (y1 - y0));
    }

    std::vector<double> mask(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        double d2 = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            const double e = albedo.data[c * h * w + i] - ref[c];
            d2 += e * e;
        }
        const double d = std::sqrt(d2);
        mask[i] = 1.0 - smoothstep01((d - d_lo) / (d_hi - d_lo));
    }
    return mask;
}

namespace {

constexpr int kHistBins = 256;

int value_bin(double x) {
    return std::min(kHistBins - 1, static_cast<int>(x * static_cast<double>(kHistBins)));
}

// Piecewise-linear CDF over [0,1] with kHistBins equal bins.
struct BinnedCdf {
    std::array<double, kHistBins + 1> cum{}; // cum[0]=0, cum[bins]=1

    static BinnedCdf from(const double* data, std::size_t n) {
        std::array<double, kHistBins> hist{};
        for (std::size_t i = 0; i < n; ++i)
            hist[static_cast<std::size_t>(value_bin(data[i]))] += 1.0;
        BinnedCdf cdf;
        double acc = 0.0;
        for (int k = 0; k < kHistBins; ++k) {
            acc += hist[static_cast<std::size_t>(k)] / static_cast<double>(n);
            cdf.cum[static_cast<std::size_t>(k) + 1] = acc;
        }
        cdf.cum[kHistBins] = 1.0; // guard against rounding drift
        return cdf;
    }

    double invert(double p) const {
        p = std::clamp(p, 0.0, 1.0);
        // smallest bin whose upper cumulative reaches p
        int lo = 0, hi = kHistBins - 1;
        while (lo < hi) {
            const int mid = (lo + hi) / 2;
            if (cum[static_cast<std::size_t>(mid) + 1] >= p)
                hi = mid;
            else
                lo = mid + 1;
        }
        const auto k = static_cast<std::size_t>(lo);
        const double below = cum[k], above = cum[k + 1];
        const double t = above > below ? (p - below) / (above - below) : 0.0;
        return (static_cast<double>(lo) + t) / kHistBins;
    }
};

} // namespace

Image histogram_match(const Image& a, const Image& target) {
    check(a.channels == target.channels && a.channels > 0,
          "histogram_match: channel counts differ");
    check(a.size() > 0 && target.size() > 0, "histogram_match: empty image");
    check_unit_range(a, "histogram_match");
    check_unit_range(target, "histogram_match");

    Image out(a.channels, a.height, a.width);
    const std::size_t hw = a.height * a.width;
    const std::size_t thw = target.height * target.width;
    for (std::size_t c = 0; c < a.channels; ++c) {
        const BinnedCdf src = BinnedCdf::from(a.data.data() + c * hw, hw);
        const BinnedCdf dst = BinnedCdf::from(target.data.data() + c * thw, thw);
        // Bin-functional transfer: every populated source bin maps to the
        // target quantile of its cumulative-mass midpoint. Mapping whole bins
        // (rather than interpolated per-value CDF positions) keeps rematching
        // inside a single bin, which makes the transfer idempotent at bin
        // resolution even across empty stretches of the target CDF.
        std::array<double, kHistBins> lut{};
        for (int k = 0; k < kHistBins; ++k) {
            const auto ku = static_cast<std::size_t>(k);
            if (src.cum[ku + 1] > src.cum[ku])
                lut[ku] = dst.invert(0.5 * (src.cum[ku] + src.cum[ku + 1]));
        }
        for (std::size_t i = 0; i < hw; ++i)
            out.data[c * hw + i] =
                lut[static_cast<std::size_t>(value_bin(a.data[c * hw + i]))];
    }
    return out;
}

Image augment_with_mask(const Image& a, const Image& target,
                        const std::vector<double>& mask) {
    check(mask.size() == a.height * a.width, "augment_with_mask: mask size mismatch");
    for (double m : mask)
        check(m >= 0.0 && m <= 1.0, "augment_with_mask: mask values must lie in [0,1]");
    Image matched = histogram_match(a, target);
    Image out(a.channels, a.height, a.width);
    const std::size_t hw = a.height * a.width;
    for (std::size_t c = 0; c < a.channels; ++c)
        for (std::size_t i = 0; i < hw; ++i)
            out.data[c * hw + i] =
                mask[i] * matched.data[c * hw + i] + (1.0 - mask[i]) * a.data[c * hw + i];
    return out;
}

Image augment_albedo(const Image& a, const Image& target, const UVRect& forehead,
                     double d_lo, double d_hi) {
    return augment_with_mask(a, target, skin_mask(a, forehead, d_lo, d_hi));
}

double emd_histogram(const std::vector<double>& a, const std::vector<double>& b, int bins) {
    check(bins > 0, "emd_histogram: need a positive bin count");
    check(!a.empty() && !b.empty(), "emd_histogram: empty input");
    std::vector<double> ha(static_cast<std::size_t>(bins), 0.0),
        hb(static_cast<std::size_t>(bins), 0.0);
    auto fill = [bins](std::vector<double>& h, const std::vector<double>& v) {
        for (double x : v) {
            check(x >= 0.0 && x <= 1.0, "emd_histogram: values must lie in [0,1]");
            const int k =
                std::min(bins - 1, static_cast<int>(x * static_cast<double>(bins)));
            h[static_cast<std::size_t>(k)] += 1.0 / static_cast<double>(v.size());
        }
    };
    fill(ha, a);
    fill(hb, b);
    double emd = 0.0, ca = 0.0, cb = 0.0;
    for (int k = 0; k < bins; ++k) {
        ca += ha[static_cast<std::size_t>(k)];
        cb += hb[static_cast<std::size_t>(k)];
        emd += std::abs(ca - cb) / static_cast<double>(bins);
    }
    return emd;
}

// ---------------------------------------------------------------------------
// Latent PCA
// ---------------------------------------------------------------------------

LatentPca latent_pca(const PyramidGenerator& gen, std::size_t n_samples,
                     std::uint64_t seed) {
    const std::size_t dim = gen.num_levels * gen.dim;
    check(dim >= 1, "latent_pca: generator has no latent dimensions");
    check(n_samples >= dim, "latent_pca: need at least as many samples as dimensions");

    // Identity latent prior: PCA of raw standard-normal draws.
    Rng rng(seed);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
    Eigen::MatrixXd second =
        Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    Eigen::VectorXd x(static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < n_samples; ++i) {
        for (std::size_t j = 0; j < dim; ++j) x(static_cast<Eigen::Index>(j)) = rng.normal();
        mean += x;
        second.selfadjointView<Eigen::Lower>().rankUpdate(x);
    }
    mean /= static_cast<double>(n_samples);
    Eigen::MatrixXd cov =
        (Eigen::MatrixXd(second.selfadjointView<Eigen::Lower>()) -
         static_cast<double>(n_samples) * mean * mean.transpose()) /
        static_cast<double>(n_samples - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    check(es.info() == Eigen::Success, "latent_pca: eigendecomposition failed");

    LatentPca out;
    out.dim = dim;
    out.components.resize(dim * dim);
    out.variances.resize(dim);
    for (std::size_t k = 0; k < dim; ++k) {
        const Eigen::Index idx = static_cast<Eigen::Index>(dim - 1 - k); // descending
        Eigen::VectorXd v = es.eigenvectors().col(idx);
        Eigen::Index imax = 0;
        v.cwiseAbs().maxCoeff(&imax);
        if (v(imax) < 0.0) v = -v;
        for (std::size_t j = 0; j < dim; ++j)
            out.components[k * dim + j] = v(static_cast<Eigen::Index>(j));
        out.variances[k] = es.eigenvalues()(idx);
    }
    return out;
}

} // namespace facet
