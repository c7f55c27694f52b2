#include "facet/fitting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <utility>

#include "facet/ops.hpp"
#include "facet/rng.hpp"
#include "binio.hpp"

namespace facet {

namespace {

constexpr char kFitMagic[4] = {'F', 'M', 'F', 'S'};
constexpr std::uint32_t kFitVersion = 1;

// Landmark indices of the 5-point similarity alignment in the 68-point
// scheme: outer eye corners, nose tip, mouth corners.
constexpr std::array<std::size_t, 5> kPoseInitLandmarks{36, 45, 33, 48, 54};

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

std::vector<double> lerp_vec(const std::vector<double>& a, const std::vector<double>& b,
                             double t) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
    return out;
}

// Global average pool of a [C,H,W] activation -> [C].
ad::Tensor global_avg_pool(ad::Tensor act) {
    const ad::Shape& s = act.shape();
    check(s.size() == 3, "global_avg_pool: activation must be [C,H,W]");
    const std::size_t c = s[0], hw = s[1] * s[2];
    ad::Tensor flat = ad::reshape(act, {c, hw});
    ad::Tensor ones = act.tape()->constant({hw}, std::vector<double>(hw, 1.0));
    ad::Tensor pooled = ad::rowdot(flat, ones); // [C,1]
    return ad::affine(ad::reshape(pooled, {c}), 1.0 / static_cast<double>(hw), 0.0);
}

ad::Tensor embedding_from_features(const std::vector<ad::Tensor>& feats) {
    check(!feats.empty(), "embedding_from_features: no activations");
    return global_avg_pool(feats.back());
}

// 1 - cosine similarity of two embedding tensors on the same tape, computed
// as half the squared distance of the normalized vectors (identical for unit
// vectors). The squared form makes equal embeddings give an exact zero with
// exactly zero gradient, so a fit started at its own ground truth does not
// receive roundoff kicks.
ad::Tensor cosine_loss(ad::Tensor ea, ad::Tensor eb) {
    ad::Tensor na2 = ad::reduce_sum(ad::mul(ea, ea));
    ad::Tensor nb2 = ad::reduce_sum(ad::mul(eb, eb));
    if (na2.values()[0] < 1e-24 || nb2.values()[0] < 1e-24)
        throw DomainError("loss_identity: zero-norm embedding");
    ad::Tensor d = ad::sub(ad::div(ea, ad::sqrt_smooth(na2)), ad::div(eb, ad::sqrt_smooth(nb2)));
    return ad::affine(ad::reduce_sum(ad::mul(d, d)), 0.5, 0.0);
}

ad::Tensor level_l2_term(ad::Tensor fa, ad::Tensor fb) {
    check(fa.shape() == fb.shape(), "loss_perceptual: activation shape mismatch");
    ad::Tensor d = ad::sub(fa, fb);
    ad::Tensor n = ad::sqrt_smooth(ad::reduce_sum(ad::mul(d, d)));
    return ad::affine(n, 1.0 / static_cast<double>(fa.size()), 0.0);
}

std::vector<double> chroma_host(const std::vector<double>& rgb, std::size_t hw, double eps) {
    std::vector<double> out(3 * hw);
    for (std::size_t p = 0; p < hw; ++p) {
        const double s = rgb[p] + rgb[hw + p] + rgb[2 * hw + p];
        // mirrors the tape-side max(s - eps, 0) + eps bit for bit
        const double d = std::max(s - eps, 0.0) + eps;
        for (std::size_t c = 0; c < 3; ++c) out[c * hw + p] = rgb[c * hw + p] / d;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-target constants reused across iterations: the image buffer, the bank
// activations and embedding of the target, and the landmark matrix.
// ---------------------------------------------------------------------------
struct TargetCache {
    std::size_t height = 0, width = 0;
    std::shared_ptr<std::vector<double>> image; // 3*H*W
    std::vector<ad::Shape> feat_shapes;
    std::vector<std::shared_ptr<std::vector<double>>> feats;
    std::shared_ptr<std::vector<double>> embedding; // [filters]
    std::shared_ptr<std::vector<double>> landmarks; // 136
};

TargetCache make_target_cache(const FitTarget& t, const FeatureBank& bank) {
    TargetCache cache;
    cache.height = t.image.height;
    cache.width = t.image.width;
    cache.image = std::make_shared<std::vector<double>>(t.image.data);
    cache.landmarks = std::make_shared<std::vector<double>>(t.landmarks);

    ad::Tape tape;
    ad::Tensor img = tape.constant({3, t.image.height, t.image.width}, cache.image);
    std::vector<ad::Tensor> feats = bank_features(bank, img);
    for (const ad::Tensor& f : feats) {
        cache.feat_shapes.push_back(f.shape());
        cache.feats.push_back(std::make_shared<std::vector<double>>(f.values()));
    }
    ad::Tensor emb = embedding_from_features(feats);
    cache.embedding = std::make_shared<std::vector<double>>(emb.values());
    return cache;
}

std::vector<TargetCache> make_caches(const std::vector<FitTarget>& targets,
                                     const FeatureBank& bank) {
    std::vector<TargetCache> caches;
    caches.reserve(targets.size());
    for (const FitTarget& t : targets) caches.push_back(make_target_cache(t, bank));
    return caches;
}

// Mean of a list of scalar tensors, summed left to right.
ad::Tensor batch_mean(const std::vector<ad::Tensor>& xs) {
    ad::Tensor acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = ad::add(acc, xs[i]);
    return ad::affine(acc, 1.0 / static_cast<double>(xs.size()), 0.0);
}

// Weighted sum sum_k lambda_k * term_k, added left to right so the host-side
// decomposition check can reproduce the value exactly.
ad::Tensor weighted_total(const std::vector<std::pair<double, ad::Tensor>>& terms) {
    check(!terms.empty(), "weighted_total: no terms");
    ad::Tensor acc = ad::affine(terms[0].second, terms[0].first, 0.0);
    for (std::size_t i = 1; i < terms.size(); ++i)
        acc = ad::add(acc, ad::affine(terms[i].second, terms[i].first, 0.0));
    return acc;
}

void check_models(const FitModels& models) {
    check(models.shape != nullptr, "fit: shape model is null");
    check(models.generator != nullptr, "fit: generator is null");
    check(models.bank != nullptr, "fit: feature bank is null");
}

void check_targets(const std::vector<FitTarget>& targets, const FitConfig& cfg) {
    check(!targets.empty(), "fit: no targets");
    const std::size_t h = targets[0].image.height, w = targets[0].image.width;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const Image& img = targets[i].image;
        check(img.channels == 3, "fit: target images must have 3 channels");
        check(img.height >= 8 && img.width >= 8, "fit: target images must be at least 8x8");
        check(img.data.size() == img.size(), "fit: target image buffer size mismatch");
        check(img.height == h && img.width == w, "fit: inconsistent target resolutions");
        check(targets[i].landmarks.size() == 136,
              "fit: each target needs 68 landmarks (136 values)");
        check(all_finite(targets[i].landmarks), "fit: non-finite landmark coordinates");
        if (cfg.render_res != 0)
            check(img.height == cfg.render_res && img.width == cfg.render_res,
                  "fit: config pins render resolution " + std::to_string(cfg.render_res));
    }
}

void check_state_structure(const FitState& state, const std::vector<FitTarget>& targets,
                           const FitModels& models, const FitConfig& cfg) {
    const PyramidGenerator& gen = *models.generator;
    const PcaShapeModel& model = *models.shape;
    check(state.w.levels == gen.num_levels && state.w.dim == gen.dim &&
              state.w.w.size() == gen.num_levels * gen.dim,
          "fit: latent W does not match the generator");
    check(state.coeffs.p_s.size() == model.num_identity,
          "fit: identity coefficient count mismatch");
    check(state.coeffs.p_e.size() == model.num_expression,
          "fit: expression coefficient count mismatch");
    check(state.per_image.size() == targets.size(),
          "fit: per-image parameter count does not match target count");
    check(state.w_init.w.size() == state.w.w.size(), "fit: w_init does not match W");
    if (!state.tune_offsets.empty())
        check(state.tune_offsets.size() == gen.num_levels * gen.dim,
              "fit: tune offset size mismatch");
    for (const PerImageParams& pi : state.per_image) {
        if (cfg.per_image_expression)
            check(pi.p_e.size() == model.num_expression,
                  "fit: per-image expression coefficient count mismatch");
        else
            check(pi.p_e.empty(), "fit: per-image expression present in shared mode");
    }
}

struct GraphLosses {
    std::vector<ad::Tensor> lan, ph, id, per;
};

// Renders image `i` of the state on `tape` and appends its loss terms.
// Leaves for the optimized parameters are created by the caller; this helper
// owns only the per-image wiring.
struct ImageGraph {
    ad::Tensor rot, trans, focal;
    LightingLeaves lights;
};

// One gradient funnel per image branch. Consumers inside the branch
// accumulate into the alias in the branch's own op order and the alias hands
// the finished sum upstream in a single addition, so batches of identical
// images reproduce the single-image gradient bit for bit regardless of how
// the branches interleave.
ad::Tensor branch_alias(ad::Tensor t) {
    const ad::Shape shape = t.shape(); // copy: the tape may grow below
    return ad::reshape(t, shape);
}

ImageGraph build_image_terms(ad::Tape& tape, const FitState& state, std::size_t i,
                             const TargetCache& cache, const FitModels& models,
                             ad::Tensor positions, MapsOnTape maps, bool scene_grad,
                             bool want_lan_id, GraphLosses& out, Diagnostics* diag) {
    const PcaShapeModel& model = *models.shape;
    const FeatureBank& bank = *models.bank;
    const PerImageParams& pi = state.per_image[i];
    const Camera& cam = pi.camera;
    cam.validate();
    check(cache.height == cam.height && cache.width == cam.width,
          "fit: camera resolution does not match its target");

    positions = branch_alias(positions);
    maps.diffuse = branch_alias(maps.diffuse);
    maps.specular = branch_alias(maps.specular);
    maps.normals = branch_alias(maps.normals);

    ImageGraph ig;
    ig.rot = tape.leaf({3}, std::vector<double>(pi.camera.rotation.begin(), pi.camera.rotation.end()),
                       scene_grad);
    ig.trans = tape.leaf({3}, std::vector<double>(pi.camera.translation.begin(), pi.camera.translation.end()),
                         scene_grad);
    ig.focal = tape.leaf({1}, std::vector<double>{pi.camera.focal}, scene_grad);
    ig.lights = lighting_leaves(tape, pi.lighting, scene_grad);
    ShadingLights sl = shading_lights(ig.lights);

    RenderOptions opt;
    opt.diag = diag;
    RenderResult rr = render(positions, model, ig.rot, ig.trans, ig.focal, cam, maps, sl, opt);
    if (rr.offscreen || rr.frags.covered() == 0)
        throw DomainError("fit: render of image " + std::to_string(i) +
                          " lost all coverage (fit diverged)");

    ad::Tensor target = tape.constant({3, cache.height, cache.width}, cache.image);
    out.ph.push_back(loss_photometric(target, rr.image, rr.frags.pixels));

    std::vector<ad::Tensor> rfeats = bank_features(bank, rr.image);
    ad::Tensor racc;
    for (std::size_t j = 0; j < rfeats.size(); ++j) {
        ad::Tensor tf = tape.constant(cache.feat_shapes[j], cache.feats[j]);
        ad::Tensor term = level_l2_term(tf, rfeats[j]);
        racc = (j == 0) ? term : ad::add(racc, term);
    }
    out.per.push_back(racc);

    if (want_lan_id) {
        ad::Tensor temb = tape.constant({bank.filters}, cache.embedding);
        out.id.push_back(cosine_loss(temb, embedding_from_features(rfeats)));

        ad::Tensor lm_target = tape.constant({68, 2}, cache.landmarks);
        ad::Tensor lm = project_landmarks(positions, model, ig.rot, ig.trans, ig.focal, cam);
        out.lan.push_back(loss_landmark(lm, lm_target, cam.diagonal()));
    }
    return ig;
}

MapsOnTape maps_from_generated(const GeneratedMaps& g) {
    // The aliases separate the render branches' gradient sum from any other
    // consumer of the generated maps (the tuning regularizers), keeping the
    // accumulation order batch-size independent.
    return MapsOnTape{branch_alias(g.diffuse), branch_alias(g.specular),
                      ad::affine(g.normals, 0.5, 0.5)};
}

InversionGraph build_inversion_graph_impl(ad::Tape& tape, const FitState& state,
                                          const std::vector<FitTarget>& targets,
                                          const std::vector<TargetCache>& caches,
                                          const FitModels& models, const FitConfig& cfg,
                                          Diagnostics* diag) {
    const PyramidGenerator& gen = *models.generator;
    const PcaShapeModel& model = *models.shape;
    const std::size_t n = targets.size();
    const std::size_t ld = gen.num_levels * gen.dim;

    InversionGraph g;
    g.w = tape.leaf({gen.num_levels, gen.dim}, std::vector<double>(state.w.w), true);
    ad::Tensor w_init = tape.constant({gen.num_levels, gen.dim}, std::vector<double>(state.w_init.w));

    GeneratedMaps gm;
    if (state.tune_offsets.empty()) {
        gm = generate(gen, g.w);
    } else {
        ad::Tensor offs = tape.constant({gen.num_levels, gen.dim},
                                        std::vector<double>(state.tune_offsets));
        gm = generate(gen, g.w, offs);
    }
    MapsOnTape maps = maps_from_generated(gm);

    g.p_s = tape.leaf({model.num_identity}, std::vector<double>(state.coeffs.p_s), true);
    ad::Tensor shared_positions;
    if (!cfg.per_image_expression) {
        g.p_e = tape.leaf({model.num_expression}, std::vector<double>(state.coeffs.p_e), true);
        shared_positions = reconstruct_shape(model, g.p_s, g.p_e);
    }

    GraphLosses losses;
    std::vector<ad::Tensor> expr_regs;
    for (std::size_t i = 0; i < n; ++i) {
        ad::Tensor positions = shared_positions;
        if (cfg.per_image_expression) {
            ad::Tensor pe = tape.leaf({model.num_expression},
                                      std::vector<double>(state.per_image[i].p_e), true);
            g.p_e_images.push_back(pe);
            positions = reconstruct_shape(model, g.p_s, pe);
            expr_regs.push_back(shape_regularizer(pe, model.eig_e));
        }
        ImageGraph ig = build_image_terms(tape, state, i, caches[i], models, positions, maps,
                                          /*scene_grad=*/true, /*want_lan_id=*/true, losses, diag);
        g.rot.push_back(ig.rot);
        g.trans.push_back(ig.trans);
        g.focal.push_back(ig.focal);
        g.lights.push_back(ig.lights);
    }

    ad::Tensor avg_lan = batch_mean(losses.lan);
    ad::Tensor avg_ph = batch_mean(losses.ph);
    ad::Tensor avg_id = batch_mean(losses.id);
    ad::Tensor avg_per = batch_mean(losses.per);
    ad::Tensor l_w = loss_w_reg(g.w, w_init);
    ad::Tensor l_s = shape_regularizer(g.p_s, model.eig_s);
    ad::Tensor l_e = cfg.per_image_expression ? batch_mean(expr_regs)
                                              : shape_regularizer(g.p_e, model.eig_e);

    g.total = weighted_total({{cfg.lambda[0], avg_lan},
                              {cfg.lambda[1], avg_ph},
                              {cfg.lambda[2], avg_id},
                              {cfg.lambda[3], avg_per},
                              {cfg.lambda[4], l_w},
                              {cfg.lambda[5], l_s},
                              {cfg.lambda[6], l_e}});

    g.parts.landmark = avg_lan.scalar();
    g.parts.photometric = avg_ph.scalar();
    g.parts.identity = avg_id.scalar();
    g.parts.perceptual = avg_per.scalar();
    g.parts.w_reg = l_w.scalar();
    g.parts.shape_reg = l_s.scalar();
    g.parts.expr_reg = l_e.scalar();
    g.parts.total = g.total.scalar();
    (void)ld;
    return g;
}

TuningGraph build_tuning_graph_impl(ad::Tape& tape, const FitState& state,
                                    const std::vector<FitTarget>& targets,
                                    const std::vector<TargetCache>& caches,
                                    const FitModels& models, const FitConfig& cfg,
                                    Diagnostics* diag) {
    const PyramidGenerator& gen = *models.generator;
    const PcaShapeModel& model = *models.shape;
    const std::size_t L = gen.num_levels, D = gen.dim;

    check(state.inversion_done, "fit_tuning: inversion has not run");
    check(state.tune_offsets.size() == L * D, "fit_tuning: tune offset size mismatch");
    check(!state.albedo_init.empty(), "fit_tuning: missing albedo snapshot");

    const auto [r0, r1] = gen.tunable_range();
    check(r1 > r0, "fit_tuning: generator has no tunable levels");

    TuningGraph g;
    g.row_begin = r0;
    g.row_end = r1;

    std::vector<ad::Tensor> parts;
    if (r0 > 0) {
        std::vector<double> pre(state.tune_offsets.begin(),
                                state.tune_offsets.begin() + static_cast<std::ptrdiff_t>(r0 * D));
        parts.push_back(tape.constant({r0, D}, std::move(pre)));
    }
    std::vector<double> mid(state.tune_offsets.begin() + static_cast<std::ptrdiff_t>(r0 * D),
                            state.tune_offsets.begin() + static_cast<std::ptrdiff_t>(r1 * D));
    g.offsets_mid = tape.leaf({r1 - r0, D}, std::move(mid), true);
    parts.push_back(g.offsets_mid);
    if (r1 < L) {
        std::vector<double> post(state.tune_offsets.begin() + static_cast<std::ptrdiff_t>(r1 * D),
                                 state.tune_offsets.end());
        parts.push_back(tape.constant({L - r1, D}, std::move(post)));
    }
    ad::Tensor offsets = parts.size() == 1 ? parts[0] : ad::concat_axis0(parts);

    ad::Tensor w = tape.constant({L, D}, std::vector<double>(state.w.w));
    GeneratedMaps gm = generate(gen, w, offsets);
    MapsOnTape maps = maps_from_generated(gm);

    ad::Tensor p_s = tape.constant({model.num_identity}, std::vector<double>(state.coeffs.p_s));
    ad::Tensor shared_pe;
    ad::Tensor shared_positions;
    if (!cfg.per_image_expression) {
        shared_pe = tape.constant({model.num_expression}, std::vector<double>(state.coeffs.p_e));
        shared_positions = reconstruct_shape(model, p_s, shared_pe);
    }

    GraphLosses losses;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        ad::Tensor positions = shared_positions;
        if (cfg.per_image_expression) {
            ad::Tensor pe = tape.constant({model.num_expression},
                                          std::vector<double>(state.per_image[i].p_e));
            positions = reconstruct_shape(model, p_s, pe);
        }
        build_image_terms(tape, state, i, caches[i], models, positions, maps,
                          /*scene_grad=*/false, /*want_lan_id=*/false, losses, diag);
    }

    ad::Tensor avg_per = batch_mean(losses.per);
    ad::Tensor avg_ph = batch_mean(losses.ph);
    ad::Tensor albedo = cfg.clamp_diffuse ? gm.diffuse : gm.pre_diffuse;
    check(state.albedo_init.size() == albedo.size(),
          "fit_tuning: albedo snapshot size mismatch");
    ad::Tensor l_flip = loss_flip(albedo);
    ad::Tensor l_chroma = loss_chroma(albedo, state.albedo_init);

    g.total = weighted_total({{cfg.lambda[7], avg_per},
                              {cfg.lambda[8], avg_ph},
                              {cfg.lambda[9], l_flip},
                              {cfg.lambda[10], l_chroma}});

    g.parts.perceptual = avg_per.scalar();
    g.parts.photometric = avg_ph.scalar();
    g.parts.flip = l_flip.scalar();
    g.parts.chroma = l_chroma.scalar();
    g.parts.total = g.total.scalar();
    return g;
}

// Diffuse-albedo snapshot of a state, used both as the chroma reference and
// as the frozen tuning-start map.
std::vector<double> snapshot_albedo(const FitState& state, const FitModels& models,
                                    const FitConfig& cfg) {
    const PyramidGenerator& gen = *models.generator;
    ad::Tape tape;
    ad::Tensor w = tape.constant({gen.num_levels, gen.dim}, std::vector<double>(state.w.w));
    GeneratedMaps gm;
    if (state.tune_offsets.empty()) {
        gm = generate(gen, w);
    } else {
        ad::Tensor offs = tape.constant({gen.num_levels, gen.dim},
                                        std::vector<double>(state.tune_offsets));
        gm = generate(gen, w, offs);
    }
    return cfg.clamp_diffuse ? gm.diffuse.values() : gm.pre_diffuse.values();
}

struct PerImageAdam {
    AdamState rot, trans, focal, p_e, ambient, dir, intensity, log_s;
};

void adam_group(std::vector<double>& params, const std::vector<double>& grads,
                AdamState& st, double lr) {
    adam_step(params, grads, st, lr);
}

void adam_scalar(double& param, const std::vector<double>& grad, AdamState& st, double lr) {
    std::vector<double> p{param};
    adam_step(p, grad, st, lr);
    param = p[0];
}

void adam_array3(std::array<double, 3>& param, const std::vector<double>& grad, AdamState& st,
                 double lr) {
    std::vector<double> p(param.begin(), param.end());
    adam_step(p, grad, st, lr);
    std::copy(p.begin(), p.end(), param.begin());
}

} // namespace

// ---------------------------------------------------------------------------
// Feature bank
// ---------------------------------------------------------------------------

void FeatureBank::validate() const {
    check(levels >= 1, "FeatureBank: needs at least one level");
    check(filters >= 1, "FeatureBank: needs at least one filter");
    check(kernel >= 1 && kernel % 2 == 1, "FeatureBank: kernel size must be odd");
    check(in_channels.size() == levels && weights.size() == levels,
          "FeatureBank: per-level arrays do not match the level count");
    for (std::size_t l = 0; l < levels; ++l) {
        check(weights[l] != nullptr, "FeatureBank: missing weights");
        const std::size_t want = filters * in_channels[l] * kernel * kernel;
        check(weights[l]->size() == want, "FeatureBank: weight buffer size mismatch");
        check(all_finite(*weights[l]), "FeatureBank: non-finite weights");
        if (l > 0)
            check(in_channels[l] == filters,
                  "FeatureBank: interior level input channels must equal the filter count");
    }
}

FeatureBank FeatureBank::make(std::uint64_t seed, std::size_t levels, std::size_t filters,
                              std::size_t kernel) {
    check(levels >= 1 && filters >= 1, "FeatureBank: levels and filters must be positive");
    check(kernel >= 1 && kernel % 2 == 1, "FeatureBank: kernel size must be odd");

    FeatureBank bank;
    bank.levels = levels;
    bank.filters = filters;
    bank.kernel = kernel;

    Rng rng(seed);
    std::size_t cin = 3;
    for (std::size_t l = 0; l < levels; ++l) {
        const std::size_t dim = cin * kernel * kernel;
        check(filters <= dim,
              "FeatureBank: cannot orthonormalize more filters than the kernel dimension");
        std::vector<std::vector<double>> rows;
        rows.reserve(filters);
        while (rows.size() < filters) {
            std::vector<double> r(dim);
            for (double& x : r) x = rng.normal();
            // Two Gram-Schmidt passes for numerical robustness.
            for (int pass = 0; pass < 2; ++pass)
                for (const std::vector<double>& q : rows) {
                    double d = 0.0;
                    for (std::size_t i = 0; i < dim; ++i) d += r[i] * q[i];
                    for (std::size_t i = 0; i < dim; ++i) r[i] -= d * q[i];
                }
            double norm = 0.0;
            for (double x : r) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-8) continue; // degenerate draw; try again
            for (double& x : r) x /= norm;
            rows.push_back(std::move(r));
        }
        auto buf = std::make_shared<std::vector<double>>();
        buf->reserve(filters * dim);
        for (const std::vector<double>& r : rows) buf->insert(buf->end(), r.begin(), r.end());
        bank.in_channels.push_back(cin);
        bank.weights.push_back(std::move(buf));
        cin = filters;
    }
    bank.validate();
    return bank;
}

std::vector<ad::Tensor> bank_features(const FeatureBank& bank, ad::Tensor image) {
    bank.validate();
    const ad::Shape& s = image.shape();
    check(s.size() == 3 && s[0] == bank.in_channels[0],
          "bank_features: image must be [" + std::to_string(bank.in_channels[0]) + ",H,W]");
    const std::size_t div = std::size_t{1} << (bank.levels - 1);
    check(s[1] % div == 0 && s[2] % div == 0,
          "bank_features: image dims must be divisible by 2^(levels-1) = " + std::to_string(div));

    ad::Tape& tape = *image.tape();
    std::vector<ad::Tensor> out;
    ad::Tensor x = image;
    for (std::size_t l = 0; l < bank.levels; ++l) {
        ad::Tensor filt = tape.constant({bank.filters, bank.in_channels[l], bank.kernel, bank.kernel},
                                        bank.weights[l]);
        ad::Tensor act = ad::max0(ad::conv2d(x, filt));
        out.push_back(act);
        if (l + 1 < bank.levels) x = ad::maxpool2(act);
    }
    return out;
}

ad::Tensor bank_embedding(const FeatureBank& bank, ad::Tensor image) {
    return embedding_from_features(bank_features(bank, image));
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

ad::Tensor loss_landmark(ad::Tensor pred, ad::Tensor target, double diagonal) {
    check(pred.valid() && target.valid(), "loss_landmark: invalid tensors");
    check(pred.shape() == target.shape() && pred.size() > 0,
          "loss_landmark: operands must share a nonempty shape");
    check(std::isfinite(diagonal) && diagonal > 0.0,
          "loss_landmark: diagonal must be positive");
    ad::Tensor d = ad::sub(pred, target);
    ad::Tensor s = ad::reduce_sum(ad::mul(d, d));
    return ad::affine(ad::sqrt_smooth(s), 1.0 / diagonal, 0.0);
}

ad::Tensor loss_photometric(ad::Tensor target, ad::Tensor rendered,
                            const std::vector<std::uint32_t>& covered) {
    check(target.valid() && rendered.valid(), "loss_photometric: invalid tensors");
    const ad::Shape& s = target.shape();
    check(s == rendered.shape(), "loss_photometric: resolution mismatch");
    check(s.size() == 3 && s[0] == 3, "loss_photometric: images must be [3,H,W]");
    if (covered.empty())
        throw DomainError("loss_photometric: no covered pixels (fit diverged)");
    const std::size_t hw = s[1] * s[2];
    std::vector<double> mask(3 * hw, 0.0);
    for (std::uint32_t p : covered) {
        check(p < hw, "loss_photometric: pixel offset out of range");
        mask[p] = mask[hw + p] = mask[2 * hw + p] = 1.0;
    }
    ad::Tensor m = rendered.tape()->constant(s, std::move(mask));
    ad::Tensor summed = ad::reduce_sum(ad::mul(ad::abs(ad::sub(target, rendered)), m));
    return ad::affine(summed, 1.0 / (3.0 * static_cast<double>(covered.size())), 0.0);
}

ad::Tensor loss_identity(ad::Tensor a, ad::Tensor b, const FeatureBank& bank) {
    return cosine_loss(bank_embedding(bank, a), bank_embedding(bank, b));
}

ad::Tensor loss_perceptual(ad::Tensor a, ad::Tensor b, const FeatureBank& bank) {
    std::vector<ad::Tensor> fa = bank_features(bank, a);
    std::vector<ad::Tensor> fb = bank_features(bank, b);
    ad::Tensor acc;
    for (std::size_t j = 0; j < fa.size(); ++j) {
        ad::Tensor term = level_l2_term(fa[j], fb[j]);
        acc = (j == 0) ? term : ad::add(acc, term);
    }
    return acc;
}

ad::Tensor loss_w_reg(ad::Tensor w, ad::Tensor w_init) {
    check(w.valid() && w_init.valid(), "loss_w_reg: invalid tensors");
    check(w.shape() == w_init.shape() && w.size() > 0,
          "loss_w_reg: operands must share a nonempty shape");
    ad::Tensor d = ad::sub(w, w_init);
    return ad::reduce_mean(ad::mul(d, d));
}

ad::Tensor loss_flip(ad::Tensor albedo) {
    check(albedo.valid(), "loss_flip: invalid tensor");
    const ad::Shape& s = albedo.shape();
    check(s.size() == 3 && s[1] == s[2], "loss_flip: map must be square [C,R,R]");
    return ad::reduce_mean(ad::abs(ad::sub(albedo, ad::flip_w(albedo))));
}

ad::Tensor loss_chroma(ad::Tensor albedo, const std::vector<double>& albedo_init, double eps) {
    check(albedo.valid(), "loss_chroma: invalid tensor");
    const ad::Shape& s = albedo.shape();
    check(s.size() == 3 && s[0] == 3, "loss_chroma: map must be [3,H,W]");
    check(albedo_init.size() == albedo.size(), "loss_chroma: snapshot size mismatch");
    check(std::isfinite(eps) && eps > 0.0, "loss_chroma: eps must be positive");
    const std::size_t hw = s[1] * s[2];

    ad::Tensor r = ad::slice_axis0(albedo, 0, 1);
    ad::Tensor g = ad::slice_axis0(albedo, 1, 2);
    ad::Tensor b = ad::slice_axis0(albedo, 2, 3);
    ad::Tensor sum = ad::add(ad::add(r, g), b); // [1,H,W]
    // max(sum, eps) keeps the ratio finite near black texels.
    ad::Tensor denom = ad::add(ad::max0(ad::affine(sum, 1.0, -eps)), eps);
    ad::Tensor chroma = ad::div(albedo, ad::reshape(denom, {s[1], s[2]}));

    ad::Tensor init = albedo.tape()->constant(s, chroma_host(albedo_init, hw, eps));
    return ad::reduce_mean(ad::abs(ad::sub(chroma, init)));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& moments,
               double lr, double beta1, double beta2, double eps) {
    check(params.size() == grads.size(), "adam_step: parameter/gradient size mismatch");
    check(std::isfinite(lr) && lr > 0.0, "adam_step: learning rate must be positive");
    if (moments.m.empty() && moments.v.empty()) {
        moments.m.assign(params.size(), 0.0);
        moments.v.assign(params.size(), 0.0);
    }
    check(moments.m.size() == params.size() && moments.v.size() == params.size(),
          "adam_step: moment size mismatch");
    moments.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(moments.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(moments.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * grads[i];
        moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        const double mhat = moments.m[i] / bc1;
        const double vhat = moments.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void FitConfig::validate() const {
    for (double l : lambda)
        check(std::isfinite(l) && l >= 0.0, "FitConfig: loss weights must be nonnegative");
    check(std::isfinite(lr_inv) && lr_inv > 0.0, "FitConfig: lr_inv must be positive");
    check(std::isfinite(lr_tune) && lr_tune > 0.0, "FitConfig: lr_tune must be positive");
    check(render_res == 0 || render_res >= 8, "FitConfig: render resolution must be 0 or >= 8");
}

FitConfig FitConfig::main_text() { return FitConfig{}; }

FitConfig FitConfig::supplemental() {
    FitConfig cfg;
    cfg.iters_inv = 250;
    cfg.iters_tune = 30;
    cfg.render_res = 512;
    return cfg;
}

// ---------------------------------------------------------------------------
// Whole-objective graphs
// ---------------------------------------------------------------------------

InversionGraph build_inversion_graph(ad::Tape& tape, const FitState& state,
                                     const std::vector<FitTarget>& targets,
                                     const FitModels& models, const FitConfig& cfg,
                                     Diagnostics* diag) {
    check_models(models);
    cfg.validate();
    check_targets(targets, cfg);
    check_state_structure(state, targets, models, cfg);
    std::vector<TargetCache> caches = make_caches(targets, *models.bank);
    return build_inversion_graph_impl(tape, state, targets, caches, models, cfg, diag);
}

TuningGraph build_tuning_graph(ad::Tape& tape, const FitState& state,
                               const std::vector<FitTarget>& targets, const FitModels& models,
                               const FitConfig& cfg, Diagnostics* diag) {
    check_models(models);
    cfg.validate();
    check_targets(targets, cfg);
    check_state_structure(state, targets, models, cfg);
    std::vector<TargetCache> caches = make_caches(targets, *models.bank);
    return build_tuning_graph_impl(tape, state, targets, caches, models, cfg, diag);
}

LossBreakdown total_inversion_loss(const FitState& state, const std::vector<FitTarget>& targets,
                                   const FitModels& models, const FitConfig& cfg) {
    ad::Tape tape;
    return build_inversion_graph(tape, state, targets, models, cfg, nullptr).parts;
}

LossBreakdown total_tuning_loss(const FitState& state, const std::vector<FitTarget>& targets,
                                const FitModels& models, const FitConfig& cfg) {
    check_models(models);
    check(state.inversion_done, "total_tuning_loss: inversion has not run");
    FitState s = state;
    if (s.albedo_init.empty()) s.albedo_init = snapshot_albedo(s, models, cfg);
    if (s.tune_offsets.empty())
        s.tune_offsets.assign(models.generator->num_levels * models.generator->dim, 0.0);
    ad::Tape tape;
    return build_tuning_graph(tape, s, targets, models, cfg, nullptr).parts;
}

// ---------------------------------------------------------------------------
// Fitting loops
// ---------------------------------------------------------------------------

FitState fit_inversion_from(FitState state, const std::vector<FitTarget>& targets,
                            const FitModels& models, const FitConfig& cfg, Diagnostics* diag) {
    check_models(models);
    cfg.validate();
    check_targets(targets, cfg);
    if (state.w_init.w.empty()) state.w_init = state.w;
    check_state_structure(state, targets, models, cfg);

    const PcaShapeModel& model = *models.shape;
    std::vector<TargetCache> caches = make_caches(targets, *models.bank);

    AdamState a_w, a_ps, a_pe;
    std::vector<PerImageAdam> a_img(targets.size());

    for (std::size_t iter = 0; iter < cfg.iters_inv; ++iter) {
        ad::Tape tape;
        InversionGraph g =
            build_inversion_graph_impl(tape, state, targets, caches, models, cfg, diag);
        state.trace.push_back({iter, 1, g.parts});
        if (!std::isfinite(g.parts.total)) {
            if (diag) diag->warn("fit_inversion: non-finite loss at iteration " +
                                 std::to_string(iter) + "; stopping early");
            break;
        }
        tape.backward(g.total);

        // Per-image parameters appear in exactly one batch term, so the 1/N
        // batch averaging would scale their gradients (and thus their Adam
        // trajectories) with the batch size. Undo it: each image's scene
        // parameters follow their own image's loss no matter how many other
        // images share the fit.
        const double nimg = static_cast<double>(targets.size());
        auto own = [&](const std::vector<double>& grad) {
            std::vector<double> g2(grad);
            if (targets.size() > 1)
                for (double& x : g2) x *= nimg;
            return g2;
        };

        adam_group(state.w.w, g.w.grad(), a_w, cfg.lr_inv);
        adam_group(state.coeffs.p_s, g.p_s.grad(), a_ps, cfg.lr_inv);
        if (cfg.per_image_expression) {
            for (std::size_t i = 0; i < targets.size(); ++i)
                adam_group(state.per_image[i].p_e, own(g.p_e_images[i].grad()), a_img[i].p_e,
                           cfg.lr_inv);
        } else {
            adam_group(state.coeffs.p_e, g.p_e.grad(), a_pe, cfg.lr_inv);
        }
        for (std::size_t i = 0; i < targets.size(); ++i) {
            PerImageParams& pi = state.per_image[i];
            adam_array3(pi.camera.rotation, own(g.rot[i].grad()), a_img[i].rot, cfg.lr_inv);
            adam_array3(pi.camera.translation, own(g.trans[i].grad()), a_img[i].trans,
                        cfg.lr_inv);
            adam_scalar(pi.camera.focal, own(g.focal[i].grad()), a_img[i].focal, cfg.lr_inv);
            adam_scalar(pi.lighting.ambient_raw, own(g.lights[i].ambient_raw.grad()),
                        a_img[i].ambient, cfg.lr_inv);
            adam_group(pi.lighting.dir_raw, own(g.lights[i].dir_raw.grad()), a_img[i].dir,
                       cfg.lr_inv);
            adam_group(pi.lighting.intensity_raw, own(g.lights[i].intensity_raw.grad()),
                       a_img[i].intensity, cfg.lr_inv);
            adam_scalar(pi.lighting.log_shininess, own(g.lights[i].log_s.grad()),
                        a_img[i].log_s, cfg.lr_inv);
        }
    }
    (void)model;
    state.inversion_done = true;
    return state;
}

FitState fit_inversion(const std::vector<FitTarget>& targets, const FitModels& models,
                       const FitConfig& cfg, Diagnostics* diag) {
    check_models(models);
    cfg.validate();
    check_targets(targets, cfg);

    const PcaShapeModel& model = *models.shape;
    const PyramidGenerator& gen = *models.generator;
    check(model.landmark_idx.size() == 68, "fit_inversion: model must define 68 landmarks");

    FitState state;

    // W starts at the mean of 1000 seeded random latents.
    Rng wr = Rng(cfg.seed).fork(1);
    const std::size_t ld = gen.num_levels * gen.dim;
    std::vector<double> wmean(ld, 0.0);
    for (int k = 0; k < 1000; ++k)
        for (std::size_t j = 0; j < ld; ++j) wmean[j] += wr.normal();
    for (double& x : wmean) x /= 1000.0;
    state.w = LatentW{gen.num_levels, gen.dim, std::move(wmean)};
    state.w_init = state.w;

    state.coeffs.p_s.assign(model.num_identity, 0.0);
    state.coeffs.p_e.assign(model.num_expression, 0.0);
    state.tune_offsets = gen.tune_offsets;
    if (state.tune_offsets.empty()) state.tune_offsets.assign(ld, 0.0);

    const std::vector<double>& mean = *model.mean;
    for (const FitTarget& t : targets) {
        PerImageParams pi;
        std::array<std::array<double, 3>, 5> model_pts;
        std::array<std::array<double, 2>, 5> image_pts;
        for (std::size_t j = 0; j < 5; ++j) {
            const std::size_t lm = kPoseInitLandmarks[j];
            const std::size_t v = model.landmark_idx[lm];
            model_pts[j] = {mean[3 * v], mean[3 * v + 1], mean[3 * v + 2]};
            image_pts[j] = {t.landmarks[2 * lm], t.landmarks[2 * lm + 1]};
        }
        pi.camera = init_camera_from_landmarks(model_pts, image_pts, t.image.width,
                                               t.image.height,
                                               1.25 * static_cast<double>(t.image.width));
        pi.lighting = Lighting::default_frontal();
        if (cfg.per_image_expression) pi.p_e.assign(model.num_expression, 0.0);
        state.per_image.push_back(std::move(pi));
    }

    return fit_inversion_from(std::move(state), targets, models, cfg, diag);
}

FitState fit_tuning(FitState state, const std::vector<FitTarget>& targets,
                    const FitModels& models, const FitConfig& cfg, Diagnostics* diag) {
    check_models(models);
    cfg.validate();
    check_targets(targets, cfg);
    check(state.inversion_done, "fit_tuning: inversion has not run");
    check(!state.tuning_done, "fit_tuning: tuning already ran on this state; reset required");
    check_state_structure(state, targets, models, cfg);

    const PyramidGenerator& gen = *models.generator;
    const std::size_t L = gen.num_levels, D = gen.dim;
    if (state.tune_offsets.empty()) state.tune_offsets.assign(L * D, 0.0);
    state.albedo_init = snapshot_albedo(state, models, cfg);

    const auto [r0, r1] = gen.tunable_range();
    check(r1 > r0, "fit_tuning: generator has no tunable levels");

    std::vector<TargetCache> caches = make_caches(targets, *models.bank);
    AdamState a_mid;
    const std::size_t base = static_cast<std::size_t>(cfg.iters_inv);

    for (std::size_t iter = 0; iter < cfg.iters_tune; ++iter) {
        ad::Tape tape;
        TuningGraph g = build_tuning_graph_impl(tape, state, targets, caches, models, cfg, diag);
        state.trace.push_back({base + iter, 2, g.parts});
        if (!std::isfinite(g.parts.total)) {
            if (diag) diag->warn("fit_tuning: non-finite loss at iteration " +
                                 std::to_string(iter) + "; stopping early");
            break;
        }
        tape.backward(g.total);

        std::vector<double> mid(state.tune_offsets.begin() + static_cast<std::ptrdiff_t>(r0 * D),
                                state.tune_offsets.begin() + static_cast<std::ptrdiff_t>(r1 * D));
        adam_step(mid, g.offsets_mid.grad(), a_mid, cfg.lr_tune);
        std::copy(mid.begin(), mid.end(),
                  state.tune_offsets.begin() + static_cast<std::ptrdiff_t>(r0 * D));
    }

    state.tuning_done = true;
    return state;
}

FitState fit_multi(const std::vector<FitTarget>& targets, const FitModels& models,
                   const FitConfig& cfg, Diagnostics* diag) {
    check(targets.size() >= 2, "fit_multi: needs at least 2 targets");
    FitState state = fit_inversion(targets, models, cfg, diag);
    if (cfg.enable_tuning) state = fit_tuning(std::move(state), targets, models, cfg, diag);
    return state;
}

// ---------------------------------------------------------------------------
// State utilities
// ---------------------------------------------------------------------------

FitState interpolate_fit(const FitState& a, const FitState& b, double t) {
    check(std::isfinite(t) && t >= 0.0 && t <= 1.0,
          "interpolate_fit: t must be in [0,1]");
    check(a.w.levels == b.w.levels && a.w.dim == b.w.dim && a.w.w.size() == b.w.w.size(),
          "interpolate_fit: latent dimensions differ");
    check(a.coeffs.p_s.size() == b.coeffs.p_s.size() &&
              a.coeffs.p_e.size() == b.coeffs.p_e.size(),
          "interpolate_fit: coefficient dimensions differ");
    check(a.per_image.size() == b.per_image.size(),
          "interpolate_fit: per-image counts differ");
    check(a.tune_offsets.size() == b.tune_offsets.size(),
          "interpolate_fit: tune offset sizes differ");
    for (std::size_t i = 0; i < a.per_image.size(); ++i)
        check(a.per_image[i].p_e.size() == b.per_image[i].p_e.size(),
              "interpolate_fit: per-image expression dimensions differ");

    FitState out = a;
    out.w.w = lerp_vec(a.w.w, b.w.w, t);
    out.coeffs.p_s = lerp_vec(a.coeffs.p_s, b.coeffs.p_s, t);
    out.coeffs.p_e = lerp_vec(a.coeffs.p_e, b.coeffs.p_e, t);
    for (std::size_t i = 0; i < out.per_image.size(); ++i)
        out.per_image[i].p_e = lerp_vec(a.per_image[i].p_e, b.per_image[i].p_e, t);
    out.tune_offsets = lerp_vec(a.tune_offsets, b.tune_offsets, t);
    out.inversion_done = a.inversion_done && b.inversion_done;
    out.tuning_done = a.tuning_done && b.tuning_done;
    out.trace.clear();
    return out;
}

void set_tune_offsets(FitState& state, const PyramidGenerator& gen, std::size_t level,
                      const std::vector<double>& row) {
    const std::size_t L = gen.num_levels, D = gen.dim;
    check(row.size() == D, "set_tune_offsets: row must have D values");
    check(level < L, "set_tune_offsets: level out of range");
    if (state.tune_offsets.empty()) state.tune_offsets.assign(L * D, 0.0);
    check(state.tune_offsets.size() == L * D, "set_tune_offsets: offset size mismatch");
    const auto [r0, r1] = gen.tunable_range();
    check(level >= r0 && level < r1,
          "set_tune_offsets: level " + std::to_string(level) + " is frozen (tunable range [" +
              std::to_string(r0) + "," + std::to_string(r1) + "))");
    std::copy(row.begin(), row.end(),
              state.tune_offsets.begin() + static_cast<std::ptrdiff_t>(level * D));
}

Image render_fit_state(const FitState& state, std::size_t index, const FitModels& models) {
    check_models(models);
    check(index < state.per_image.size(), "render_fit_state: image index out of range");
    const PyramidGenerator& gen = *models.generator;
    const PcaShapeModel& model = *models.shape;
    const PerImageParams& pi = state.per_image[index];
    pi.camera.validate();

    ad::Tape tape;
    ad::Tensor w = tape.constant({gen.num_levels, gen.dim}, std::vector<double>(state.w.w));
    GeneratedMaps gm;
    if (state.tune_offsets.empty()) {
        gm = generate(gen, w);
    } else {
        ad::Tensor offs = tape.constant({gen.num_levels, gen.dim},
                                        std::vector<double>(state.tune_offsets));
        gm = generate(gen, w, offs);
    }
    MapsOnTape maps = maps_from_generated(gm);

    ad::Tensor p_s = tape.constant({model.num_identity}, std::vector<double>(state.coeffs.p_s));
    const std::vector<double>& pe_src =
        pi.p_e.empty() ? state.coeffs.p_e : pi.p_e;
    ad::Tensor p_e = tape.constant({model.num_expression}, std::vector<double>(pe_src));
    ad::Tensor positions = reconstruct_shape(model, p_s, p_e);

    ad::Tensor rot = tape.constant({3}, std::vector<double>(pi.camera.rotation.begin(),
                                                            pi.camera.rotation.end()));
    ad::Tensor trans = tape.constant({3}, std::vector<double>(pi.camera.translation.begin(),
                                                              pi.camera.translation.end()));
    ad::Tensor focal = tape.constant({1}, std::vector<double>{pi.camera.focal});
    LightingLeaves ll = lighting_leaves(tape, pi.lighting, false);
    ShadingLights sl = shading_lights(ll);

    RenderResult rr = render(positions, model, rot, trans, focal, pi.camera, maps, sl);
    Image out(3, pi.camera.height, pi.camera.width);
    out.data = rr.image.values();
    return out;
}

std::vector<double> landmarks_for_state(const FitState& state, std::size_t index,
                                        const FitModels& models) {
    check_models(models);
    check(index < state.per_image.size(), "landmarks_for_state: image index out of range");
    const PcaShapeModel& model = *models.shape;
    const PerImageParams& pi = state.per_image[index];

    ad::Tape tape;
    ad::Tensor p_s = tape.constant({model.num_identity}, std::vector<double>(state.coeffs.p_s));
    const std::vector<double>& pe_src = pi.p_e.empty() ? state.coeffs.p_e : pi.p_e;
    ad::Tensor p_e = tape.constant({model.num_expression}, std::vector<double>(pe_src));
    ad::Tensor positions = reconstruct_shape(model, p_s, p_e);
    ad::Tensor rot = tape.constant({3}, std::vector<double>(pi.camera.rotation.begin(),
                                                            pi.camera.rotation.end()));
    ad::Tensor trans = tape.constant({3}, std::vector<double>(pi.camera.translation.begin(),
                                                              pi.camera.translation.end()));
    ad::Tensor focal = tape.constant({1}, std::vector<double>{pi.camera.focal});
    ad::Tensor lm = project_landmarks(positions, model, rot, trans, focal, pi.camera);
    return lm.values();
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

void write_sized(BinWriter& w, const std::vector<double>& v) {
    w.u64(v.size());
    w.f64s(v);
}

std::vector<double> read_sized(BinReader& r, std::size_t max_count, const char* what) {
    const std::uint64_t n = r.u64();
    if (n > max_count) throw IoError(std::string("fit state: implausible ") + what + " count");
    return r.f64s(static_cast<std::size_t>(n));
}

} // namespace

void save_fit_state(const std::string& path, const FitState& state) {
    check(state.w.w.size() == state.w.levels * state.w.dim,
          "save_fit_state: latent buffer size mismatch");
    BinWriter w(path);
    w.magic(kFitMagic);
    w.u32(kFitVersion);
    w.u32(static_cast<std::uint32_t>(state.w.levels));
    w.u32(static_cast<std::uint32_t>(state.w.dim));
    w.f64s(state.w.w);
    write_sized(w, state.w_init.w);
    write_sized(w, state.coeffs.p_s);
    write_sized(w, state.coeffs.p_e);
    write_sized(w, state.tune_offsets);
    write_sized(w, state.albedo_init);
    w.u32(static_cast<std::uint32_t>(state.per_image.size()));
    for (const PerImageParams& pi : state.per_image) {
        const Camera& c = pi.camera;
        w.f64(c.rotation[0]);
        w.f64(c.rotation[1]);
        w.f64(c.rotation[2]);
        w.f64(c.translation[0]);
        w.f64(c.translation[1]);
        w.f64(c.translation[2]);
        w.f64(c.focal);
        w.f64(c.principal[0]);
        w.f64(c.principal[1]);
        w.f64(c.near);
        w.u64(c.width);
        w.u64(c.height);
        w.f64(pi.lighting.ambient_raw);
        w.f64(pi.lighting.log_shininess);
        w.u32(static_cast<std::uint32_t>(pi.lighting.count()));
        w.f64s(pi.lighting.dir_raw);
        w.f64s(pi.lighting.intensity_raw);
        write_sized(w, pi.p_e);
    }
    std::uint32_t flags = 0;
    if (state.inversion_done) flags |= 1u;
    if (state.tuning_done) flags |= 2u;
    w.u32(flags);
    w.u64(state.trace.size());
    for (const LossRecord& rec : state.trace) {
        w.u64(rec.iter);
        w.u32(static_cast<std::uint32_t>(rec.stage));
        const LossBreakdown& l = rec.losses;
        w.f64(l.landmark);
        w.f64(l.photometric);
        w.f64(l.identity);
        w.f64(l.perceptual);
        w.f64(l.w_reg);
        w.f64(l.shape_reg);
        w.f64(l.expr_reg);
        w.f64(l.flip);
        w.f64(l.chroma);
        w.f64(l.total);
    }
}

FitState load_fit_state(const std::string& path) {
    BinReader r(path);
    r.expect_magic(kFitMagic);
    const std::uint32_t version = r.u32();
    if (version != kFitVersion)
        throw IoError(path + ": unsupported fit state version " + std::to_string(version));

    FitState state;
    const std::uint32_t levels = r.u32();
    const std::uint32_t dim = r.u32();
    if (levels > 64 || dim > 100000) throw IoError(path + ": implausible latent dimensions");
    state.w.levels = levels;
    state.w.dim = dim;
    state.w.w = r.f64s(static_cast<std::size_t>(levels) * dim);
    state.w_init.levels = levels;
    state.w_init.dim = dim;
    state.w_init.w = read_sized(r, 1u << 24, "w_init");
    state.coeffs.p_s = read_sized(r, 1u << 20, "identity coefficient");
    state.coeffs.p_e = read_sized(r, 1u << 20, "expression coefficient");
    state.tune_offsets = read_sized(r, 1u << 24, "tune offset");
    state.albedo_init = read_sized(r, 3u << 28, "albedo snapshot");

    const std::uint32_t n_images = r.u32();
    if (n_images > 4096) throw IoError(path + ": implausible image count");
    for (std::uint32_t i = 0; i < n_images; ++i) {
        PerImageParams pi;
        Camera& c = pi.camera;
        c.rotation[0] = r.f64();
        c.rotation[1] = r.f64();
        c.rotation[2] = r.f64();
        c.translation[0] = r.f64();
        c.translation[1] = r.f64();
        c.translation[2] = r.f64();
        c.focal = r.f64();
        c.principal[0] = r.f64();
        c.principal[1] = r.f64();
        c.near = r.f64();
        c.width = static_cast<std::size_t>(r.u64());
        c.height = static_cast<std::size_t>(r.u64());
        if (c.width > 65536 || c.height > 65536)
            throw IoError(path + ": implausible camera resolution");
        pi.lighting.ambient_raw = r.f64();
        pi.lighting.log_shininess = r.f64();
        const std::uint32_t nl = r.u32();
        if (nl > 1024) throw IoError(path + ": implausible light count");
        pi.lighting.dir_raw = r.f64s(3 * nl);
        pi.lighting.intensity_raw = r.f64s(3 * nl);
        pi.p_e = read_sized(r, 1u << 20, "per-image expression coefficient");
        state.per_image.push_back(std::move(pi));
    }
    const std::uint32_t flags = r.u32();
    state.inversion_done = (flags & 1u) != 0;
    state.tuning_done = (flags & 2u) != 0;
    const std::uint64_t n_trace = r.u64();
    if (n_trace > 10000000) throw IoError(path + ": implausible trace length");
    for (std::uint64_t k = 0; k < n_trace; ++k) {
        LossRecord rec;
        rec.iter = static_cast<std::size_t>(r.u64());
        rec.stage = static_cast<int>(r.u32());
        LossBreakdown& l = rec.losses;
        l.landmark = r.f64();
        l.photometric = r.f64();
        l.identity = r.f64();
        l.perceptual = r.f64();
        l.w_reg = r.f64();
        l.shape_reg = r.f64();
        l.expr_reg = r.f64();
        l.flip = r.f64();
        l.chroma = r.f64();
        l.total = r.f64();
        state.trace.push_back(rec);
    }
    return state;
}

std::vector<double> load_landmarks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open landmark file " + path);
    std::vector<double> vals;
    double x = 0.0;
    while (in >> x) vals.push_back(x);
    if (!in.eof()) throw IoError(path + ": malformed landmark file");
    if (vals.size() != 136)
        throw IoError(path + ": expected 136 values (68 landmarks), got " +
                      std::to_string(vals.size()));
    for (double v : vals)
        if (!std::isfinite(v)) throw IoError(path + ": non-finite landmark coordinate");
    return vals;
}

void save_landmarks(const std::string& path, const std::vector<double>& landmarks) {
    check(landmarks.size() == 136, "save_landmarks: expected 136 values (68 landmarks)");
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.precision(17);
    for (std::size_t i = 0; i < 68; ++i)
        out << landmarks[2 * i] << ' ' << landmarks[2 * i + 1] << '\n';
    if (!out) throw IoError("write failed for " + path);
}

void write_loss_trace_csv(const std::string& path, const std::vector<LossRecord>& trace) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "iter,stage,landmark,photometric,identity,perceptual,w_reg,shape_reg,expr_reg,"
           "flip,chroma,total\n";
    out.precision(17);
    for (const LossRecord& rec : trace) {
        const LossBreakdown& l = rec.losses;
        out << rec.iter << ',' << rec.stage << ',' << l.landmark << ',' << l.photometric << ','
            << l.identity << ',' << l.perceptual << ',' << l.w_reg << ',' << l.shape_reg << ','
            << l.expr_reg << ',' << l.flip << ',' << l.chroma << ',' << l.total << '\n';
    }
    if (!out) throw IoError("write failed for " + path);
}

} // namespace facet
