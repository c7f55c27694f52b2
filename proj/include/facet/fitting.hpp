#pragma once

// Two-stage reconstruction: latent inversion (optimize W, shape/expression
// coefficients, per-image camera and lighting against rendered targets),
// then restricted generator tuning (optimize only the mid-band pyramid
// offsets while everything recovered in stage one stays frozen).
//
// All losses are recorded on a Tape and are differentiable in the optimized
// parameters; the rasterizer's visibility stays detached, so each iteration
// builds a fresh graph from the current values.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "facet/camera.hpp"
#include "facet/image.hpp"
#include "facet/reflectance.hpp"
#include "facet/renderer.hpp"
#include "facet/shape_model.hpp"
#include "facet/tensor.hpp"

namespace facet {

// ---------------------------------------------------------------------------
// Feature bank
// ---------------------------------------------------------------------------

// Frozen multi-scale convolution pyramid standing in for a pretrained
// recognition / perceptual network: per level, `filters` kxk kernels with
// orthonormalized seeded Gaussian weights, ReLU, then 2x2 max-pooling
// between levels. The embedding is the global average pool of the last
// level's activation. Weights are tape constants and never receive
// gradients; the same seed always yields the same bank.
struct FeatureBank {
    std::size_t levels = 0;
    std::size_t filters = 0;
    std::size_t kernel = 0;
    std::vector<std::size_t> in_channels;                          // per level
    std::vector<std::shared_ptr<std::vector<double>>> weights;     // [F,C,k,k]

    void validate() const;

    static FeatureBank make(std::uint64_t seed, std::size_t levels = 4,
                            std::size_t filters = 16, std::size_t kernel = 5);
};

// Post-ReLU activation of every level (before the pool feeding the next
// level). Image is [3,H,W] with H and W divisible by 2^(levels-1).
std::vector<ad::Tensor> bank_features(const FeatureBank& bank, ad::Tensor image);

// Global average pool of the last level's activation, [filters].
ad::Tensor bank_embedding(const FeatureBank& bank, ad::Tensor image);

// ---------------------------------------------------------------------------
// Loss terms (scalar tensors on the inputs' tape)
// ---------------------------------------------------------------------------

// ||pred - target||_2 over all coordinates, divided by `diagonal` (the image
// diagonal in pixels, so the weight is resolution-portable).
ad::Tensor loss_landmark(ad::Tensor pred, ad::Tensor target, double diagonal);

// Mean absolute difference over covered pixels only (all 3 channels);
// `covered` lists pixel offsets y*W + x. Throws DomainError when empty.
ad::Tensor loss_photometric(ad::Tensor target, ad::Tensor rendered,
                            const std::vector<std::uint32_t>& covered);

// 1 - cosine similarity of the bank embeddings. Throws DomainError when an
// embedding has (near-)zero norm.
ad::Tensor loss_identity(ad::Tensor a, ad::Tensor b, const FeatureBank& bank);

// Sum over levels of ||F_j(a) - F_j(b)||_2 / numel(F_j).
ad::Tensor loss_perceptual(ad::Tensor a, ad::Tensor b, const FeatureBank& bank);

// ||w - w_init||^2 / (L*D); both [L,D] on the same tape.
ad::Tensor loss_w_reg(ad::Tensor w, ad::Tensor w_init);

// Mean |A - mirror(A)| of a square [C,R,R] map, mirrored along width (UV u).
ad::Tensor loss_flip(ad::Tensor albedo);

// Mean absolute difference of chromaticity c = rgb / max(r+g+b, eps)
// between the current albedo and a frozen snapshot taken at tuning start.
ad::Tensor loss_chroma(ad::Tensor albedo, const std::vector<double>& albedo_init,
                       double eps = 1e-6);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<double> m, v;
    std::size_t t = 0;
};

// Standard bias-corrected Adam update, in place. Sizes must match; the
// moment vectors are allocated on first use.
void adam_step(std::vector<double>& params, const std::vector<double>& grads,
               AdamState& moments, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// ---------------------------------------------------------------------------
// Fit state and configuration
// ---------------------------------------------------------------------------

struct ShapeCoeffs {
    std::vector<double> p_s; // identity coefficients, K_s
    std::vector<double> p_e; // expression coefficients, K_e
};

struct PerImageParams {
    Camera camera;
    Lighting lighting;
    std::vector<double> p_e; // per-image expression; empty in shared mode
};

struct LossBreakdown {
    // Inversion components (batch-averaged where per-image).
    double landmark = 0, photometric = 0, identity = 0, perceptual = 0;
    double w_reg = 0, shape_reg = 0, expr_reg = 0;
    // Tuning components (photometric/perceptual shared with the above).
    double flip = 0, chroma = 0;
    double total = 0;
};

struct LossRecord {
    std::size_t iter = 0;
    int stage = 1; // 1 = inversion, 2 = tuning
    LossBreakdown losses;
};

struct FitState {
    LatentW w;
    LatentW w_init; // frozen once inversion starts
    ShapeCoeffs coeffs;
    std::vector<PerImageParams> per_image;
    std::vector<double> tune_offsets; // L*D; zeros until tuning runs
    std::vector<double> albedo_init;  // 3R^2 snapshot taken at tuning start
    bool inversion_done = false;
    bool tuning_done = false;
    std::vector<LossRecord> trace;
};

struct FitConfig {
    // Loss weights, in order: landmark, photometric, identity, perceptual,
    // w-regularizer, shape regularizer, expression regularizer (inversion);
    // perceptual, photometric, flip, chroma (tuning).
    std::array<double, 11> lambda{100.0, 0.5,  1.0, 25.0, 5e-2, 5e-4,
                                  5e-4,  2.0,  0.5, 0.8,  0.35};
    double lr_inv = 1e-2;
    double lr_tune = 8e-4;
    std::size_t iters_inv = 200;
    std::size_t iters_tune = 20;
    // When nonzero, every target must be exactly render_res x render_res.
    std::size_t render_res = 0;
    // When set, the flip/chroma terms and the tuning-start snapshot use the
    // squashed [0,1] diffuse map; otherwise the raw pre-squash map.
    bool clamp_diffuse = true;
    bool per_image_expression = false;
    bool enable_tuning = true;
    std::uint64_t seed = 0;

    void validate() const;

    static FitConfig main_text();    // 200 / 20 iterations, any resolution
    static FitConfig supplemental(); // 250 / 30 iterations at 512^2
};

struct FitTarget {
    Image image;                    // [3,H,W] linear RGB in [0,1]
    std::vector<double> landmarks;  // 68 x 2 pixel coordinates, row-major
};

struct FitModels {
    const PcaShapeModel* shape = nullptr;
    const PyramidGenerator* generator = nullptr;
    const FeatureBank* bank = nullptr;
};

// ---------------------------------------------------------------------------
// Whole-objective graphs
// ---------------------------------------------------------------------------

// Inversion objective: batch-averaged weighted image terms plus the shared
// regularizers. The breakdown holds the batch-averaged component values;
// total equals the lambda-weighted sum of the components exactly.
struct InversionGraph {
    ad::Tensor total;
    ad::Tensor w;                        // [L,D] leaf
    ad::Tensor p_s;                      // [K_s] leaf
    ad::Tensor p_e;                      // [K_e] leaf (shared mode)
    std::vector<ad::Tensor> p_e_images;  // per-image leaves (per-image mode)
    std::vector<ad::Tensor> rot, trans, focal;
    std::vector<LightingLeaves> lights;
    LossBreakdown parts;
};

InversionGraph build_inversion_graph(ad::Tape& tape, const FitState& state,
                                     const std::vector<FitTarget>& targets,
                                     const FitModels& models, const FitConfig& cfg,
                                     Diagnostics* diag = nullptr);

// Tuning objective: only the mid-band offset rows are a leaf; every stage-1
// parameter enters as a constant. Requires inversion_done and a non-empty
// albedo snapshot in the state.
struct TuningGraph {
    ad::Tensor total;
    ad::Tensor offsets_mid; // [rows, D] leaf covering [row_begin, row_end)
    std::size_t row_begin = 0, row_end = 0;
    LossBreakdown parts;
};

TuningGraph build_tuning_graph(ad::Tape& tape, const FitState& state,
                               const std::vector<FitTarget>& targets,
                               const FitModels& models, const FitConfig& cfg,
                               Diagnostics* diag = nullptr);

// Value-level conveniences: build the graph on a scratch tape and return the
// component values. total_tuning_loss snapshots the albedo itself when the
// state predates tuning (but still requires a completed inversion).
LossBreakdown total_inversion_loss(const FitState& state,
                                   const std::vector<FitTarget>& targets,
                                   const FitModels& models, const FitConfig& cfg);
LossBreakdown total_tuning_loss(const FitState& state,
                                const std::vector<FitTarget>& targets,
                                const FitModels& models, const FitConfig& cfg);

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

// Stage 1: initializes W to the mean of 1000 seeded random latents, the
// coefficients to zero, each camera from a 5-landmark similarity alignment,
// and each light rig to one frontal white light; then runs iters_inv Adam
// steps on {W, p_s, p_e, camera, lighting}. Throws DomainError when the
// landmark alignment is degenerate or the render loses all coverage.
FitState fit_inversion(const std::vector<FitTarget>& targets, const FitModels& models,
                       const FitConfig& cfg, Diagnostics* diag = nullptr);

// Runs the inversion loop from an explicit starting state, skipping the
// initialization protocol. When the state carries no w_init it is frozen
// from the starting W.
FitState fit_inversion_from(FitState state, const std::vector<FitTarget>& targets,
                            const FitModels& models, const FitConfig& cfg,
                            Diagnostics* diag = nullptr);

// Stage 2: freezes everything recovered by inversion, snapshots the diffuse
// albedo, and runs iters_tune Adam steps on the mid-band generator offsets.
// Calling it twice on the same state is a contract violation.
FitState fit_tuning(FitState state, const std::vector<FitTarget>& targets,
                    const FitModels& models, const FitConfig& cfg,
                    Diagnostics* diag = nullptr);

// Both stages over a batch of N >= 2 views sharing one W and one p_s;
// expression is shared or per-image per the config flag, camera and
// lighting are always per-image.
FitState fit_multi(const std::vector<FitTarget>& targets, const FitModels& models,
                   const FitConfig& cfg, Diagnostics* diag = nullptr);

// Linear blend of W, shape/expression coefficients and tune offsets;
// cameras, lightings and frozen snapshots come from `a`. Endpoints are
// exact. Structural mismatch is a contract violation.
FitState interpolate_fit(const FitState& a, const FitState& b, double t);

// Overwrites one tunable level's offset row in the state. Levels outside
// the generator's tunable range are rejected.
void set_tune_offsets(FitState& state, const PyramidGenerator& gen,
                      std::size_t level, const std::vector<double>& row);

// Renders view `index` of a state with the state's tune offsets applied.
Image render_fit_state(const FitState& state, std::size_t index,
                       const FitModels& models);

// Projected landmark positions (68 x 2) for view `index` of a state.
std::vector<double> landmarks_for_state(const FitState& state, std::size_t index,
                                        const FitModels& models);

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

// Documented binary checkpoint (magic "FMFS"); round-trips bit-exactly,
// including the loss trace.
void save_fit_state(const std::string& path, const FitState& state);
FitState load_fit_state(const std::string& path);

// 68 lines of "x y" pixel coordinates, whitespace-separated, origin top-left.
std::vector<double> load_landmarks(const std::string& path);
void save_landmarks(const std::string& path, const std::vector<double>& landmarks);

// CSV: iter,stage,landmark,photometric,identity,perceptual,w_reg,shape_reg,
// expr_reg,flip,chroma,total
void write_loss_trace_csv(const std::string& path, const std::vector<LossRecord>& trace);

} // namespace facet
