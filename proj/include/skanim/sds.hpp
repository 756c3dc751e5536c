// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "skanim/denoiser.hpp"
#include "skanim/raster.hpp"

namespace skanim {

struct SdsConfig {
    int iterations   = 1000;
    double lr        = 2e-3;  // curve learning rate, canvas units
    double lambda_a  = 0.5;   // appearance-adapter merge scale
    double lambda_m  = 1.0;   // motion-adapter merge scale
    int t_min        = -1;    // -1: schedule default trim
    int t_max        = -1;
    enum class Weighting { kConstantOne, kSigmaSquared } weighting = Weighting::kConstantOne;
    unsigned long long seed = 0;
    int height       = 64;
    int width        = 64;
    int pool         = 2;
    SoftnessConfig softness;
    int snapshot_every = 0;  // 0 disables snapshots
    std::string snapshot_dir;
    int snapshot_fps = 8;
};

// eps_hat as a function of the noised latent. The drawn noise is passed
// through so tests can substitute closed-form oracles; the real denoiser
// ignores it.
using NoisePredictor =
    std::function<LatentVideo(const LatentVideo& z_t, int t, const LatentVideo& eps)>;

// Merged video prior: base W0 with A-LoRAs at lambda_a and M-LoRAs at
// lambda_m applied on the fly. The referenced weights and adapters must
// outlive the returned function.
NoisePredictor make_denoiser_predictor(const DenoiserWeights& weights,
                                       const std::vector<const LoraAdapter*>& a_loras,
                                       const std::vector<const LoraAdapter*>& m_loras,
                                       const Eigen::VectorXd& prompt_embedding, double lambda_a,
                                       double lambda_m);

// Gradient over all control points: one FrameGradient per frame.
using SketchGradient = std::vector<FrameGradient>;

// Score-distillation pull-back for a fixed draw (t, eps): the residual
// eps_hat - eps is weighted by w(t), mapped to raster space by the encoder
// adjoint and to control points by render_vjp. The denoiser Jacobian is
// never evaluated.
SketchGradient sds_gradient_at(const AnimatedSketch& anim, int t, const LatentVideo& eps,
                               const NoisePredictor& predict, const NoiseSchedule& sched,
                               const SdsConfig& cfg);

// Draws (t, eps) from rng, then defers to sds_gradient_at.
SketchGradient sds_gradient(const AnimatedSketch& anim, const NoisePredictor& predict,
                            const NoiseSchedule& sched, const SdsConfig& cfg, Rng& rng);

struct SdsIterationStats {
    int iteration;
    double grad_norm;
    double mean_displacement;  // mean |delta| per control-point coordinate this iteration
};

struct DistillResult {
    AnimatedSketch animation;
    std::vector<SdsIterationStats> diagnostics;
};

// Stage 3 loop: replicate the sketch F times, then Adam on control points
// driven by single-draw SDS gradients. Snapshots (animated SVG + PGM frames)
// are written under cfg.snapshot_dir every cfg.snapshot_every iterations.
DistillResult distill(const SketchFrame& sketch, int frames, const NoisePredictor& predict,
                      const NoiseSchedule& sched, const SdsConfig& cfg);

void write_diagnostics_csv(const std::vector<SdsIterationStats>& stats, const std::string& path);

}  // namespace skanim
