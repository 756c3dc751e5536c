// SPDX-License-Identifier: Apache-2.0

#include "skanim/sds.hpp"

#include "skanim/errors.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "skanim/adam.hpp"

namespace skanim {

namespace {

int draw_timestep(Rng& rng, const NoiseSchedule& sched, const SdsConfig& cfg) {
    int lo = cfg.t_min >= 0 ? cfg.t_min : sched.t_min();
    int hi = cfg.t_max >= 0 ? cfg.t_max : sched.t_max();
    if (lo > hi || lo < 0 || hi >= sched.steps)
        throw std::invalid_argument("sds: timestep range invalid for the schedule");
    std::uniform_int_distribution<int> dist(lo, hi);
    return dist(rng);
}

double weight_of(const SdsConfig& cfg, const NoiseSchedule& sched, int t) {
    switch (cfg.weighting) {
        case SdsConfig::Weighting::kConstantOne: return 1.0;
        case SdsConfig::Weighting::kSigmaSquared: return sched.sigma[t] * sched.sigma[t];
    }
    throw std::logic_error("unknown weighting mode");
}

size_t point_count(const AnimatedSketch& anim) {
    return static_cast<size_t>(anim.frame_count()) * anim.stroke_count() * 4 * 2;
}

void pack_points(const AnimatedSketch& anim, Eigen::MatrixXd& flat) {
    flat.resize(static_cast<Eigen::Index>(point_count(anim)), 1);
    Eigen::Index i = 0;
    for (const SketchFrame& frame : anim.frames)
        for (const CubicStroke& s : frame.strokes)
            for (const ControlPoint& p : s.points) {
                flat(i++, 0) = p.x;
                flat(i++, 0) = p.y;
            }
}

void unpack_points(const Eigen::MatrixXd& flat, AnimatedSketch& anim) {
    Eigen::Index i = 0;
    for (SketchFrame& frame : anim.frames)
        for (CubicStroke& s : frame.strokes)
            for (ControlPoint& p : s.points) {
                p.x = flat(i++, 0);
                p.y = flat(i++, 0);
            }
}

void pack_gradient(const SketchGradient& grad, Eigen::MatrixXd& flat) {
    Eigen::Index i = 0;
    for (const FrameGradient& fg : grad)
        for (const StrokeGradient& sg : fg)
            for (const ControlPoint& p : sg) {
                flat(i++, 0) = p.x;
                flat(i++, 0) = p.y;
            }
}

}  // namespace

NoisePredictor make_denoiser_predictor(const DenoiserWeights& weights,
                                       const std::vector<const LoraAdapter*>& a_loras,
                                       const std::vector<const LoraAdapter*>& m_loras,
                                       const Eigen::VectorXd& prompt_embedding, double lambda_a,
                                       double lambda_m) {
    std::vector<Attachment> attached = attach(a_loras, lambda_a);
    for (const LoraAdapter* m : m_loras) attached.push_back({m, lambda_m});
    return [&weights, attached, prompt_embedding](const LatentVideo& z_t, int t,
                                                  const LatentVideo&) -> LatentVideo {
        ConditioningContext ctx{prompt_embedding, t, -1};
        return predict_noise(z_t, ctx, weights, attached);
    };
}

SketchGradient sds_gradient_at(const AnimatedSketch& anim, int t, const LatentVideo& eps,
                               const NoisePredictor& predict, const NoiseSchedule& sched,
                               const SdsConfig& cfg) {
    RasterVideo x = render_video(anim, cfg.height, cfg.width, cfg.softness);
    LatentVideo z0 = encode(x, cfg.pool);
    if (z0.frames != eps.frames || z0.height != eps.height || z0.width != eps.width)
        throw std::invalid_argument("sds_gradient: eps shape does not match the encoded video");
    LatentVideo z_t = add_noise(z0, t, eps, sched);
    LatentVideo eps_hat = predict(z_t, t, eps);

    const double wt = weight_of(cfg, sched, t);
    LatentVideo residual(z0.frames, z0.height, z0.width);
    for (size_t i = 0; i < residual.size(); i++)
        residual.values[i] = wt * (eps_hat.values[i] - eps.values[i]);

    SketchGradient grad(anim.frame_count());
    for (int f = 0; f < anim.frame_count(); f++) {
        RasterFrame upstream = encode_transpose_frame(residual, f, cfg.pool);
        grad[f] = render_vjp(anim.frames[f], cfg.height, cfg.width, cfg.softness, upstream);
    }
    return grad;
}

SketchGradient sds_gradient(const AnimatedSketch& anim, const NoisePredictor& predict,
                            const NoiseSchedule& sched, const SdsConfig& cfg, Rng& rng) {
    int t = draw_timestep(rng, sched, cfg);
    LatentVideo eps =
        sample_noise(rng, anim.frame_count(), cfg.height / cfg.pool, cfg.width / cfg.pool);
    return sds_gradient_at(anim, t, eps, predict, sched, cfg);
}

DistillResult distill(const SketchFrame& sketch, int frames, const NoisePredictor& predict,
                      const NoiseSchedule& sched, const SdsConfig& cfg) {
    if (cfg.iterations < 1) throw std::invalid_argument("distill: iterations must be >= 1");
    if (cfg.lambda_a < 0 || cfg.lambda_m < 0)
        throw std::invalid_argument("distill: lambda scales must be >= 0");

    DistillResult result;
    result.animation = replicate_frames(sketch, frames);
    Rng rng(cfg.seed);
    AdamOptimizer adam({cfg.lr});

    Eigen::MatrixXd flat;
    pack_points(result.animation, flat);
    Eigen::MatrixXd grad_flat(flat.rows(), 1);

    for (int iter = 0; iter < cfg.iterations; iter++) {
        SketchGradient grad = sds_gradient(result.animation, predict, sched, cfg, rng);
        pack_gradient(grad, grad_flat);

        Eigen::MatrixXd before = flat;
        adam.begin_step();
        adam.update(flat, grad_flat, "points");
        unpack_points(flat, result.animation);

        double grad_norm = grad_flat.norm();
        double mean_disp = (flat - before).cwiseAbs().mean();
        result.diagnostics.push_back({iter, grad_norm, mean_disp});
        if (!std::isfinite(grad_norm)) throw NumericError("distill: non-finite gradient");

        if (cfg.snapshot_every > 0 && !cfg.snapshot_dir.empty() &&
            (iter + 1) % cfg.snapshot_every == 0) {
            std::filesystem::create_directories(cfg.snapshot_dir);
            char name[64];
            std::snprintf(name, sizeof(name), "snapshot_%05d", iter + 1);
            std::ofstream svg(std::filesystem::path(cfg.snapshot_dir) / (std::string(name) + ".svg"));
            svg << write_animated_svg(result.animation, cfg.snapshot_fps);
            RasterVideo video = render_video(result.animation, cfg.height, cfg.width, cfg.softness);
            write_video_pgm(video, (std::filesystem::path(cfg.snapshot_dir) / name).string(),
                            "frame_");
        }
    }
    return result;
}

void write_diagnostics_csv(const std::vector<SdsIterationStats>& stats, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "iteration,grad_norm,mean_displacement\n";
    char buf[128];
    for (const SdsIterationStats& s : stats) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", s.iteration, s.grad_norm,
                      s.mean_displacement);
        out << buf;
    }
}

}  // namespace skanim
