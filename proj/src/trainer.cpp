// SPDX-License-Identifier: Apache-2.0

#include "skanim/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "skanim/adam.hpp"

namespace skanim {

namespace {

AdapterSet make_role_adapters(LoraRole role, bool spatial, int d_model, int rank, double alpha,
                              Rng& rng) {
    AdapterSet set;
    const char* names[4] = {"q", "k", "v", "o"};
    for (const char* n : names) {
        std::string key = std::string(spatial ? "spatial." : "temporal.") + n;
        set.add(role, new_adapter(key, d_model, d_model, rank, alpha, rng));
    }
    return set;
}

std::vector<const LoraAdapter*> adapter_ptrs(const AdapterSet& set) {
    std::vector<const LoraAdapter*> out;
    for (const TaggedAdapter& t : set.items) out.push_back(&t.adapter);
    return out;
}

// One Adam update per adapter parameter pair, then re-quantization so the
// in-memory state matches what the f32 adapter file will hold.
void update_adapters(AdapterSet& set, const std::map<const LoraAdapter*, AdapterGradient>& grads,
                     AdamOptimizer& adam, const std::string& slot_prefix) {
    for (size_t i = 0; i < set.items.size(); i++) {
        LoraAdapter& ad = set.items[i].adapter;
        auto it = grads.find(&ad);
        if (it == grads.end()) continue;
        adam.update(ad.lora_b, it->second.b, slot_prefix + std::to_string(i) + ".b");
        adam.update(ad.lora_a, it->second.a, slot_prefix + std::to_string(i) + ".a");
        quantize_to_f32(ad.lora_b);
        quantize_to_f32(ad.lora_a);
    }
}

void check_stage_config(const StageConfig& cfg) {
    if (cfg.steps < 1) throw std::invalid_argument("stage config: steps must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("stage config: batch size must be >= 1");
    if (cfg.prompt.empty()) throw std::invalid_argument("stage config: prompt must be set");
}

double coverage_1d(double lo, double hi, double a, double b) {
    return std::max(0.0, std::min(hi, b) - std::max(lo, a));
}

}  // namespace

double heldout_eps_loss(const LatentVideo& z0, const ConditioningContext& ctx,
                        const DenoiserWeights& weights, const std::vector<Attachment>& adapters,
                        const NoiseSchedule& sched, int draws, unsigned long long seed) {
    Rng rng(seed);
    double total = 0.0;
    for (int i = 0; i < draws; i++) {
        int t = sample_timestep(rng, sched);
        LatentVideo eps = sample_noise(rng, z0.frames, z0.height, z0.width);
        LatentVideo z_t = add_noise(z0, t, eps, sched);
        ConditioningContext step_ctx = ctx;
        step_ctx.t = t;
        LatentVideo eps_hat = predict_noise(z_t, step_ctx, weights, adapters);
        double mse = 0.0;
        for (size_t j = 0; j < eps.size(); j++) {
            double r = eps_hat.values[j] - eps.values[j];
            mse += r * r;
        }
        total += mse / static_cast<double>(eps.size());
    }
    return total / draws;
}

AppearanceResult train_appearance(const SketchFrame& sketch, const StageConfig& cfg,
                                  DenoiserWeights& weights) {
    check_stage_config(cfg);
    Rng rng(cfg.seed);

    RasterFrame rendered = render(sketch, cfg.resolution, cfg.resolution, cfg.softness);
    double max_ink = *std::max_element(rendered.values.begin(), rendered.values.end());
    if (max_ink <= 0.0) throw std::invalid_argument("train_appearance: sketch renders empty");
    RasterVideo single;
    single.frames.push_back(rendered);
    LatentVideo z0 = encode(single, cfg.pool);

    bool prompt_is_new = weights.prompts.find(cfg.prompt) < 0;
    int prompt_id = weights.prompts.register_prompt(cfg.prompt, weights.d_model, rng);

    NoiseSchedule sched = build_schedule(cfg.schedule_steps);
    AdapterSet adapters = make_role_adapters(LoraRole::kSketchAppearance, true, weights.d_model,
                                             cfg.rank, cfg.lora_alpha, rng);
    std::vector<Attachment> attached = attach(adapter_ptrs(adapters), 1.0);

    GradientRequest request;
    request.adapters = adapter_ptrs(adapters);
    if (prompt_is_new) request.prompt_ids.push_back(prompt_id);

    AdamOptimizer adam({cfg.lr});
    AppearanceResult result;
    for (int step = 0; step < cfg.steps; step++) {
        double loss = 0.0;
        std::map<const LoraAdapter*, AdapterGradient> grads;
        Eigen::VectorXd prompt_grad = Eigen::VectorXd::Zero(weights.d_model);
        for (int b = 0; b < cfg.batch_size; b++) {
            int t = sample_timestep(rng, sched);
            LatentVideo eps = sample_noise(rng, 1, z0.height, z0.width);
            ConditioningContext ctx = make_context(weights, prompt_id, t);
            LossAndGrads lg = loss_and_grads(z0, eps, t, ctx, sched, FrameFilter::single(0), weights,
                                             attached, request);
            loss += lg.loss;
            for (auto& [ad, g] : lg.adapters) {
                auto [it, fresh] = grads.try_emplace(ad);
                if (fresh) {
                    it->second.b = g.b;
                    it->second.a = g.a;
                } else {
                    it->second.b += g.b;
                    it->second.a += g.a;
                }
            }
            if (auto it = lg.prompt_rows.find(prompt_id); it != lg.prompt_rows.end())
                prompt_grad += it->second;
        }
        loss /= cfg.batch_size;
        for (auto& [ad, g] : grads) {
            g.b /= cfg.batch_size;
            g.a /= cfg.batch_size;
        }
        adam.begin_step();
        update_adapters(adapters, grads, adam, "a.");
        if (prompt_is_new) {
            Eigen::MatrixXd row = weights.prompts.rows[prompt_id];
            adam.update(row, prompt_grad / cfg.batch_size, "prompt");
            quantize_to_f32(row);
            weights.prompts.rows[prompt_id] = row.col(0);
        }
        result.trace.push_back({step, loss, loss, 0.0});
    }
    if (prompt_is_new)
        adapters.trained_prompts[cfg.prompt] = weights.prompts.rows[prompt_id];

    ConditioningContext eval_ctx = make_context(weights, prompt_id, 0);
    result.heldout_loss = heldout_eps_loss(z0, eval_ctx, weights, attached, sched, cfg.heldout_draws,
                                           cfg.heldout_seed);
    Rng baseline_rng(cfg.heldout_seed);
    DenoiserWeights untrained =
        init_weights(baseline_rng, weights.d_model, weights.patch, weights.max_frames,
                     weights.tokens_h * weights.patch, weights.tokens_w * weights.patch);
    result.untrained_heldout_loss =
        heldout_eps_loss(z0, eval_ctx, untrained, {}, sched, cfg.heldout_draws, cfg.heldout_seed);

    result.adapters = std::move(adapters);
    return result;
}

MotionResult train_motion(const RasterVideo& video, const StageConfig& cfg, DenoiserWeights& weights) {
    check_stage_config(cfg);
    if (video.frame_count() < 2) throw std::invalid_argument("train_motion: need at least 2 frames");
    Rng rng(cfg.seed);

    LatentVideo z0 = encode(video, cfg.pool);
    const int f_count = z0.frames;

    bool prompt_is_new = weights.prompts.find(cfg.prompt) < 0;
    int prompt_id = weights.prompts.register_prompt(cfg.prompt, weights.d_model, rng);

    NoiseSchedule sched = build_schedule(cfg.schedule_steps);
    AdapterSet aprime = make_role_adapters(LoraRole::kVideoAppearance, true, weights.d_model, cfg.rank,
                                           cfg.lora_alpha, rng);
    AdapterSet motion = make_role_adapters(LoraRole::kMotion, false, weights.d_model, cfg.rank,
                                           cfg.lora_alpha, rng);

    std::vector<Attachment> spatial_attached = attach(adapter_ptrs(aprime), 1.0);
    std::vector<Attachment> full_attached = spatial_attached;
    for (const LoraAdapter* m : adapter_ptrs(motion)) full_attached.push_back({m, 1.0});

    GradientRequest spatial_request;
    spatial_request.adapters = adapter_ptrs(aprime);
    if (prompt_is_new) spatial_request.prompt_ids.push_back(prompt_id);
    GradientRequest temporal_request;
    temporal_request.adapters = adapter_ptrs(motion);

    AdamOptimizer adam({cfg.lr});
    std::uniform_int_distribution<int> frame_dist(0, f_count - 1);
    MotionResult result;

    for (int step = 0; step < cfg.steps; step++) {
        // Spatial pass: one random frame, temporal block bypassed, A'-LoRAs only.
        int i = frame_dist(rng);
        int t_s = sample_timestep(rng, sched);
        LatentVideo eps_s = sample_noise(rng, f_count, z0.height, z0.width);
        ConditioningContext ctx_s = make_context(weights, prompt_id, t_s);
        LossAndGrads spatial_lg = loss_and_grads(z0, eps_s, t_s, ctx_s, sched, FrameFilter::single(i),
                                                 weights, spatial_attached, spatial_request);

        // Temporal pass: full clip through the A'-adapted spatial path,
        // gradients restricted to the M-LoRAs.
        int t_t = sample_timestep(rng, sched);
        LatentVideo eps_t = sample_noise(rng, f_count, z0.height, z0.width);
        ConditioningContext ctx_t = make_context(weights, prompt_id, t_t);
        LossAndGrads temporal_lg = loss_and_grads(z0, eps_t, t_t, ctx_t, sched, FrameFilter::all(),
                                                  weights, full_attached, temporal_request);

        adam.begin_step();
        update_adapters(aprime, spatial_lg.adapters, adam, "ap.");
        update_adapters(motion, temporal_lg.adapters, adam, "m.");
        if (prompt_is_new) {
            auto it = spatial_lg.prompt_rows.find(prompt_id);
            if (it != spatial_lg.prompt_rows.end()) {
                Eigen::MatrixXd row = weights.prompts.rows[prompt_id];
                adam.update(row, it->second, "prompt");
                quantize_to_f32(row);
                weights.prompts.rows[prompt_id] = row.col(0);
            }
        }
        result.trace.push_back(
            {step, spatial_lg.loss + temporal_lg.loss, spatial_lg.loss, temporal_lg.loss});
    }
    if (prompt_is_new)
        motion.trained_prompts[cfg.prompt] = weights.prompts.rows[prompt_id];

    ConditioningContext eval_ctx = make_context(weights, prompt_id, 0);
    result.heldout_temporal_loss = heldout_eps_loss(z0, eval_ctx, weights, full_attached, sched,
                                                    cfg.heldout_draws, cfg.heldout_seed);
    Rng baseline_rng(cfg.heldout_seed);
    DenoiserWeights untrained =
        init_weights(baseline_rng, weights.d_model, weights.patch, weights.max_frames,
                     weights.tokens_h * weights.patch, weights.tokens_w * weights.patch);
    result.untrained_heldout_loss =
        heldout_eps_loss(z0, eval_ctx, untrained, {}, sched, cfg.heldout_draws, cfg.heldout_seed);

    result.video_appearance = std::move(aprime);
    result.motion = std::move(motion);
    return result;
}

MotionKind motion_kind_from_name(const std::string& name) {
    if (name == "translate") return MotionKind::kTranslate;
    if (name == "bounce") return MotionKind::kBounce;
    if (name == "jump") return MotionKind::kJump;
    if (name == "scale-pulse") return MotionKind::kScalePulse;
    throw std::invalid_argument("unknown motion kind: " + name);
}

const char* motion_kind_name(MotionKind kind) {
    switch (kind) {
        case MotionKind::kTranslate: return "translate";
        case MotionKind::kBounce: return "bounce";
        case MotionKind::kJump: return "jump";
        case MotionKind::kScalePulse: return "scale-pulse";
    }
    throw std::logic_error("unknown motion kind");
}

MotionPath make_motion_path(MotionKind kind, int frames, const SyntheticParams& params) {
    if (frames < 2) throw std::invalid_argument("make_motion_path: need at least 2 frames");
    MotionPath path;
    path.track.resize(frames);
    path.sizes.assign(frames, params.size);
    const double sx = params.start_x, sy = params.start_y;
    for (int f = 0; f < frames; f++) {
        double u = static_cast<double>(f) / (frames - 1);
        double cx = sx, cy = sy;
        switch (kind) {
            case MotionKind::kTranslate:
                cx = sx + params.amplitude * u;
                break;
            case MotionKind::kBounce:
                cy = sy - params.amplitude * 4.0 * u * (1.0 - u);
                break;
            case MotionKind::kJump:
                if (u >= 0.25 && u <= 0.75) {
                    double v = (u - 0.25) / 0.5;
                    cy = sy - params.amplitude * 4.0 * v * (1.0 - v);
                }
                break;
            case MotionKind::kScalePulse:
                path.sizes[f] = params.size * (1.0 + 0.5 * std::sin(2.0 * std::numbers::pi * u));
                break;
        }
        path.track[f] = {cx, cy};
    }
    return path;
}

SyntheticVideo make_synthetic_video(MotionKind kind, int frames, int height, int width,
                                    const SyntheticParams& params, Rng& rng) {
    if (frames < 2) throw std::invalid_argument("make_synthetic_video: need at least 2 frames");
    SyntheticParams p = params;
    if (params.jitter > 0.0) {
        std::uniform_real_distribution<double> j(-params.jitter, params.jitter);
        p.start_x += j(rng);
        p.start_y += j(rng);
    }

    MotionPath path = make_motion_path(kind, frames, p);
    SyntheticVideo out;
    out.track = path.track;

    for (int f = 0; f < frames; f++) {
        RasterFrame frame(height, width);
        double cx = out.track[f][0], cy = out.track[f][1], s = path.sizes[f];
        if (params.shape == SyntheticParams::kSquare) {
            // Exact box-pixel overlap, so summed intensity equals the area.
            double x0 = cx - s / 2, x1 = cx + s / 2, y0 = cy - s / 2, y1 = cy + s / 2;
            for (int y = 0; y < height; y++)
                for (int x = 0; x < width; x++) {
                    double px0 = static_cast<double>(x) / width, px1 = (x + 1.0) / width;
                    double py0 = static_cast<double>(y) / height, py1 = (y + 1.0) / height;
                    frame.at(y, x) = coverage_1d(px0, px1, x0, x1) * coverage_1d(py0, py1, y0, y1) *
                                     (static_cast<double>(width) * height);
                }
        } else {
            // 4x4 supersampled disk coverage.
            double r = s / 2, r2 = r * r;
            for (int y = 0; y < height; y++)
                for (int x = 0; x < width; x++) {
                    int inside = 0;
                    for (int sy_i = 0; sy_i < 4; sy_i++)
                        for (int sx_i = 0; sx_i < 4; sx_i++) {
                            double px = (x + (sx_i + 0.5) / 4.0) / width;
                            double py = (y + (sy_i + 0.5) / 4.0) / height;
                            double dx = px - cx, dy = py - cy;
                            if (dx * dx + dy * dy <= r2) inside++;
                        }
                    frame.at(y, x) = inside / 16.0;
                }
        }
        out.video.frames.push_back(std::move(frame));
    }
    return out;
}

namespace {

void add_line_stroke(SketchFrame& frame, ControlPoint a, ControlPoint b, double width) {
    CubicStroke s;
    s.points[0] = a;
    s.points[1] = {a.x + (b.x - a.x) / 3.0, a.y + (b.y - a.y) / 3.0};
    s.points[2] = {a.x + 2.0 * (b.x - a.x) / 3.0, a.y + 2.0 * (b.y - a.y) / 3.0};
    s.points[3] = b;
    s.width = width;
    frame.strokes.push_back(s);
}

}  // namespace

SketchFrame make_box_sketch(double cx, double cy, double size, double width) {
    double h = size / 2;
    SketchFrame f;
    add_line_stroke(f, {cx - h, cy - h}, {cx + h, cy - h}, width);
    add_line_stroke(f, {cx + h, cy - h}, {cx + h, cy + h}, width);
    add_line_stroke(f, {cx + h, cy + h}, {cx - h, cy + h}, width);
    add_line_stroke(f, {cx - h, cy + h}, {cx - h, cy - h}, width);
    return f;
}

SketchFrame make_ring_sketch(double cx, double cy, double diameter, double width) {
    constexpr double kKappa = 0.5522847498307936;
    double r = diameter / 2, k = kKappa * r;
    SketchFrame f;
    auto arc = [&](ControlPoint p0, ControlPoint p1, ControlPoint p2, ControlPoint p3) {
        CubicStroke s;
        s.points[0] = p0;
        s.points[1] = p1;
        s.points[2] = p2;
        s.points[3] = p3;
        s.width = width;
        f.strokes.push_back(s);
    };
    arc({cx + r, cy}, {cx + r, cy + k}, {cx + k, cy + r}, {cx, cy + r});
    arc({cx, cy + r}, {cx - k, cy + r}, {cx - r, cy + k}, {cx - r, cy});
    arc({cx - r, cy}, {cx - r, cy - k}, {cx - k, cy - r}, {cx, cy - r});
    arc({cx, cy - r}, {cx + k, cy - r}, {cx + r, cy - k}, {cx + r, cy});
    return f;
}

SketchFrame make_wedge_sketch(double cx, double cy, double size, double width) {
    double h = size / 2;
    SketchFrame f;
    add_line_stroke(f, {cx, cy - h}, {cx + h, cy + h}, width);
    add_line_stroke(f, {cx + h, cy + h}, {cx - h, cy + h}, width);
    add_line_stroke(f, {cx - h, cy + h}, {cx, cy - h}, width);
    return f;
}

AnimatedSketch translate_sketch_along(const SketchFrame& sketch,
                                      const std::vector<std::array<double, 2>>& track) {
    if (track.empty()) throw std::invalid_argument("translate_sketch_along: empty track");
    AnimatedSketch anim = replicate_frames(sketch, static_cast<int>(track.size()));
    for (size_t f = 0; f < track.size(); f++) {
        double dx = track[f][0] - track[0][0];
        double dy = track[f][1] - track[0][1];
        for (CubicStroke& s : anim.frames[f].strokes)
            for (ControlPoint& p : s.points) {
                p.x += dx;
                p.y += dy;
            }
    }
    return anim;
}

void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "step,loss,spatial,temporal\n";
    char buf[160];
    for (const TraceRow& r : trace) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", r.step, r.loss, r.spatial, r.temporal);
        out << buf;
    }
}

}  // namespace skanim
