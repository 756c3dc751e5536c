// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <vector>

#include "skanim/denoiser.hpp"
#include "skanim/raster.hpp"

namespace skanim {

struct StageConfig {
    int steps                   = 500;
    int batch_size              = 1;
    double lr                   = 1e-3;
    unsigned long long seed     = 0;
    std::string prompt;              // y_a for stage 1, y_m for stage 2
    int resolution              = 64;  // square raster H = W
    int pool                    = 2;
    SoftnessConfig softness;
    int rank                    = 4;
    double lora_alpha           = 1.0;
    int schedule_steps          = 1000;
    int heldout_draws           = 256;
    unsigned long long heldout_seed = 0x48454c44ULL;  // fixed, separate from training
};

struct TraceRow {
    int step;
    double loss;
    double spatial;
    double temporal;
};

struct AppearanceResult {
    AdapterSet adapters;  // A-LoRAs on the four spatial keys
    std::vector<TraceRow> trace;
    double heldout_loss;
    double untrained_heldout_loss;
};

// Stage 1: fit A-LoRAs (and the prompt row, when newly registered) to the
// rendered sketch with single-frame spatial losses. W0 stays frozen.
AppearanceResult train_appearance(const SketchFrame& sketch, const StageConfig& cfg,
                                  DenoiserWeights& weights);

struct MotionResult {
    AdapterSet video_appearance;  // A'-LoRAs (archived after this stage)
    AdapterSet motion;            // M-LoRAs; also carries the y_m prompt row if new
    std::vector<TraceRow> trace;
    double heldout_temporal_loss;
    double untrained_heldout_loss;
};

// Stage 2: per step, one spatial update of the A'-LoRAs on a random frame
// (temporal block bypassed) and one full-clip temporal update of the
// M-LoRAs through the A'-adapted spatial path. Requires F >= 2.
MotionResult train_motion(const RasterVideo& video, const StageConfig& cfg, DenoiserWeights& weights);

// Held-out eps-prediction loss over a fixed set of (t, eps) draws.
double heldout_eps_loss(const LatentVideo& z0, const ConditioningContext& ctx,
                        const DenoiserWeights& weights, const std::vector<Attachment>& adapters,
                        const NoiseSchedule& sched, int draws, unsigned long long seed);

enum class MotionKind { kTranslate, kBounce, kJump, kScalePulse };

MotionKind motion_kind_from_name(const std::string& name);
const char* motion_kind_name(MotionKind kind);

struct SyntheticParams {
    enum Shape { kSquare, kDisk } shape = kSquare;
    double size      = 0.22;  // edge length / diameter, canvas units
    double start_x   = 0.25;
    double start_y   = 0.5;
    double amplitude = 0.5;
    double jitter    = 0.0;  // uniform start-position jitter drawn from rng
};

struct SyntheticVideo {
    RasterVideo video;
    std::vector<std::array<double, 2>> track;  // analytic per-frame centroid (x, y)
};

// Per-frame center positions and shape sizes (sizes vary only for
// scale-pulse). Deterministic; jitter is the caller's business.
struct MotionPath {
    std::vector<std::array<double, 2>> track;
    std::vector<double> sizes;
};

MotionPath make_motion_path(MotionKind kind, int frames, const SyntheticParams& params);

// Analytic moving-shape clip with exact per-pixel coverage; the returned
// centroid track is the metric ground truth.
SyntheticVideo make_synthetic_video(MotionKind kind, int frames, int height, int width,
                                    const SyntheticParams& params, Rng& rng);

// Stroke-sketch fixtures (unit canvas, cubic strokes only).
SketchFrame make_box_sketch(double cx, double cy, double size, double width);
SketchFrame make_ring_sketch(double cx, double cy, double diameter, double width);
SketchFrame make_wedge_sketch(double cx, double cy, double size, double width);

// Rigid per-frame translation of a sketch along a track of centroid
// positions; used to build stroke-domain clips.
AnimatedSketch translate_sketch_along(const SketchFrame& sketch,
                                      const std::vector<std::array<double, 2>>& track);

void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path);

}  // namespace skanim
