// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <vector>

#include "skanim/svg.hpp"

namespace skanim {

// Grayscale grid; internally 1 = ink, 0 = background. Image export
// inverts to dark-on-white.
struct RasterFrame {
    int height = 0;
    int width  = 0;
    std::vector<double> values;  // row-major, height*width, in [0,1]

    RasterFrame() = default;
    RasterFrame(int h, int w) : height(h), width(w), values(static_cast<size_t>(h) * w, 0.0) {}

    double& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
    double at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
};

struct RasterVideo {
    std::vector<RasterFrame> frames;

    int frame_count() const { return static_cast<int>(frames.size()); }
    int height() const { return frames.empty() ? 0 : frames.front().height; }
    int width() const { return frames.empty() ? 0 : frames.front().width; }
};

// Soft-coverage controls. tau is the sigmoid temperature in canvas units;
// samples_per_curve is the Bezier flattening density.
struct SoftnessConfig {
    double tau           = 0.006;  // ~1.5 px at 256x256
    int samples_per_curve = 32;
};

// Per-pixel ink coverage: c = 1 - prod_i (1 - sigmoid((w_i/2 - d_i)/tau))
// where d_i is the distance to stroke i's flattened polyline.
RasterFrame render(const SketchFrame& frame, int height, int width, const SoftnessConfig& cfg);

RasterVideo render_video(const AnimatedSketch& anim, int height, int width, const SoftnessConfig& cfg);

// Gradient of one stroke's four control points (x and y per point).
using StrokeGradient = std::array<ControlPoint, 4>;
using FrameGradient  = std::vector<StrokeGradient>;

// Reverse-mode pull-back: d<upstream, render(frame)>/d(control points),
// analytic through the soft-OR, sigmoid, point-to-segment distance and the
// Bezier flattening map. `upstream` must match the raster shape.
FrameGradient render_vjp(const SketchFrame& frame, int height, int width, const SoftnessConfig& cfg,
                         const RasterFrame& upstream);

// Binary PGM (P5, maxval 255), ink rendered dark on white.
void write_pgm(const RasterFrame& frame, const std::string& path);
RasterFrame read_pgm(const std::string& path);

// One file per frame: <dir>/<prefix><index>.pgm with a zero-padded index.
void write_video_pgm(const RasterVideo& video, const std::string& dir, const std::string& prefix);
RasterVideo read_video_pgm(const std::string& dir);

}  // namespace skanim
