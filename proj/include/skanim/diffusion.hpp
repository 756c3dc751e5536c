// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <vector>

#include "skanim/raster.hpp"

namespace skanim {

using Rng = std::mt19937_64;

// Variance-preserving tables: alpha[t]^2 + sigma[t]^2 = 1 for every t.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> alpha;
    std::vector<double> sigma;

    // Timesteps are drawn uniformly from [t_min(), t_max()]; the 2% trim
    // avoids the degenerate all-signal / all-noise endpoints.
    int t_min() const { return static_cast<int>(0.02 * steps); }
    int t_max() const { return static_cast<int>(0.98 * steps); }
};

// Cosine schedule, s = 0.008:
//   alpha_t = cos((t/T + s)/(1 + s) * pi/2) / cos(s*pi/(2(1+s))), clipped to [1e-4, 1].
NoiseSchedule build_schedule(int steps);

// Single-channel latent grid, F x h x w, values in [-1, 1] for encoded video.
struct LatentVideo {
    int frames = 0;
    int height = 0;
    int width  = 0;
    std::vector<double> values;

    LatentVideo() = default;
    LatentVideo(int f, int h, int w)
        : frames(f), height(h), width(w), values(static_cast<size_t>(f) * h * w, 0.0) {}

    double& at(int f, int y, int x) {
        return values[(static_cast<size_t>(f) * height + y) * width + x];
    }
    double at(int f, int y, int x) const {
        return values[(static_cast<size_t>(f) * height + y) * width + x];
    }
    size_t size() const { return values.size(); }

    LatentVideo frame_slice(int f) const;
};

// z_t = alpha_t * z0 + sigma_t * eps, elementwise.
LatentVideo add_noise(const LatentVideo& z0, int t, const LatentVideo& eps, const NoiseSchedule& sched);

// Uniform over {t_min, ..., t_max}.
int sample_timestep(Rng& rng, const NoiseSchedule& sched);

// Standard normal draws of the given shape.
LatentVideo sample_noise(Rng& rng, int frames, int height, int width);

// Fixed linear encoder: pool x pool average pool per frame, then v -> 2v - 1.
// decode is the exact right-inverse on the pooled grid.
LatentVideo encode(const RasterVideo& video, int pool = 2);
RasterVideo decode(const LatentVideo& latent, int pool = 2);

// Adjoint of encode's linear part; carries latent-space gradients back to
// raster space (the SDS chain rule never needs the affine constant).
RasterFrame encode_transpose_frame(const LatentVideo& grad, int frame, int pool = 2);

}  // namespace skanim
