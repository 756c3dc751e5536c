// SPDX-License-Identifier: Apache-2.0

#include "skanim/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace skanim {

NoiseSchedule build_schedule(int steps) {
    if (steps < 10) throw std::invalid_argument("build_schedule: need at least 10 steps");
    constexpr double s = 0.008;
    const double denom = std::cos(s * std::numbers::pi / (2.0 * (1.0 + s)));
    NoiseSchedule sched;
    sched.steps = steps;
    sched.alpha.resize(steps);
    sched.sigma.resize(steps);
    for (int t = 0; t < steps; t++) {
        double frac = (static_cast<double>(t) / steps + s) / (1.0 + s);
        double a = std::cos(frac * std::numbers::pi / 2.0) / denom;
        a = std::clamp(a, 1e-4, 1.0);
        sched.alpha[t] = a;
        sched.sigma[t] = std::sqrt(1.0 - a * a);
    }
    return sched;
}

LatentVideo LatentVideo::frame_slice(int f) const {
    if (f < 0 || f >= frames) throw std::out_of_range("frame_slice: frame index out of range");
    LatentVideo out(1, height, width);
    size_t n = static_cast<size_t>(height) * width;
    std::copy_n(values.begin() + static_cast<size_t>(f) * n, n, out.values.begin());
    return out;
}

LatentVideo add_noise(const LatentVideo& z0, int t, const LatentVideo& eps, const NoiseSchedule& sched) {
    if (t < 0 || t >= sched.steps) throw std::out_of_range("add_noise: timestep out of range");
    if (z0.frames != eps.frames || z0.height != eps.height || z0.width != eps.width)
        throw std::invalid_argument("add_noise: shape mismatch between z0 and eps");
    LatentVideo out(z0.frames, z0.height, z0.width);
    const double a = sched.alpha[t], s = sched.sigma[t];
    for (size_t i = 0; i < out.values.size(); i++) out.values[i] = a * z0.values[i] + s * eps.values[i];
    return out;
}

int sample_timestep(Rng& rng, const NoiseSchedule& sched) {
    std::uniform_int_distribution<int> dist(sched.t_min(), sched.t_max());
    return dist(rng);
}

LatentVideo sample_noise(Rng& rng, int frames, int height, int width) {
    LatentVideo out(frames, height, width);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : out.values) v = normal(rng);
    return out;
}

LatentVideo encode(const RasterVideo& video, int pool) {
    if (pool < 1) throw std::invalid_argument("encode: pool factor must be >= 1");
    const int f_count = video.frame_count();
    if (f_count == 0) throw std::invalid_argument("encode: empty video");
    const int h = video.height(), w = video.width();
    if (h % pool != 0 || w % pool != 0)
        throw std::invalid_argument("encode: raster shape not divisible by pool factor");

    LatentVideo out(f_count, h / pool, w / pool);
    const double inv = 1.0 / (pool * pool);
    for (int f = 0; f < f_count; f++) {
        const RasterFrame& frame = video.frames[f];
        for (int y = 0; y < out.height; y++)
            for (int x = 0; x < out.width; x++) {
                double sum = 0.0;
                for (int dy = 0; dy < pool; dy++)
                    for (int dx = 0; dx < pool; dx++) sum += frame.at(y * pool + dy, x * pool + dx);
                out.at(f, y, x) = 2.0 * sum * inv - 1.0;
            }
    }
    return out;
}

RasterVideo decode(const LatentVideo& latent, int pool) {
    RasterVideo out;
    out.frames.reserve(latent.frames);
    for (int f = 0; f < latent.frames; f++) {
        RasterFrame frame(latent.height * pool, latent.width * pool);
        for (int y = 0; y < frame.height; y++)
            for (int x = 0; x < frame.width; x++)
                frame.at(y, x) = (latent.at(f, y / pool, x / pool) + 1.0) / 2.0;
        out.frames.push_back(std::move(frame));
    }
    return out;
}

RasterFrame encode_transpose_frame(const LatentVideo& grad, int frame, int pool) {
    if (frame < 0 || frame >= grad.frames)
        throw std::out_of_range("encode_transpose_frame: frame index out of range");
    RasterFrame out(grad.height * pool, grad.width * pool);
    const double scale = 2.0 / (pool * pool);
    for (int y = 0; y < out.height; y++)
        for (int x = 0; x < out.width; x++)
            out.at(y, x) = scale * grad.at(frame, y / pool, x / pool);
    return out;
}

}  // namespace skanim
