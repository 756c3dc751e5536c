// SPDX-License-Identifier: Apache-2.0

#include "skanim/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace skanim {

namespace {

constexpr int kPoolGrid = 8;

// 8x8 average-pooled, mean-centered frame vector.
std::vector<double> pooled_centered(const RasterFrame& frame) {
    if (frame.height % kPoolGrid != 0 || frame.width % kPoolGrid != 0)
        throw std::invalid_argument("metrics: raster shape must be divisible by 8");
    const int by = frame.height / kPoolGrid, bx = frame.width / kPoolGrid;
    std::vector<double> v(kPoolGrid * kPoolGrid, 0.0);
    for (int gy = 0; gy < kPoolGrid; gy++)
        for (int gx = 0; gx < kPoolGrid; gx++) {
            double sum = 0.0;
            for (int y = 0; y < by; y++)
                for (int x = 0; x < bx; x++) sum += frame.at(gy * by + y, gx * bx + x);
            v[gy * kPoolGrid + gx] = sum / (by * bx);
        }
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= v.size();
    for (double& x : v) x -= mean;
    return v;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); i++) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 1e-24 || nb <= 1e-24) {
        std::fprintf(stderr, "skanim: warning: all-zero pooled vector, cosine score set to 0\n");
        return 0.0;
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Pearson correlation of two 1-d tracks; 0 if either is (near-)constant.
double pearson_or_zero(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; i++) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < n; i++) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va <= 1e-18 || vb <= 1e-18) return 0.0;
    return cov / (std::sqrt(va) * std::sqrt(vb));
}

bool axis_moves(const std::vector<double>& a) {
    double mn = a[0], mx = a[0];
    for (double v : a) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    return mx - mn > 1e-9;
}

}  // namespace

double appearance_alignment(const RasterVideo& frames, const RasterFrame& sketch) {
    if (frames.frame_count() == 0) throw std::invalid_argument("appearance_alignment: empty video");
    if (frames.height() != sketch.height || frames.width() != sketch.width)
        throw std::invalid_argument("appearance_alignment: resolution mismatch");
    std::vector<double> ref = pooled_centered(sketch);
    double total = 0.0;
    for (const RasterFrame& f : frames.frames) total += cosine(pooled_centered(f), ref);
    return total / frames.frame_count();
}

double temporal_consistency(const RasterVideo& frames) {
    if (frames.frame_count() < 2) throw std::invalid_argument("temporal_consistency: need F >= 2");
    double total = 0.0;
    std::vector<double> prev = pooled_centered(frames.frames[0]);
    for (int f = 1; f < frames.frame_count(); f++) {
        std::vector<double> cur = pooled_centered(frames.frames[f]);
        total += cosine(prev, cur);
        prev = std::move(cur);
    }
    return total / (frames.frame_count() - 1);
}

std::vector<std::array<double, 2>> ink_centroid_track(const RasterVideo& frames) {
    std::vector<std::array<double, 2>> track;
    track.reserve(frames.frame_count());
    for (const RasterFrame& f : frames.frames) {
        double mass = 0.0, mx = 0.0, my = 0.0;
        for (int y = 0; y < f.height; y++)
            for (int x = 0; x < f.width; x++) {
                double v = f.at(y, x);
                mass += v;
                mx += v * (x + 0.5) / f.width;
                my += v * (y + 0.5) / f.height;
            }
        if (mass <= 1e-12) {
            std::fprintf(stderr, "skanim: warning: frame with no ink, centroid set to center\n");
            track.push_back({0.5, 0.5});
        } else {
            track.push_back({mx / mass, my / mass});
        }
    }
    return track;
}

double motion_alignment_tracks(const std::vector<std::array<double, 2>>& track,
                               const std::vector<std::array<double, 2>>& ref_track) {
    if (track.size() != ref_track.size())
        throw std::invalid_argument("motion_alignment: track length mismatch");
    if (track.size() < 2) throw std::invalid_argument("motion_alignment: need F >= 2");
    std::vector<double> ax, ay, rx, ry;
    for (size_t i = 0; i < track.size(); i++) {
        ax.push_back(track[i][0]);
        ay.push_back(track[i][1]);
        rx.push_back(ref_track[i][0]);
        ry.push_back(ref_track[i][1]);
    }
    return 0.5 * (pearson_or_zero(ax, rx) + pearson_or_zero(ay, ry));
}

double motion_alignment(const RasterVideo& frames, const std::vector<std::array<double, 2>>& ref_track) {
    return motion_alignment_tracks(ink_centroid_track(frames), ref_track);
}

double centroid_track_pearson(const std::vector<std::array<double, 2>>& track,
                              const std::vector<std::array<double, 2>>& ref_track) {
    if (track.size() != ref_track.size())
        throw std::invalid_argument("centroid_track_pearson: track length mismatch");
    std::vector<double> ax, ay, rx, ry;
    for (size_t i = 0; i < track.size(); i++) {
        ax.push_back(track[i][0]);
        ay.push_back(track[i][1]);
        rx.push_back(ref_track[i][0]);
        ry.push_back(ref_track[i][1]);
    }
    double total = 0.0;
    int axes = 0;
    if (axis_moves(rx)) {
        total += pearson_or_zero(ax, rx);
        axes++;
    }
    if (axis_moves(ry)) {
        total += pearson_or_zero(ay, ry);
        axes++;
    }
    if (axes == 0) throw std::invalid_argument("centroid_track_pearson: reference track is constant");
    return total / axes;
}

void write_track_csv(const std::vector<std::array<double, 2>>& track, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "frame,cx,cy\n";
    char buf[96];
    for (size_t f = 0; f < track.size(); f++) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", f, track[f][0], track[f][1]);
        out << buf;
    }
}

std::vector<std::array<double, 2>> read_track_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("frame,", 0) != 0)
        throw std::runtime_error("bad track CSV header in " + path);
    std::vector<std::array<double, 2>> track;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        std::getline(row, cell, ',');
        std::array<double, 2> p{};
        std::getline(row, cell, ',');
        p[0] = std::stod(cell);
        std::getline(row, cell, ',');
        p[1] = std::stod(cell);
        track.push_back(p);
    }
    if (track.empty()) throw std::runtime_error("empty track CSV: " + path);
    return track;
}

}  // namespace skanim
