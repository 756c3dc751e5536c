// SPDX-License-Identifier: Apache-2.0

#include "skanim/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace skanim {

namespace {

struct Vec2 {
    double x, y;
};

inline double stable_sigmoid(double s) {
    if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
    double e = std::exp(s);
    return e / (1.0 + e);
}

// Coverage beyond this sigmoid argument is below 4e-18 and is treated as zero.
constexpr double kCutoffSigma = 40.0;

struct FlatStroke {
    std::vector<Vec2> pts;                        // K polyline points
    std::vector<std::array<double, 4>> bernstein;  // per sample, weights of the 4 control points
    double half_width;
    // Inflated bounding box; pixels outside contribute exactly zero coverage.
    double bx0, by0, bx1, by1;
};

FlatStroke flatten(const CubicStroke& s, const SoftnessConfig& cfg) {
    const int k_samples = cfg.samples_per_curve;
    FlatStroke f;
    f.pts.resize(k_samples);
    f.bernstein.resize(k_samples);
    f.half_width = s.width / 2.0;

    double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
    for (int k = 0; k < k_samples; k++) {
        double t = static_cast<double>(k) / (k_samples - 1);
        double mt = 1.0 - t;
        std::array<double, 4> b = {mt * mt * mt, 3.0 * mt * mt * t, 3.0 * mt * t * t, t * t * t};
        double x = 0, y = 0;
        for (int j = 0; j < 4; j++) {
            x += b[j] * s.points[j].x;
            y += b[j] * s.points[j].y;
        }
        f.pts[k] = {x, y};
        f.bernstein[k] = b;
        min_x = std::min(min_x, x);
        min_y = std::min(min_y, y);
        max_x = std::max(max_x, x);
        max_y = std::max(max_y, y);
    }
    double margin = f.half_width + kCutoffSigma * cfg.tau;
    f.bx0 = min_x - margin;
    f.by0 = min_y - margin;
    f.bx1 = max_x + margin;
    f.by1 = max_y + margin;
    return f;
}

struct NearestHit {
    double dist;
    int seg;    // index of segment start point
    double u;   // clamped projection parameter in [0,1]
};

NearestHit nearest_on_polyline(const FlatStroke& f, Vec2 p) {
    NearestHit best{1e300, 0, 0.0};
    const int n_seg = static_cast<int>(f.pts.size()) - 1;
    for (int k = 0; k < n_seg; k++) {
        Vec2 a = f.pts[k], b = f.pts[k + 1];
        double ex = b.x - a.x, ey = b.y - a.y;
        double len2 = ex * ex + ey * ey;
        double u = 0.0;
        if (len2 > 0.0) u = std::clamp(((p.x - a.x) * ex + (p.y - a.y) * ey) / len2, 0.0, 1.0);
        double qx = a.x + u * ex - p.x;
        double qy = a.y + u * ey - p.y;
        double d2 = qx * qx + qy * qy;
        if (d2 < best.dist) {
            best.dist = d2;
            best.seg = k;
            best.u = u;
        }
    }
    best.dist = std::sqrt(best.dist);
    return best;
}

void validate(int height, int width, const SoftnessConfig& cfg) {
    if (height < 4 || width < 4) throw std::invalid_argument("raster dimensions must be >= 4");
    if (cfg.tau <= 0.0) throw std::invalid_argument("softness temperature must be > 0");
    if (cfg.samples_per_curve < 8) throw std::invalid_argument("samples_per_curve must be >= 8");
}

void validate_frame(const SketchFrame& frame) {
    if (frame.strokes.empty()) throw std::invalid_argument("cannot rasterize an empty frame");
    for (const CubicStroke& s : frame.strokes)
        if (!(s.width > 0.0)) throw std::invalid_argument("stroke width must be > 0");
}

}  // namespace

RasterFrame render(const SketchFrame& frame, int height, int width, const SoftnessConfig& cfg) {
    validate(height, width, cfg);
    validate_frame(frame);

    std::vector<FlatStroke> flats;
    flats.reserve(frame.strokes.size());
    for (const CubicStroke& s : frame.strokes) flats.push_back(flatten(s, cfg));

    RasterFrame out(height, width);
    for (int y = 0; y < height; y++) {
        double py = (y + 0.5) / height;
        for (int x = 0; x < width; x++) {
            double px = (x + 0.5) / width;
            double one_minus = 1.0;
            for (const FlatStroke& f : flats) {
                if (px < f.bx0 || px > f.bx1 || py < f.by0 || py > f.by1) continue;
                NearestHit hit = nearest_on_polyline(f, {px, py});
                double s = (f.half_width - hit.dist) / cfg.tau;
                if (s <= -kCutoffSigma) continue;
                one_minus *= 1.0 - stable_sigmoid(s);
            }
            out.at(y, x) = 1.0 - one_minus;
        }
    }
    return out;
}

RasterVideo render_video(const AnimatedSketch& anim, int height, int width, const SoftnessConfig& cfg) {
    RasterVideo out;
    out.frames.reserve(anim.frames.size());
    for (const SketchFrame& f : anim.frames) out.frames.push_back(render(f, height, width, cfg));
    return out;
}

FrameGradient render_vjp(const SketchFrame& frame, int height, int width, const SoftnessConfig& cfg,
                         const RasterFrame& upstream) {
    validate(height, width, cfg);
    validate_frame(frame);
    if (upstream.height != height || upstream.width != width)
        throw std::invalid_argument("render_vjp: upstream shape mismatch");

    const int n_strokes = frame.stroke_count();
    const size_t n_px = static_cast<size_t>(height) * width;

    std::vector<FlatStroke> flats;
    flats.reserve(n_strokes);
    for (const CubicStroke& s : frame.strokes) flats.push_back(flatten(s, cfg));

    // Pass 1: per (pixel, stroke) coverage terms and nearest-segment data,
    // then leave-one-out products of (1 - q_j) per pixel.
    std::vector<double> q(n_px * n_strokes, 0.0);
    std::vector<NearestHit> hits(n_px * n_strokes, NearestHit{0.0, -1, 0.0});
    std::vector<double> loo(n_px * n_strokes, 0.0);  // prod_{j != i} (1 - q_j)

    std::vector<double> one_minus(n_strokes);
    for (int y = 0; y < height; y++) {
        double py = (y + 0.5) / height;
        for (int x = 0; x < width; x++) {
            double px = (x + 0.5) / width;
            size_t base = (static_cast<size_t>(y) * width + x) * n_strokes;
            for (int i = 0; i < n_strokes; i++) {
                const FlatStroke& f = flats[i];
                double qi = 0.0;
                if (!(px < f.bx0 || px > f.bx1 || py < f.by0 || py > f.by1)) {
                    NearestHit hit = nearest_on_polyline(f, {px, py});
                    double s = (f.half_width - hit.dist) / cfg.tau;
                    if (s > -kCutoffSigma) {
                        qi = stable_sigmoid(s);
                        hits[base + i] = hit;
                    }
                }
                q[base + i] = qi;
                one_minus[i] = 1.0 - qi;
            }
            // Prefix/suffix products avoid dividing by (1 - q_i) near saturation.
            double prefix = 1.0;
            for (int i = 0; i < n_strokes; i++) {
                loo[base + i] = prefix;
                prefix *= one_minus[i];
            }
            double suffix = 1.0;
            for (int i = n_strokes - 1; i >= 0; i--) {
                loo[base + i] *= suffix;
                suffix *= one_minus[i];
            }
        }
    }

    // Pass 2: stroke-major accumulation; strokes are independent, pixel
    // order is fixed, so results do not depend on scheduling.
    FrameGradient grad(n_strokes, StrokeGradient{});
    for (int i = 0; i < n_strokes; i++) {
        const FlatStroke& f = flats[i];
        StrokeGradient& g = grad[i];
        for (int y = 0; y < height; y++) {
            double py = (y + 0.5) / height;
            for (int x = 0; x < width; x++) {
                size_t px_idx = static_cast<size_t>(y) * width + x;
                const NearestHit& hit = hits[px_idx * n_strokes + i];
                if (hit.seg < 0) continue;
                double up = upstream.values[px_idx];
                if (up == 0.0) continue;
                double qi = q[px_idx * n_strokes + i];
                // c = 1 - (1-q_i) * loo  =>  dc/dq_i = loo
                double g_q = up * loo[px_idx * n_strokes + i];
                double g_d = g_q * qi * (1.0 - qi) * (-1.0 / cfg.tau);
                if (g_d == 0.0) continue;

                double pxc = (x + 0.5) / width;
                Vec2 a = f.pts[hit.seg], b = f.pts[hit.seg + 1];
                double nx_ = a.x + hit.u * (b.x - a.x) - pxc;
                double ny_ = a.y + hit.u * (b.y - a.y) - py;
                double d = hit.dist;
                if (d < 1e-12) continue;  // subgradient 0 exactly on the curve
                // d = |nearest - p|; envelope theorem lets u and the segment
                // choice be treated as constants.
                double dx = nx_ / d, dy = ny_ / d;
                double ga_x = g_d * dx * (1.0 - hit.u), ga_y = g_d * dy * (1.0 - hit.u);
                double gb_x = g_d * dx * hit.u, gb_y = g_d * dy * hit.u;

                const std::array<double, 4>& ba = f.bernstein[hit.seg];
                const std::array<double, 4>& bb = f.bernstein[hit.seg + 1];
                for (int j = 0; j < 4; j++) {
                    g[j].x += ga_x * ba[j] + gb_x * bb[j];
                    g[j].y += ga_y * ba[j] + gb_y * bb[j];
                }
            }
        }
    }
    return grad;
}

void write_pgm(const RasterFrame& frame, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "P5\n" << frame.width << " " << frame.height << "\n255\n";
    std::vector<unsigned char> row(frame.width);
    for (int y = 0; y < frame.height; y++) {
        for (int x = 0; x < frame.width; x++) {
            double v = std::clamp(frame.at(y, x), 0.0, 1.0);
            row[x] = static_cast<unsigned char>(std::lround(255.0 * (1.0 - v)));
        }
        out.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

RasterFrame read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error("not a binary PGM (P5): " + path);
    auto next_int = [&]() {
        // Skip whitespace and '#' comment lines between header fields.
        while (true) {
            int c = in.peek();
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        int v;
        in >> v;
        return v;
    };
    int w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw std::runtime_error("unsupported PGM header in " + path);
    in.get();  // single whitespace after maxval
    RasterFrame frame(h, w);
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw std::runtime_error("truncated PGM payload in " + path);
    for (size_t i = 0; i < buf.size(); i++)
        frame.values[i] = 1.0 - static_cast<double>(buf[i]) / maxval;
    return frame;
}

void write_video_pgm(const RasterVideo& video, const std::string& dir, const std::string& prefix) {
    std::filesystem::create_directories(dir);
    char name[64];
    for (int f = 0; f < video.frame_count(); f++) {
        std::snprintf(name, sizeof(name), "%s%04d.pgm", prefix.c_str(), f);
        write_pgm(video.frames[f], (std::filesystem::path(dir) / name).string());
    }
}

RasterVideo read_video_pgm(const std::string& dir) {
    std::vector<std::filesystem::path> paths;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".pgm") paths.push_back(entry.path());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw std::runtime_error("no .pgm frames in " + dir);
    RasterVideo video;
    for (const auto& p : paths) video.frames.push_back(read_pgm(p.string()));
    for (const RasterFrame& f : video.frames)
        if (f.height != video.height() || f.width != video.width())
            throw std::runtime_error("PGM frames in " + dir + " have mixed shapes");
    return video;
}

}  // namespace skanim
