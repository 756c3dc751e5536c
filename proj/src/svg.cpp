// SPDX-License-Identifier: Apache-2.0

#include "skanim/svg.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <optional>

namespace skanim {

namespace {

int line_of(const std::string& text, size_t pos) {
    return 1 + static_cast<int>(std::count(text.begin(), text.begin() + std::min(pos, text.size()), '\n'));
}

// Returns the value of attribute `name` inside a tag body, if present.
std::optional<std::string> find_attr(const std::string& tag, const std::string& name) {
    size_t pos = 0;
    while ((pos = tag.find(name, pos)) != std::string::npos) {
        // Must be a standalone attribute name followed by '='.
        bool start_ok = pos == 0 || std::isspace(static_cast<unsigned char>(tag[pos - 1]));
        size_t after = pos + name.size();
        while (after < tag.size() && std::isspace(static_cast<unsigned char>(tag[after]))) after++;
        if (!start_ok || after >= tag.size() || tag[after] != '=') {
            pos += name.size();
            continue;
        }
        after++;
        while (after < tag.size() && std::isspace(static_cast<unsigned char>(tag[after]))) after++;
        if (after >= tag.size() || (tag[after] != '"' && tag[after] != '\'')) return std::nullopt;
        char quote = tag[after];
        size_t end = tag.find(quote, after + 1);
        if (end == std::string::npos) return std::nullopt;
        return tag.substr(after + 1, end - after - 1);
    }
    return std::nullopt;
}

struct NumberScanner {
    const char* cur;
    const char* end;

    void skip_separators() {
        while (cur < end && (std::isspace(static_cast<unsigned char>(*cur)) || *cur == ',')) cur++;
    }

    bool at_number() {
        skip_separators();
        if (cur >= end) return false;
        char c = *cur;
        return std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '+' || c == '.';
    }

    double next_number(int line) {
        skip_separators();
        char* after = nullptr;
        double v = std::strtod(cur, &after);
        if (after == cur) throw SvgParseError("expected number in path data", line);
        cur = after;
        if (!std::isfinite(v)) throw SvgParseError("non-finite coordinate in path data", line);
        return v;
    }
};

struct ViewBox {
    double min_x, min_y, width, height;
};

ViewBox parse_view_box(const std::string& value, int line) {
    NumberScanner sc{value.data(), value.data() + value.size()};
    double v[4];
    for (double& x : v) {
        if (!sc.at_number()) throw SvgParseError("viewBox needs four numbers", line);
        x = sc.next_number(line);
    }
    if (v[2] <= 0 || v[3] <= 0) throw SvgParseError("viewBox extent must be positive", line);
    return {v[0], v[1], v[2], v[3]};
}

ControlPoint normalize(const ViewBox& vb, double x, double y) {
    return {(x - vb.min_x) / vb.width, (y - vb.min_y) / vb.height};
}

void append_line_as_cubic(std::vector<CubicStroke>& out, ControlPoint a, ControlPoint b, double width) {
    CubicStroke s;
    s.points[0] = a;
    s.points[1] = {a.x + (b.x - a.x) / 3.0, a.y + (b.y - a.y) / 3.0};
    s.points[2] = {a.x + 2.0 * (b.x - a.x) / 3.0, a.y + 2.0 * (b.y - a.y) / 3.0};
    s.points[3] = b;
    s.width = width;
    out.push_back(s);
}

void parse_path_data(const std::string& d, const ViewBox& vb, double width, int line,
                     std::vector<CubicStroke>& out) {
    NumberScanner sc{d.data(), d.data() + d.size()};
    double cx = 0, cy = 0;  // current point, viewBox coordinates
    bool have_current = false;
    char cmd = 0;

    while (true) {
        sc.skip_separators();
        if (sc.cur >= sc.end) break;
        char c = *sc.cur;
        if (std::isalpha(static_cast<unsigned char>(c))) {
            if (c != 'M' && c != 'm' && c != 'C' && c != 'c' && c != 'L' && c != 'l')
                throw SvgParseError(std::string("unsupported command ") + c, line);
            cmd = c;
            sc.cur++;
            if (cmd == 'M' || cmd == 'm') {
                double x = sc.next_number(line), y = sc.next_number(line);
                if ((cmd == 'm') && have_current) { cx += x; cy += y; }
                else { cx = x; cy = y; }
                have_current = true;
                // Per SVG, further pairs after a moveto are implicit linetos.
                cmd = (cmd == 'M') ? 'L' : 'l';
            }
            continue;
        }
        if (cmd == 0) throw SvgParseError("path data must start with a command", line);
        if (!have_current) throw SvgParseError("drawing command before any moveto", line);

        if (cmd == 'C' || cmd == 'c') {
            double n[6];
            for (double& v : n) v = sc.next_number(line);
            if (cmd == 'c')
                for (int i = 0; i < 6; i += 2) { n[i] += cx; n[i + 1] += cy; }
            CubicStroke s;
            s.points[0] = normalize(vb, cx, cy);
            s.points[1] = normalize(vb, n[0], n[1]);
            s.points[2] = normalize(vb, n[2], n[3]);
            s.points[3] = normalize(vb, n[4], n[5]);
            s.width = width;
            out.push_back(s);
            cx = n[4];
            cy = n[5];
        } else {  // 'L' or 'l'
            double x = sc.next_number(line), y = sc.next_number(line);
            if (cmd == 'l') { x += cx; y += cy; }
            append_line_as_cubic(out, normalize(vb, cx, cy), normalize(vb, x, y), width);
            cx = x;
            cy = y;
        }
    }
}

void fmt_coord(std::string& out, double v) {
    v = std::clamp(v, -0.5, 1.5);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    out += buf;
}

void append_path(std::string& out, const CubicStroke& s) {
    out += "  <path d=\"M ";
    fmt_coord(out, s.points[0].x);
    out += ' ';
    fmt_coord(out, s.points[0].y);
    out += " C ";
    for (int i = 1; i < 4; i++) {
        fmt_coord(out, s.points[i].x);
        out += ' ';
        fmt_coord(out, s.points[i].y);
        if (i < 3) out += ", ";
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "\" fill=\"none\" stroke=\"black\" stroke-width=\"%.6f\"/>\n", s.width);
    out += buf;
}

}  // namespace

SketchFrame parse_svg(const std::string& text) {
    size_t svg_pos = text.find("<svg");
    if (svg_pos == std::string::npos)
        throw SvgParseError("malformed header: no <svg> element", 1);
    size_t svg_end = text.find('>', svg_pos);
    if (svg_end == std::string::npos)
        throw SvgParseError("malformed header: unterminated <svg> tag", line_of(text, svg_pos));

    std::string svg_tag = text.substr(svg_pos, svg_end - svg_pos);
    auto vb_attr = find_attr(svg_tag, "viewBox");
    if (!vb_attr) throw SvgParseError("missing viewBox", line_of(text, svg_pos));
    ViewBox vb = parse_view_box(*vb_attr, line_of(text, svg_pos));

    SketchFrame frame;
    size_t pos = svg_end;
    while ((pos = text.find("<path", pos)) != std::string::npos) {
        size_t tag_end = text.find('>', pos);
        if (tag_end == std::string::npos)
            throw SvgParseError("unterminated <path> tag", line_of(text, pos));
        std::string tag = text.substr(pos, tag_end - pos);
        int line = line_of(text, pos);

        auto d = find_attr(tag, "d");
        if (!d) throw SvgParseError("path without d attribute", line);
        double width = 0.012;
        if (auto w = find_attr(tag, "stroke-width")) {
            char* end = nullptr;
            width = std::strtod(w->c_str(), &end);
            if (end == w->c_str() || width <= 0)
                throw SvgParseError("invalid stroke-width", line);
            width /= vb.width;
        }
        parse_path_data(*d, vb, width, line, frame.strokes);
        pos = tag_end;
    }
    if (frame.strokes.empty())
        throw SvgParseError("no strokes found", line_of(text, text.size()));
    return frame;
}

std::string write_svg(const SketchFrame& frame) {
    if (frame.strokes.empty())
        throw std::invalid_argument("write_svg: frame has no strokes");
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\">\n";
    for (const CubicStroke& s : frame.strokes) append_path(out, s);
    out += "</svg>\n";
    return out;
}

std::string write_animated_svg(const AnimatedSketch& anim, int fps) {
    if (anim.frames.empty())
        throw std::invalid_argument("write_animated_svg: no frames");
    if (fps <= 0)
        throw std::invalid_argument("write_animated_svg: fps must be positive");

    const int f_count = anim.frame_count();
    const double dur = static_cast<double>(f_count) / fps;
    char buf[160];

    std::string out;
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\" data-fps=\"%d\">\n", fps);
    out += buf;

    for (int k = 0; k < f_count; k++) {
        std::snprintf(buf, sizeof(buf), "<g id=\"frame-%d\"%s>\n", k,
                      (f_count > 1 && k > 0) ? " display=\"none\"" : "");
        out += buf;
        for (const CubicStroke& s : anim.frames[k].strokes) append_path(out, s);
        if (f_count > 1) {
            // Discrete per-frame visibility: frame k shows during [k/F, (k+1)/F).
            std::string key_times, values;
            if (k == 0) {
                std::snprintf(buf, sizeof(buf), "0;%.6f", 1.0 / f_count);
                key_times = buf;
                values = "inline;none";
            } else if (k == f_count - 1) {
                std::snprintf(buf, sizeof(buf), "0;%.6f", static_cast<double>(k) / f_count);
                key_times = buf;
                values = "none;inline";
            } else {
                std::snprintf(buf, sizeof(buf), "0;%.6f;%.6f", static_cast<double>(k) / f_count,
                              static_cast<double>(k + 1) / f_count);
                key_times = buf;
                values = "none;inline;none";
            }
            std::snprintf(buf, sizeof(buf),
                          "  <animate attributeName=\"display\" repeatCount=\"indefinite\" "
                          "dur=\"%.6fs\" calcMode=\"discrete\" keyTimes=\"%s\" values=\"%s\"/>\n",
                          dur, key_times.c_str(), values.c_str());
            out += buf;
        }
        out += "</g>\n";
    }
    out += "</svg>\n";
    return out;
}

AnimatedSketch parse_animated_svg(const std::string& text, int* fps_out) {
    size_t svg_pos = text.find("<svg");
    if (svg_pos == std::string::npos)
        throw SvgParseError("malformed header: no <svg> element", 1);
    size_t svg_end = text.find('>', svg_pos);
    if (svg_end == std::string::npos)
        throw SvgParseError("malformed header: unterminated <svg> tag", line_of(text, svg_pos));
    std::string svg_tag = text.substr(svg_pos, svg_end - svg_pos);
    auto vb_attr = find_attr(svg_tag, "viewBox");
    if (!vb_attr) throw SvgParseError("missing viewBox", line_of(text, svg_pos));
    ViewBox vb = parse_view_box(*vb_attr, line_of(text, svg_pos));
    if (fps_out) {
        *fps_out = 0;
        if (auto fps = find_attr(svg_tag, "data-fps")) *fps_out = std::atoi(fps->c_str());
    }

    AnimatedSketch anim;
    size_t pos = svg_end;
    while ((pos = text.find("<g ", pos)) != std::string::npos) {
        size_t open_end = text.find('>', pos);
        size_t close = text.find("</g>", pos);
        if (open_end == std::string::npos || close == std::string::npos)
            throw SvgParseError("unterminated <g> element", line_of(text, pos));
        SketchFrame frame;
        size_t p = open_end;
        while (true) {
            p = text.find("<path", p);
            if (p == std::string::npos || p > close) break;
            size_t tag_end = text.find('>', p);
            if (tag_end == std::string::npos)
                throw SvgParseError("unterminated <path> tag", line_of(text, p));
            std::string tag = text.substr(p, tag_end - p);
            int line = line_of(text, p);
            auto d = find_attr(tag, "d");
            if (!d) throw SvgParseError("path without d attribute", line);
            double width = 0.012;
            if (auto w = find_attr(tag, "stroke-width")) width = std::strtod(w->c_str(), nullptr) / vb.width;
            parse_path_data(*d, vb, width, line, frame.strokes);
            p = tag_end;
        }
        if (!frame.strokes.empty()) anim.frames.push_back(std::move(frame));
        pos = close + 4;
    }
    if (anim.frames.empty())
        throw SvgParseError("no frame groups found", line_of(text, text.size()));
    return anim;
}

AnimatedSketch replicate_frames(const SketchFrame& frame, int f_count) {
    if (f_count < 1)
        throw std::invalid_argument("replicate_frames: frame count must be >= 1");
    AnimatedSketch anim;
    anim.frames.assign(static_cast<size_t>(f_count), frame);
    return anim;
}

}  // namespace skanim
