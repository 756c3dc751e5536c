// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace skanim {

// Geometry lives on the unit square; coordinates are normalized by the
// source viewBox at parse time. Values may drift outside [0,1] while a
// sketch is being optimized; serialization clamps to [-0.5, 1.5].
struct ControlPoint {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const ControlPoint&, const ControlPoint&) = default;
};

// One cubic Bezier segment: exactly four control points.
struct CubicStroke {
    ControlPoint points[4];
    double width   = 0.012;  // canvas units, > 0
    double opacity = 1.0;    // fixed, not optimized

    friend bool operator==(const CubicStroke&, const CubicStroke&) = default;
};

struct SketchFrame {
    std::vector<CubicStroke> strokes;  // ordered, N >= 1

    int stroke_count() const { return static_cast<int>(strokes.size()); }

    friend bool operator==(const SketchFrame&, const SketchFrame&) = default;
};

// F frames sharing one stroke layout (same N, same per-stroke widths).
struct AnimatedSketch {
    std::vector<SketchFrame> frames;

    int frame_count() const { return static_cast<int>(frames.size()); }
    int stroke_count() const { return frames.empty() ? 0 : frames.front().stroke_count(); }
};

class SvgParseError : public std::runtime_error {
public:
    SvgParseError(const std::string& msg, int line)
        : std::runtime_error("svg parse error (line " + std::to_string(line) + "): " + msg),
          line_(line) {}

    int line() const { return line_; }

private:
    int line_;
};

// Parses the documented SVG subset: <svg> with a viewBox, <path> elements
// only, commands M/m, C/c, L/l. Lines are promoted to degenerate cubics
// with interior points at 1/3 and 2/3. Anything else throws SvgParseError
// naming the offending command and line.
SketchFrame parse_svg(const std::string& text);

// Deterministic output, 6 decimal places, coordinates clamped to [-0.5, 1.5].
// parse_svg(write_svg(f)) == f up to 1e-6 per coordinate for in-range frames.
std::string write_svg(const SketchFrame& frame);

// One <g id="frame-k"> per frame with a discrete visibility animation at
// `fps`; cycle duration is frames/fps seconds.
std::string write_animated_svg(const AnimatedSketch& anim, int fps);

// Inverse of write_animated_svg (geometry up to 6-decimal rounding).
// Returns the recovered animation; fps_out receives the encoded rate.
AnimatedSketch parse_animated_svg(const std::string& text, int* fps_out = nullptr);

// F independent deep copies of `frame`. F == 0 is an argument error.
AnimatedSketch replicate_frames(const SketchFrame& frame, int f_count);

}  // namespace skanim
