// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <random>

#include "skanim/svg.hpp"

using namespace skanim;

namespace {

SketchFrame make_random_frame(unsigned seed, int n_strokes) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> coord(0.05, 0.95);
    SketchFrame f;
    for (int i = 0; i < n_strokes; i++) {
        CubicStroke s;
        for (ControlPoint& p : s.points) p = {coord(rng), coord(rng)};
        s.width = 0.01 + 0.02 * coord(rng);
        f.strokes.push_back(s);
    }
    return f;
}

}  // namespace

TEST_CASE("parse_svg transcribes a single cubic path") {
    std::string svg =
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\">\n"
        "<path d=\"M 0 0 C 0.2 0.1, 0.6 0.1, 1 0\"/>\n"
        "</svg>\n";
    SketchFrame f = parse_svg(svg);
    REQUIRE(f.stroke_count() == 1);
    const CubicStroke& s = f.strokes[0];
    CHECK(s.points[0].x == doctest::Approx(0.0));
    CHECK(s.points[0].y == doctest::Approx(0.0));
    CHECK(s.points[1].x == doctest::Approx(0.2));
    CHECK(s.points[1].y == doctest::Approx(0.1));
    CHECK(s.points[2].x == doctest::Approx(0.6));
    CHECK(s.points[2].y == doctest::Approx(0.1));
    CHECK(s.points[3].x == doctest::Approx(1.0));
    CHECK(s.points[3].y == doctest::Approx(0.0));
}

TEST_CASE("parse_svg normalizes by the viewBox") {
    std::string svg =
        "<svg viewBox=\"0 0 256 256\">\n"
        "<path d=\"M 0 0 C 64 128, 128 128, 256 256\" stroke-width=\"3\"/>\n"
        "</svg>\n";
    SketchFrame f = parse_svg(svg);
    REQUIRE(f.stroke_count() == 1);
    CHECK(f.strokes[0].points[1].x == doctest::Approx(0.25));
    CHECK(f.strokes[0].points[1].y == doctest::Approx(0.5));
    CHECK(f.strokes[0].width == doctest::Approx(3.0 / 256.0));
}

TEST_CASE("parse_svg promotes lines to degenerate cubics") {
    std::string svg =
        "<svg viewBox=\"0 0 1 1\"><path d=\"M 0 0 L 0.9 0.3\"/></svg>";
    SketchFrame f = parse_svg(svg);
    REQUIRE(f.stroke_count() == 1);
    CHECK(f.strokes[0].points[1].x == doctest::Approx(0.3));
    CHECK(f.strokes[0].points[1].y == doctest::Approx(0.1));
    CHECK(f.strokes[0].points[2].x == doctest::Approx(0.6));
    CHECK(f.strokes[0].points[2].y == doctest::Approx(0.2));
}

TEST_CASE("parse_svg rejects non-subset commands by name") {
    std::string svg =
        "<svg viewBox=\"0 0 1 1\">\n<path d=\"M 0 0 A 1 1 0 0 0 1 1\"/>\n</svg>";
    try {
        parse_svg(svg);
        FAIL("expected SvgParseError");
    } catch (const SvgParseError& e) {
        CHECK(std::string(e.what()).find("unsupported command A") != std::string::npos);
        CHECK(e.line() == 2);
    }
    CHECK_THROWS_AS(parse_svg("<svg viewBox=\"0 0 1 1\"><path d=\"M 0 0 Q 1 1 0 1\"/></svg>"),
                    SvgParseError);
    CHECK_THROWS_AS(parse_svg("<svg viewBox=\"0 0 1 1\"><path d=\"M 0 0 L 1 1 Z\"/></svg>"),
                    SvgParseError);
}

TEST_CASE("parse_svg rejects malformed headers") {
    CHECK_THROWS_AS(parse_svg("<html>nope</html>"), SvgParseError);
    CHECK_THROWS_AS(parse_svg("<svg width=\"5\"><path d=\"M 0 0 C 1 1 1 1 1 1\"/></svg>"),
                    SvgParseError);  // missing viewBox
    CHECK_THROWS_AS(parse_svg("<svg viewBox=\"0 0 1 1\"></svg>"), SvgParseError);  // no strokes
}

TEST_CASE("write_svg emits one path per stroke, in order, at 6 decimals") {
    SketchFrame f = make_random_frame(7, 2);
    f.strokes[0].points[0] = {1.0 / 3.0, 2.0 / 3.0};
    std::string text = write_svg(f);
    size_t first = text.find("<path");
    size_t second = text.find("<path", first + 1);
    CHECK(first != std::string::npos);
    CHECK(second != std::string::npos);
    CHECK(text.find("<path", second + 1) == std::string::npos);
    CHECK(text.find("0.333333") != std::string::npos);
    CHECK(text.find("0.666667") != std::string::npos);
    CHECK(write_svg(f) == text);  // deterministic bytes
    CHECK_THROWS_AS(write_svg(SketchFrame{}), std::invalid_argument);
}

TEST_CASE("write_svg clamps out-of-range coordinates to [-0.5, 1.5]") {
    SketchFrame f = make_random_frame(8, 1);
    f.strokes[0].points[0] = {-2.0, 3.0};
    SketchFrame back = parse_svg(write_svg(f));
    CHECK(back.strokes[0].points[0].x == doctest::Approx(-0.5));
    CHECK(back.strokes[0].points[0].y == doctest::Approx(1.5));
}

TEST_CASE("round-trip: parse_svg(write_svg(f)) == f within 1e-6") {
    for (unsigned seed = 0; seed < 20; seed++) {
        SketchFrame f = make_random_frame(seed, 1 + seed % 5);
        SketchFrame back = parse_svg(write_svg(f));
        REQUIRE(back.stroke_count() == f.stroke_count());
        for (int i = 0; i < f.stroke_count(); i++) {
            for (int j = 0; j < 4; j++) {
                CHECK(std::abs(back.strokes[i].points[j].x - f.strokes[i].points[j].x) <= 1e-6);
                CHECK(std::abs(back.strokes[i].points[j].y - f.strokes[i].points[j].y) <= 1e-6);
            }
            CHECK(std::abs(back.strokes[i].width - f.strokes[i].width) <= 1e-6);
        }
    }
}

TEST_CASE("write_svg(parse_svg(t)) re-parses to an identical frame") {
    std::string svg =
        "<svg viewBox=\"0 0 1 1\">\n"
        "<path d=\"M 0.1 0.2 C 0.3 0.4, 0.5 0.6, 0.7 0.8\" stroke-width=\"0.02\"/>\n"
        "<path d=\"M 0.9 0.1 L 0.2 0.9\"/>\n"
        "</svg>";
    SketchFrame f1 = parse_svg(svg);
    SketchFrame f2 = parse_svg(write_svg(f1));
    REQUIRE(f1.stroke_count() == f2.stroke_count());
    for (int i = 0; i < f1.stroke_count(); i++)
        for (int j = 0; j < 4; j++) {
            CHECK(std::abs(f1.strokes[i].points[j].x - f2.strokes[i].points[j].x) <= 1e-6);
            CHECK(std::abs(f1.strokes[i].points[j].y - f2.strokes[i].points[j].y) <= 1e-6);
        }
}

TEST_CASE("replicate_frames deep-copies") {
    SketchFrame f = make_random_frame(3, 3);
    AnimatedSketch anim = replicate_frames(f, 4);
    REQUIRE(anim.frame_count() == 4);
    int total = 0;
    for (const SketchFrame& fr : anim.frames) total += fr.stroke_count();
    CHECK(total == 12);  // N * F
    for (int k = 1; k < 4; k++) CHECK(anim.frames[k] == anim.frames[0]);

    anim.frames[2].strokes[0].points[0].x = 0.123456;
    CHECK(anim.frames[1].strokes[0].points[0].x != 0.123456);
    CHECK(anim.frames[3].strokes[0].points[0].x != 0.123456);

    AnimatedSketch one = replicate_frames(f, 1);
    CHECK(one.frame_count() == 1);
    CHECK(one.frames[0] == f);
    CHECK_THROWS_AS(replicate_frames(f, 0), std::invalid_argument);
}

TEST_CASE("write_animated_svg encodes frames, fps and geometry") {
    SketchFrame f = make_random_frame(11, 2);
    AnimatedSketch anim = replicate_frames(f, 16);
    anim.frames[5].strokes[1].points[2] = {0.25, 0.75};

    std::string text = write_animated_svg(anim, 8);
    CHECK(text.find("dur=\"2.000000s\"") != std::string::npos);  // 16 frames / 8 fps

    int fps = 0;
    AnimatedSketch back = parse_animated_svg(text, &fps);
    CHECK(fps == 8);
    REQUIRE(back.frame_count() == 16);
    for (int k = 0; k < 16; k++) {
        REQUIRE(back.frames[k].stroke_count() == 2);
        for (int i = 0; i < 2; i++)
            for (int j = 0; j < 4; j++) {
                CHECK(std::abs(back.frames[k].strokes[i].points[j].x -
                               anim.frames[k].strokes[i].points[j].x) <= 1e-6);
                CHECK(std::abs(back.frames[k].strokes[i].points[j].y -
                               anim.frames[k].strokes[i].points[j].y) <= 1e-6);
            }
    }

    // F=1 degenerates to a static frame group without animation elements.
    std::string single = write_animated_svg(replicate_frames(f, 1), 8);
    CHECK(single.find("<animate") == std::string::npos);
    CHECK(single.find("id=\"frame-0\"") != std::string::npos);
}

TEST_CASE("stroke and frame counts survive module operations") {
    for (unsigned seed = 40; seed < 44; seed++) {
        SketchFrame f = make_random_frame(seed, 2 + seed % 4);
        int n = f.stroke_count();
        CHECK(parse_svg(write_svg(f)).stroke_count() == n);
        AnimatedSketch anim = replicate_frames(f, 5);
        CHECK(anim.frame_count() == 5);
        AnimatedSketch back = parse_animated_svg(write_animated_svg(anim, 4));
        CHECK(back.frame_count() == 5);
        CHECK(back.frames[3].stroke_count() == n);
    }
}
