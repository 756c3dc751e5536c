// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "skanim/trainer.hpp"

using namespace skanim;

namespace {

StageConfig quick_config(const std::string& prompt, int steps) {
    StageConfig cfg;
    cfg.steps = steps;
    cfg.prompt = prompt;
    cfg.resolution = 32;
    cfg.pool = 2;
    cfg.heldout_draws = 64;
    return cfg;
}

DenoiserWeights small_weights(unsigned long long seed) {
    Rng rng(seed);
    DenoiserWeights w = init_weights(rng, 32, 4, 16, 16, 16);
    // nonzero head so adapter gradients flow from step one
    std::normal_distribution<double> normal(0.0, 0.2);
    for (Eigen::Index i = 0; i < w.unembed.size(); i++) w.unembed.data()[i] = normal(rng);
    return w;
}

double adapter_norm(const AdapterSet& set) {
    double n = 0;
    for (const TaggedAdapter& t : set.items)
        n += t.adapter.lora_b.squaredNorm() + t.adapter.lora_a.squaredNorm();
    return std::sqrt(n);
}

}  // namespace

TEST_CASE("synthetic videos: tracks and occupancy") {
    Rng rng(1);
    SyntheticParams p;

    SyntheticVideo tr = make_synthetic_video(MotionKind::kTranslate, 16, 64, 64, p, rng);
    REQUIRE(tr.track.size() == 16);
    double step0 = tr.track[1][0] - tr.track[0][0];
    for (int f = 1; f < 16; f++) {
        CHECK(tr.track[f][0] - tr.track[f - 1][0] == doctest::Approx(step0));  // arithmetic progression
        CHECK(tr.track[f][1] == doctest::Approx(tr.track[0][1]));
    }

    SyntheticVideo bo = make_synthetic_video(MotionKind::kBounce, 17, 64, 64, p, rng);
    for (int f = 0; f < 17; f++)
        CHECK(bo.track[f][1] == doctest::Approx(bo.track[16 - f][1]));  // symmetric about the apex
    CHECK(bo.track[8][1] < bo.track[0][1] - 0.1);

    // rendered occupancy equals shape area within 5%
    double area = p.size * p.size;
    for (const RasterFrame& frame : tr.video.frames) {
        double sum = 0;
        for (double v : frame.values) sum += v;
        sum /= (64.0 * 64.0);
        CHECK(std::abs(sum - area) < 0.05 * area);
    }
    SyntheticParams disk;
    disk.shape = SyntheticParams::kDisk;
    SyntheticVideo dk = make_synthetic_video(MotionKind::kTranslate, 8, 64, 64, disk, rng);
    double disk_area = 3.14159265358979 * disk.size * disk.size / 4;
    for (const RasterFrame& frame : dk.video.frames) {
        double sum = 0;
        for (double v : frame.values) sum += v;
        CHECK(std::abs(sum / (64.0 * 64.0) - disk_area) < 0.05 * disk_area);
    }

    CHECK_THROWS_AS(make_synthetic_video(MotionKind::kJump, 1, 64, 64, p, rng),
                    std::invalid_argument);
}

TEST_CASE("jump and scale-pulse shapes behave as constructed") {
    Rng rng(2);
    SyntheticParams p;
    SyntheticVideo j = make_synthetic_video(MotionKind::kJump, 16, 32, 32, p, rng);
    CHECK(j.track[0][1] == doctest::Approx(p.start_y));
    CHECK(j.track[15][1] == doctest::Approx(p.start_y));
    CHECK(j.track[8][1] < p.start_y - 0.2);

    SyntheticVideo sp = make_synthetic_video(MotionKind::kScalePulse, 16, 32, 32, p, rng);
    for (int f = 0; f < 16; f++) {
        CHECK(sp.track[f][0] == doctest::Approx(p.start_x));
        CHECK(sp.track[f][1] == doctest::Approx(p.start_y));
    }
    double mass0 = 0, mass4 = 0;
    for (double v : sp.video.frames[0].values) mass0 += v;
    for (double v : sp.video.frames[4].values) mass4 += v;
    CHECK(mass4 > mass0 * 1.5);  // pulse grows toward the quarter cycle
}

TEST_CASE("stage config validation") {
    DenoiserWeights w = small_weights(3);
    SketchFrame sketch = make_box_sketch(0.5, 0.5, 0.3, 0.02);
    StageConfig cfg = quick_config("a box", 0);
    CHECK_THROWS_AS(train_appearance(sketch, cfg, w), std::invalid_argument);
    cfg.steps = 1;
    cfg.prompt = "";
    CHECK_THROWS_AS(train_appearance(sketch, cfg, w), std::invalid_argument);
}

TEST_CASE("one appearance step moves adapters when gradients are nonzero") {
    DenoiserWeights w = small_weights(4);
    SketchFrame sketch = make_box_sketch(0.5, 0.5, 0.3, 0.02);
    AppearanceResult r = train_appearance(sketch, quick_config("a box", 1), w);
    CHECK(r.trace.size() == 1);
    CHECK(adapter_norm(r.adapters) > 0.0);
    bool some_b_nonzero = false;
    for (const TaggedAdapter& t : r.adapters.items)
        some_b_nonzero |= !t.adapter.lora_b.isZero(0.0);
    CHECK(some_b_nonzero);
}

TEST_CASE("frozen base: stages leave W0 bit-identical") {
    DenoiserWeights w = small_weights(5);
    DenoiserWeights before = w;
    SketchFrame sketch = make_box_sketch(0.5, 0.5, 0.3, 0.02);
    train_appearance(sketch, quick_config("a box", 10), w);

    Rng rng(6);
    SyntheticVideo sv = make_synthetic_video(MotionKind::kTranslate, 8, 32, 32, SyntheticParams{}, rng);
    train_motion(sv.video, quick_config("a box is sliding", 10), w);

    CHECK(w.embed == before.embed);
    CHECK(w.unembed == before.unembed);
    CHECK(w.pos_spatial == before.pos_spatial);
    CHECK(w.pos_frame == before.pos_frame);
    CHECK(w.time_proj == before.time_proj);
    CHECK(w.spatial.wq == before.spatial.wq);
    CHECK(w.spatial.ff1 == before.spatial.ff1);
    CHECK(w.temporal.wo == before.temporal.wo);
    CHECK(w.temporal.ff2 == before.temporal.ff2);
}

TEST_CASE("same seed reproduces identical adapters") {
    SketchFrame sketch = make_ring_sketch(0.5, 0.5, 0.3, 0.02);
    StageConfig cfg = quick_config("a ring", 25);
    cfg.seed = 99;

    DenoiserWeights w1 = small_weights(7), w2 = small_weights(7);
    AppearanceResult r1 = train_appearance(sketch, cfg, w1);
    AppearanceResult r2 = train_appearance(sketch, cfg, w2);
    REQUIRE(r1.adapters.items.size() == r2.adapters.items.size());
    for (size_t i = 0; i < r1.adapters.items.size(); i++) {
        CHECK(r1.adapters.items[i].adapter.lora_b == r2.adapters.items[i].adapter.lora_b);
        CHECK(r1.adapters.items[i].adapter.lora_a == r2.adapters.items[i].adapter.lora_a);
    }
}

TEST_CASE("motion training: adapter roles, trace decomposition, errors") {
    DenoiserWeights w = small_weights(8);
    Rng rng(9);
    SyntheticVideo sv = make_synthetic_video(MotionKind::kTranslate, 8, 32, 32, SyntheticParams{}, rng);
    StageConfig cfg = quick_config("a box is sliding", 40);
    MotionResult r = train_motion(sv.video, cfg, w);

    for (const TaggedAdapter& t : r.video_appearance.items)
        CHECK(t.adapter.target.rfind("spatial.", 0) == 0);
    for (const TaggedAdapter& t : r.motion.items) {
        CHECK(t.adapter.target.rfind("temporal.", 0) == 0);
        CHECK(!t.adapter.lora_b.isZero(0.0));  // temporal pass trained them
    }

    REQUIRE(r.trace.size() == 40);
    for (const TraceRow& row : r.trace)
        CHECK(std::abs(row.loss - (row.spatial + row.temporal)) <= 1e-9);

    RasterVideo one_frame;
    one_frame.frames.emplace_back(32, 32);
    CHECK_THROWS_AS(train_motion(one_frame, cfg, w), std::invalid_argument);
}

TEST_CASE("a short appearance run already reduces the training loss") {
    DenoiserWeights w = small_weights(10);
    SketchFrame sketch = make_box_sketch(0.5, 0.5, 0.35, 0.025);
    StageConfig cfg = quick_config("a box", 120);
    cfg.seed = 3;
    AppearanceResult r = train_appearance(sketch, cfg, w);
    double early = 0, late = 0;
    for (int i = 0; i < 20; i++) early += r.trace[i].loss;
    for (int i = 100; i < 120; i++) late += r.trace[i].loss;
    CHECK(late < early);
    CHECK(r.untrained_heldout_loss == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("static reference video trains a much smaller motion adapter") {
    Rng rng(11);
    SyntheticParams p;
    SyntheticVideo moving = make_synthetic_video(MotionKind::kTranslate, 8, 32, 32, p, rng);
    RasterVideo still;
    for (int i = 0; i < 8; i++) still.frames.push_back(moving.video.frames[0]);

    StageConfig cfg = quick_config("a box is sliding", 150);
    cfg.seed = 17;
    DenoiserWeights w1 = small_weights(12), w2 = small_weights(12);
    MotionResult r_moving = train_motion(moving.video, cfg, w1);
    MotionResult r_still = train_motion(still, cfg, w2);

    double norm_moving = adapter_norm(r_moving.motion);
    double norm_still = adapter_norm(r_still.motion);
    CHECK(norm_still < 0.25 * norm_moving);
}

TEST_CASE("translate_sketch_along reproduces the track rigidly") {
    SketchFrame sketch = make_wedge_sketch(0.3, 0.5, 0.2, 0.02);
    std::vector<std::array<double, 2>> track = {{0.3, 0.5}, {0.4, 0.5}, {0.5, 0.5}};
    AnimatedSketch anim = translate_sketch_along(sketch, track);
    REQUIRE(anim.frame_count() == 3);
    CHECK(anim.frames[0] == sketch);
    CHECK(anim.frames[2].strokes[0].points[0].x ==
          doctest::Approx(sketch.strokes[0].points[0].x + 0.2));
    CHECK(anim.frames[2].strokes[0].points[0].y ==
          doctest::Approx(sketch.strokes[0].points[0].y));
}
