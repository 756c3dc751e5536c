// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "skanim/denoiser.hpp"
#include "skanim/lora.hpp"

using namespace skanim;

namespace {

LoraAdapter random_adapter(const std::string& target, int d, int k, int rank, Rng& rng) {
    LoraAdapter ad = new_adapter(target, d, k, rank, 1.0, rng);
    std::normal_distribution<double> normal(0.0, 0.05);
    for (Eigen::Index i = 0; i < ad.lora_b.size(); i++) ad.lora_b.data()[i] = normal(rng);
    quantize_to_f32(ad.lora_b);
    return ad;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("new_adapter: zero delta, rank bound, determinism") {
    Rng rng(7);
    LoraAdapter ad = new_adapter("spatial.q", 32, 32, 4, 1.0, rng);
    CHECK(ad.lora_b.isZero(0.0));
    Eigen::MatrixXd w0 = Eigen::MatrixXd::Random(32, 32);
    CHECK(merge(w0, {{&ad, 1.0}}) == w0);  // fresh adapter merges to W0 exactly

    Rng r8(1);
    CHECK_NOTHROW(new_adapter("spatial.k", 32, 32, 8, 1.0, r8));  // r = min/4
    CHECK_THROWS_AS(new_adapter("spatial.k", 32, 32, 16, 1.0, r8), std::invalid_argument);
    CHECK_THROWS_AS(new_adapter("spatial.k", 32, 32, 0, 1.0, r8), std::invalid_argument);

    Rng ra(42), rb(42);
    LoraAdapter a1 = new_adapter("spatial.v", 16, 16, 2, 1.0, ra);
    LoraAdapter a2 = new_adapter("spatial.v", 16, 16, 2, 1.0, rb);
    CHECK(a1.lora_a == a2.lora_a);
}

TEST_CASE("merge: rank-1 outer product and paper scales") {
    LoraAdapter ad;
    ad.target = "spatial.q";
    ad.rank = 1;
    ad.alpha = 1.0;
    ad.lora_b = Eigen::MatrixXd(2, 1);
    ad.lora_b << 1, 0;
    ad.lora_a = Eigen::MatrixXd(1, 2);
    ad.lora_a << 0, 1;
    Eigen::MatrixXd merged = merge(Eigen::MatrixXd::Identity(2, 2), {{&ad, 1.0}});
    Eigen::MatrixXd expected(2, 2);
    expected << 1, 1, 0, 1;
    CHECK(merged == expected);

    // lambda_1 = 0.5 and lambda_2 = 1 with all-ones deltas add 1.5 * ones.
    LoraAdapter ones_a, ones_m;
    for (LoraAdapter* p : {&ones_a, &ones_m}) {
        p->rank = 1;
        p->alpha = 1.0;
        p->lora_b = Eigen::MatrixXd::Ones(8, 1);
        p->lora_a = Eigen::MatrixXd::Ones(1, 8);
    }
    ones_a.target = "spatial.q";
    ones_m.target = "temporal.q";
    Eigen::MatrixXd w0 = Eigen::MatrixXd::Zero(8, 8);
    Eigen::MatrixXd out = merge(w0, {{&ones_a, 0.5}, {&ones_m, 1.0}});
    CHECK(out == Eigen::MatrixXd::Constant(8, 8, 1.5));

    LoraAdapter bad = ones_a;
    bad.lora_a = Eigen::MatrixXd::Ones(1, 4);
    CHECK_THROWS_AS(merge(w0, {{&bad, 1.0}}), std::invalid_argument);
}

TEST_CASE("merge linearity in lambda is exact on representable values") {
    // Integer-valued tensors and power-of-two lambdas make every FP op exact,
    // so the linearity identity holds bitwise.
    Rng rng(3);
    std::uniform_int_distribution<int> pick(-3, 3);
    Eigen::MatrixXd w0(16, 16), b(16, 2), a(2, 16);
    for (Eigen::Index i = 0; i < w0.size(); i++) w0.data()[i] = pick(rng);
    for (Eigen::Index i = 0; i < b.size(); i++) b.data()[i] = pick(rng);
    for (Eigen::Index i = 0; i < a.size(); i++) a.data()[i] = pick(rng);
    LoraAdapter ad;
    ad.target = "spatial.q";
    ad.rank = 2;
    ad.alpha = 1.0;
    ad.lora_b = b;
    ad.lora_a = a;

    double lambda = 0.5;
    Eigen::MatrixXd m1 = merge(w0, {{&ad, lambda}});
    Eigen::MatrixXd m2 = merge(w0, {{&ad, 2 * lambda}});
    Eigen::MatrixXd delta = lambda * ad.alpha * (b * a);
    CHECK((m2 - m1) == delta);
}

TEST_CASE("AdapterSet enforces spatial/temporal role segregation") {
    Rng rng(4);
    AdapterSet set;
    CHECK_NOTHROW(set.add(LoraRole::kSketchAppearance, new_adapter("spatial.q", 16, 16, 2, 1.0, rng)));
    CHECK_NOTHROW(set.add(LoraRole::kMotion, new_adapter("temporal.v", 16, 16, 2, 1.0, rng)));
    CHECK_THROWS_AS(set.add(LoraRole::kMotion, new_adapter("spatial.q", 16, 16, 2, 1.0, rng)),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        set.add(LoraRole::kVideoAppearance, new_adapter("temporal.q", 16, 16, 2, 1.0, rng)),
        std::invalid_argument);
    CHECK(set.with_role(LoraRole::kSketchAppearance).size() == 1);
    CHECK(set.with_role(LoraRole::kMotion).size() == 1);
}

TEST_CASE("save/load round-trip is bit-exact") {
    Rng rng(12);
    AdapterSet set;
    set.add(LoraRole::kSketchAppearance, random_adapter("spatial.q", 24, 24, 3, rng));
    set.add(LoraRole::kSketchAppearance, random_adapter("spatial.o", 24, 24, 3, rng));
    set.add(LoraRole::kMotion, random_adapter("temporal.k", 24, 24, 2, rng));
    Eigen::VectorXd row(4);
    row << 0.25f, -1.5f, 3.0f, 0.125f;
    set.trained_prompts["a wedge"] = row;

    std::string path = temp_path("skanim_adapters_test.skad");
    save_adapters(set, path);
    AdapterSet loaded = load_adapters(path);
    REQUIRE(loaded.items.size() == set.items.size());
    for (size_t i = 0; i < set.items.size(); i++) {
        CHECK(loaded.items[i].role == set.items[i].role);
        CHECK(loaded.items[i].adapter.target == set.items[i].adapter.target);
        CHECK(loaded.items[i].adapter.rank == set.items[i].adapter.rank);
        CHECK(loaded.items[i].adapter.alpha == set.items[i].adapter.alpha);
        CHECK(loaded.items[i].adapter.lora_b == set.items[i].adapter.lora_b);
        CHECK(loaded.items[i].adapter.lora_a == set.items[i].adapter.lora_a);
    }
    REQUIRE(loaded.trained_prompts.count("a wedge") == 1);
    CHECK(loaded.trained_prompts.at("a wedge") == row);

    // save(load(file)) reproduces the file bytes
    std::string path2 = temp_path("skanim_adapters_test2.skad");
    save_adapters(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("corrupted or truncated adapter files are rejected") {
    Rng rng(13);
    AdapterSet set;
    set.add(LoraRole::kMotion, random_adapter("temporal.q", 16, 16, 2, rng));
    std::string path = temp_path("skanim_adapters_corrupt.skad");
    save_adapters(set, path);

    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('X');  // corrupt the magic
    }
    try {
        load_adapters(path);
        FAIL("expected magic error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }

    save_adapters(set, path);
    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 40);
    try {
        load_adapters(path);
        FAIL("expected truncation error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("merged matrix equals on-the-fly adapted forward") {
    Rng rng(21);
    DenoiserWeights w = init_weights(rng, 16, 2, 3, 8, 8);
    // give the unembed head signal so outputs are nonzero
    std::normal_distribution<double> normal(0.0, 0.3);
    for (Eigen::Index i = 0; i < w.unembed.size(); i++) w.unembed.data()[i] = normal(rng);
    int pid = w.prompts.register_prompt("a box", w.d_model, rng);

    LoraAdapter ad_q = random_adapter("spatial.q", 16, 16, 2, rng);
    LoraAdapter ad_o = random_adapter("temporal.o", 16, 16, 2, rng);
    double lambda_q = 0.5, lambda_o = 1.25;

    LatentVideo z = sample_noise(rng, 3, 8, 8);
    ConditioningContext ctx = make_context(w, pid, 137);

    LatentVideo on_the_fly = predict_noise(z, ctx, w, {{&ad_q, lambda_q}, {&ad_o, lambda_o}});

    DenoiserWeights merged_w = w;
    weight_for_key(merged_w, "spatial.q") = merge(w.spatial.wq, {{&ad_q, lambda_q}});
    weight_for_key(merged_w, "temporal.o") = merge(w.temporal.wo, {{&ad_o, lambda_o}});
    LatentVideo merged_out = predict_noise(z, ctx, merged_w, {});

    double max_diff = 0;
    for (size_t i = 0; i < on_the_fly.size(); i++)
        max_diff = std::max(max_diff, std::abs(on_the_fly.values[i] - merged_out.values[i]));
    CHECK(max_diff < 1e-6);

    // zero-B adapters are exact no-ops on the fly
    LoraAdapter fresh = new_adapter("spatial.v", 16, 16, 2, 1.0, rng);
    LatentVideo plain = predict_noise(z, ctx, w, {});
    LatentVideo with_zero = predict_noise(z, ctx, w, {{&fresh, 1.0}});
    CHECK(plain.values == with_zero.values);
}

TEST_CASE("adapter files survive a save/load/merge cycle bit-exactly") {
    Rng rng(33);
    AdapterSet set;
    set.add(LoraRole::kMotion, random_adapter("temporal.q", 16, 16, 2, rng));
    Eigen::MatrixXd w0 = Eigen::MatrixXd::Random(16, 16);
    Eigen::MatrixXd before = merge(w0, {{&set.items[0].adapter, 0.75}});

    std::string path = temp_path("skanim_adapters_cycle.skad");
    save_adapters(set, path);
    AdapterSet loaded = load_adapters(path);
    Eigen::MatrixXd after = merge(w0, {{&loaded.items[0].adapter, 0.75}});
    CHECK(before == after);
    std::remove(path.c_str());
}
