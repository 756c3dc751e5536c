// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "skanim/diffusion.hpp"

using namespace skanim;

namespace {

// Independent reimplementation of the schedule's closed form.
double ref_alpha(int t, int steps) {
    const double s = 0.008;
    const double pi = 3.14159265358979323846;
    double a = std::cos(((double(t) / steps + s) / (1.0 + s)) * pi / 2.0) /
               std::cos(s * pi / (2.0 * (1.0 + s)));
    if (a < 1e-4) a = 1e-4;
    if (a > 1.0) a = 1.0;
    return a;
}

// Wilson-Hilferty approximation of the chi-square quantile.
double chi2_quantile(double df, double z) {
    double t = 1.0 - 2.0 / (9.0 * df) + z * std::sqrt(2.0 / (9.0 * df));
    return df * t * t * t;
}

}  // namespace

TEST_CASE("cosine schedule: endpoints, invariants, closed form") {
    NoiseSchedule sched = build_schedule(1000);
    REQUIRE(sched.steps == 1000);
    CHECK(sched.alpha[0] >= 0.999);
    CHECK(sched.sigma[0] <= 0.05);
    CHECK(sched.sigma[999] >= 0.995);
    for (int t = 0; t < 1000; t++) {
        double vp = sched.alpha[t] * sched.alpha[t] + sched.sigma[t] * sched.sigma[t];
        CHECK(std::abs(vp - 1.0) <= 1e-6);
        if (t > 0) CHECK(sched.alpha[t] <= sched.alpha[t - 1]);
    }
    CHECK(std::abs(sched.alpha[500] - ref_alpha(500, 1000)) < 1e-9);
    for (int t : {1, 123, 999}) CHECK(std::abs(sched.alpha[t] - ref_alpha(t, 1000)) < 1e-9);

    CHECK_THROWS_AS(build_schedule(9), std::invalid_argument);
    CHECK_NOTHROW(build_schedule(10));
}

TEST_CASE("add_noise endpoints and errors") {
    NoiseSchedule sched = build_schedule(1000);
    Rng rng(11);
    LatentVideo z0 = sample_noise(rng, 2, 8, 8);
    for (double& v : z0.values) v = std::tanh(v);  // bound by 1
    LatentVideo eps = sample_noise(rng, 2, 8, 8);

    LatentVideo z_start = add_noise(z0, 0, eps, sched);
    double max_dev = 0, max_eps = 0;
    for (size_t i = 0; i < z0.size(); i++) {
        max_dev = std::max(max_dev, std::abs(z_start.values[i] - z0.values[i]));
        max_eps = std::max(max_eps, std::abs(eps.values[i]));
    }
    CHECK(sched.sigma[0] < 0.05);
    CHECK(max_dev <= sched.sigma[0] * max_eps + 1e-12);

    LatentVideo z_end = add_noise(z0, 999, eps, sched);
    double dot = 0, n1 = 0, n2 = 0;
    for (size_t i = 0; i < z0.size(); i++) {
        dot += z_end.values[i] * eps.values[i];
        n1 += z_end.values[i] * z_end.values[i];
        n2 += eps.values[i] * eps.values[i];
    }
    CHECK(dot / std::sqrt(n1 * n2) > 0.99);

    LatentVideo wrong(2, 8, 4);
    CHECK_THROWS_AS(add_noise(z0, 0, wrong, sched), std::invalid_argument);
    CHECK_THROWS_AS(add_noise(z0, 1000, eps, sched), std::out_of_range);
    CHECK_THROWS_AS(add_noise(z0, -1, eps, sched), std::out_of_range);
}

TEST_CASE("add_noise Monte Carlo variance tracks sigma^2") {
    NoiseSchedule sched = build_schedule(1000);
    Rng rng(222);
    LatentVideo zero(1, 1, 1);
    for (int t : {100, 300, 500, 700, 900}) {
        double sum = 0, sum2 = 0;
        const int n = 10000;
        for (int i = 0; i < n; i++) {
            LatentVideo eps = sample_noise(rng, 1, 1, 1);
            LatentVideo z_t = add_noise(zero, t, eps, sched);
            sum += z_t.values[0];
            sum2 += z_t.values[0] * z_t.values[0];
        }
        double var = sum2 / n - (sum / n) * (sum / n);
        double expected = sched.sigma[t] * sched.sigma[t];
        CHECK(std::abs(var - expected) < 0.05 * expected);
    }
}

TEST_CASE("variance preservation for random data") {
    NoiseSchedule sched = build_schedule(1000);
    Rng rng(223);
    const double data_std = 0.7;
    for (int t : {250, 600}) {
        double sum = 0, sum2 = 0;
        const int n = 20000;
        std::normal_distribution<double> data(0.0, data_std);
        for (int i = 0; i < n; i++) {
            LatentVideo z0(1, 1, 1), eps = sample_noise(rng, 1, 1, 1);
            z0.values[0] = data(rng);
            double v = add_noise(z0, t, eps, sched).values[0];
            sum += v;
            sum2 += v * v;
        }
        double var = sum2 / n - (sum / n) * (sum / n);
        double expected = sched.alpha[t] * sched.alpha[t] * data_std * data_std +
                          sched.sigma[t] * sched.sigma[t];
        CHECK(std::abs(var - expected) < 0.05 * expected);
    }
}

TEST_CASE("sample_timestep is uniform over the trimmed range") {
    NoiseSchedule sched = build_schedule(200);
    const int lo = sched.t_min(), hi = sched.t_max();
    CHECK(lo == 4);
    CHECK(hi == 196);

    Rng rng(77);
    const int n = 100000, bins = hi - lo + 1;
    std::vector<int> counts(bins, 0);
    for (int i = 0; i < n; i++) {
        int t = sample_timestep(rng, sched);
        REQUIRE(t >= lo);
        REQUIRE(t <= hi);
        counts[t - lo]++;
    }
    double expected = double(n) / bins, chi2 = 0;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // p > 0.001 iff the statistic stays below the 0.999 quantile (z = 3.0902).
    CHECK(chi2 < chi2_quantile(bins - 1, 3.0902));

    Rng r1(123), r2(123);
    for (int i = 0; i < 100; i++) CHECK(sample_timestep(r1, sched) == sample_timestep(r2, sched));
}

TEST_CASE("encode/decode: fixed linear pool with exact right-inverse") {
    RasterVideo video;
    video.frames.emplace_back(32, 32);
    LatentVideo z = encode(video, 2);
    CHECK(z.frames == 1);
    CHECK(z.height == 16);
    CHECK(z.width == 16);
    for (double v : z.values) CHECK(v == -1.0);

    // block-constant video: decode(encode(v)) == v exactly
    Rng rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    RasterVideo blocky;
    blocky.frames.emplace_back(16, 16);
    for (int y = 0; y < 8; y++)
        for (int x = 0; x < 8; x++) {
            double v = u(rng);
            blocky.frames[0].at(2 * y, 2 * x) = v;
            blocky.frames[0].at(2 * y, 2 * x + 1) = v;
            blocky.frames[0].at(2 * y + 1, 2 * x) = v;
            blocky.frames[0].at(2 * y + 1, 2 * x + 1) = v;
        }
    RasterVideo back = decode(encode(blocky, 2), 2);
    for (size_t i = 0; i < back.frames[0].values.size(); i++)
        CHECK(back.frames[0].values[i] == doctest::Approx(blocky.frames[0].values[i]).epsilon(1e-15));

    RasterVideo odd;
    odd.frames.emplace_back(15, 16);
    CHECK_THROWS_AS(encode(odd, 2), std::invalid_argument);
}

TEST_CASE("encode transpose is the exact adjoint and matches finite differences") {
    Rng rng(31);
    RasterVideo video;
    video.frames.emplace_back(8, 8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : video.frames[0].values) v = u(rng);
    LatentVideo r = sample_noise(rng, 1, 4, 4);

    // adjoint identity on the linear part: <L x, r> == <x, L^T r>
    LatentVideo zx = encode(video, 2);
    RasterVideo zero;
    zero.frames.emplace_back(8, 8);
    LatentVideo z_of_zero = encode(zero, 2);
    double lhs = 0;
    for (size_t i = 0; i < zx.size(); i++)
        lhs += (zx.values[i] - z_of_zero.values[i]) * r.values[i];
    RasterFrame lt_r = encode_transpose_frame(r, 0, 2);
    double rhs = 0;
    for (size_t i = 0; i < lt_r.values.size(); i++)
        rhs += video.frames[0].values[i] * lt_r.values[i];
    CHECK(std::abs(lhs - rhs) < 1e-12);

    // finite differences of g(x) = <r, encode(x)>
    const double h = 1e-5;
    for (int idx : {0, 13, 37, 63}) {
        auto g = [&](double bump) {
            RasterVideo v2 = video;
            v2.frames[0].values[idx] += bump;
            LatentVideo z2 = encode(v2, 2);
            double s = 0;
            for (size_t i = 0; i < z2.size(); i++) s += r.values[i] * z2.values[i];
            return s;
        };
        double fd = (g(h) - g(-h)) / (2 * h);
        CHECK(std::abs(fd - lt_r.values[idx]) < 1e-8);
    }
}
