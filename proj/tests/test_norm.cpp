#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "spnd/norm.hpp"

using namespace spnd;

namespace {

template <class T>
PairedFeatures<T> random_pair_batch(int m, int c, int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.5, 2.5);
    PairedFeatures<T> f;
    f.tar = Tensor4<T>(m, c, h, w);
    f.ref = Tensor4<T>(m, c, h, w);
    for (auto& v : f.tar.v) v = static_cast<T>(dist(rng));
    for (auto& v : f.ref->v) v = static_cast<T>(dist(rng));
    return f;
}

} // namespace

TEST_CASE("joint statistics on the printed 2/4 example") {
    PairedFeatures<double> f;
    f.tar = Tensor4<double>(1, 1, 1, 1);
    f.ref = Tensor4<double>(1, 1, 1, 1);
    f.tar.v[0] = 2.0;
    f.ref->v[0] = 4.0;

    std::vector<double> mu, var;
    paired_norm_stats(f, NormMode::joint, mu, var);
    REQUIRE(mu[0] == Catch::Approx(3.0));
    REQUIRE(var[0] == Catch::Approx(1.0));

    NormParams<double> params(1);
    auto out = paired_normalize(f, params, NormMode::joint, 1e-12, /*training=*/true);
    REQUIRE(out.tar.v[0] == Catch::Approx(-1.0).margin(1e-6));
    REQUIRE(out.ref->v[0] == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("literal statistics follow the printed equations exactly") {
    PairedFeatures<double> f;
    f.tar = Tensor4<double>(1, 1, 1, 1);
    f.ref = Tensor4<double>(1, 1, 1, 1);
    f.tar.v[0] = 2.0;
    f.ref->v[0] = 4.0;

    std::vector<double> mu, var;
    paired_norm_stats(f, NormMode::literal, mu, var);
    REQUIRE(mu[0] == Catch::Approx(6.0));
    REQUIRE(var[0] == Catch::Approx(20.0));

    NormParams<double> params(1);
    auto out = paired_normalize(f, params, NormMode::literal, 1e-12, /*training=*/true);
    REQUIRE(out.tar.v[0] == Catch::Approx((2.0 - 6.0) / std::sqrt(20.0)).margin(1e-9));
    REQUIRE(out.ref->v[0] == Catch::Approx((4.0 - 6.0) / std::sqrt(20.0)).margin(1e-9));
}

TEST_CASE("constant inputs normalize to zero in joint mode") {
    PairedFeatures<double> f;
    f.tar = Tensor4<double>(3, 2, 4, 4, 0.37);
    f.ref = Tensor4<double>(3, 2, 4, 4, 0.37);
    NormParams<double> params(2);
    auto out = paired_normalize(f, params, NormMode::joint, 1e-5, true);
    for (double v : out.tar.v) REQUIRE(v == Catch::Approx(0.0).margin(1e-12));
    for (double v : out.ref->v) REQUIRE(v == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("joint mode whitens the concatenated batch") {
    auto f = random_pair_batch<double>(32, 3, 5, 5, 101);
    NormParams<double> params(3);
    auto out = paired_normalize(f, params, NormMode::joint, 1e-5, true);
    const std::size_t plane = out.tar.plane();
    for (int ch = 0; ch < 3; ++ch) {
        double sum = 0.0, sq = 0.0;
        std::size_t n = 0;
        for (int i = 0; i < 32; ++i) {
            for (const Tensor4<double>* t : {&out.tar, &*out.ref}) {
                const double* p = t->channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j) {
                    sum += p[j];
                    ++n;
                }
            }
        }
        const double mean = sum / n;
        for (int i = 0; i < 32; ++i)
            for (const Tensor4<double>* t : {&out.tar, &*out.ref}) {
                const double* p = t->channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j) sq += (p[j] - mean) * (p[j] - mean);
            }
        REQUIRE(std::abs(mean) < 1e-5);
        REQUIRE(std::abs(sq / n - 1.0) < 1e-3);
    }
}

TEST_CASE("literal statistics relate to joint by the exact algebraic identity") {
    // mu_lit = 2*mu_joint and sigma2_lit = 2*(sigma2_joint + mu_joint^2); the
    // 2/4 example above gives 20 == 2*(1+9).
    std::mt19937_64 seed_rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        auto f = random_pair_batch<double>(8, 4, 3, 3, seed_rng());
        std::vector<double> mu_j, var_j, mu_l, var_l;
        paired_norm_stats(f, NormMode::joint, mu_j, var_j);
        paired_norm_stats(f, NormMode::literal, mu_l, var_l);
        for (int ch = 0; ch < 4; ++ch) {
            REQUIRE(mu_l[ch] == Catch::Approx(2.0 * mu_j[ch]).margin(1e-10));
            REQUIRE(var_l[ch] == Catch::Approx(2.0 * (var_j[ch] + mu_j[ch] * mu_j[ch])).margin(1e-10));
        }
    }
}

TEST_CASE("per-stream mode whitens each stream with its own statistics") {
    auto f = random_pair_batch<double>(16, 2, 4, 4, 77);
    // Shift the reference stream far away; per-stream statistics must absorb it.
    for (auto& v : f.ref->v) v += 100.0;
    NormParams<double> params(2);
    auto out = paired_normalize(f, params, NormMode::per_stream, 1e-5, true);
    for (const Tensor4<double>* t : {&out.tar, &*out.ref})
        for (int ch = 0; ch < 2; ++ch) {
            double sum = 0.0;
            std::size_t n = 0;
            for (int i = 0; i < 16; ++i) {
                const double* p = t->channel(i, ch);
                for (std::size_t j = 0; j < t->plane(); ++j) {
                    sum += p[j];
                    ++n;
                }
            }
            REQUIRE(std::abs(sum / n) < 1e-6);
        }
}

TEST_CASE("running statistics update by 0.1 EMA and drive inference") {
    auto f = random_pair_batch<double>(8, 2, 3, 3, 91);
    std::vector<double> mu, var;
    paired_norm_stats(f, NormMode::joint, mu, var);

    NormParams<double> params(2);
    paired_normalize(f, params, NormMode::joint, 1e-5, true);
    for (int ch = 0; ch < 2; ++ch) {
        REQUIRE(params.running_mean[ch] == Catch::Approx(0.9 * 0.0 + 0.1 * mu[ch]).margin(1e-12));
        REQUIRE(params.running_var[ch] == Catch::Approx(0.9 * 1.0 + 0.1 * var[ch]).margin(1e-12));
    }

    // Inference applies the running statistics to every entry and is
    // bit-deterministic.
    auto a = paired_normalize(f, params, NormMode::joint, 1e-5, false);
    auto b = paired_normalize(f, params, NormMode::joint, 1e-5, false);
    REQUIRE(a.tar.v == b.tar.v);
    REQUIRE(a.ref->v == b.ref->v);
    const double expect = params.gamma[0] * (f.tar.v[0] - params.running_mean[0]) /
                          std::sqrt(params.running_var[0] + 1e-5) + params.beta[0];
    REQUIRE(a.tar.v[0] == Catch::Approx(expect));
}

TEST_CASE("training mode rejects an empty batch") {
    PairedFeatures<double> f;
    f.tar = Tensor4<double>(0, 2, 3, 3);
    NormParams<double> params(2);
    REQUIRE_THROWS_AS(paired_normalize(f, params, NormMode::joint, 1e-5, true), std::invalid_argument);
}

TEST_CASE("norm backward matches central finite differences in every mode") {
    for (NormMode mode : {NormMode::joint, NormMode::literal, NormMode::per_stream}) {
        const int N = 4, C = 2, H = 3, W = 3;  // N counts both halves
        std::mt19937_64 rng(404 + static_cast<int>(mode));
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        Tensor4<double> x(N, C, H, W);
        for (auto& v : x.v) v = dist(rng);
        NormParams<double> params(C);
        for (auto& g : params.gamma) g = 1.0 + 0.3 * dist(rng);
        for (auto& b : params.beta) b = 0.2 * dist(rng);
        std::vector<double> weights(x.numel());
        for (auto& w_ : weights) w_ = dist(rng);

        auto loss_of = [&](const Tensor4<double>& input, NormParams<double> p) {
            auto y = paired_norm_forward(input, true, p, mode, 1e-3, true);
            double s = 0.0;
            for (std::size_t i = 0; i < y.v.size(); ++i) s += y.v[i] * weights[i];
            return s;
        };

        NormCache<double> cache;
        NormParams<double> run = params;
        auto y = paired_norm_forward(x, true, run, mode, 1e-3, true, &cache);
        Tensor4<double> dy(N, C, H, W);
        for (std::size_t i = 0; i < dy.v.size(); ++i) dy.v[i] = weights[i];
        std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
        auto dx = paired_norm_backward(dy, cache, params, dgamma, dbeta);

        const double h = 1e-6;
        for (std::size_t i = 0; i < x.numel(); i += 7) {
            Tensor4<double> xp = x, xm = x;
            xp.v[i] += h;
            xm.v[i] -= h;
            const double fd = (loss_of(xp, params) - loss_of(xm, params)) / (2 * h);
            REQUIRE(dx.v[i] == Catch::Approx(fd).margin(1e-6));
        }
        for (int ch = 0; ch < C; ++ch) {
            NormParams<double> pp = params, pm = params;
            pp.gamma[ch] += h;
            pm.gamma[ch] -= h;
            REQUIRE(dgamma[ch] == Catch::Approx((loss_of(x, pp) - loss_of(x, pm)) / (2 * h)).margin(1e-6));
            pp = params;
            pm = params;
            pp.beta[ch] += h;
            pm.beta[ch] -= h;
            REQUIRE(dbeta[ch] == Catch::Approx((loss_of(x, pp) - loss_of(x, pm)) / (2 * h)).margin(1e-6));
        }
    }
}
