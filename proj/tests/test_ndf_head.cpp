#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "spnd/ndf_head.hpp"

using namespace spnd;

TEST_CASE("compute_ndf arithmetic and failure modes") {
    std::vector<double> a{1.0, 2.0, 3.0}, b{0.5, 2.0, 1.0};
    REQUIRE(compute_ndf(a, a) == std::vector<double>{0.0, 0.0, 0.0});
    REQUIRE(compute_ndf(a, std::vector<double>{0, 0, 0}) == a);
    REQUIRE(compute_ndf(a, b) == std::vector<double>{0.5, 0.0, 2.0});
    REQUIRE_THROWS_AS(compute_ndf(a, std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("compute_ndf antisymmetry") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> dist(-3, 3);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> a(16), b(16);
        for (auto& v : a) v = dist(rng);
        for (auto& v : b) v = dist(rng);
        auto ab = compute_ndf(a, b);
        auto ba = compute_ndf(b, a);
        for (std::size_t i = 0; i < ab.size(); ++i) REQUIRE(ab[i] == -ba[i]);
    }
}

TEST_CASE("classify: zero parameters give the uniform distribution") {
    ClassifierParams<double> params(7, 4);
    auto p = classify(std::vector<double>{0.3, -0.1, 2.0, 0.7}, params);
    for (double v : p) REQUIRE(v == Catch::Approx(1.0 / 7));
}

TEST_CASE("classify is invariant to a constant logit shift") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> dist(-1, 1);
    ClassifierParams<double> a(4, 6);
    for (auto& v : a.theta) v = dist(rng);
    std::vector<double> ndf(6);
    for (auto& v : ndf) v = dist(rng);
    // Adding the same vector u to every class row shifts all logits by u.ndf.
    std::vector<double> u(6);
    for (auto& v : u) v = dist(rng);
    ClassifierParams<double> b = a;
    for (int k = 0; k < b.K; ++k)
        for (int d = 0; d < b.D; ++d) b.row(k)[d] += u[d];
    auto pa = classify(ndf, a);
    auto pb = classify(ndf, b);
    for (int k = 0; k < 4; ++k) REQUIRE(pa[k] == Catch::Approx(pb[k]).margin(1e-12));
}

TEST_CASE("classify closed form: logits (ln 3, 0) give (0.75, 0.25)") {
    ClassifierParams<double> params(2, 1);
    params.row(0)[0] = std::log(3.0);
    params.row(1)[0] = 0.0;
    auto p = classify(std::vector<double>{1.0}, params);
    REQUIRE(p[0] == Catch::Approx(3.0 / 4.0));
    REQUIRE(p[1] == Catch::Approx(1.0 / 4.0));
}

TEST_CASE("classify survives large logits and rejects non-finite input") {
    ClassifierParams<double> params(2, 1);
    params.row(0)[0] = 5000.0;
    params.row(1)[0] = -5000.0;
    auto p = classify(std::vector<double>{1.0}, params);
    REQUIRE(std::isfinite(p[0]));
    REQUIRE(p[0] + p[1] == Catch::Approx(1.0));
    REQUIRE_THROWS_AS(classify(std::vector<double>{std::nan("")}, params), std::invalid_argument);
}

TEST_CASE("ce_loss reference points") {
    REQUIRE(ce_loss(std::vector<double>{1.0, 0.0}, 0) == Catch::Approx(0.0));
    REQUIRE(ce_loss(std::vector<double>{std::exp(-1.0), 1.0 - std::exp(-1.0)}, 0) == Catch::Approx(1.0));
    std::vector<double> uniform(7, 1.0 / 7);
    REQUIRE(ce_loss(uniform, 3) == Catch::Approx(std::log(7.0)));
}

TEST_CASE("ce_loss clamps zero probability and counts the event") {
    const auto before = ce_clamp_counter().load();
    const double loss = ce_loss(std::vector<double>{0.0, 1.0}, 0);
    REQUIRE(loss == Catch::Approx(-std::log(1e-12)));
    REQUIRE(ce_clamp_counter().load() == before + 1);
}

TEST_CASE("ce_loss is nonnegative, zero only at certainty") {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> p(5);
        double s = 0;
        for (auto& v : p) {
            v = std::uniform_real_distribution<double>(1e-6, 1.0)(rng);
            s += v;
        }
        for (auto& v : p) v /= s;
        const int k = std::uniform_int_distribution<int>(0, 4)(rng);
        const double l = ce_loss(p, k);
        REQUIRE(l >= 0.0);
        REQUIRE((l == 0.0) == (p[k] == 1.0));
    }
}

TEST_CASE("analytic head gradients match central finite differences") {
    const int K = 7, D = 16;
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const double h = 1e-6;

    auto loss_fn = [&](const std::vector<double>& vt, const std::vector<double>& vr,
                       const ClassifierParams<double>& th, int label) {
        return ce_loss(classify(compute_ndf(vt, vr), th), label);
    };
    auto rel_err = [](double a, double b) {
        return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
    };

    for (int trial = 0; trial < 25; ++trial) {
        ClassifierParams<double> params(K, D);
        for (auto& v : params.theta) v = dist(rng);
        std::vector<double> vt(D), vr(D);
        for (auto& v : vt) v = dist(rng);
        for (auto& v : vr) v = dist(rng);
        const int label = std::uniform_int_distribution<int>(0, K - 1)(rng);

        auto g = head_loss_gradients(vt, vr, params, label);

        for (std::size_t i = 0; i < params.theta.size(); i += 11) {
            ClassifierParams<double> pp = params, pm = params;
            pp.theta[i] += h;
            pm.theta[i] -= h;
            const double fd = (loss_fn(vt, vr, pp, label) - loss_fn(vt, vr, pm, label)) / (2 * h);
            REQUIRE(rel_err(g.dtheta[i], fd) < 1e-4);
        }
        for (int d = 0; d < D; d += 3) {
            auto vp = vt, vm = vt;
            vp[d] += h;
            vm[d] -= h;
            double fd = (loss_fn(vp, vr, params, label) - loss_fn(vm, vr, params, label)) / (2 * h);
            REQUIRE(rel_err(g.dv_tar[d], fd) < 1e-4);
            vp = vr;
            vm = vr;
            vp[d] += h;
            vm[d] -= h;
            fd = (loss_fn(vt, vp, params, label) - loss_fn(vt, vm, params, label)) / (2 * h);
            REQUIRE(rel_err(g.dv_ref[d], fd) < 1e-4);
        }
    }
}
