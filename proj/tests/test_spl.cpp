#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "spnd/spl.hpp"

using namespace spnd;

namespace {

std::vector<SplItem> make_items(const std::vector<std::pair<int, double>>& cls_loss) {
    std::vector<SplItem> items;
    for (std::size_t i = 0; i < cls_loss.size(); ++i)
        items.push_back({"x" + std::to_string(i), cls_loss[i].first, cls_loss[i].second});
    return items;
}

} // namespace

TEST_CASE("pace_schedule defaults to the six 50%..100% paces") {
    auto s = pace_schedule();
    REQUIRE(s.fractions == std::vector<double>{0.5, 0.6, 0.7, 0.8, 0.9, 1.0});
}

TEST_CASE("pace_schedule degenerate and capped forms") {
    REQUIRE(pace_schedule(1.0, 0.1).fractions == std::vector<double>{1.0});
    REQUIRE(pace_schedule(0.7, 0.2).fractions == std::vector<double>{0.7, 0.9, 1.0});
    REQUIRE_THROWS_AS(pace_schedule(0.0, 0.1), std::invalid_argument);
    REQUIRE_THROWS_AS(pace_schedule(0.5, 0.0), std::invalid_argument);
}

TEST_CASE("pace_lambdas places the threshold at the quota midpoint") {
    // Independent order-statistics oracle: sort a copy, take the midpoint.
    std::vector<double> losses{0.1, 0.2, 0.3, 0.4};
    std::vector<double> sorted = losses;
    std::sort(sorted.begin(), sorted.end());
    const int m = static_cast<int>(std::ceil(0.5 * sorted.size()));
    const double expected = 0.5 * (sorted[m - 1] + sorted[m]);
    auto lambdas = pace_lambdas({{0, losses}}, 0.5);
    REQUIRE(lambdas.at(0) == Catch::Approx(expected));
    REQUIRE(lambdas.at(0) == Catch::Approx(0.25));
}

TEST_CASE("pace_lambdas at fraction 1.0 clears every loss") {
    auto lambdas = pace_lambdas({{0, {0.3, 0.7}}}, 1.0);
    REQUIRE(lambdas.at(0) > 0.7);
    auto sel = solve_weights(make_items({{0, 0.3}, {0, 0.7}}), lambdas);
    REQUIRE(sel.at("x0") == 1);
    REQUIRE(sel.at("x1") == 1);
}

TEST_CASE("pace_lambdas tie case keeps both boundary duplicates") {
    auto lambdas = pace_lambdas({{0, {0.3, 0.3, 0.5, 0.7}}}, 0.5);
    REQUIRE(lambdas.at(0) == Catch::Approx(0.4));
    auto sel = solve_weights(make_items({{0, 0.3}, {0, 0.3}, {0, 0.5}, {0, 0.7}}), lambdas);
    REQUIRE(sel.at("x0") == 1);
    REQUIRE(sel.at("x1") == 1);
    REQUIRE(sel.at("x2") == 0);
    REQUIRE(sel.at("x3") == 0);
}

TEST_CASE("pace_lambdas rejects empty classes and bad fractions") {
    REQUIRE_THROWS_AS(pace_lambdas({{0, {}}}, 0.5), std::invalid_argument);
    REQUIRE_THROWS_AS(pace_lambdas({{0, {0.1}}}, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(pace_lambdas({{0, {0.1}}}, 1.5), std::invalid_argument);
}

TEST_CASE("solve_weights applies the strict threshold rule") {
    auto sel = solve_weights(make_items({{0, 0.1}, {0, 0.9}, {0, 0.4}}), {{0, 0.5}});
    REQUIRE(sel.at("x0") == 1);
    REQUIRE(sel.at("x1") == 0);
    REQUIRE(sel.at("x2") == 1);
}

TEST_CASE("solve_weights with unbounded thresholds selects everything") {
    const double inf = std::numeric_limits<double>::infinity();
    auto items = make_items({{0, 5.0}, {1, 100.0}, {2, 0.0}});
    auto sel = solve_weights(items, {{0, inf}, {1, inf}, {2, inf}});
    for (const auto& [id, v] : sel) REQUIRE(v == 1);
}

TEST_CASE("solve_weights requires a lambda for every class present") {
    REQUIRE_THROWS_AS(solve_weights(make_items({{3, 0.1}}), {{0, 0.5}}), std::invalid_argument);
}

TEST_CASE("spl_objective arithmetic") {
    auto items = make_items({{0, 0.2}});
    REQUIRE(spl_objective(items, {{"x0", 0}}, {{0, 0.5}}) == 0.0);
    REQUIRE(spl_objective(items, {{"x0", 1}}, {{0, 0.5}}) == Catch::Approx(-0.3));
}

TEST_CASE("solve_weights matches the exhaustive oracle with pace-derived lambdas") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> loss(0.0, 2.0);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = std::uniform_int_distribution<int>(3, 12)(rng);
        std::vector<SplItem> items;
        std::map<int, std::vector<double>> per_class;
        for (int i = 0; i < n; ++i) {
            const int cls = std::uniform_int_distribution<int>(0, 2)(rng);
            const double l = loss(rng);
            items.push_back({"x" + std::to_string(i), cls, l});
            per_class[cls].push_back(l);
        }
        const double fraction = std::vector<double>{0.5, 0.7, 1.0}[trial % 3];
        auto lambdas = pace_lambdas(per_class, fraction);
        auto fast = solve_weights(items, lambdas);
        auto brute = brute_force_weights(items, lambdas);
        REQUIRE(fast == brute);

        // The closed form attains the enumerated minimum.
        const double best = spl_objective(items, brute, lambdas);
        for (int probe = 0; probe < 20; ++probe) {
            Selection random_sel;
            for (const auto& it : items)
                random_sel[it.id] = std::uniform_int_distribution<int>(0, 1)(rng);
            REQUIRE(spl_objective(items, random_sel, lambdas) >= best - 1e-12);
        }
    }
}

TEST_CASE("brute_force_weights boundary semantics") {
    REQUIRE(brute_force_weights(make_items({{0, 0.3}}), {{0, 0.5}}).at("x0") == 1);
    REQUIRE(brute_force_weights(make_items({{0, 0.5}}), {{0, 0.5}}).at("x0") == 0);  // strict inequality
    REQUIRE(solve_weights(make_items({{0, 0.5}}), {{0, 0.5}}).at("x0") == 0);
    std::vector<SplItem> too_big(21, SplItem{"x", 0, 0.1});
    REQUIRE_THROWS_AS(brute_force_weights(too_big, {{0, 1.0}}), std::invalid_argument);
}

TEST_CASE("raising thresholds never deselects") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> loss(0.0, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<SplItem> items;
        for (int i = 0; i < 15; ++i)
            items.push_back({"x" + std::to_string(i), std::uniform_int_distribution<int>(0, 2)(rng), loss(rng)});
        Lambdas lo, hi;
        for (int c = 0; c < 3; ++c) {
            lo[c] = loss(rng);
            hi[c] = lo[c] + std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        }
        auto sel_lo = solve_weights(items, lo);
        auto sel_hi = solve_weights(items, hi);
        for (const auto& [id, v] : sel_lo)
            if (v == 1) REQUIRE(sel_hi.at(id) == 1);
    }
}

TEST_CASE("select_with_quota hits the ceil quota exactly, duplicates included") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<SplItem> items;
        std::map<int, int> class_sizes;
        const int n = std::uniform_int_distribution<int>(4, 40)(rng);
        for (int i = 0; i < n; ++i) {
            const int cls = std::uniform_int_distribution<int>(0, 2)(rng);
            // Coarse grid forces frequent exact duplicates.
            const double l = 0.25 * std::uniform_int_distribution<int>(0, 7)(rng);
            items.push_back({"x" + std::to_string(i), cls, l});
            ++class_sizes[cls];
        }
        for (double fraction : {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
            auto state = select_with_quota(items, fraction);
            std::map<int, int> picked;
            for (const auto& it : items) picked[it.cls] += state.selection.at(it.id);
            for (const auto& [cls, size] : class_sizes) {
                const int quota = static_cast<int>(std::ceil(fraction * size - 1e-12));
                REQUIRE(picked[cls] == quota);
            }
        }
    }
}

TEST_CASE("select_with_quota equals threshold selection without boundary ties") {
    std::mt19937_64 rng(37);
    std::uniform_real_distribution<double> loss(0.0, 2.0);  // continuous, ties have measure zero
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<SplItem> items;
        std::map<int, std::vector<double>> per_class;
        for (int i = 0; i < 20; ++i) {
            const int cls = std::uniform_int_distribution<int>(0, 2)(rng);
            const double l = loss(rng);
            items.push_back({"x" + std::to_string(i), cls, l});
            per_class[cls].push_back(l);
        }
        const double fraction = 0.7;
        auto state = select_with_quota(items, fraction);
        auto direct = solve_weights(items, pace_lambdas(per_class, fraction));
        REQUIRE(state.selection == direct);
    }
}

TEST_CASE("per-class selection is invariant to positive rescaling of a class") {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<SplItem> items;
        for (int i = 0; i < 24; ++i) {
            const int cls = std::uniform_int_distribution<int>(0, 2)(rng);
            const double l = 0.2 * std::uniform_int_distribution<int>(0, 9)(rng);
            items.push_back({"x" + std::to_string(i), cls, l});
        }
        const double scale = std::uniform_real_distribution<double>(0.1, 9.0)(rng);
        const int target_cls = trial % 3;
        std::vector<SplItem> scaled = items;
        for (auto& it : scaled)
            if (it.cls == target_cls) it.loss *= scale;

        auto a = select_with_quota(items, 0.6);
        auto b = select_with_quota(scaled, 0.6);
        for (const auto& it : items) REQUIRE(a.selection.at(it.id) == b.selection.at(it.id));
    }
}
