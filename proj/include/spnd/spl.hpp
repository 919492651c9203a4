#pragma once
// Per-class self-paced selection: pace schedules, per-class thresholds from
// quota quantiles, the closed-form binary weight solve, the objective it
// minimizes, and an exhaustive oracle for small instances.
//
// All functions are pure; losses and thresholds are doubles throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace spnd {

// One scored sample as seen by the scheduler.
struct SplItem {
    std::string id;
    int cls = 0;
    double loss = 0.0;
};

using Selection = std::map<std::string, std::uint8_t>;  // id -> {0,1}
using Lambdas = std::map<int, double>;                  // class -> threshold

struct PaceSchedule {
    std::vector<double> fractions;  // strictly increasing, last == 1.0
    int n_paces() const { return static_cast<int>(fractions.size()); }
};

// [start, start+step, ...] capped at 1.0. Defaults give the six-pace
// 50%..100% schedule.
inline PaceSchedule pace_schedule(double start = 0.5, double step = 0.1) {
    if (!(start > 0.0) || start > 1.0) throw std::invalid_argument("pace_schedule: start must lie in (0,1]");
    if (!(step > 0.0)) throw std::invalid_argument("pace_schedule: step must be > 0");
    PaceSchedule s;
    // Integer stepping sidesteps 0.5+0.1+... drift; fractions land exactly on
    // the intended grid.
    const long long denom = 1000000;
    const long long istart = std::llround(start * denom);
    const long long istep = std::llround(step * denom);
    for (long long f = istart; f < denom; f += istep) s.fractions.push_back(static_cast<double>(f) / denom);
    s.fractions.push_back(1.0);
    return s;
}

inline int pace_quota(double fraction, std::size_t class_size) {
    return static_cast<int>(std::ceil(fraction * static_cast<double>(class_size) - 1e-12));
}

// Threshold placement per class: quota m = ceil(fraction*n); lambda is the
// midpoint of the m-th and (m+1)-th smallest losses, or boundary + delta when
// the quota exhausts the class or the two order statistics tie.
inline Lambdas pace_lambdas(const std::map<int, std::vector<double>>& per_class_losses, double fraction) {
    if (!(fraction > 0.0) || fraction > 1.0) throw std::invalid_argument("pace_lambdas: fraction must lie in (0,1]");
    Lambdas lambdas;
    for (const auto& [cls, losses] : per_class_losses) {
        if (losses.empty()) throw std::invalid_argument("pace_lambdas: class " + std::to_string(cls) + " is empty");
        std::vector<double> sorted = losses;
        std::sort(sorted.begin(), sorted.end());
        const int m = pace_quota(fraction, sorted.size());
        const double boundary = sorted[m - 1];
        double lambda;
        if (m == static_cast<int>(sorted.size()) || sorted[m] == boundary) {
            lambda = boundary + 1e-6 * (1.0 + std::abs(boundary));
        } else {
            lambda = 0.5 * (boundary + sorted[m]);
        }
        lambdas[cls] = lambda;
    }
    return lambdas;
}

// Eq.-style closed-form minimizer for fixed model parameters: selected iff
// loss strictly below the class threshold.
inline Selection solve_weights(const std::vector<SplItem>& items, const Lambdas& lambdas) {
    Selection sel;
    for (const auto& it : items) {
        auto l = lambdas.find(it.cls);
        if (l == lambdas.end())
            throw std::invalid_argument("solve_weights: no lambda for class " + std::to_string(it.cls));
        sel[it.id] = it.loss < l->second ? 1 : 0;
    }
    return sel;
}

// Objective the alternating search minimizes over v:
//   sum_k sum_i v*loss - sum_k lambda_k * sum_i v
inline double spl_objective(const std::vector<SplItem>& items, const Selection& selection, const Lambdas& lambdas) {
    double obj = 0.0;
    for (const auto& it : items) {
        auto s = selection.find(it.id);
        if (s == selection.end() || s->second == 0) continue;
        auto l = lambdas.find(it.cls);
        if (l == lambdas.end())
            throw std::invalid_argument("spl_objective: no lambda for class " + std::to_string(it.cls));
        obj += it.loss - l->second;
    }
    return obj;
}

// Exhaustive minimizer over all 2^n binary vectors; ties broken toward v=0 to
// match the strict inequality of the closed form. Verification oracle only.
inline Selection brute_force_weights(const std::vector<SplItem>& items, const Lambdas& lambdas) {
    const std::size_t n = items.size();
    if (n > 20) throw std::invalid_argument("brute_force_weights: instance too large (n > 20)");
    std::vector<double> margin(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto l = lambdas.find(items[i].cls);
        if (l == lambdas.end())
            throw std::invalid_argument("brute_force_weights: no lambda for class " + std::to_string(items[i].cls));
        margin[i] = items[i].loss - l->second;
    }
    std::uint32_t best_mask = 0;
    double best_obj = 0.0;
    int best_pop = 0;
    bool first = true;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        double obj = 0.0;
        int pop = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (mask & (1u << i)) {
                obj += margin[i];
                ++pop;
            }
        if (first || obj < best_obj || (obj == best_obj && pop < best_pop)) {
            best_mask = mask;
            best_obj = obj;
            best_pop = pop;
            first = false;
        }
    }
    Selection sel;
    for (std::size_t i = 0; i < n; ++i) sel[items[i].id] = (best_mask & (1u << i)) ? 1 : 0;
    return sel;
}

// ---------------------------------------------------------------------------
// Pace pipeline
// ---------------------------------------------------------------------------

struct PaceState {
    int pace_index = 0;  // 0-based
    double fraction = 1.0;
    Lambdas lambdas;
    Selection selection;
    std::map<std::string, double> per_sample_loss;

    int selected_count() const {
        int n = 0;
        for (const auto& [id, v] : selection) n += v;
        return n;
    }
};

// Quota-exact selection for one pace. Per class, losses are stable-sorted and
// the first ceil(fraction*n) samples admitted; boundary duplicates beyond the
// quota are trimmed in insertion order (a per-class scalar threshold alone
// cannot split exact ties). Equals solve_weights(pace_lambdas(...)) whenever
// no duplicate spans the quota boundary.
inline PaceState select_with_quota(const std::vector<SplItem>& items, double fraction, int pace_index = 0) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw std::invalid_argument("select_with_quota: fraction must lie in (0,1]");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < items.size(); ++i) by_class[items[i].cls].push_back(i);

    PaceState state;
    state.pace_index = pace_index;
    state.fraction = fraction;
    for (const auto& it : items) state.per_sample_loss[it.id] = it.loss;

    std::map<int, std::vector<double>> per_class_losses;
    for (const auto& [cls, idx] : by_class) {
        auto& ls = per_class_losses[cls];
        for (auto i : idx) ls.push_back(items[i].loss);
    }
    state.lambdas = pace_lambdas(per_class_losses, fraction);

    for (const auto& [cls, idx] : by_class) {
        std::vector<std::size_t> order = idx;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return items[a].loss < items[b].loss; });
        const int m = pace_quota(fraction, order.size());
        for (std::size_t r = 0; r < order.size(); ++r)
            state.selection[items[order[r]].id] = r < static_cast<std::size_t>(m) ? 1 : 0;
    }
    return state;
}

// Selection log row schema shared by trainer outputs and audits.
inline std::string selection_csv_header() { return "pace,sample_id,class,loss,selected"; }

inline void append_selection_csv(std::ostream& out, const PaceState& state,
                                 const std::map<std::string, int>& classes) {
    for (const auto& [id, v] : state.selection) {
        std::ostringstream row;
        row << state.pace_index << ',' << id << ',' << classes.at(id) << ',' << state.per_sample_loss.at(id) << ','
            << static_cast<int>(v);
        out << row.str() << "\n";
    }
}

} // namespace spnd
