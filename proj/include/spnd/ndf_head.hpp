#pragma once
// Neutral-expression-disentangled feature head: the subtraction that cancels
// shared disturbance content, a linear softmax classifier over the result,
// and per-sample cross-entropy. Pure functions over explicit parameters.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace spnd {

template <class T>
struct ClassifierParams {
    int K = 0, D = 0;
    std::vector<T> theta;  // K x D, row k is the class-k parameter vector
    bool has_bias = false; // the formulation has none; escape hatch only
    std::vector<T> bias;

    ClassifierParams() = default;
    ClassifierParams(int K_, int D_, bool with_bias = false)
        : K(K_), D(D_), theta(static_cast<std::size_t>(K_) * D_, T(0)), has_bias(with_bias),
          bias(with_bias ? K_ : 0, T(0)) {}

    const T* row(int k) const { return theta.data() + static_cast<std::size_t>(k) * D; }
    T* row(int k) { return theta.data() + static_cast<std::size_t>(k) * D; }
};

// Elementwise target-minus-reference difference.
template <class T>
inline std::vector<T> compute_ndf(const std::vector<T>& v_tar, const std::vector<T>& v_ref) {
    if (v_tar.size() != v_ref.size()) throw std::invalid_argument("compute_ndf: length mismatch");
    std::vector<T> out(v_tar.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_tar[i] - v_ref[i];
    return out;
}

// Count of cross-entropy probability clamps since process start (or last
// reset); clamping a zero probability is reported, never thrown.
inline std::atomic<std::uint64_t>& ce_clamp_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

// Softmax over theta_k . ndf, max-subtracted so large logits cannot overflow.
template <class T>
inline std::vector<T> classify(const std::vector<T>& ndf, const ClassifierParams<T>& params) {
    if (static_cast<int>(ndf.size()) != params.D) throw std::invalid_argument("classify: feature length mismatch");
    for (T v : ndf)
        if (!std::isfinite(static_cast<double>(v))) throw std::invalid_argument("classify: non-finite feature");
    std::vector<T> logits(params.K);
    for (int k = 0; k < params.K; ++k) {
        double z = params.has_bias ? static_cast<double>(params.bias[k]) : 0.0;
        const T* row = params.row(k);
        for (int d = 0; d < params.D; ++d) z += static_cast<double>(row[d]) * static_cast<double>(ndf[d]);
        logits[k] = static_cast<T>(z);
    }
    double zmax = -std::numeric_limits<double>::infinity();
    for (T z : logits) zmax = std::max(zmax, static_cast<double>(z));
    double denom = 0.0;
    std::vector<double> e(params.K);
    for (int k = 0; k < params.K; ++k) {
        e[k] = std::exp(static_cast<double>(logits[k]) - zmax);
        denom += e[k];
    }
    std::vector<T> p(params.K);
    for (int k = 0; k < params.K; ++k) p[k] = static_cast<T>(e[k] / denom);
    return p;
}

template <class T>
inline T ce_loss(const std::vector<T>& p, int label) {
    if (label < 0 || label >= static_cast<int>(p.size())) throw std::invalid_argument("ce_loss: label out of range");
    double pk = static_cast<double>(p[label]);
    if (pk <= 0.0) {
        pk = 1e-12;
        ce_clamp_counter().fetch_add(1, std::memory_order_relaxed);
    }
    return static_cast<T>(-std::log(pk));
}

// Analytic gradients of ce_loss(classify(compute_ndf(v_tar, v_ref)), label)
// with respect to theta, bias and both feature vectors.
template <class T>
struct HeadGradients {
    std::vector<T> dtheta;  // K x D
    std::vector<T> dbias;   // K (empty without bias)
    std::vector<T> dv_tar;  // D
    std::vector<T> dv_ref;  // D
    T loss = T(0);
};

template <class T>
inline HeadGradients<T> head_loss_gradients(const std::vector<T>& v_tar, const std::vector<T>& v_ref,
                                            const ClassifierParams<T>& params, int label) {
    const std::vector<T> ndf = compute_ndf(v_tar, v_ref);
    const std::vector<T> p = classify(ndf, params);
    HeadGradients<T> g;
    g.loss = ce_loss(p, label);
    g.dtheta.assign(static_cast<std::size_t>(params.K) * params.D, T(0));
    if (params.has_bias) g.dbias.assign(params.K, T(0));
    g.dv_tar.assign(params.D, T(0));
    g.dv_ref.assign(params.D, T(0));
    for (int k = 0; k < params.K; ++k) {
        const double dz = static_cast<double>(p[k]) - (k == label ? 1.0 : 0.0);
        if (params.has_bias) g.dbias[k] = static_cast<T>(dz);
        T* dth = g.dtheta.data() + static_cast<std::size_t>(k) * params.D;
        const T* row = params.row(k);
        for (int d = 0; d < params.D; ++d) {
            dth[d] = static_cast<T>(dz * static_cast<double>(ndf[d]));
            g.dv_tar[d] += static_cast<T>(dz * static_cast<double>(row[d]));
        }
    }
    for (int d = 0; d < params.D; ++d) g.dv_ref[d] = -g.dv_tar[d];
    return g;
}

// He-style fan-in initialization for the classifier, deterministic per seed.
template <class T>
inline void init_classifier(ClassifierParams<T>& params, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(params.D)));
    for (auto& v : params.theta) v = static_cast<T>(dist(rng));
    for (auto& v : params.bias) v = T(0);
}

} // namespace spnd
