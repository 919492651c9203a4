#pragma once
// Cross-stream paired normalization. When a batch carries (target, reference)
// halves, per-channel statistics can be shared across both streams so the two
// feature distributions are aligned before subtraction.
//
// Modes:
//   joint      - mean/variance over all 2M*h*w entries of both streams
//   literal    - the printed two-stream equations with their 1/M constant:
//                mu and sigma^2 come out exactly twice resp. 2*(var+mu^2)
//                of the joint statistics; kept as a reproduction flag
//   per_stream - each stream normalized with its own statistics
//
// On a single-stream batch all modes coincide with plain batch normalization.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spnd/tensor.hpp"

namespace spnd {

enum class NormMode { joint, literal, per_stream };

inline const char* to_string(NormMode m) {
    switch (m) {
        case NormMode::joint: return "joint";
        case NormMode::literal: return "literal";
        case NormMode::per_stream: return "per_stream";
    }
    return "?";
}

inline NormMode norm_mode_from_string(const std::string& s) {
    if (s == "joint") return NormMode::joint;
    if (s == "literal") return NormMode::literal;
    if (s == "per_stream") return NormMode::per_stream;
    throw std::invalid_argument("unknown norm mode: '" + s + "'");
}

constexpr double kRunningStatMomentum = 0.1;

template <class T>
struct NormParams {
    std::vector<T> gamma, beta;
    std::vector<T> running_mean, running_var;

    NormParams() = default;
    explicit NormParams(int channels)
        : gamma(channels, T(1)), beta(channels, T(0)), running_mean(channels, T(0)), running_var(channels, T(1)) {}

    int channels() const { return static_cast<int>(gamma.size()); }
};

template <class T>
struct PairedFeatures {
    Tensor4<T> tar;
    std::optional<Tensor4<T>> ref;

    bool paired() const { return ref.has_value(); }
};

namespace detail {

// A statistics group: contiguous sample range sharing one (mu, var), with the
// normalization constant alpha (1 = true mean/variance over the group,
// 2 = the printed literal constants spanning both streams).
struct StatGroup {
    int begin = 0, end = 0;
    double alpha = 1.0;
};

inline std::vector<StatGroup> stat_groups(int batch, bool paired_halves, NormMode mode) {
    if (!paired_halves) return {{0, batch, 1.0}};
    const int half = batch / 2;
    switch (mode) {
        case NormMode::joint: return {{0, batch, 1.0}};
        case NormMode::literal: return {{0, batch, 2.0}};
        case NormMode::per_stream: return {{0, half, 1.0}, {half, batch, 1.0}};
    }
    return {{0, batch, 1.0}};
}

} // namespace detail

// Per-channel (mu, sigma^2) as the given mode computes them during training.
// For per_stream on a paired batch this returns the two streams' statistics
// averaged (the value used for the running-stat update).
template <class T>
inline void batch_norm_stats(const Tensor4<T>& x, bool paired_halves, NormMode mode,
                             std::vector<double>& mu_out, std::vector<double>& var_out) {
    const auto groups = detail::stat_groups(x.n, paired_halves, mode);
    mu_out.assign(x.c, 0.0);
    var_out.assign(x.c, 0.0);
    const std::size_t plane = x.plane();
    for (int ch = 0; ch < x.c; ++ch) {
        double mu_acc = 0.0, var_acc = 0.0;
        for (const auto& g : groups) {
            const std::size_t n_entries = static_cast<std::size_t>(g.end - g.begin) * plane;
            double sum = 0.0;
            for (int i = g.begin; i < g.end; ++i) {
                const T* p = x.channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j) sum += static_cast<double>(p[j]);
            }
            const double mu = g.alpha * sum / static_cast<double>(n_entries);
            double sq = 0.0;
            for (int i = g.begin; i < g.end; ++i) {
                const T* p = x.channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j) {
                    const double d = static_cast<double>(p[j]) - mu;
                    sq += d * d;
                }
            }
            const double var = g.alpha * sq / static_cast<double>(n_entries);
            mu_acc += mu;
            var_acc += var;
        }
        mu_out[ch] = mu_acc / static_cast<double>(groups.size());
        var_out[ch] = var_acc / static_cast<double>(groups.size());
    }
}

template <class T>
struct NormCache {
    std::vector<detail::StatGroup> groups;
    // per group x channel, indexed [g * channels + ch]
    std::vector<double> mu, inv_std;
    Tensor4<T> xhat;
    bool training = false;
};

// Forward pass. In training mode batch statistics are used and running stats
// updated by EMA; in inference mode the stored running statistics apply to
// every entry. The activation is the caller's business.
template <class T>
inline Tensor4<T> paired_norm_forward(const Tensor4<T>& x, bool paired_halves, NormParams<T>& params, NormMode mode,
                                      double epsilon, bool training, NormCache<T>* cache = nullptr) {
    if (params.channels() != x.c) throw std::invalid_argument("paired_norm: channel count mismatch");
    if (paired_halves && (x.n % 2) != 0) throw std::invalid_argument("paired_norm: paired batch must have even size");
    if (training && x.n == 0) throw std::invalid_argument("paired_norm: zero-size batch in training mode");

    Tensor4<T> y(x.n, x.c, x.h, x.w);
    const std::size_t plane = x.plane();

    if (!training) {
        for (int ch = 0; ch < x.c; ++ch) {
            const double inv = 1.0 / std::sqrt(static_cast<double>(params.running_var[ch]) + epsilon);
            const double mu = params.running_mean[ch];
            const double g = params.gamma[ch], b = params.beta[ch];
            for (int i = 0; i < x.n; ++i) {
                const T* px = x.channel(i, ch);
                T* py = y.channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j)
                    py[j] = static_cast<T>(g * ((static_cast<double>(px[j]) - mu) * inv) + b);
            }
        }
        if (cache) cache->training = false;
        return y;
    }

    const auto groups = detail::stat_groups(x.n, paired_halves, mode);
    if (cache) {
        cache->groups = groups;
        cache->mu.assign(groups.size() * x.c, 0.0);
        cache->inv_std.assign(groups.size() * x.c, 0.0);
        cache->xhat = Tensor4<T>(x.n, x.c, x.h, x.w);
        cache->training = true;
    }

    std::vector<double> run_mu(x.c, 0.0), run_var(x.c, 0.0);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        for (int ch = 0; ch < x.c; ++ch) {
            const std::size_t n_entries = static_cast<std::size_t>(g.end - g.begin) * plane;
            double sum = 0.0;
            for (int i = g.begin; i < g.end; ++i) {
                const T* p = x.channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j) sum += static_cast<double>(p[j]);
            }
            const double mu = g.alpha * sum / static_cast<double>(n_entries);
            double sq = 0.0;
            for (int i = g.begin; i < g.end; ++i) {
                const T* p = x.channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j) {
                    const double d = static_cast<double>(p[j]) - mu;
                    sq += d * d;
                }
            }
            const double var = g.alpha * sq / static_cast<double>(n_entries);
            const double inv = 1.0 / std::sqrt(var + epsilon);
            const double gam = params.gamma[ch], bet = params.beta[ch];
            for (int i = g.begin; i < g.end; ++i) {
                const T* px = x.channel(i, ch);
                T* py = y.channel(i, ch);
                T* ph = cache ? cache->xhat.channel(i, ch) : nullptr;
                for (std::size_t j = 0; j < plane; ++j) {
                    const double xh = (static_cast<double>(px[j]) - mu) * inv;
                    if (ph) ph[j] = static_cast<T>(xh);
                    py[j] = static_cast<T>(gam * xh + bet);
                }
            }
            if (cache) {
                cache->mu[gi * x.c + ch] = mu;
                cache->inv_std[gi * x.c + ch] = inv;
            }
            run_mu[ch] += mu / static_cast<double>(groups.size());
            run_var[ch] += var / static_cast<double>(groups.size());
        }
    }

    for (int ch = 0; ch < x.c; ++ch) {
        params.running_mean[ch] = static_cast<T>((1.0 - kRunningStatMomentum) * params.running_mean[ch] +
                                                 kRunningStatMomentum * run_mu[ch]);
        params.running_var[ch] = static_cast<T>((1.0 - kRunningStatMomentum) * params.running_var[ch] +
                                                kRunningStatMomentum * run_var[ch]);
    }
    return y;
}

// Backward through the training-mode forward. For a statistics group of n
// entries with constant alpha, mu = alpha*m and var = (alpha/n)*sum (x-mu)^2,
// which gives (G = dL/dy * gamma, S = sum G*xhat):
//   dx = inv_std * (G - (alpha/n)*sum(G) - (alpha/n)*xhat*S
//                     + alpha*(1-alpha)/n * inv_std * mu * S)
// The trailing term vanishes for alpha=1 (plain batch norm).
template <class T>
inline Tensor4<T> paired_norm_backward(const Tensor4<T>& dy, const NormCache<T>& cache, const NormParams<T>& params,
                                       std::vector<T>& dgamma, std::vector<T>& dbeta) {
    if (!cache.training) throw std::logic_error("paired_norm_backward: cache is not from a training forward");
    const auto& xhat = cache.xhat;
    Tensor4<T> dx(dy.n, dy.c, dy.h, dy.w);
    const std::size_t plane = dy.plane();
    const int C = dy.c;

    for (std::size_t gi = 0; gi < cache.groups.size(); ++gi) {
        const auto& g = cache.groups[gi];
        const double alpha = g.alpha;
        for (int ch = 0; ch < C; ++ch) {
            const double n_entries = static_cast<double>(g.end - g.begin) * static_cast<double>(plane);
            const double gam = params.gamma[ch];
            const double inv = cache.inv_std[gi * C + ch];
            const double mu = cache.mu[gi * C + ch];

            double sum_g = 0.0, sum_gx = 0.0, sum_dy = 0.0, sum_dyx = 0.0;
            for (int i = g.begin; i < g.end; ++i) {
                const T* pd = dy.channel(i, ch);
                const T* ph = xhat.channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j) {
                    const double d = pd[j], xh = ph[j];
                    sum_dy += d;
                    sum_dyx += d * xh;
                }
            }
            sum_g = gam * sum_dy;
            sum_gx = gam * sum_dyx;
            dgamma[ch] += static_cast<T>(sum_dyx);
            dbeta[ch] += static_cast<T>(sum_dy);

            const double c2 = alpha / n_entries * sum_g;
            const double c3 = alpha / n_entries * sum_gx;
            const double c4 = alpha * (1.0 - alpha) / n_entries * inv * mu * sum_gx;
            for (int i = g.begin; i < g.end; ++i) {
                const T* pd = dy.channel(i, ch);
                const T* ph = xhat.channel(i, ch);
                T* px = dx.channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j) {
                    const double G = gam * static_cast<double>(pd[j]);
                    px[j] = static_cast<T>(inv * (G - c2 - c3 * static_cast<double>(ph[j]) + c4));
                }
            }
        }
    }
    return dx;
}

// Spec-shaped operation over explicit (F_tar, F_ref) feature maps. Packs the
// two streams into one batch, normalizes, and splits the result.
template <class T>
inline PairedFeatures<T> paired_normalize(const PairedFeatures<T>& feats, NormParams<T>& params, NormMode mode,
                                          double epsilon, bool training) {
    const Tensor4<T>& t = feats.tar;
    if (!feats.ref) {
        PairedFeatures<T> out;
        out.tar = paired_norm_forward(t, /*paired_halves=*/false, params, mode, epsilon, training);
        return out;
    }
    if (!t.same_shape(*feats.ref)) throw std::invalid_argument("paired_normalize: stream shapes differ");
    Tensor4<T> packed(2 * t.n, t.c, t.h, t.w);
    std::copy(t.v.begin(), t.v.end(), packed.v.begin());
    std::copy(feats.ref->v.begin(), feats.ref->v.end(), packed.v.begin() + t.v.size());
    Tensor4<T> y = paired_norm_forward(packed, /*paired_halves=*/true, params, mode, epsilon, training);
    PairedFeatures<T> out;
    out.tar = Tensor4<T>(t.n, t.c, t.h, t.w);
    out.ref = Tensor4<T>(t.n, t.c, t.h, t.w);
    std::copy(y.v.begin(), y.v.begin() + t.v.size(), out.tar.v.begin());
    std::copy(y.v.begin() + t.v.size(), y.v.end(), out.ref->v.begin());
    return out;
}

// Training-mode statistics of a paired batch, for audits and property tests.
template <class T>
inline void paired_norm_stats(const PairedFeatures<T>& feats, NormMode mode, std::vector<double>& mu,
                              std::vector<double>& var) {
    if (!feats.ref) {
        batch_norm_stats(feats.tar, false, mode, mu, var);
        return;
    }
    const Tensor4<T>& t = feats.tar;
    Tensor4<T> packed(2 * t.n, t.c, t.h, t.w);
    std::copy(t.v.begin(), t.v.end(), packed.v.begin());
    std::copy(feats.ref->v.begin(), feats.ref->v.end(), packed.v.begin() + t.v.size());
    batch_norm_stats(packed, true, mode, mu, var);
}

} // namespace spnd
