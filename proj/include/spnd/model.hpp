#pragma once
// A trainable model: one backbone (paired/baseline) or two (dual), plus the
// linear softmax head over NDFs. Owns the variant-specific packing of target
// and reference streams and the loss/gradient plumbing the trainer drives.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spnd/backbone.hpp"
#include "spnd/datamodel.hpp"
#include "spnd/ndf_head.hpp"

namespace spnd {

template <class T>
struct ForwardBatch {
    std::vector<T> v_tar;           // M x D
    std::vector<T> v_ref;           // M x D, empty for baseline
    std::vector<T> ndf;             // M x D
    std::vector<T> log_probs;       // M x K
    std::vector<double> losses;     // per sample
    int M = 0;
};

template <class T>
class Model {
public:
    Model() = default;

    Model(const BackboneConfig& cfg, int n_classes, bool classifier_bias = false)
        : cfg_(cfg), net_(cfg, cfg.variant == Variant::dual ? "expr." : ""),
          head_(n_classes, cfg.feature_dim, classifier_bias),
          dtheta_(head_.theta.size(), T(0)), dbias_(head_.bias.size(), T(0)) {
        if (cfg.variant == Variant::dual) neutral_net_.emplace(cfg, "neutral.");
    }

    const BackboneConfig& config() const { return cfg_; }
    Variant variant() const { return cfg_.variant; }
    int n_classes() const { return head_.K; }
    ClassifierParams<T>& head() { return head_; }
    Backbone<T>& net() { return net_; }
    Backbone<T>& neutral_net() { return *neutral_net_; }

    void init(std::uint64_t seed) {
        net_.init(derive_seed(seed, 0xBB01));
        // Identical initial parameters for both dual streams: the difference
        // head starts at exactly zero and the two networks diverge through
        // their opposite gradients.
        if (neutral_net_) neutral_net_->init(derive_seed(seed, 0xBB01));
        init_classifier(head_, derive_seed(seed, 0xC1A5));
    }

    void collect(std::vector<ParamRef<T>>& params, std::vector<ParamRef<T>>& state) {
        net_.collect(params, state);
        if (neutral_net_) neutral_net_->collect(params, state);
        params.push_back({"head.theta", &head_.theta, &dtheta_});
        if (head_.has_bias) params.push_back({"head.bias", &head_.bias, &dbias_});
    }

    void zero_grad() {
        net_.zero_grad();
        if (neutral_net_) neutral_net_->zero_grad();
        std::fill(dtheta_.begin(), dtheta_.end(), T(0));
        std::fill(dbias_.begin(), dbias_.end(), T(0));
    }

    // Basic feature extraction: target and reference traverse the same
    // weights as one packed batch, cross-stream statistics included. For
    // baseline, ref must be absent; returns (V_tar, none).
    std::pair<std::vector<T>, std::vector<T>> forward_basic(const Tensor4<T>& tar, const Tensor4<T>* ref,
                                                            bool training, bool grad = false) {
        ForwardCtx ctx{training, false, grad};
        if (cfg_.variant == Variant::paired) {
            if (!ref) throw std::invalid_argument("forward_basic: paired variant requires references");
            if (!tar.same_shape(*ref)) throw std::invalid_argument("forward_basic: stream shapes differ");
            Tensor4<T> packed(2 * tar.n, tar.c, tar.h, tar.w);
            std::copy(tar.v.begin(), tar.v.end(), packed.v.begin());
            std::copy(ref->v.begin(), ref->v.end(), packed.v.begin() + tar.v.size());
            ctx.paired = true;
            std::vector<T> feat = net_.forward_features(packed, ctx);
            const std::size_t half = static_cast<std::size_t>(tar.n) * cfg_.feature_dim;
            return {std::vector<T>(feat.begin(), feat.begin() + half),
                    std::vector<T>(feat.begin() + half, feat.end())};
        }
        if (ref) throw std::invalid_argument("forward_basic: variant takes no reference stream");
        return {net_.forward_features(tar, ctx), {}};
    }

    // Dual route: expression net and neutral net both read the target image.
    std::pair<std::vector<T>, std::vector<T>> forward_dual(const Tensor4<T>& tar, bool training, bool grad = false) {
        if (cfg_.variant != Variant::dual) throw std::logic_error("forward_dual: model is not the dual variant");
        ForwardCtx ctx{training, false, grad};
        return {net_.forward_features(tar, ctx), neutral_net_->forward_features(tar, ctx)};
    }

    // Full head: features -> NDF -> log-softmax -> per-sample CE.
    ForwardBatch<T> forward(const Tensor4<T>& tar, const Tensor4<T>* ref, const std::vector<int>& labels,
                            bool training, bool grad = false) {
        ForwardBatch<T> out;
        out.M = tar.n;
        switch (cfg_.variant) {
            case Variant::paired: {
                auto [vt, vr] = forward_basic(tar, ref, training, grad);
                out.v_tar = std::move(vt);
                out.v_ref = std::move(vr);
                break;
            }
            case Variant::dual: {
                if (ref) throw std::invalid_argument("forward: dual variant takes no reference stream");
                auto [vt, vr] = forward_dual(tar, training, grad);
                out.v_tar = std::move(vt);
                out.v_ref = std::move(vr);
                break;
            }
            case Variant::baseline: {
                auto [vt, vr] = forward_basic(tar, ref, training, grad);
                out.v_tar = std::move(vt);
                break;
            }
        }
        const int D = cfg_.feature_dim, K = head_.K, M = out.M;
        if (out.v_ref.empty()) {
            out.ndf = out.v_tar;
        } else {
            out.ndf.resize(out.v_tar.size());
            for (std::size_t i = 0; i < out.ndf.size(); ++i) out.ndf[i] = out.v_tar[i] - out.v_ref[i];
        }

        Eigen::Map<const detail::MatRM<T>> F(out.ndf.data(), M, D);
        Eigen::Map<const detail::MatRM<T>> Th(head_.theta.data(), K, D);
        detail::MatRM<T> logits = F * Th.transpose();
        if (head_.has_bias)
            for (int i = 0; i < M; ++i)
                for (int k = 0; k < K; ++k) logits(i, k) += head_.bias[k];

        out.log_probs.resize(static_cast<std::size_t>(M) * K);
        out.losses.resize(M);
        for (int i = 0; i < M; ++i) {
            double zmax = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) zmax = std::max(zmax, static_cast<double>(logits(i, k)));
            double denom = 0.0;
            for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(logits(i, k)) - zmax);
            const double log_denom = std::log(denom) + zmax;
            for (int k = 0; k < K; ++k)
                out.log_probs[static_cast<std::size_t>(i) * K + k] =
                    static_cast<T>(static_cast<double>(logits(i, k)) - log_denom);
            if (!labels.empty())
                out.losses[i] = -static_cast<double>(out.log_probs[static_cast<std::size_t>(i) * K + labels[i]]);
        }
        return out;
    }

    // Backward from mean CE over the batch. Accumulates into all parameter
    // gradients; call zero_grad() before each step.
    double backward(const ForwardBatch<T>& fb, const std::vector<int>& labels) {
        const int D = cfg_.feature_dim, K = head_.K, M = fb.M;
        std::vector<T> dlogits(static_cast<std::size_t>(M) * K);
        double mean_loss = 0.0;
        for (int i = 0; i < M; ++i) {
            mean_loss += fb.losses[i];
            for (int k = 0; k < K; ++k) {
                const double p = std::exp(static_cast<double>(fb.log_probs[static_cast<std::size_t>(i) * K + k]));
                dlogits[static_cast<std::size_t>(i) * K + k] =
                    static_cast<T>((p - (labels[i] == k ? 1.0 : 0.0)) / static_cast<double>(M));
            }
        }
        mean_loss /= std::max(1, M);

        Eigen::Map<const detail::MatRM<T>> dL(dlogits.data(), M, K);
        Eigen::Map<const detail::MatRM<T>> F(fb.ndf.data(), M, D);
        Eigen::Map<const detail::MatRM<T>> Th(head_.theta.data(), K, D);
        Eigen::Map<detail::MatRM<T>> dTh(dtheta_.data(), K, D);
        dTh.noalias() += dL.transpose() * F;
        if (head_.has_bias)
            for (int i = 0; i < M; ++i)
                for (int k = 0; k < K; ++k) dbias_[k] += dlogits[static_cast<std::size_t>(i) * K + k];

        detail::MatRM<T> dndf = dL * Th;  // M x D

        switch (cfg_.variant) {
            case Variant::paired: {
                std::vector<T> dfeat(static_cast<std::size_t>(2 * M) * D);
                for (int i = 0; i < M; ++i)
                    for (int d = 0; d < D; ++d) {
                        dfeat[static_cast<std::size_t>(i) * D + d] = dndf(i, d);
                        dfeat[static_cast<std::size_t>(M + i) * D + d] = -dndf(i, d);
                    }
                net_.backward_features(dfeat);
                break;
            }
            case Variant::dual: {
                std::vector<T> dpos(static_cast<std::size_t>(M) * D), dneg(static_cast<std::size_t>(M) * D);
                for (int i = 0; i < M; ++i)
                    for (int d = 0; d < D; ++d) {
                        dpos[static_cast<std::size_t>(i) * D + d] = dndf(i, d);
                        dneg[static_cast<std::size_t>(i) * D + d] = -dndf(i, d);
                    }
                net_.backward_features(dpos);
                neutral_net_->backward_features(dneg);
                break;
            }
            case Variant::baseline: {
                std::vector<T> dfeat(static_cast<std::size_t>(M) * D);
                for (int i = 0; i < M; ++i)
                    for (int d = 0; d < D; ++d) dfeat[static_cast<std::size_t>(i) * D + d] = dndf(i, d);
                net_.backward_features(dfeat);
                break;
            }
        }
        return mean_loss;
    }

    bool classifier_bias() const { return head_.has_bias; }

private:
    BackboneConfig cfg_;
    Backbone<T> net_;
    std::optional<Backbone<T>> neutral_net_;
    ClassifierParams<T> head_;
    std::vector<T> dtheta_, dbias_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, JSON config echo, then named f64 tensors (parameters
// and running statistics). Stable within a repo version.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'S', 'P', 'N', 'D', 'C', 'K', 'P', '1'};

inline nlohmann::json backbone_config_json(const BackboneConfig& c) {
    return nlohmann::json{{"input_size", c.input_size},
                          {"input_channels", c.input_channels},
                          {"stage_channels", c.stage_channels},
                          {"blocks_per_stage", c.blocks_per_stage},
                          {"stem_pool", c.stem_pool},
                          {"feature_dim", c.feature_dim},
                          {"norm_mode", to_string(c.norm_mode)},
                          {"epsilon", c.epsilon},
                          {"variant", to_string(c.variant)}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.input_size = j.at("input_size").get<int>();
    c.input_channels = j.at("input_channels").get<int>();
    c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
    c.blocks_per_stage = j.at("blocks_per_stage").get<int>();
    c.stem_pool = j.at("stem_pool").get<bool>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.norm_mode = norm_mode_from_string(j.at("norm_mode").get<std::string>());
    c.epsilon = j.at("epsilon").get<double>();
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    return c;
}

template <class T>
inline void save_checkpoint(Model<T>& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    nlohmann::json hdr{{"version", kVersion},
                       {"format", 1},
                       {"n_classes", model.n_classes()},
                       {"classifier_bias", model.classifier_bias()},
                       {"backbone", backbone_config_json(model.config())}};
    const std::string js = hdr.dump();
    out.write(kCheckpointMagic, 8);
    const std::uint64_t jlen = js.size();
    out.write(reinterpret_cast<const char*>(&jlen), 8);
    out.write(js.data(), static_cast<std::streamsize>(js.size()));

    std::vector<ParamRef<T>> params, state;
    model.collect(params, state);
    std::vector<ParamRef<T>> all = params;
    all.insert(all.end(), state.begin(), state.end());
    const std::uint32_t count = static_cast<std::uint32_t>(all.size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& p : all) {
        const std::uint16_t nlen = static_cast<std::uint16_t>(p.name.size());
        out.write(reinterpret_cast<const char*>(&nlen), 2);
        out.write(p.name.data(), nlen);
        const std::uint64_t numel = p.value->size();
        out.write(reinterpret_cast<const char*>(&numel), 8);
        for (T v : *p.value) {
            const double d = static_cast<double>(v);
            out.write(reinterpret_cast<const char*>(&d), 8);
        }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

template <class T>
inline Model<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    std::uint64_t jlen = 0;
    in.read(reinterpret_cast<char*>(&jlen), 8);
    std::string js(jlen, '\0');
    in.read(js.data(), static_cast<std::streamsize>(jlen));
    const nlohmann::json hdr = nlohmann::json::parse(js);
    if (hdr.at("format").get<int>() != 1) throw std::runtime_error("checkpoint: unsupported format version");

    Model<T> model(backbone_config_from_json(hdr.at("backbone")), hdr.at("n_classes").get<int>(),
                   hdr.at("classifier_bias").get<bool>());
    std::vector<ParamRef<T>> params, state;
    model.collect(params, state);
    std::vector<ParamRef<T>> all = params;
    all.insert(all.end(), state.begin(), state.end());

    std::uint32_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 4);
    if (count != all.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
    for (auto& p : all) {
        std::uint16_t nlen = 0;
        in.read(reinterpret_cast<char*>(&nlen), 2);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        if (name != p.name) throw std::runtime_error("checkpoint: tensor '" + name + "' does not match '" + p.name + "'");
        std::uint64_t numel = 0;
        in.read(reinterpret_cast<char*>(&numel), 8);
        if (numel != p.value->size()) throw std::runtime_error("checkpoint: size mismatch for '" + name + "'");
        for (auto& v : *p.value) {
            double d = 0;
            in.read(reinterpret_cast<char*>(&d), 8);
            v = static_cast<T>(d);
        }
    }
    if (!in) throw std::runtime_error("checkpoint: truncated file '" + path + "'");
    return model;
}

// Parameter checksum, used by purity and warm-start audits.
template <class T>
inline double param_checksum(Model<T>& model) {
    std::vector<ParamRef<T>> params, state;
    model.collect(params, state);
    double acc = 0.0;
    std::size_t salt = 1;
    for (const auto& ref : params)
        for (T v : *ref.value) acc += static_cast<double>(v) * static_cast<double>(salt++ % 7919);
    for (const auto& ref : state)
        for (T v : *ref.value) acc += static_cast<double>(v) * static_cast<double>(salt++ % 7919);
    return acc;
}

} // namespace spnd
