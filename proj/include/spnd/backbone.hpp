#pragma once
// Configurable convolutional feature extractor. Both streams of a pair travel
// the same weights as one packed batch, so cross-stream normalization falls
// out of the batch layout. Plain stacked stages at desk scale; basic residual
// blocks (normalized shortcut projections included) for the full-scale preset.
//
// Forward/backward are hand-rolled; the inner loops are im2col + Eigen GEMM.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "spnd/common.hpp"
#include "spnd/norm.hpp"
#include "spnd/tensor.hpp"

namespace spnd {

enum class Variant { paired, dual, baseline };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::paired: return "paired";
        case Variant::dual: return "dual";
        case Variant::baseline: return "baseline";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "paired") return Variant::paired;
    if (s == "dual") return Variant::dual;
    if (s == "baseline") return Variant::baseline;
    throw std::invalid_argument("unknown variant: '" + s + "'");
}

struct BackboneConfig {
    int input_size = 48;
    int input_channels = 1;
    std::vector<int> stage_channels = {16, 32, 64, 128};
    int blocks_per_stage = 0;  // 0 = plain conv stages, >0 = residual blocks per stage
    bool stem_pool = false;    // 2x2 max pool after the stem (residual presets)
    int feature_dim = 128;
    NormMode norm_mode = NormMode::joint;
    double epsilon = 1e-5;
    Variant variant = Variant::paired;

    void validate() const {
        if (stage_channels.empty()) throw std::invalid_argument("BackboneConfig: no stages");
        if (feature_dim != stage_channels.back())
            throw std::invalid_argument("BackboneConfig: feature_dim must equal the last stage width");
        if (!(epsilon > 0)) throw std::invalid_argument("BackboneConfig: epsilon must be > 0");
        if (input_size < 8 || input_channels < 1) throw std::invalid_argument("BackboneConfig: bad input shape");
    }

    // CPU-friendly preset used by the verification harness.
    static BackboneConfig desk() { return BackboneConfig{}; }

    // Mirrors an 18-layer residual net: stem + 4 stages x 2 basic blocks.
    static BackboneConfig full() {
        BackboneConfig c;
        c.input_size = 224;
        c.input_channels = 3;
        c.stage_channels = {64, 128, 256, 512};
        c.blocks_per_stage = 2;
        c.stem_pool = true;
        c.feature_dim = 512;
        return c;
    }
};

template <class T>
struct ParamRef {
    std::string name;
    std::vector<T>* value = nullptr;
    std::vector<T>* grad = nullptr;  // null for state tensors (running statistics)
};

struct ForwardCtx {
    bool training = false;
    bool paired = false;  // batch is [target | reference] halves
    bool grad = false;    // build caches for a following backward
};

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

// col(row, p) layout: row = (ci*k + ky)*k + kx, p = oy*ow + ox, column-major
// so one output position's receptive field is contiguous.
template <class T>
inline void im2col(const Tensor4<T>& x, int sample, int k, int stride, int pad, int oh, int ow, T* col) {
    const int K = x.c * k * k;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            T* dst = col + (static_cast<std::size_t>(oy) * ow + ox) * K;
            for (int ci = 0; ci < x.c; ++ci) {
                const T* plane = x.channel(sample, ci);
                for (int ky = 0; ky < k; ++ky) {
                    const int y = oy * stride - pad + ky;
                    for (int kx = 0; kx < k; ++kx) {
                        const int xx = ox * stride - pad + kx;
                        *dst++ = (y >= 0 && y < x.h && xx >= 0 && xx < x.w)
                                     ? plane[static_cast<std::size_t>(y) * x.w + xx]
                                     : T(0);
                    }
                }
            }
        }
}

template <class T>
inline void col2im_add(const T* col, int c, int h, int w, int k, int stride, int pad, int oh, int ow, T* out) {
    const int K = c * k * k;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            const T* src = col + (static_cast<std::size_t>(oy) * ow + ox) * K;
            for (int ci = 0; ci < c; ++ci) {
                T* plane = out + static_cast<std::size_t>(ci) * h * w;
                for (int ky = 0; ky < k; ++ky) {
                    const int y = oy * stride - pad + ky;
                    for (int kx = 0; kx < k; ++kx) {
                        const int xx = ox * stride - pad + kx;
                        if (y >= 0 && y < h && xx >= 0 && xx < w) plane[static_cast<std::size_t>(y) * w + xx] += src[0];
                        ++src;
                    }
                }
            }
        }
}

} // namespace detail

template <class T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor4<T> forward(const Tensor4<T>& x, const ForwardCtx& ctx) = 0;
    virtual Tensor4<T> backward(const Tensor4<T>& dy) = 0;
    virtual void collect(std::vector<ParamRef<T>>& params, std::vector<ParamRef<T>>& state) = 0;
    virtual void init(std::mt19937_64& rng) = 0;
    virtual void zero_grad() = 0;
};

// 2-D convolution, square kernel, no bias (a normalization always follows).
template <class T>
class Conv2d final : public Layer<T> {
public:
    Conv2d(std::string name, int in_ch, int out_ch, int k, int stride, int pad)
        : name_(std::move(name)), in_(in_ch), out_(out_ch), k_(k), stride_(stride), pad_(pad),
          w_(static_cast<std::size_t>(out_ch) * in_ch * k * k, T(0)), dw_(w_.size(), T(0)) {}

    Tensor4<T> forward(const Tensor4<T>& x, const ForwardCtx& ctx) override {
        if (x.c != in_) throw std::invalid_argument(name_ + ": channel mismatch");
        const int oh = (x.h + 2 * pad_ - k_) / stride_ + 1;
        const int ow = (x.w + 2 * pad_ - k_) / stride_ + 1;
        if (oh < 1 || ow < 1) throw std::invalid_argument(name_ + ": output collapsed to zero size");
        Tensor4<T> y(x.n, out_, oh, ow);
        const int K = in_ * k_ * k_;
        const int P = oh * ow;
        Eigen::Map<const detail::MatRM<T>> W(w_.data(), out_, K);
        std::vector<T> col(static_cast<std::size_t>(K) * P);
        for (int i = 0; i < x.n; ++i) {
            detail::im2col(x, i, k_, stride_, pad_, oh, ow, col.data());
            Eigen::Map<const detail::MatCM<T>> C(col.data(), K, P);
            Eigen::Map<detail::MatRM<T>> O(y.channel(i, 0), out_, P);
            O.noalias() = W * C;
        }
        if (ctx.grad) {
            x_ = x;
            oh_ = oh;
            ow_ = ow;
        }
        return y;
    }

    Tensor4<T> backward(const Tensor4<T>& dy) override {
        const int K = in_ * k_ * k_;
        const int P = oh_ * ow_;
        Tensor4<T> dx(x_.n, x_.c, x_.h, x_.w);
        Eigen::Map<const detail::MatRM<T>> W(w_.data(), out_, K);
        Eigen::Map<detail::MatRM<T>> dW(dw_.data(), out_, K);
        std::vector<T> col(static_cast<std::size_t>(K) * P);
        detail::MatCM<T> dcol(K, P);
        for (int i = 0; i < x_.n; ++i) {
            detail::im2col(x_, i, k_, stride_, pad_, oh_, ow_, col.data());
            Eigen::Map<const detail::MatCM<T>> C(col.data(), K, P);
            Eigen::Map<const detail::MatRM<T>> dY(dy.channel(i, 0), out_, P);
            dW.noalias() += dY * C.transpose();
            dcol.noalias() = W.transpose() * dY;
            detail::col2im_add(dcol.data(), in_, x_.h, x_.w, k_, stride_, pad_, oh_, ow_, dx.channel(i, 0));
        }
        return dx;
    }

    void collect(std::vector<ParamRef<T>>& params, std::vector<ParamRef<T>>&) override {
        params.push_back({name_ + ".w", &w_, &dw_});
    }

    void init(std::mt19937_64& rng) override {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in_ * k_ * k_)));
        for (auto& v : w_) v = static_cast<T>(dist(rng));
    }

    void zero_grad() override { std::fill(dw_.begin(), dw_.end(), T(0)); }

private:
    std::string name_;
    int in_, out_, k_, stride_, pad_;
    std::vector<T> w_, dw_;
    Tensor4<T> x_;
    int oh_ = 0, ow_ = 0;
};

template <class T>
class NormLayer final : public Layer<T> {
public:
    NormLayer(std::string name, int channels, NormMode mode, double eps)
        : name_(std::move(name)), params_(channels), mode_(mode), eps_(eps), dgamma_(channels, T(0)),
          dbeta_(channels, T(0)) {}

    Tensor4<T> forward(const Tensor4<T>& x, const ForwardCtx& ctx) override {
        return paired_norm_forward(x, ctx.paired, params_, mode_, eps_, ctx.training, ctx.grad ? &cache_ : nullptr);
    }

    Tensor4<T> backward(const Tensor4<T>& dy) override {
        return paired_norm_backward(dy, cache_, params_, dgamma_, dbeta_);
    }

    void collect(std::vector<ParamRef<T>>& params, std::vector<ParamRef<T>>& state) override {
        params.push_back({name_ + ".gamma", &params_.gamma, &dgamma_});
        params.push_back({name_ + ".beta", &params_.beta, &dbeta_});
        state.push_back({name_ + ".running_mean", &params_.running_mean, nullptr});
        state.push_back({name_ + ".running_var", &params_.running_var, nullptr});
    }

    void init(std::mt19937_64&) override {
        std::fill(params_.gamma.begin(), params_.gamma.end(), T(1));
        std::fill(params_.beta.begin(), params_.beta.end(), T(0));
        std::fill(params_.running_mean.begin(), params_.running_mean.end(), T(0));
        std::fill(params_.running_var.begin(), params_.running_var.end(), T(1));
    }

    void zero_grad() override {
        std::fill(dgamma_.begin(), dgamma_.end(), T(0));
        std::fill(dbeta_.begin(), dbeta_.end(), T(0));
    }

    NormParams<T>& params() { return params_; }

private:
    std::string name_;
    NormParams<T> params_;
    NormMode mode_;
    double eps_;
    std::vector<T> dgamma_, dbeta_;
    NormCache<T> cache_;
};

template <class T>
class ReLU final : public Layer<T> {
public:
    Tensor4<T> forward(const Tensor4<T>& x, const ForwardCtx& ctx) override {
        Tensor4<T> y = x;
        for (auto& v : y.v)
            if (v < T(0)) v = T(0);
        if (ctx.grad) y_ = y;
        return y;
    }

    Tensor4<T> backward(const Tensor4<T>& dy) override {
        Tensor4<T> dx = dy;
        for (std::size_t i = 0; i < dx.v.size(); ++i)
            if (y_.v[i] <= T(0)) dx.v[i] = T(0);
        return dx;
    }

    void collect(std::vector<ParamRef<T>>&, std::vector<ParamRef<T>>&) override {}
    void init(std::mt19937_64&) override {}
    void zero_grad() override {}

private:
    Tensor4<T> y_;
};

template <class T>
class MaxPool2 final : public Layer<T> {
public:
    Tensor4<T> forward(const Tensor4<T>& x, const ForwardCtx& ctx) override {
        const int oh = x.h / 2, ow = x.w / 2;
        Tensor4<T> y(x.n, x.c, oh, ow);
        if (ctx.grad) {
            arg_.assign(y.numel(), 0);
            in_shape_ = {x.n, x.c, x.h, x.w};
        }
        std::size_t oi = 0;
        for (int i = 0; i < x.n; ++i)
            for (int ch = 0; ch < x.c; ++ch) {
                const T* plane = x.channel(i, ch);
                T* out = y.channel(i, ch);
                for (int yy = 0; yy < oh; ++yy)
                    for (int xx = 0; xx < ow; ++xx) {
                        std::size_t best = static_cast<std::size_t>(2 * yy) * x.w + 2 * xx;
                        T bv = plane[best];
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const std::size_t idx = static_cast<std::size_t>(2 * yy + dy) * x.w + (2 * xx + dx);
                                if (plane[idx] > bv) {
                                    bv = plane[idx];
                                    best = idx;
                                }
                            }
                        out[static_cast<std::size_t>(yy) * ow + xx] = bv;
                        if (ctx.grad) arg_[oi] = best;
                        ++oi;
                    }
            }
        return y;
    }

    Tensor4<T> backward(const Tensor4<T>& dy) override {
        Tensor4<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
        std::size_t oi = 0;
        for (int i = 0; i < dy.n; ++i)
            for (int ch = 0; ch < dy.c; ++ch) {
                T* plane = dx.channel(i, ch);
                const T* dsrc = dy.channel(i, ch);
                const std::size_t cnt = dy.plane();
                for (std::size_t j = 0; j < cnt; ++j) {
                    plane[arg_[oi]] += dsrc[j];
                    ++oi;
                }
            }
        return dx;
    }

    void collect(std::vector<ParamRef<T>>&, std::vector<ParamRef<T>>&) override {}
    void init(std::mt19937_64&) override {}
    void zero_grad() override {}

private:
    std::vector<std::size_t> arg_;
    std::array<int, 4> in_shape_{};
};

// conv-norm-relu-conv-norm plus shortcut (identity, or 1x1 conv + norm when
// the shape changes), rectified after the sum. Paired statistics apply at
// every normalization site, shortcut included.
template <class T>
class ResidualBlock final : public Layer<T> {
public:
    ResidualBlock(const std::string& name, int in_ch, int out_ch, int stride, NormMode mode, double eps)
        : conv1_(name + ".conv1", in_ch, out_ch, 3, stride, 1),
          n1_(name + ".n1", out_ch, mode, eps),
          conv2_(name + ".conv2", out_ch, out_ch, 3, 1, 1),
          n2_(name + ".n2", out_ch, mode, eps),
          project_(stride != 1 || in_ch != out_ch) {
        if (project_) {
            proj_ = std::make_unique<Conv2d<T>>(name + ".proj", in_ch, out_ch, 1, stride, 0);
            nproj_ = std::make_unique<NormLayer<T>>(name + ".nproj", out_ch, mode, eps);
        }
    }

    Tensor4<T> forward(const Tensor4<T>& x, const ForwardCtx& ctx) override {
        Tensor4<T> main = n1_.forward(conv1_.forward(x, ctx), ctx);
        main = relu_mid_.forward(main, ctx);
        main = n2_.forward(conv2_.forward(main, ctx), ctx);
        Tensor4<T> shortcut = project_ ? nproj_->forward(proj_->forward(x, ctx), ctx) : x;
        if (!main.same_shape(shortcut)) throw std::logic_error("residual block: branch shapes diverged");
        for (std::size_t i = 0; i < main.v.size(); ++i) main.v[i] += shortcut.v[i];
        return relu_out_.forward(main, ctx);
    }

    Tensor4<T> backward(const Tensor4<T>& dy) override {
        Tensor4<T> dsum = relu_out_.backward(dy);
        Tensor4<T> dmain = conv1_.backward(n1_.backward(relu_mid_.backward(conv2_.backward(n2_.backward(dsum)))));
        if (project_) {
            Tensor4<T> dshort = proj_->backward(nproj_->backward(dsum));
            for (std::size_t i = 0; i < dmain.v.size(); ++i) dmain.v[i] += dshort.v[i];
        } else {
            for (std::size_t i = 0; i < dmain.v.size(); ++i) dmain.v[i] += dsum.v[i];
        }
        return dmain;
    }

    void collect(std::vector<ParamRef<T>>& params, std::vector<ParamRef<T>>& state) override {
        conv1_.collect(params, state);
        n1_.collect(params, state);
        conv2_.collect(params, state);
        n2_.collect(params, state);
        if (project_) {
            proj_->collect(params, state);
            nproj_->collect(params, state);
        }
    }

    void init(std::mt19937_64& rng) override {
        conv1_.init(rng);
        n1_.init(rng);
        conv2_.init(rng);
        n2_.init(rng);
        if (project_) {
            proj_->init(rng);
            nproj_->init(rng);
        }
    }

    void zero_grad() override {
        conv1_.zero_grad();
        n1_.zero_grad();
        conv2_.zero_grad();
        n2_.zero_grad();
        if (project_) {
            proj_->zero_grad();
            nproj_->zero_grad();
        }
    }

private:
    Conv2d<T> conv1_;
    NormLayer<T> n1_;
    Conv2d<T> conv2_;
    NormLayer<T> n2_;
    ReLU<T> relu_mid_, relu_out_;
    bool project_;
    std::unique_ptr<Conv2d<T>> proj_;
    std::unique_ptr<NormLayer<T>> nproj_;
};

// The feature extractor: configured layer stack plus global average pooling
// down to feature_dim. Single writer during training; inference forwards are
// read-only over parameters and running statistics.
template <class T>
class Backbone {
public:
    Backbone() = default;

    explicit Backbone(const BackboneConfig& cfg, std::string prefix = "") : cfg_(cfg), prefix_(std::move(prefix)) {
        cfg_.validate();
        int cin = cfg.input_channels;
        if (cfg.blocks_per_stage == 0) {
            for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
                const int ch = cfg.stage_channels[s];
                const std::string base = prefix_ + "s" + std::to_string(s);
                layers_.push_back(std::make_unique<Conv2d<T>>(base + ".conv", cin, ch, 3, 2, 1));
                layers_.push_back(std::make_unique<NormLayer<T>>(base + ".norm", ch, cfg.norm_mode, cfg.epsilon));
                layers_.push_back(std::make_unique<ReLU<T>>());
                cin = ch;
            }
        } else {
            const int stem = cfg.stage_channels.front();
            layers_.push_back(std::make_unique<Conv2d<T>>(prefix_ + "stem.conv", cin, stem, 3, 2, 1));
            layers_.push_back(std::make_unique<NormLayer<T>>(prefix_ + "stem.norm", stem, cfg.norm_mode, cfg.epsilon));
            layers_.push_back(std::make_unique<ReLU<T>>());
            if (cfg.stem_pool) layers_.push_back(std::make_unique<MaxPool2<T>>());
            cin = stem;
            for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
                const int ch = cfg.stage_channels[s];
                for (int b = 0; b < cfg.blocks_per_stage; ++b) {
                    const int stride = (b == 0 && s > 0) ? 2 : 1;
                    const std::string base = prefix_ + "s" + std::to_string(s) + "b" + std::to_string(b);
                    layers_.push_back(std::make_unique<ResidualBlock<T>>(base, cin, ch, stride, cfg.norm_mode,
                                                                         cfg.epsilon));
                    cin = ch;
                }
            }
        }
    }

    const BackboneConfig& config() const { return cfg_; }

    void init(std::uint64_t seed) {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            std::mt19937_64 rng(derive_seed(seed, 0x1417, i));
            layers_[i]->init(rng);
        }
    }

    // [N, D] pooled features, row-major.
    std::vector<T> forward_features(const Tensor4<T>& x, const ForwardCtx& ctx) {
        if (x.h != cfg_.input_size || x.w != cfg_.input_size || x.c != cfg_.input_channels)
            throw std::invalid_argument("backbone: input shape mismatch");
        Tensor4<T> cur = x;
        for (auto& l : layers_) cur = l->forward(cur, ctx);
        last_n_ = cur.n;
        last_h_ = cur.h;
        last_w_ = cur.w;
        const std::size_t plane = cur.plane();
        std::vector<T> feat(static_cast<std::size_t>(cur.n) * cur.c);
        for (int i = 0; i < cur.n; ++i)
            for (int ch = 0; ch < cur.c; ++ch) {
                double acc = 0.0;
                const T* p = cur.channel(i, ch);
                for (std::size_t j = 0; j < plane; ++j) acc += static_cast<double>(p[j]);
                feat[static_cast<std::size_t>(i) * cur.c + ch] = static_cast<T>(acc / static_cast<double>(plane));
            }
        return feat;
    }

    // dfeat is [N, D]; returns the gradient at the network input.
    Tensor4<T> backward_features(const std::vector<T>& dfeat) {
        const int D = cfg_.feature_dim;
        Tensor4<T> dcur(last_n_, D, last_h_, last_w_);
        const T inv = T(1) / static_cast<T>(last_h_ * last_w_);
        for (int i = 0; i < last_n_; ++i)
            for (int ch = 0; ch < D; ++ch) {
                const T g = dfeat[static_cast<std::size_t>(i) * D + ch] * inv;
                T* p = dcur.channel(i, ch);
                for (std::size_t j = 0; j < dcur.plane(); ++j) p[j] = g;
            }
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) dcur = (*it)->backward(dcur);
        return dcur;
    }

    void collect(std::vector<ParamRef<T>>& params, std::vector<ParamRef<T>>& state) {
        for (auto& l : layers_) l->collect(params, state);
    }

    void zero_grad() {
        for (auto& l : layers_) l->zero_grad();
    }

private:
    BackboneConfig cfg_;
    std::string prefix_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    int last_n_ = 0, last_h_ = 0, last_w_ = 0;
};

} // namespace spnd
