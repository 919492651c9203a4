#pragma once
// Alternating optimization driver. Per pace: freeze the selection, run Adam
// over the selected subset with pair-synchronized augmentation; between
// paces: freeze the parameters, recompute full-set losses in inference mode
// and re-solve the selection. Parameters warm-start across paces.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spnd/dataset.hpp"
#include "spnd/model.hpp"
#include "spnd/spl.hpp"

namespace spnd {

struct TrainConfig {
    Variant variant = Variant::paired;
    NormMode norm_mode = NormMode::joint;

    // Optimizer (the only one supported is adam).
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;

    int batch_size = 128;
    int total_epochs = 250;          // 250 in-the-lab preset, 150 in-the-wild
    double pace_start = 0.5;
    double pace_step = 0.1;
    bool spl_enabled = true;
    std::uint64_t seed = 0;
    std::string epoch_allocation = "equal_floor_remainder_last";

    bool reset_optimizer_per_pace = true;  // moments reset at pace boundaries
    bool warm_start = true;                // false: re-initialize parameters each pace
    bool classifier_bias = false;

    AugmentationSpec augmentation;

    // Backbone shape.
    int input_size = 48;
    int input_channels = 1;
    std::vector<int> stage_channels = {16, 32, 64, 128};
    int blocks_per_stage = 0;
    bool stem_pool = false;
    int feature_dim = 128;
    double epsilon = 1e-5;

    BackboneConfig backbone() const {
        BackboneConfig b;
        b.input_size = input_size;
        b.input_channels = input_channels;
        b.stage_channels = stage_channels;
        b.blocks_per_stage = blocks_per_stage;
        b.stem_pool = stem_pool;
        b.feature_dim = feature_dim;
        b.norm_mode = norm_mode;
        b.epsilon = epsilon;
        b.variant = variant;
        return b;
    }

    PaceSchedule schedule() const {
        return spl_enabled ? pace_schedule(pace_start, pace_step) : PaceSchedule{{1.0}};
    }

    void validate() const {
        if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (variant == Variant::paired && batch_size < 2)
            throw std::invalid_argument("TrainConfig: batch_size must be >= 2 in paired mode");
        if (epoch_allocation != "equal_floor_remainder_last")
            throw std::invalid_argument("TrainConfig: unknown epoch_allocation '" + epoch_allocation + "'");
        const int paces = schedule().n_paces();
        if (total_epochs < paces)
            throw std::invalid_argument("TrainConfig: total_epochs must be >= the number of paces");
        backbone().validate();
    }

    // Presets: in-the-lab full scale and the CPU-runnable desk scale.
    static TrainConfig desk() {
        TrainConfig c;
        c.batch_size = 32;
        c.total_epochs = 60;
        return c;
    }

    static TrainConfig full() {
        TrainConfig c;
        c.input_size = 224;
        c.input_channels = 3;
        c.stage_channels = {64, 128, 256, 512};
        c.blocks_per_stage = 2;
        c.stem_pool = true;
        c.feature_dim = 512;
        return c;
    }
};

// Flat JSON mirror of TrainConfig; unknown keys are rejected.
inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return nlohmann::json{{"variant", to_string(c.variant)},
                          {"norm_mode", to_string(c.norm_mode)},
                          {"optimizer", "adam"},
                          {"lr", c.lr},
                          {"beta1", c.beta1},
                          {"beta2", c.beta2},
                          {"batch_size", c.batch_size},
                          {"total_epochs", c.total_epochs},
                          {"pace_start", c.pace_start},
                          {"pace_step", c.pace_step},
                          {"spl_enabled", c.spl_enabled},
                          {"seed", c.seed},
                          {"epoch_allocation", c.epoch_allocation},
                          {"reset_optimizer_per_pace", c.reset_optimizer_per_pace},
                          {"warm_start", c.warm_start},
                          {"classifier_bias", c.classifier_bias},
                          {"flip_prob", c.augmentation.horizontal_flip_prob},
                          {"noise_sigma", c.augmentation.gaussian_noise_sigma},
                          {"input_size", c.input_size},
                          {"input_channels", c.input_channels},
                          {"stage_channels", c.stage_channels},
                          {"blocks_per_stage", c.blocks_per_stage},
                          {"stem_pool", c.stem_pool},
                          {"feature_dim", c.feature_dim},
                          {"epsilon", c.epsilon}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    const nlohmann::json defaults = train_config_to_json(c);
    for (const auto& [key, value] : j.items())
        if (!defaults.contains(key)) throw std::invalid_argument("TrainConfig: unknown key '" + key + "'");
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    };
    if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
    if (j.contains("norm_mode")) c.norm_mode = norm_mode_from_string(j.at("norm_mode").get<std::string>());
    if (j.contains("optimizer") && j.at("optimizer").get<std::string>() != "adam")
        throw std::invalid_argument("TrainConfig: only the adam optimizer is supported");
    get("lr", c.lr);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("batch_size", c.batch_size);
    get("total_epochs", c.total_epochs);
    get("pace_start", c.pace_start);
    get("pace_step", c.pace_step);
    get("spl_enabled", c.spl_enabled);
    get("seed", c.seed);
    get("epoch_allocation", c.epoch_allocation);
    get("reset_optimizer_per_pace", c.reset_optimizer_per_pace);
    get("warm_start", c.warm_start);
    get("classifier_bias", c.classifier_bias);
    get("flip_prob", c.augmentation.horizontal_flip_prob);
    get("noise_sigma", c.augmentation.gaussian_noise_sigma);
    get("input_size", c.input_size);
    get("input_channels", c.input_channels);
    get("stage_channels", c.stage_channels);
    get("blocks_per_stage", c.blocks_per_stage);
    get("stem_pool", c.stem_pool);
    get("feature_dim", c.feature_dim);
    get("epsilon", c.epsilon);
    return c;
}

// ---------------------------------------------------------------------------
// Epoch allocation
// ---------------------------------------------------------------------------

// floor(total/n) per pace, remainder on the last pace.
inline std::vector<int> allocate_epochs(int total_epochs, int n_paces) {
    if (n_paces < 1) throw std::invalid_argument("allocate_epochs: need at least one pace");
    if (total_epochs < n_paces)
        throw std::invalid_argument("allocate_epochs: total_epochs below one epoch per pace");
    std::vector<int> out(n_paces, total_epochs / n_paces);
    out.back() += total_epochs % n_paces;
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class T>
class Adam {
public:
    Adam(double lr, double beta1, double beta2, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(const std::vector<ParamRef<T>>& params) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i].value->size(), 0.0);
                v_[i].assign(params[i].value->size(), 0.0);
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, t_);
        const double c2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& value = *params[i].value;
            auto& grad = *params[i].grad;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < value.size(); ++j) {
                const double g = static_cast<double>(grad[j]);
                m[j] = b1_ * m[j] + (1.0 - b1_) * g;
                v[j] = b2_ * v[j] + (1.0 - b2_) * g * g;
                const double mhat = m[j] / c1;
                const double vhat = v[j] / c2;
                value[j] = static_cast<T>(static_cast<double>(value[j]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    void reset() {
        m_.clear();
        v_.clear();
        t_ = 0;
    }

private:
    double lr_, b1_, b2_, eps_;
    long long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Histories and batch assembly
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;  // contiguous across paces
    int pace = 0;
    double mean_loss = 0.0;
    int selected_total = 0;
    std::map<int, int> selected_per_class;
};

struct PaceLog {
    PaceState state;
    std::map<std::string, int> classes;          // sample_id -> class
    std::map<std::string, int> batch_counts;     // gradient contribution counter per sample
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::vector<PaceLog> paces;
    std::vector<std::string> checkpoints;

    double final_loss() const { return epochs.empty() ? 0.0 : epochs.back().mean_loss; }
};

template <class T>
inline void fill_image(Tensor4<T>& batch, int slot, const Image& img) {
    for (int ch = 0; ch < img.c; ++ch) {
        T* plane = batch.channel(slot, ch);
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) plane[static_cast<std::size_t>(y) * img.w + x] = img.at(y, x, ch);
    }
}

// Packs pair images into NCHW batches; reference tensor only when every pair
// carries one (paired variant).
template <class T>
struct AssembledBatch {
    Tensor4<T> tar;
    std::optional<Tensor4<T>> ref;
    std::vector<int> labels;
};

template <class T>
inline AssembledBatch<T> assemble_batch(const std::vector<PairedSample>& pairs, const std::vector<std::size_t>& idx,
                                        const BackboneConfig& cfg) {
    AssembledBatch<T> out;
    const int M = static_cast<int>(idx.size());
    out.tar = Tensor4<T>(M, cfg.input_channels, cfg.input_size, cfg.input_size);
    const bool want_ref = cfg.variant == Variant::paired;
    if (want_ref) out.ref = Tensor4<T>(M, cfg.input_channels, cfg.input_size, cfg.input_size);
    out.labels.resize(M);
    for (int i = 0; i < M; ++i) {
        const PairedSample& p = pairs[idx[i]];
        if (!p.target.image) throw std::runtime_error("assemble_batch: pair '" + p.target.sample_id + "' has no image");
        if (p.target.image->h != cfg.input_size || p.target.image->w != cfg.input_size ||
            p.target.image->c != cfg.input_channels)
            throw std::runtime_error("assemble_batch: image shape mismatch for '" + p.target.sample_id + "'");
        fill_image(out.tar, i, *p.target.image);
        if (want_ref) {
            if (!p.reference || !p.reference->image)
                throw std::runtime_error("assemble_batch: paired variant requires reference images");
            fill_image(*out.ref, i, *p.reference->image);
        }
        out.labels[i] = p.label;
    }
    return out;
}

// Full-set per-sample losses in inference mode: running statistics, no
// augmentation. This is the signal the pace selection consumes.
template <class T>
inline std::vector<SplItem> inference_losses(Model<T>& model, const std::vector<PairedSample>& pairs,
                                             int batch_size = 64) {
    std::vector<SplItem> items(pairs.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(pairs.size(), start + batch_size); ++i) idx.push_back(i);
        auto batch = assemble_batch<T>(pairs, idx, model.config());
        auto fb = model.forward(batch.tar, batch.ref ? &*batch.ref : nullptr, batch.labels, /*training=*/false);
        for (std::size_t i = 0; i < idx.size(); ++i)
            items[idx[i]] = SplItem{pairs[idx[i]].target.sample_id, pairs[idx[i]].label, fb.losses[i]};
    }
    return items;
}

// ---------------------------------------------------------------------------
// run_pace / train_spnd
// ---------------------------------------------------------------------------

// One pace of gradient steps over the selected subset only. Batches are
// reshuffled each epoch; each pair's augmentation draw is keyed by (seed,
// epoch, dataset index) so it does not depend on batch composition.
template <class T>
inline void run_pace(Model<T>& model, const std::vector<PairedSample>& pairs,
                     const std::vector<std::size_t>& selected, int epochs, const TrainConfig& cfg, Adam<T>& adam,
                     int pace_index, int epoch_offset, TrainHistory& history) {
    if (selected.empty()) throw std::invalid_argument("run_pace: empty selection");
    std::vector<ParamRef<T>> params, state;
    model.collect(params, state);

    PaceLog* log = history.paces.empty() ? nullptr : &history.paces.back();
    for (int e = 0; e < epochs; ++e) {
        const int epoch = epoch_offset + e;
        std::vector<std::size_t> order = selected;
        std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x0DDE, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        std::size_t n_seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<PairedSample> aug;
            std::vector<std::size_t> local;
            aug.reserve(stop - start);
            for (std::size_t b = start; b < stop; ++b) {
                const std::size_t di = order[b];
                aug.push_back(augment_pair(pairs[di], cfg.augmentation,
                                           derive_seed(cfg.seed ^ cfg.augmentation.seed, epoch, di)));
                local.push_back(aug.size() - 1);
                if (log) ++log->batch_counts[pairs[di].target.sample_id];
            }
            auto batch = assemble_batch<T>(aug, local, model.config());
            model.zero_grad();
            auto fb = model.forward(batch.tar, batch.ref ? &*batch.ref : nullptr, batch.labels, /*training=*/true,
                                    /*grad=*/true);
            const double mean_loss = model.backward(fb, batch.labels);
            adam.step(params);
            loss_sum += mean_loss * static_cast<double>(stop - start);
            n_seen += stop - start;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.pace = pace_index;
        rec.mean_loss = loss_sum / static_cast<double>(n_seen);
        rec.selected_total = static_cast<int>(selected.size());
        for (std::size_t di : selected) ++rec.selected_per_class[pairs[di].label];
        history.epochs.push_back(std::move(rec));
    }
}

template <class T>
struct TrainResult {
    Model<T> model;
    TrainHistory history;
};

// The alternating search: per pace, solve the selection from full-set
// inference losses, then descend on the selected subset, warm-starting the
// parameters across paces. spl_enabled=false collapses to one pace at
// fraction 1.0.
template <class T>
inline TrainResult<T> train_spnd(const std::vector<PairedSample>& pairs, int n_classes, const TrainConfig& cfg,
                                 const std::function<void(Model<T>&, int)>& on_pace_end = {}) {
    cfg.validate();
    if (pairs.empty()) throw std::invalid_argument("train_spnd: no training pairs");
    for (const auto& p : pairs) {
        auto issues = validate_pair(p);
        if (!issues.empty())
            throw std::invalid_argument("train_spnd: invalid pair '" + p.target.sample_id + "': " + issues.front());
        if (cfg.variant == Variant::paired && !p.reference)
            throw std::invalid_argument("train_spnd: paired variant requires references");
    }

    TrainResult<T> result{Model<T>(cfg.backbone(), n_classes, cfg.classifier_bias), {}};
    result.model.init(cfg.seed);

    const PaceSchedule schedule = cfg.schedule();
    const std::vector<int> epoch_budget = allocate_epochs(cfg.total_epochs, schedule.n_paces());

    Adam<T> adam(cfg.lr, cfg.beta1, cfg.beta2);
    int epoch_offset = 0;
    for (int p = 0; p < schedule.n_paces(); ++p) {
        if (!cfg.warm_start && p > 0) result.model.init(cfg.seed);
        if (cfg.reset_optimizer_per_pace || !cfg.warm_start) adam.reset();

        const auto items = inference_losses(result.model, pairs);
        PaceState state = select_with_quota(items, schedule.fractions[p], p);

        PaceLog log;
        log.state = state;
        for (const auto& it : items) log.classes[it.id] = it.cls;
        result.history.paces.push_back(std::move(log));

        std::vector<std::size_t> selected;
        for (std::size_t i = 0; i < pairs.size(); ++i)
            if (state.selection.at(pairs[i].target.sample_id)) selected.push_back(i);

        run_pace(result.model, pairs, selected, epoch_budget[p], cfg, adam, p, epoch_offset, result.history);
        epoch_offset += epoch_budget[p];
        if (on_pace_end) on_pace_end(result.model, p);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Run outputs
// ---------------------------------------------------------------------------

inline void write_history_csv(const std::string& path, const TrainHistory& history) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "epoch,pace,loss,selected_total\n";
    out << std::setprecision(17);
    for (const auto& e : history.epochs)
        out << e.epoch << ',' << e.pace << ',' << e.mean_loss << ',' << e.selected_total << "\n";
}

inline void write_selection_csvs(const std::string& dir, const TrainHistory& history) {
    for (const auto& log : history.paces) {
        const std::string path = dir + "/selection_pace" + std::to_string(log.state.pace_index) + ".csv";
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write '" + path + "'");
        out << selection_csv_header() << "\n";
        out << std::setprecision(17);
        append_selection_csv(out, log.state, log.classes);
    }
}

template <class T>
inline void write_run_outputs(const std::string& out_dir, const TrainConfig& cfg, TrainResult<T>& result) {
    std::filesystem::create_directories(out_dir);
    write_history_csv(out_dir + "/history.csv", result.history);
    write_selection_csvs(out_dir, result.history);
    save_checkpoint(result.model, out_dir + "/final.ckpt");
    result.history.checkpoints.push_back(out_dir + "/final.ckpt");
    nlohmann::json meta{{"version", kVersion}, {"seed", cfg.seed}, {"config", train_config_to_json(cfg)},
                        {"pace_fractions", cfg.schedule().fractions}};
    std::ofstream meta_out(out_dir + "/run_meta.json");
    meta_out << meta.dump(2) << "\n";
}

// Full run with artifacts: per-pace checkpoints, selection logs, history,
// final checkpoint and run_meta.json under out_dir.
template <class T>
inline TrainResult<T> run_training_job(const std::vector<PairedSample>& pairs, int n_classes, const TrainConfig& cfg,
                                       const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> pace_ckpts;
    auto result = train_spnd<T>(pairs, n_classes, cfg, [&](Model<T>& m, int pace) {
        const std::string path = out_dir + "/pace" + std::to_string(pace) + ".ckpt";
        save_checkpoint(m, path);
        pace_ckpts.push_back(path);
    });
    result.history.checkpoints = pace_ckpts;
    write_run_outputs(out_dir, cfg, result);
    return result;
}

} // namespace spnd
