#pragma once
// Fold evaluation, cross-validation aggregation, the four-row ablation
// harness and NDF embedding export. Fold runs are independent models and may
// execute in parallel; all report writing is single-threaded.

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "spnd/trainer.hpp"

namespace spnd {

struct EvalResult {
    double accuracy = 0.0;
    std::vector<std::vector<long long>> confusion;  // rows true, columns predicted
    std::vector<double> per_class_recall;
    long long n_samples = 0;
};

// Inference-mode evaluation: argmax prediction with ties broken toward the
// lowest class index, no augmentation, no state mutation.
template <class T>
inline EvalResult evaluate(Model<T>& model, const std::vector<PairedSample>& pairs, int batch_size = 64) {
    const int K = model.n_classes();
    EvalResult res;
    res.confusion.assign(K, std::vector<long long>(K, 0));
    res.n_samples = static_cast<long long>(pairs.size());

    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(pairs.size(), start + batch_size); ++i) idx.push_back(i);
        auto batch = assemble_batch<T>(pairs, idx, model.config());
        auto fb = model.forward(batch.tar, batch.ref ? &*batch.ref : nullptr, batch.labels, /*training=*/false);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            int pred = 0;
            T best = fb.log_probs[i * K];
            for (int k = 1; k < K; ++k) {
                const T v = fb.log_probs[i * K + k];
                if (v > best) {
                    best = v;
                    pred = k;
                }
            }
            const int truth = pairs[idx[i]].label;
            if (truth < 0 || truth >= K) throw std::invalid_argument("evaluate: label out of range");
            ++res.confusion[truth][pred];
        }
    }

    long long correct = 0;
    res.per_class_recall.assign(K, 0.0);
    for (int k = 0; k < K; ++k) {
        correct += res.confusion[k][k];
        long long row = 0;
        for (int j = 0; j < K; ++j) row += res.confusion[k][j];
        res.per_class_recall[k] = row > 0 ? static_cast<double>(res.confusion[k][k]) / static_cast<double>(row) : 0.0;
    }
    res.accuracy = res.n_samples > 0 ? static_cast<double>(correct) / static_cast<double>(res.n_samples) : 0.0;
    return res;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct FoldOutcome {
    int fold = 0;
    EvalResult eval;
    TrainHistory history;
};

struct CrossvalReport {
    std::vector<FoldOutcome> folds;
    double mean_accuracy = 0.0;                     // equal-weight mean over folds
    std::vector<std::vector<long long>> confusion;  // summed across folds

    std::vector<double> fold_accuracies() const {
        std::vector<double> a;
        for (const auto& f : folds) a.push_back(f.eval.accuracy);
        return a;
    }
};

namespace detail {

// Bounded-concurrency run of n independent jobs. Results are ordered by job
// index, so parallelism never changes any output.
inline void run_jobs(int n, int threads, const std::function<void(int)>& job) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) job(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    const int width = std::min(threads, n);
    for (int t = 0; t < width; ++t)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) job(i);
        });
    for (auto& th : pool) th.join();
}

} // namespace detail

inline int n_classes_of(const std::vector<PairedSample>& pairs) {
    int K = 0;
    for (const auto& p : pairs) K = std::max(K, p.label + 1);
    return K;
}

// Trains one model per fold (seed = base seed + fold index) and evaluates on
// the held-out subjects. No test subject ever appears in its fold's training
// set; the split is audited here, not assumed.
template <class T>
inline CrossvalReport crossval(const std::vector<PairedSample>& pairs, const FoldPlan& plan, const TrainConfig& cfg,
                               int threads = 1) {
    CrossvalReport report;
    report.folds.resize(plan.k);
    detail::run_jobs(plan.k, threads, [&](int f) {
        auto [train_idx, test_idx] = fold_split(pairs, plan, f);
        if (train_idx.empty() || test_idx.empty())
            throw std::runtime_error("crossval: fold " + std::to_string(f) + " has an empty split");

        std::vector<PairedSample> train_pairs, test_pairs;
        for (auto i : train_idx) train_pairs.push_back(pairs[i]);
        for (auto i : test_idx) test_pairs.push_back(pairs[i]);

        std::unordered_set<std::string> train_subjects;
        for (const auto& p : train_pairs) train_subjects.insert(p.subject_id);
        for (const auto& p : test_pairs)
            if (train_subjects.count(p.subject_id))
                throw std::runtime_error("crossval: subject '" + p.subject_id + "' crosses the fold split");

        TrainConfig fold_cfg = cfg;
        fold_cfg.seed = cfg.seed + static_cast<std::uint64_t>(f);
        auto result = train_spnd<T>(train_pairs, n_classes_of(pairs), fold_cfg);
        FoldOutcome out;
        out.fold = f;
        out.eval = evaluate(result.model, test_pairs);
        out.history = std::move(result.history);
        report.folds[f] = std::move(out);
    });

    const int K = static_cast<int>(report.folds.front().eval.confusion.size());
    report.confusion.assign(K, std::vector<long long>(K, 0));
    double acc = 0.0;
    for (const auto& f : report.folds) {
        acc += f.eval.accuracy;
        for (int a = 0; a < K; ++a)
            for (int b = 0; b < K; ++b) report.confusion[a][b] += f.eval.confusion[a][b];
    }
    report.mean_accuracy = acc / static_cast<double>(plan.k);
    return report;
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

struct AblationRow {
    bool ndf = false;
    bool spl = false;
    double accuracy = 0.0;
};

struct AblationTable {
    std::vector<AblationRow> rows;  // (0,0), (0,1), (1,0), (1,1)
};

// Four configurations differing only in (variant, spl_enabled): the NDF flag
// switches baseline vs paired, the SPL flag toggles the pace schedule.
template <class T>
inline AblationTable ablation_suite(const std::vector<PairedSample>& pairs, const FoldPlan& plan,
                                    const TrainConfig& cfg, int threads = 1) {
    for (const auto& p : pairs)
        if (!p.reference) throw std::invalid_argument("ablation_suite: dataset must carry reference images");
    AblationTable table;
    const bool flags[4][2] = {{false, false}, {false, true}, {true, false}, {true, true}};
    std::vector<TrainConfig> configs;
    for (const auto& fl : flags) {
        TrainConfig c = cfg;
        c.variant = fl[0] ? Variant::paired : Variant::baseline;
        c.norm_mode = fl[0] ? cfg.norm_mode : NormMode::per_stream;
        c.spl_enabled = fl[1];
        configs.push_back(c);
    }
    std::vector<AblationRow> rows(4);
    detail::run_jobs(4, threads, [&](int i) {
        auto report = crossval<T>(pairs, plan, configs[i], /*threads=*/1);
        rows[i] = AblationRow{flags[i][0], flags[i][1], report.mean_accuracy};
    });
    table.rows = rows;
    return table;
}

inline void write_ablation_csv(const std::string& path, const AblationTable& table) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "ndf,spl,accuracy\n";
    out << std::setprecision(10);
    for (const auto& r : table.rows) out << int(r.ndf) << ',' << int(r.spl) << ',' << r.accuracy << "\n";
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

inline void write_confusion_csv(const std::string& path, const std::vector<std::vector<long long>>& confusion) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    for (const auto& row : confusion) {
        for (std::size_t j = 0; j < row.size(); ++j) out << row[j] << (j + 1 < row.size() ? "," : "");
        out << "\n";
    }
}

inline void write_metrics_json(const std::string& path, const EvalResult& res,
                               const std::vector<double>* fold_accuracies = nullptr) {
    nlohmann::json j{{"accuracy", res.accuracy},
                     {"per_class_recall", res.per_class_recall},
                     {"n_samples", res.n_samples}};
    if (fold_accuracies) {
        j["fold_accuracies"] = *fold_accuracies;
        j["fold_mean"] = "equal-weight mean over folds";
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

// NDF embedding export for external 2-D projection:
// sample_id,class,loss,selected_last_pace,ndf_0..ndf_{D-1}
template <class T>
inline void export_embeddings(Model<T>& model, const std::vector<PairedSample>& pairs, const std::string& out_path,
                              const std::map<std::string, std::uint8_t>* last_selection = nullptr,
                              int batch_size = 64) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write '" + out_path + "'");
    const int D = model.config().feature_dim;
    out << "sample_id,class,loss,selected_last_pace";
    for (int d = 0; d < D; ++d) out << ",ndf_" << d;
    out << "\n";
    out << std::setprecision(10);

    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(pairs.size(), start + batch_size); ++i) idx.push_back(i);
        auto batch = assemble_batch<T>(pairs, idx, model.config());
        auto fb = model.forward(batch.tar, batch.ref ? &*batch.ref : nullptr, batch.labels, /*training=*/false);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto& p = pairs[idx[i]];
            int selected = 1;
            if (last_selection) {
                auto it = last_selection->find(p.target.sample_id);
                selected = it == last_selection->end() ? 0 : it->second;
            }
            out << p.target.sample_id << ',' << p.label << ',' << fb.losses[i] << ',' << selected;
            for (int d = 0; d < D; ++d) out << ',' << fb.ndf[i * static_cast<std::size_t>(D) + d];
            out << "\n";
        }
    }
}

} // namespace spnd
