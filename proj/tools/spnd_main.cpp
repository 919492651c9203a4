// Command-line front end: synthetic dataset generation, manifest preparation,
// training, cross-validation, ablation, evaluation and embedding export.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include "spnd/eval.hpp"
#include "spnd/image_io.hpp"
#include "spnd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Label space from the manifest itself: the sorted distinct non-empty labels.
spnd::LabelSpace infer_labels(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot open '" + manifest_path + "'");
    std::string line;
    std::getline(in, line);  // header, validated later by parse_manifest
    std::set<std::string> names;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cols = spnd::split_csv_line(line);
        if (cols.size() >= 5 && !cols[4].empty()) names.insert(cols[4]);
    }
    return spnd::LabelSpace(std::vector<std::string>(names.begin(), names.end()));
}

struct CommonOpts {
    std::string config_path;
    std::string data_dir;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string variant;
    std::string norm_mode;
    bool no_spl = false;
    int threads = 0;

    void attach(CLI::App* cmd, bool with_data = true) {
        cmd->add_option("--config", config_path, "JSON config file (flat TrainConfig mirror)");
        if (with_data) cmd->add_option("--data", data_dir, "dataset directory containing manifest.csv")->required();
        cmd->add_option("--out", out, "output directory")->required();
        cmd->add_option("--seed", seed, "random seed")->each([this](const std::string&) { seed_set = true; });
        cmd->add_option("--variant", variant, "paired | dual | baseline");
        cmd->add_option("--norm-mode", norm_mode, "joint | literal | per_stream");
        cmd->add_flag("--no-spl", no_spl, "disable self-paced selection (single pace at fraction 1)");
        cmd->add_option("--threads", threads, "worker threads for fold-parallel commands");
    }

    spnd::TrainConfig make_config() const {
        spnd::TrainConfig cfg = spnd::TrainConfig::desk();
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw std::runtime_error("cannot open config '" + config_path + "'");
            cfg = spnd::train_config_from_json(json::parse(in));
        }
        if (seed_set) cfg.seed = seed;
        if (!variant.empty()) cfg.variant = spnd::variant_from_string(variant);
        if (!norm_mode.empty()) cfg.norm_mode = spnd::norm_mode_from_string(norm_mode);
        if (no_spl) cfg.spl_enabled = false;
        // Reference-free variants default to per-stream statistics.
        if (cfg.variant != spnd::Variant::paired && norm_mode.empty() && config_path.empty())
            cfg.norm_mode = spnd::NormMode::per_stream;
        return cfg;
    }

    int worker_threads() const {
        if (threads > 0) return threads;
        return std::max(1u, std::thread::hardware_concurrency());
    }
};

struct LoadedData {
    spnd::LabelSpace labels;
    std::vector<spnd::PairedSample> pairs;
};

LoadedData load_pairs(const std::string& data_dir, const spnd::TrainConfig& cfg, const std::string& pairing) {
    LoadedData out;
    const std::string manifest = data_dir + "/manifest.csv";
    out.labels = infer_labels(manifest);
    auto records = spnd::parse_manifest_file(manifest, out.labels);
    spnd::load_images(records, data_dir, cfg.input_size, cfg.input_channels);
    spnd::PairPolicy policy;
    if (pairing == "first_neutral_x_peaks")
        policy = spnd::PairPolicy::first_neutral_x_peaks;
    else if (pairing == "self_only")
        policy = spnd::PairPolicy::self_only;
    else if (pairing.empty())
        policy = cfg.variant == spnd::Variant::paired ? spnd::PairPolicy::first_neutral_x_peaks
                                                      : spnd::PairPolicy::self_only;
    else
        throw std::runtime_error("unknown pairing policy '" + pairing + "'");
    out.pairs = spnd::build_pairs(records, policy);
    if (out.pairs.empty()) throw std::runtime_error("no pairs built from '" + manifest + "'");
    return out;
}

void write_eval_outputs(const std::string& out_dir, const spnd::EvalResult& res,
                        const std::vector<double>* fold_accuracies = nullptr) {
    fs::create_directories(out_dir);
    spnd::write_metrics_json(out_dir + "/metrics.json", res, fold_accuracies);
    spnd::write_confusion_csv(out_dir + "/confusion.csv", res.confusion);
}

std::map<std::string, std::uint8_t> read_last_pace_selection(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open selection log '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line != spnd::selection_csv_header())
        throw std::runtime_error("bad selection log header in '" + path + "'");
    int max_pace = 0;
    std::vector<std::tuple<int, std::string, int>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cols = spnd::split_csv_line(line);
        if (cols.size() != 5) throw std::runtime_error("bad selection log row: " + line);
        const int pace = std::stoi(cols[0]);
        max_pace = std::max(max_pace, pace);
        rows.emplace_back(pace, cols[1], std::stoi(cols[4]));
    }
    std::map<std::string, std::uint8_t> sel;
    for (const auto& [pace, id, v] : rows)
        if (pace == max_pace) sel[id] = static_cast<std::uint8_t>(v);
    return sel;
}

int run_synth(const std::string& out_dir, const std::string& config_path, spnd::SyntheticConfig cfg) {
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw std::runtime_error("cannot open config '" + config_path + "'");
        cfg = spnd::synthetic_config_from_json(json::parse(in));
    }
    auto ds = spnd::generate_synthetic(cfg);
    spnd::write_synthetic_dataset(ds, out_dir);
    std::cout << "wrote " << ds.records.size() << " images (" << cfg.n_subjects << " subjects, " << cfg.n_classes
              << " classes) to " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"self-paced neutral-expression-disentangled training harness"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a synthetic confound dataset with ground truth");
    std::string synth_out, synth_config;
    spnd::SyntheticConfig synth_cfg;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--config", synth_config, "SyntheticConfig JSON");
    synth->add_option("--subjects", synth_cfg.n_subjects, "number of subjects");
    synth->add_option("--classes", synth_cfg.n_classes, "number of classes");
    synth->add_option("--image-size", synth_cfg.image_size, "square image size");
    synth->add_option("--identity-amplitude", synth_cfg.identity_amplitude, "identity confound amplitude");
    synth->add_option("--deviation-amplitude", synth_cfg.deviation_amplitude, "class deviation amplitude");
    synth->add_option("--noise-sigma", synth_cfg.noise_sigma, "per-frame Gaussian noise");
    synth->add_option("--frames", synth_cfg.frames_per_subject_per_class, "peak frames per subject per class");
    synth->add_option("--corruption", synth_cfg.label_corruption_rate, "label corruption rate in [0,1]");
    synth->add_option("--seed", synth_cfg.seed, "random seed");

    // ---- prepare ----
    auto* prepare = app.add_subcommand("prepare", "validate a manifest, build pairs, emit a fold plan");
    CommonOpts prep_opts;
    prep_opts.attach(prepare);
    int prep_folds = 10;
    std::string prep_pairing;
    prepare->add_option("--folds", prep_folds, "fold count");
    prepare->add_option("--pairing", prep_pairing, "first_neutral_x_peaks | self_only");

    // ---- train ----
    auto* train = app.add_subcommand("train", "one training run");
    CommonOpts train_opts;
    train_opts.attach(train);
    int train_folds = 0, train_holdout = -1;
    std::string train_pairing;
    train->add_option("--folds", train_folds, "fold count when holding out a fold");
    train->add_option("--holdout-fold", train_holdout, "train without this fold and evaluate on it");
    train->add_option("--pairing", train_pairing, "first_neutral_x_peaks | self_only");

    // ---- crossval ----
    auto* cv = app.add_subcommand("crossval", "subject-independent cross-validation");
    CommonOpts cv_opts;
    cv_opts.attach(cv);
    int cv_folds = 10;
    std::string cv_pairing;
    cv->add_option("--folds", cv_folds, "fold count");
    cv->add_option("--pairing", cv_pairing, "first_neutral_x_peaks | self_only");

    // ---- ablate ----
    auto* ablate = app.add_subcommand("ablate", "baseline / SPL-only / NDF-only / NDF+SPL table");
    CommonOpts ab_opts;
    ab_opts.attach(ablate);
    int ab_folds = 2;
    ablate->add_option("--folds", ab_folds, "fold count");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    CommonOpts eval_opts;
    eval_opts.attach(eval_cmd);
    std::string eval_ckpt;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();

    // ---- export-embeddings ----
    auto* exp = app.add_subcommand("export-embeddings", "write per-sample NDF vectors to CSV");
    CommonOpts exp_opts;
    exp_opts.attach(exp);
    std::string exp_ckpt, exp_selection;
    exp->add_option("--checkpoint", exp_ckpt, "checkpoint file")->required();
    exp->add_option("--selection", exp_selection, "selection log CSV; marks selected_last_pace");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return run_synth(synth_out, synth_config, synth_cfg);

        if (prepare->parsed()) {
            auto cfg = prep_opts.make_config();
            auto data = load_pairs(prep_opts.data_dir, cfg, prep_pairing);
            int violations = 0;
            for (const auto& p : data.pairs) violations += !spnd::validate_pair(p).empty();
            if (violations > 0) throw std::runtime_error(std::to_string(violations) + " invalid pairs in manifest");
            auto plan = spnd::make_folds(data.pairs, prep_folds, cfg.seed);
            fs::create_directories(prep_opts.out);
            {
                std::ofstream out(prep_opts.out + "/fold_plan.csv");
                out << "subject_id,fold\n";
                std::map<std::string, int> ordered(plan.assignment.begin(), plan.assignment.end());
                for (const auto& [subject, fold] : ordered) out << subject << ',' << fold << "\n";
            }
            json summary{{"n_pairs", data.pairs.size()},
                         {"n_subjects", plan.assignment.size()},
                         {"folds", plan.k},
                         {"seed", plan.seed},
                         {"classes", data.labels.names}};
            std::ofstream(prep_opts.out + "/prepare_summary.json") << summary.dump(2) << "\n";
            std::cout << data.pairs.size() << " pairs over " << plan.assignment.size() << " subjects, "
                      << plan.k << " folds\n";
            return 0;
        }

        if (train->parsed()) {
            auto cfg = train_opts.make_config();
            auto data = load_pairs(train_opts.data_dir, cfg, train_pairing);
            std::vector<spnd::PairedSample> train_pairs = data.pairs, test_pairs;
            if (train_holdout >= 0) {
                if (train_folds < 2) throw std::runtime_error("--holdout-fold requires --folds >= 2");
                auto plan = spnd::make_folds(data.pairs, train_folds, cfg.seed);
                auto [tr, te] = spnd::fold_split(data.pairs, plan, train_holdout);
                train_pairs.clear();
                test_pairs.clear();
                for (auto i : tr) train_pairs.push_back(data.pairs[i]);
                for (auto i : te) test_pairs.push_back(data.pairs[i]);
            }
            auto result = spnd::run_training_job<float>(train_pairs, data.labels.K(), cfg, train_opts.out);
            std::cout << "trained on " << train_pairs.size() << " pairs; final loss "
                      << result.history.final_loss() << "\n";
            if (!test_pairs.empty()) {
                auto res = spnd::evaluate(result.model, test_pairs);
                write_eval_outputs(train_opts.out, res);
                std::cout << "holdout accuracy " << res.accuracy << "\n";
            }
            return 0;
        }

        if (cv->parsed()) {
            auto cfg = cv_opts.make_config();
            auto data = load_pairs(cv_opts.data_dir, cfg, cv_pairing);
            auto plan = spnd::make_folds(data.pairs, cv_folds, cfg.seed);
            auto report = spnd::crossval<float>(data.pairs, plan, cfg, cv_opts.worker_threads());
            fs::create_directories(cv_opts.out);
            spnd::EvalResult agg;
            agg.confusion = report.confusion;
            agg.accuracy = report.mean_accuracy;
            agg.n_samples = 0;
            for (const auto& f : report.folds) agg.n_samples += f.eval.n_samples;
            agg.per_class_recall.assign(report.confusion.size(), 0.0);
            for (std::size_t k = 0; k < report.confusion.size(); ++k) {
                long long row = 0;
                for (auto v : report.confusion[k]) row += v;
                agg.per_class_recall[k] =
                    row ? static_cast<double>(report.confusion[k][k]) / static_cast<double>(row) : 0.0;
            }
            auto fold_accs = report.fold_accuracies();
            write_eval_outputs(cv_opts.out, agg, &fold_accs);
            for (const auto& f : report.folds) {
                spnd::write_history_csv(cv_opts.out + "/fold" + std::to_string(f.fold) + "_history.csv", f.history);
            }
            std::cout << "mean accuracy " << report.mean_accuracy << " over " << plan.k << " folds\n";
            return 0;
        }

        if (ablate->parsed()) {
            auto cfg = ab_opts.make_config();
            cfg.variant = spnd::Variant::paired;  // the suite toggles it per row
            auto data = load_pairs(ab_opts.data_dir, cfg, "first_neutral_x_peaks");
            auto plan = spnd::make_folds(data.pairs, ab_folds, cfg.seed);
            auto table = spnd::ablation_suite<float>(data.pairs, plan, cfg, ab_opts.worker_threads());
            fs::create_directories(ab_opts.out);
            spnd::write_ablation_csv(ab_opts.out + "/ablation.csv", table);
            for (const auto& r : table.rows)
                std::cout << "ndf=" << r.ndf << " spl=" << r.spl << " accuracy=" << r.accuracy << "\n";
            return 0;
        }

        if (eval_cmd->parsed()) {
            auto model = spnd::load_checkpoint<float>(eval_ckpt);
            spnd::TrainConfig cfg = eval_opts.make_config();
            cfg.input_size = model.config().input_size;
            cfg.input_channels = model.config().input_channels;
            cfg.variant = model.config().variant;
            auto data = load_pairs(eval_opts.data_dir, cfg, "");
            auto res = spnd::evaluate(model, data.pairs);
            write_eval_outputs(eval_opts.out, res);
            std::cout << "accuracy " << res.accuracy << " on " << res.n_samples << " samples\n";
            return 0;
        }

        if (exp->parsed()) {
            auto model = spnd::load_checkpoint<float>(exp_ckpt);
            spnd::TrainConfig cfg = exp_opts.make_config();
            cfg.input_size = model.config().input_size;
            cfg.input_channels = model.config().input_channels;
            cfg.variant = model.config().variant;
            auto data = load_pairs(exp_opts.data_dir, cfg, "");
            fs::create_directories(fs::path(exp_opts.out).parent_path().empty()
                                       ? "."
                                       : fs::path(exp_opts.out).parent_path().string());
            if (exp_selection.empty()) {
                spnd::export_embeddings(model, data.pairs, exp_opts.out);
            } else {
                auto sel = read_last_pace_selection(exp_selection);
                spnd::export_embeddings(model, data.pairs, exp_opts.out, &sel);
            }
            std::cout << "wrote " << data.pairs.size() << " embeddings to " << exp_opts.out << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
