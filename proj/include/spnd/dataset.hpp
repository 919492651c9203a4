#pragma once
// Dataset plumbing: manifest ingestion, (neutral, peak) pairing,
// subject-independent fold planning, pair-synchronized augmentation and the
// synthetic confound generator with known ground truth.
//
// All operations are pure given (inputs, seed).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "spnd/datamodel.hpp"

namespace spnd {

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

inline constexpr const char* kManifestHeader = "sample_id,subject_id,sequence_id,frame_role,label,path";

struct ManifestRow {
    std::string sample_id;
    std::string subject_id;
    std::string sequence_id;
    std::string frame_role;
    std::string label;      // empty permitted only for neutral rows
    std::string path;
};

// Plain comma splitter; manifest fields never contain commas or quotes.
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::vector<SampleRecord> parse_manifest(std::istream& in, const LabelSpace& labels) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("manifest: empty file, missing header");
    {
        auto cols = split_csv_line(line);
        auto want = split_csv_line(kManifestHeader);
        if (cols != want)
            throw std::runtime_error("manifest: bad header '" + line + "', expected '" + kManifestHeader + "'");
    }

    std::vector<SampleRecord> records;
    std::unordered_map<std::string, int> seen_ids;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto cols = split_csv_line(line);
        if (cols.size() != 6)
            throw std::runtime_error("manifest row " + std::to_string(line_no) + ": expected 6 fields, got " +
                                     std::to_string(cols.size()));
        SampleRecord r;
        r.sample_id = cols[0];
        r.subject_id = cols[1];
        r.sequence_id = cols[2];
        try {
            r.frame_role = frame_role_from_string(cols[3]);
        } catch (const std::exception& e) {
            throw std::runtime_error("manifest row " + std::to_string(line_no) + ": " + e.what());
        }
        const std::string& label_name = cols[4];
        if (label_name.empty()) {
            if (r.frame_role != FrameRole::neutral)
                throw std::runtime_error("manifest row " + std::to_string(line_no) +
                                         ": empty label on non-neutral row");
            r.label = kNoLabel;
        } else {
            r.label = labels.index_of(label_name);
            if (r.label < 0)
                throw std::runtime_error("manifest row " + std::to_string(line_no) + ": unknown label '" +
                                         label_name + "'");
        }
        r.path = cols[5];
        if (r.sample_id.empty() || r.subject_id.empty())
            throw std::runtime_error("manifest row " + std::to_string(line_no) + ": empty sample_id or subject_id");
        if (!seen_ids.emplace(r.sample_id, line_no).second)
            throw std::runtime_error("manifest row " + std::to_string(line_no) + ": duplicate sample_id '" +
                                     r.sample_id + "' (first at row " + std::to_string(seen_ids[r.sample_id]) + ")");
        records.push_back(std::move(r));
    }
    return records;
}

inline std::vector<SampleRecord> parse_manifest_file(const std::string& path, const LabelSpace& labels) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot open '" + path + "'");
    return parse_manifest(in, labels);
}

inline void write_manifest(std::ostream& out, const std::vector<ManifestRow>& rows) {
    out << kManifestHeader << "\n";
    for (const auto& r : rows)
        out << r.sample_id << ',' << r.subject_id << ',' << r.sequence_id << ',' << r.frame_role << ','
            << r.label << ',' << r.path << "\n";
}

// ---------------------------------------------------------------------------
// Pairing
// ---------------------------------------------------------------------------

enum class PairPolicy {
    first_neutral_x_peaks,  // per sequence, first neutral frame pairs with every peak frame
    self_only               // each labeled record becomes a reference-free pair
};

// first_neutral_x_peaks: records are grouped by (subject_id, sequence_id); the
// neutral frame with the smallest sample_id pairs with every labeled frame of
// the sequence. A sequence with labeled frames but no neutral is an error, not
// a silent self-pair. 'single' frames are treated as targets like peaks.
inline std::vector<PairedSample> build_pairs(const std::vector<SampleRecord>& records, PairPolicy policy) {
    std::vector<PairedSample> pairs;
    if (policy == PairPolicy::self_only) {
        for (const auto& r : records) {
            if (r.label == kNoLabel) continue;
            PairedSample p;
            p.target = r;
            p.reference = std::nullopt;
            p.label = r.label;
            p.subject_id = r.subject_id;
            pairs.push_back(std::move(p));
        }
        return pairs;
    }

    // Group by (subject, sequence), preserving first-appearance order so the
    // output ordering is deterministic.
    std::vector<std::pair<std::string, std::vector<const SampleRecord*>>> groups;
    std::unordered_map<std::string, std::size_t> group_index;
    for (const auto& r : records) {
        std::string key = r.subject_id + "\x1f" + r.sequence_id;
        auto it = group_index.find(key);
        if (it == group_index.end()) {
            group_index.emplace(key, groups.size());
            groups.push_back({key, {}});
            it = group_index.find(key);
        }
        groups[it->second].second.push_back(&r);
    }

    for (const auto& [key, members] : groups) {
        const SampleRecord* neutral = nullptr;
        for (const auto* r : members)
            if (r->frame_role == FrameRole::neutral)
                if (!neutral || r->sample_id < neutral->sample_id) neutral = r;
        std::vector<const SampleRecord*> targets;
        for (const auto* r : members)
            if (r->frame_role != FrameRole::neutral) targets.push_back(r);
        if (targets.empty()) continue;  // neutral-only sequence contributes nothing
        if (!neutral) {
            auto sep = key.find('\x1f');
            throw std::runtime_error("build_pairs: sequence '" + key.substr(sep + 1) + "' of subject '" +
                                     key.substr(0, sep) + "' has no neutral frame");
        }
        for (const auto* t : targets) {
            if (t->label == kNoLabel)
                throw std::runtime_error("build_pairs: target '" + t->sample_id + "' has no label");
            PairedSample p;
            p.target = *t;
            p.reference = *neutral;
            p.label = t->label;
            p.subject_id = t->subject_id;
            pairs.push_back(std::move(p));
        }
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

// Subjects are shuffled with the given seed and dealt round-robin, so fold
// subject counts differ by at most one.
inline FoldPlan make_folds(const std::vector<PairedSample>& pairs, int k, std::uint64_t seed) {
    std::vector<std::string> subjects;
    {
        std::unordered_map<std::string, bool> seen;
        for (const auto& p : pairs)
            if (seen.emplace(p.subject_id, true).second) subjects.push_back(p.subject_id);
    }
    std::sort(subjects.begin(), subjects.end());
    if (k < 1) throw std::invalid_argument("make_folds: k must be >= 1");
    if (k > static_cast<int>(subjects.size()))
        throw std::invalid_argument("make_folds: k=" + std::to_string(k) + " exceeds subject count " +
                                    std::to_string(subjects.size()));
    std::mt19937_64 rng(derive_seed(seed, 0xF01D));
    std::shuffle(subjects.begin(), subjects.end(), rng);
    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    for (std::size_t i = 0; i < subjects.size(); ++i)
        plan.assignment[subjects[i]] = static_cast<int>(i % k);
    return plan;
}

// (train indices, test indices) for the given held-out fold.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> fold_split(
    const std::vector<PairedSample>& pairs, const FoldPlan& plan, int fold) {
    if (fold < 0 || fold >= plan.k) throw std::invalid_argument("fold_split: fold out of range");
    std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        auto it = plan.assignment.find(pairs[i].subject_id);
        if (it == plan.assignment.end())
            throw std::runtime_error("fold_split: subject '" + pairs[i].subject_id + "' not in fold plan");
        (it->second == fold ? out.second : out.first).push_back(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentationSpec {
    double horizontal_flip_prob = 0.5;
    double gaussian_noise_sigma = 0.02;  // [0,1] pixel units
    std::uint64_t seed = 0;
};

inline Image hflip(const Image& img) {
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(y, img.w - 1 - x, ch);
    return out;
}

// One draw picks flip or noise (uniformly), then applies the sampled transform
// parameters identically to target and reference: same flip decision, same
// noise field. Labels and metadata are untouched.
inline PairedSample augment_pair(const PairedSample& pair, const AugmentationSpec& spec,
                                 std::uint64_t draw_seed) {
    std::mt19937_64 rng(splitmix64(draw_seed));
    PairedSample out = pair;

    const bool pick_flip = std::uniform_int_distribution<int>(0, 1)(rng) == 0;
    if (pick_flip) {
        const bool do_flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < spec.horizontal_flip_prob;
        if (do_flip) {
            out.target.image = std::make_shared<Image>(hflip(*pair.target.image));
            if (pair.reference) out.reference->image = std::make_shared<Image>(hflip(*pair.reference->image));
        }
        return out;
    }

    if (spec.gaussian_noise_sigma > 0.0) {
        const Image& t = *pair.target.image;
        std::vector<float> field(t.size());
        std::normal_distribution<float> noise(0.f, static_cast<float>(spec.gaussian_noise_sigma));
        for (auto& v : field) v = noise(rng);

        auto add_field = [&field](const Image& src) {
            Image dst = src;
            for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] = clamp01(dst.data[i] + field[i]);
            return dst;
        };
        out.target.image = std::make_shared<Image>(add_field(t));
        if (pair.reference) {
            if (pair.reference->image->size() != t.size())
                throw std::runtime_error("augment_pair: target/reference image sizes differ");
            out.reference->image = std::make_shared<Image>(add_field(*pair.reference->image));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic confound generator
// ---------------------------------------------------------------------------

struct SyntheticConfig {
    int n_subjects = 20;
    int n_classes = 4;
    int image_size = 48;             // H == W
    double identity_amplitude = 0.3;
    double deviation_amplitude = 0.1;
    double noise_sigma = 0.05;
    int frames_per_subject_per_class = 3;
    double label_corruption_rate = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_classes < 2) throw std::invalid_argument("SyntheticConfig: n_classes must be >= 2");
        if (n_subjects < 1 || image_size < 8 || frames_per_subject_per_class < 1)
            throw std::invalid_argument("SyntheticConfig: bad counts");
        if (identity_amplitude < 0 || deviation_amplitude < 0 || noise_sigma < 0)
            throw std::invalid_argument("SyntheticConfig: amplitudes must be >= 0");
        if (label_corruption_rate < 0 || label_corruption_rate > 1)
            throw std::invalid_argument("SyntheticConfig: label_corruption_rate must lie in [0,1]");
    }
};

// The only home of the ideal decomposition: identity_component carries the
// disturbance concept, deviation_component the expression deviation. The
// generated image is exactly clip(identity + deviation + noise, 0, 1).
struct SyntheticGroundTruth {
    std::string sample_id;
    Image identity_component;
    Image deviation_component;
    int true_label = kNoLabel;
};

struct SyntheticDataset {
    LabelSpace labels;
    std::vector<SampleRecord> records;
    std::vector<SyntheticGroundTruth> ground_truth;  // aligned with records
    std::vector<ManifestRow> manifest;               // aligned with records
    SyntheticConfig config;
};

// Per-class deviation patterns: one localized blob at the image center whose
// radial ring texture distinguishes the class (a pooled translation-invariant
// feature cannot read blob positions, so class identity must live in shape).
// The raw ring profiles are Gram-Schmidt orthogonalized, giving exactly
// orthogonal patterns, then scaled to the deviation amplitude. Radial symmetry
// about the image midline makes every pattern invariant to horizontal flips.
inline std::vector<Image> class_deviation_patterns(const SyntheticConfig& cfg) {
    const int n = cfg.image_size;
    const double c = (n - 1) / 2.0;
    const double radius = n / 3.0;
    const double pi = 3.14159265358979;

    std::vector<Image> patterns;
    for (int k = 0; k < cfg.n_classes; ++k) {
        Image p(n, n, 1, 0.f);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double dx = x - c, dy = y - c;
                const double r = std::sqrt(dx * dx + dy * dy);
                if (r >= radius) continue;
                const double envelope = (1.0 - r / radius) * (1.0 - r / radius);
                p.at(y, x, 0) = static_cast<float>(std::cos(pi * k * r / radius) * envelope);
            }
        // Orthogonalize against the earlier classes, then normalize the peak.
        for (const Image& q : patterns) {
            double dot = 0.0, qq = 0.0;
            for (std::size_t i = 0; i < p.data.size(); ++i) {
                dot += static_cast<double>(p.data[i]) * q.data[i];
                qq += static_cast<double>(q.data[i]) * q.data[i];
            }
            const double coef = dot / qq;
            for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] -= static_cast<float>(coef * q.data[i]);
        }
        float maxabs = 1e-9f;
        for (float v : p.data) maxabs = std::max(maxabs, std::abs(v));
        for (auto& v : p.data) v *= static_cast<float>(cfg.deviation_amplitude) / maxabs;
        patterns.push_back(std::move(p));
    }
    return patterns;
}

inline Image class_deviation_pattern(const SyntheticConfig& cfg, int cls) {
    return class_deviation_patterns(cfg)[cls];
}

inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    SyntheticDataset ds;
    ds.config = cfg;
    {
        std::vector<std::string> names;
        for (int k = 0; k < cfg.n_classes; ++k) names.push_back("c" + std::to_string(k));
        ds.labels = LabelSpace(names);
    }

    const std::vector<Image> deviation = class_deviation_patterns(cfg);

    const int n = cfg.image_size;
    auto subject_identity = [&](int s) {
        // Disturbance field riding on mid gray, half smooth random Gaussian
        // bumps (appearance) and half a random mixture of the class patterns
        // themselves. The mixture puts disturbance energy squarely inside the
        // deviation subspace, so it cannot be filtered out spectrally; only
        // reference subtraction removes it. Both halves are fixed per subject.
        std::mt19937_64 rng(derive_seed(cfg.seed, 0x1D, static_cast<std::uint64_t>(s)));
        std::uniform_real_distribution<double> upos(0.0, n - 1.0);
        std::uniform_real_distribution<double> usig(n / 10.0, n / 4.0);
        std::uniform_real_distribution<double> uamp(-1.0, 1.0);
        Image blobs(n, n, 1, 0.f);
        for (int b = 0; b < 8; ++b) {
            const double bx = upos(rng), by = upos(rng), sg = usig(rng), am = uamp(rng);
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x) {
                    const double dx = x - bx, dy = y - by;
                    blobs.at(y, x, 0) += static_cast<float>(am * std::exp(-(dx * dx + dy * dy) / (2 * sg * sg)));
                }
        }
        float blob_max = 1e-6f;
        for (float v : blobs.data) blob_max = std::max(blob_max, std::abs(v));

        Image confuser(n, n, 1, 0.f);
        float conf_max = 1e-6f;
        for (int k = 0; k < cfg.n_classes; ++k) {
            const double u = uamp(rng);
            for (std::size_t i = 0; i < confuser.data.size(); ++i)
                confuser.data[i] += static_cast<float>(u) * deviation[k].data[i];
        }
        for (float v : confuser.data) conf_max = std::max(conf_max, std::abs(v));

        Image id(n, n, 1, 0.f);
        const float amp = static_cast<float>(cfg.identity_amplitude);
        for (std::size_t i = 0; i < id.data.size(); ++i)
            id.data[i] = 0.5f + 0.5f * amp * (blobs.data[i] / blob_max + confuser.data[i] / conf_max);
        return id;
    };

    auto render = [&](const Image& identity, const Image* dev, std::uint64_t noise_key) {
        Image img(n, n, 1, 0.f);
        std::mt19937_64 rng(noise_key);
        std::normal_distribution<float> noise(0.f, static_cast<float>(cfg.noise_sigma));
        for (std::size_t i = 0; i < img.data.size(); ++i) {
            float v = identity.data[i] + (dev ? dev->data[i] : 0.f);
            if (cfg.noise_sigma > 0) v += noise(rng);
            img.data[i] = clamp01(v);
        }
        return img;
    };

    std::uint64_t record_counter = 0;
    auto push_record = [&](SampleRecord r, SyntheticGroundTruth gt) {
        ManifestRow row;
        row.sample_id = r.sample_id;
        row.subject_id = r.subject_id;
        row.sequence_id = r.sequence_id;
        row.frame_role = to_string(r.frame_role);
        row.label = r.label == kNoLabel ? "" : ds.labels.names[r.label];
        row.path = "images/" + r.sample_id + ".png";
        r.path = row.path;
        ds.records.push_back(std::move(r));
        ds.ground_truth.push_back(std::move(gt));
        ds.manifest.push_back(std::move(row));
    };

    for (int s = 0; s < cfg.n_subjects; ++s) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "s%03d", s);
        const std::string subject(buf);
        const Image identity = subject_identity(s);

        SampleRecord neutral;
        neutral.sample_id = subject + "_n";
        neutral.subject_id = subject;
        neutral.sequence_id = subject;
        neutral.frame_role = FrameRole::neutral;
        neutral.label = kNoLabel;
        neutral.image = std::make_shared<Image>(
            render(identity, nullptr, derive_seed(cfg.seed, 0x70153, record_counter++)));
        push_record(neutral, SyntheticGroundTruth{subject + "_n", identity, Image(n, n, 1, 0.f), kNoLabel});

        for (int k = 0; k < cfg.n_classes; ++k)
            for (int f = 0; f < cfg.frames_per_subject_per_class; ++f) {
                SampleRecord peak;
                peak.sample_id = subject + "_k" + std::to_string(k) + "_f" + std::to_string(f);
                peak.subject_id = subject;
                peak.sequence_id = subject;
                peak.frame_role = FrameRole::peak;
                peak.label = k;
                peak.image = std::make_shared<Image>(
                    render(identity, &deviation[k], derive_seed(cfg.seed, 0x70153, record_counter++)));
                push_record(peak, SyntheticGroundTruth{peak.sample_id, identity, deviation[k], k});
            }
    }

    // Label corruption: a fixed fraction of peak frames gets a uniformly
    // resampled wrong label. Ground truth keeps the true label.
    if (cfg.label_corruption_rate > 0) {
        std::vector<std::size_t> peak_idx;
        for (std::size_t i = 0; i < ds.records.size(); ++i)
            if (ds.records[i].frame_role == FrameRole::peak) peak_idx.push_back(i);
        std::mt19937_64 rng(derive_seed(cfg.seed, 0xC0552));
        std::shuffle(peak_idx.begin(), peak_idx.end(), rng);
        const auto n_corrupt =
            static_cast<std::size_t>(std::llround(cfg.label_corruption_rate * static_cast<double>(peak_idx.size())));
        std::uniform_int_distribution<int> offset(1, cfg.n_classes - 1);
        for (std::size_t j = 0; j < n_corrupt && j < peak_idx.size(); ++j) {
            auto& rec = ds.records[peak_idx[j]];
            rec.label = (rec.label + offset(rng)) % cfg.n_classes;
            ds.manifest[peak_idx[j]].label = ds.labels.names[rec.label];
        }
    }
    return ds;
}

} // namespace spnd
