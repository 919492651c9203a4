#pragma once
// Core domain types shared by all modules: labeled samples, (target, reference)
// pairs, the label space and subject-level fold plans. Value objects only;
// immutable after construction and safe to share across threads.

#include <algorithm>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "spnd/common.hpp"

namespace spnd {

constexpr int kNoLabel = -1;

enum class FrameRole { neutral, peak, single };

inline const char* to_string(FrameRole r) {
    switch (r) {
        case FrameRole::neutral: return "neutral";
        case FrameRole::peak: return "peak";
        case FrameRole::single: return "single";
    }
    return "?";
}

inline FrameRole frame_role_from_string(const std::string& s) {
    if (s == "neutral") return FrameRole::neutral;
    if (s == "peak") return FrameRole::peak;
    if (s == "single") return FrameRole::single;
    throw std::invalid_argument("unknown frame_role: '" + s + "'");
}

// Channel-last real image, values in [0,1]. 8-bit files are converted at
// ingestion; everything downstream uses this one numeric convention.
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h_, int w_, int c_, float fill = 0.f)
        : h(h_), w(w_), c(c_), data(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

    float& at(int y, int x, int ch) { return data[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    float at(int y, int x, int ch) const { return data[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    std::size_t size() const { return data.size(); }
};

using ImagePtr = std::shared_ptr<const Image>;

struct SampleRecord {
    std::string sample_id;
    std::string subject_id;
    std::string sequence_id;                    // empty for unsequenced corpora
    FrameRole frame_role = FrameRole::single;
    int label = kNoLabel;                       // kNoLabel permitted only for neutral frames
    std::string path;                           // manifest-relative image path, may be empty
    ImagePtr image;                             // pixels, filled at ingestion or generation
};

struct PairedSample {
    SampleRecord target;                        // frame_role peak or single
    std::optional<SampleRecord> reference;      // none in dual/baseline pipelines
    int label = kNoLabel;
    std::string subject_id;
};

struct LabelSpace {
    std::vector<std::string> names;

    LabelSpace() = default;
    explicit LabelSpace(std::vector<std::string> n) : names(std::move(n)) {
        if (names.size() < 2) throw std::invalid_argument("LabelSpace: need at least 2 classes");
        std::unordered_set<std::string> seen;
        for (const auto& name : names)
            if (!seen.insert(name).second)
                throw std::invalid_argument("LabelSpace: duplicate class name '" + name + "'");
    }

    int K() const { return static_cast<int>(names.size()); }

    // -1 when the name is unknown.
    int index_of(const std::string& name) const {
        auto it = std::find(names.begin(), names.end(), name);
        return it == names.end() ? -1 : static_cast<int>(it - names.begin());
    }
};

// Subject -> fold assignment. Subject-level by construction, so no person can
// appear on both sides of a split.
struct FoldPlan {
    int k = 0;
    std::unordered_map<std::string, int> assignment;
    std::uint64_t seed = 0;                     // shuffle seed, echoed into outputs
};

// Returns every invariant violation; the pair is well formed iff empty.
// Violations are data, not exceptions.
inline std::vector<std::string> validate_pair(const PairedSample& p) {
    std::vector<std::string> v;
    if (p.subject_id.empty()) v.push_back("subject_id empty");
    if (p.target.subject_id.empty()) v.push_back("target subject_id empty");
    if (p.target.frame_role == FrameRole::neutral) v.push_back("target frame_role must be peak or single");
    if (p.target.label == kNoLabel) v.push_back("target label missing");
    if (p.label == kNoLabel) v.push_back("pair label missing");
    if (p.label != p.target.label) v.push_back("label mismatch between pair and target");
    if (!p.subject_id.empty() && !p.target.subject_id.empty() && p.subject_id != p.target.subject_id)
        v.push_back("pair subject differs from target subject");
    if (p.reference) {
        if (p.reference->subject_id != p.target.subject_id) v.push_back("subject mismatch");
        if (p.reference->frame_role != FrameRole::neutral) v.push_back("reference frame_role must be neutral");
    }
    return v;
}

} // namespace spnd
