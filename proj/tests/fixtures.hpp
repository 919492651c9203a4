#pragma once
// Shared test fixtures: a CK+-shaped corpus skeleton (327 sequences over 118
// subjects, one neutral + three peaks each) and small synthetic datasets.

#include <string>
#include <vector>

#include "spnd/dataset.hpp"

namespace fixtures {

// 91 subjects carry 3 sequences and 27 carry 2: 91*3 + 27*2 = 327 sequences,
// each with 1 neutral + 3 peak frames over 7 classes.
inline std::vector<spnd::SampleRecord> ckplus_shaped_records() {
    std::vector<spnd::SampleRecord> records;
    int seq_counter = 0;
    for (int s = 0; s < 118; ++s) {
        char sub[16];
        std::snprintf(sub, sizeof(sub), "subj%03d", s);
        const int n_seq = s < 91 ? 3 : 2;
        for (int q = 0; q < n_seq; ++q) {
            char seq[16];
            std::snprintf(seq, sizeof(seq), "seq%04d", seq_counter);
            const int label = seq_counter % 7;
            ++seq_counter;

            spnd::SampleRecord neutral;
            neutral.sample_id = std::string(seq) + "_f00";
            neutral.subject_id = sub;
            neutral.sequence_id = seq;
            neutral.frame_role = spnd::FrameRole::neutral;
            neutral.label = spnd::kNoLabel;
            records.push_back(neutral);

            for (int f = 1; f <= 3; ++f) {
                spnd::SampleRecord peak;
                peak.sample_id = std::string(seq) + "_f" + (f < 10 ? "0" : "") + std::to_string(f);
                peak.subject_id = sub;
                peak.sequence_id = seq;
                peak.frame_role = spnd::FrameRole::peak;
                peak.label = label;
                records.push_back(peak);
            }
        }
    }
    return records;
}

inline spnd::SyntheticConfig tiny_synthetic_config(std::uint64_t seed = 7, int image_size = 16) {
    spnd::SyntheticConfig cfg;
    cfg.n_subjects = 6;
    cfg.n_classes = 2;
    cfg.image_size = image_size;
    cfg.identity_amplitude = 0.3;
    cfg.deviation_amplitude = 0.12;
    cfg.noise_sigma = 0.02;
    cfg.frames_per_subject_per_class = 3;
    cfg.label_corruption_rate = 0.0;
    cfg.seed = seed;
    return cfg;
}

} // namespace fixtures
