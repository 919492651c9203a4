#pragma once
// Image codec and resize plumbing (OpenCV-backed), plus on-disk synthetic
// dataset writing/reading. Kept out of the core headers so targets without
// file I/O never touch OpenCV.

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spnd/dataset.hpp"

namespace spnd {

// Decode PNG/JPEG, resize to a square by bilinear interpolation, convert to
// channel-last floats in [0,1]. channels 1 = grayscale, 3 = RGB.
inline Image load_image(const std::string& path, int target_size, int channels) {
    cv::Mat raw = cv::imread(path, channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
    if (raw.empty()) throw std::runtime_error("load_image: cannot read '" + path + "'");
    cv::Mat resized;
    if (raw.rows == target_size && raw.cols == target_size)
        resized = raw;
    else
        cv::resize(raw, resized, cv::Size(target_size, target_size), 0, 0, cv::INTER_LINEAR);
    if (channels == 3) cv::cvtColor(resized, resized, cv::COLOR_BGR2RGB);

    Image img(target_size, target_size, channels);
    for (int y = 0; y < target_size; ++y)
        for (int x = 0; x < target_size; ++x)
            for (int ch = 0; ch < channels; ++ch) {
                const unsigned char v = channels == 1 ? resized.at<unsigned char>(y, x)
                                                      : resized.at<cv::Vec3b>(y, x)[ch];
                img.at(y, x, ch) = static_cast<float>(v) / 255.f;
            }
    return img;
}

inline void save_png(const std::string& path, const Image& img) {
    if (img.c != 1 && img.c != 3) throw std::invalid_argument("save_png: only 1- or 3-channel images");
    cv::Mat m(img.h, img.w, img.c == 1 ? CV_8UC1 : CV_8UC3);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            if (img.c == 1) {
                m.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(clamp01(img.at(y, x, 0)) * 255.f));
            } else {
                cv::Vec3b& px = m.at<cv::Vec3b>(y, x);
                // OpenCV stores BGR
                px[0] = static_cast<unsigned char>(std::lround(clamp01(img.at(y, x, 2)) * 255.f));
                px[1] = static_cast<unsigned char>(std::lround(clamp01(img.at(y, x, 1)) * 255.f));
                px[2] = static_cast<unsigned char>(std::lround(clamp01(img.at(y, x, 0)) * 255.f));
            }
        }
    if (!cv::imwrite(path, m)) throw std::runtime_error("save_png: cannot write '" + path + "'");
}

// Fills record.image from record.path (relative to data_dir) for records that
// do not already carry pixels.
inline void load_images(std::vector<SampleRecord>& records, const std::string& data_dir, int target_size,
                        int channels) {
    for (auto& r : records) {
        if (r.image) continue;
        if (r.path.empty()) throw std::runtime_error("load_images: record '" + r.sample_id + "' has no path");
        r.image = std::make_shared<Image>(load_image(data_dir + "/" + r.path, target_size, channels));
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset on disk
// ---------------------------------------------------------------------------
//
// ground_truth.bin layout (little endian):
//   magic "SPNDGT01" | u32 count | u32 h | u32 w | u32 c
//   then per record:
//     u32 id_len | id bytes | i32 true_label (-1 = none)
//     f32 identity[h*w*c] | f32 deviation[h*w*c]

inline constexpr char kGroundTruthMagic[8] = {'S', 'P', 'N', 'D', 'G', 'T', '0', '1'};

inline void write_ground_truth(const std::string& path, const std::vector<SyntheticGroundTruth>& gts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out.write(kGroundTruthMagic, 8);
    const std::uint32_t count = static_cast<std::uint32_t>(gts.size());
    const std::uint32_t h = gts.empty() ? 0 : gts[0].identity_component.h;
    const std::uint32_t w = gts.empty() ? 0 : gts[0].identity_component.w;
    const std::uint32_t c = gts.empty() ? 0 : gts[0].identity_component.c;
    out.write(reinterpret_cast<const char*>(&count), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&c), 4);
    for (const auto& gt : gts) {
        const std::uint32_t len = static_cast<std::uint32_t>(gt.sample_id.size());
        out.write(reinterpret_cast<const char*>(&len), 4);
        out.write(gt.sample_id.data(), len);
        const std::int32_t label = gt.true_label;
        out.write(reinterpret_cast<const char*>(&label), 4);
        out.write(reinterpret_cast<const char*>(gt.identity_component.data.data()),
                  static_cast<std::streamsize>(gt.identity_component.data.size() * sizeof(float)));
        out.write(reinterpret_cast<const char*>(gt.deviation_component.data.data()),
                  static_cast<std::streamsize>(gt.deviation_component.data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::vector<SyntheticGroundTruth> read_ground_truth(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kGroundTruthMagic, 8) != 0)
        throw std::runtime_error("bad ground-truth magic in '" + path + "'");
    std::uint32_t count = 0, h = 0, w = 0, c = 0;
    in.read(reinterpret_cast<char*>(&count), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    in.read(reinterpret_cast<char*>(&c), 4);
    std::vector<SyntheticGroundTruth> gts(count);
    for (auto& gt : gts) {
        std::uint32_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 4);
        gt.sample_id.resize(len);
        in.read(gt.sample_id.data(), len);
        std::int32_t label = 0;
        in.read(reinterpret_cast<char*>(&label), 4);
        gt.true_label = label;
        gt.identity_component = Image(h, w, c);
        gt.deviation_component = Image(h, w, c);
        in.read(reinterpret_cast<char*>(gt.identity_component.data.data()),
                static_cast<std::streamsize>(gt.identity_component.data.size() * sizeof(float)));
        in.read(reinterpret_cast<char*>(gt.deviation_component.data.data()),
                static_cast<std::streamsize>(gt.deviation_component.data.size() * sizeof(float)));
    }
    if (!in) throw std::runtime_error("truncated ground truth '" + path + "'");
    return gts;
}

inline nlohmann::json synthetic_config_json(const SyntheticConfig& c) {
    return nlohmann::json{{"n_subjects", c.n_subjects},
                          {"n_classes", c.n_classes},
                          {"image_size", c.image_size},
                          {"identity_amplitude", c.identity_amplitude},
                          {"deviation_amplitude", c.deviation_amplitude},
                          {"noise_sigma", c.noise_sigma},
                          {"frames_per_subject_per_class", c.frames_per_subject_per_class},
                          {"label_corruption_rate", c.label_corruption_rate},
                          {"seed", c.seed}};
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
    SyntheticConfig c;
    const nlohmann::json defaults = synthetic_config_json(c);
    for (const auto& [key, value] : j.items())
        if (!defaults.contains(key)) throw std::invalid_argument("SyntheticConfig: unknown key '" + key + "'");
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    };
    get("n_subjects", c.n_subjects);
    get("n_classes", c.n_classes);
    get("image_size", c.image_size);
    get("identity_amplitude", c.identity_amplitude);
    get("deviation_amplitude", c.deviation_amplitude);
    get("noise_sigma", c.noise_sigma);
    get("frames_per_subject_per_class", c.frames_per_subject_per_class);
    get("label_corruption_rate", c.label_corruption_rate);
    get("seed", c.seed);
    return c;
}

// PNGs under images/, manifest.csv, ground_truth.bin and gen_config.json.
inline void write_synthetic_dataset(const SyntheticDataset& ds, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir + "/images");
    for (const auto& r : ds.records) save_png(out_dir + "/" + r.path, *r.image);
    {
        std::ofstream out(out_dir + "/manifest.csv");
        if (!out) throw std::runtime_error("cannot write manifest.csv");
        write_manifest(out, ds.manifest);
    }
    write_ground_truth(out_dir + "/ground_truth.bin", ds.ground_truth);
    {
        std::ofstream out(out_dir + "/gen_config.json");
        out << synthetic_config_json(ds.config).dump(2) << "\n";
    }
}

} // namespace spnd
