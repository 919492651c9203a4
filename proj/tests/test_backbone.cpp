#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "spnd/model.hpp"

using namespace spnd;

namespace {

BackboneConfig tiny_config(Variant variant, int blocks = 0, NormMode mode = NormMode::joint) {
    BackboneConfig cfg;
    cfg.input_size = 8;
    cfg.input_channels = 1;
    cfg.stage_channels = {3, 4};
    cfg.blocks_per_stage = blocks;
    cfg.feature_dim = 4;
    cfg.norm_mode = mode;
    cfg.variant = variant;
    return cfg;
}

template <class T>
Tensor4<T> random_images(int n, const BackboneConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    Tensor4<T> x(n, cfg.input_channels, cfg.input_size, cfg.input_size);
    for (auto& v : x.v) v = static_cast<T>(dist(rng));
    return x;
}

// Mean CE of a training-mode forward, used as the finite-difference target.
double training_loss(Model<double>& model, const Tensor4<double>& tar, const Tensor4<double>* ref,
                     const std::vector<int>& labels) {
    auto fb = model.forward(tar, ref, labels, /*training=*/true);
    double acc = 0.0;
    for (double l : fb.losses) acc += l;
    return acc / static_cast<double>(fb.M);
}

void check_model_gradients(Model<double>& model, const Tensor4<double>& tar, const Tensor4<double>* ref,
                           const std::vector<int>& labels) {
    model.zero_grad();
    auto fb = model.forward(tar, ref, labels, true, /*grad=*/true);
    model.backward(fb, labels);

    std::vector<ParamRef<double>> params, state;
    model.collect(params, state);
    const double h = 1e-5;
    std::mt19937_64 pick(99);
    for (auto& p : params) {
        double max_abs = 0.0;
        for (double g : *p.grad) max_abs = std::max(max_abs, std::abs(g));
        REQUIRE(max_abs > 0.0);  // gradient reaches every tensor
        const std::size_t n = p.value->size();
        for (int probe = 0; probe < 6; ++probe) {
            const std::size_t i = std::uniform_int_distribution<std::size_t>(0, n - 1)(pick);
            const double keep = (*p.value)[i];
            (*p.value)[i] = keep + h;
            const double up = training_loss(model, tar, ref, labels);
            (*p.value)[i] = keep - h;
            const double dn = training_loss(model, tar, ref, labels);
            (*p.value)[i] = keep;
            const double fd = (up - dn) / (2 * h);
            const double an = (*p.grad)[i];
            const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            INFO(p.name << "[" << i << "] analytic=" << an << " fd=" << fd);
            REQUIRE(err < 1e-4);
        }
    }
}

} // namespace

TEST_CASE("paired model gradients match finite differences") {
    for (NormMode mode : {NormMode::joint, NormMode::literal, NormMode::per_stream}) {
        Model<double> model(tiny_config(Variant::paired, 0, mode), 3);
        model.init(7);
        auto tar = random_images<double>(2, model.config(), 1);
        auto ref = random_images<double>(2, model.config(), 2);
        check_model_gradients(model, tar, &ref, {0, 2});
    }
}

TEST_CASE("baseline model gradients match finite differences") {
    Model<double> model(tiny_config(Variant::baseline, 0, NormMode::per_stream), 3);
    model.init(8);
    auto tar = random_images<double>(2, model.config(), 3);
    check_model_gradients(model, tar, nullptr, {1, 2});
}

TEST_CASE("dual model gradients flow into both networks") {
    Model<double> model(tiny_config(Variant::dual, 0, NormMode::per_stream), 3);
    model.init(9);
    // Generic parameters: nudge the neutral net away from the expression net.
    {
        std::vector<ParamRef<double>> params, state;
        model.collect(params, state);
        std::mt19937_64 rng(17);
        std::normal_distribution<double> dist(0.0, 0.05);
        for (auto& p : params)
            if (p.name.rfind("neutral.", 0) == 0)
                for (auto& v : *p.value) v += dist(rng);
    }
    auto tar = random_images<double>(2, model.config(), 4);
    check_model_gradients(model, tar, nullptr, {0, 1});
}

TEST_CASE("residual blocks (projection shortcut included) backprop correctly") {
    Model<double> model(tiny_config(Variant::paired, /*blocks=*/1), 2);
    model.init(11);
    auto tar = random_images<double>(2, model.config(), 5);
    auto ref = random_images<double>(2, model.config(), 6);
    check_model_gradients(model, tar, &ref, {0, 1});
}

TEST_CASE("identical images in both slots give identical stream features") {
    Model<float> model(tiny_config(Variant::paired), 2);
    model.init(21);
    auto tar = random_images<float>(4, model.config(), 31);

    for (bool training : {true, false}) {
        auto [vt, vr] = model.forward_basic(tar, &tar, training);
        REQUIRE(vt.size() == vr.size());
        float max_abs = 0.f;
        for (std::size_t i = 0; i < vt.size(); ++i) max_abs = std::max(max_abs, std::abs(vt[i] - vr[i]));
        REQUIRE(max_abs < 1e-6f);
    }
}

TEST_CASE("swapping target and reference slots swaps the outputs") {
    Model<double> model(tiny_config(Variant::paired), 2);
    model.init(23);
    auto a = random_images<double>(1, model.config(), 41);
    auto b = random_images<double>(1, model.config(), 42);

    auto [vt1, vr1] = model.forward_basic(a, &b, /*training=*/true);
    // Reset running statistics so both passes see the same state.
    Model<double> model2(tiny_config(Variant::paired), 2);
    model2.init(23);
    auto [vt2, vr2] = model2.forward_basic(b, &a, /*training=*/true);
    for (std::size_t i = 0; i < vt1.size(); ++i) {
        REQUIRE(vt1[i] == Catch::Approx(vr2[i]).margin(1e-12));
        REQUIRE(vr1[i] == Catch::Approx(vt2[i]).margin(1e-12));
    }
}

TEST_CASE("baseline forward returns (V_tar, none) with the contracted shape") {
    Model<float> model(tiny_config(Variant::baseline, 0, NormMode::per_stream), 2);
    model.init(25);
    auto tar = random_images<float>(3, model.config(), 51);
    auto [vt, vr] = model.forward_basic(tar, nullptr, false);
    REQUIRE(vt.size() == static_cast<std::size_t>(3 * model.config().feature_dim));
    REQUIRE(vr.empty());
    REQUIRE_THROWS_AS(model.forward_basic(tar, &tar, false), std::invalid_argument);
}

TEST_CASE("odd input sizes still produce feature_dim vectors") {
    auto cfg = tiny_config(Variant::baseline, 0, NormMode::per_stream);
    cfg.input_size = 11;
    Model<float> model(cfg, 2);
    model.init(26);
    auto tar = random_images<float>(2, cfg, 52);
    auto [vt, vr] = model.forward_basic(tar, nullptr, false);
    REQUIRE(vt.size() == static_cast<std::size_t>(2 * cfg.feature_dim));
}

TEST_CASE("backbone rejects mismatched input shapes") {
    Model<float> model(tiny_config(Variant::baseline, 0, NormMode::per_stream), 2);
    model.init(27);
    Tensor4<float> wrong(2, 1, 6, 6);
    REQUIRE_THROWS_AS(model.forward_basic(wrong, nullptr, false), std::invalid_argument);
}

TEST_CASE("dual variant with identical parameters yields zero NDFs") {
    Model<float> model(tiny_config(Variant::dual, 0, NormMode::per_stream), 2);
    model.init(29);
    auto tar = random_images<float>(3, model.config(), 61);
    auto fb = model.forward(tar, nullptr, {0, 1, 0}, /*training=*/false);
    for (float v : fb.ndf) REQUIRE(v == Catch::Approx(0.0).margin(1e-7));
    REQUIRE(fb.v_tar.size() == fb.v_ref.size());
}

TEST_CASE("inference forward is bit-deterministic") {
    Model<float> model(tiny_config(Variant::paired), 2);
    model.init(33);
    auto tar = random_images<float>(4, model.config(), 71);
    auto ref = random_images<float>(4, model.config(), 72);
    auto a = model.forward(tar, &ref, {0, 1, 0, 1}, false);
    auto b = model.forward(tar, &ref, {0, 1, 0, 1}, false);
    REQUIRE(a.ndf == b.ndf);
    REQUIRE(a.log_probs == b.log_probs);
}

TEST_CASE("checkpoints round-trip parameters, statistics and outputs") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "spnd_ckpt_test.ckpt").string();

    Model<double> model(tiny_config(Variant::paired, 1), 3);
    model.init(35);
    // Touch the running statistics so state tensors are nontrivial.
    auto tar = random_images<double>(2, model.config(), 81);
    auto ref = random_images<double>(2, model.config(), 82);
    model.forward(tar, &ref, {0, 1}, /*training=*/true);

    save_checkpoint(model, path);
    auto loaded = load_checkpoint<double>(path);

    std::vector<ParamRef<double>> p1, s1, p2, s2;
    model.collect(p1, s1);
    loaded.collect(p2, s2);
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        REQUIRE(p1[i].name == p2[i].name);
        REQUIRE(*p1[i].value == *p2[i].value);
    }
    for (std::size_t i = 0; i < s1.size(); ++i) REQUIRE(*s1[i].value == *s2[i].value);

    auto a = model.forward(tar, &ref, {0, 1}, false);
    auto b = loaded.forward(tar, &ref, {0, 1}, false);
    REQUIRE(a.log_probs == b.log_probs);

    REQUIRE_THROWS_AS(load_checkpoint<double>(path + ".missing"), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("full-scale preset validates and mirrors the 18-layer shape") {
    auto cfg = BackboneConfig::full();
    REQUIRE_NOTHROW(cfg.validate());
    REQUIRE(cfg.stage_channels == std::vector<int>{64, 128, 256, 512});
    REQUIRE(cfg.blocks_per_stage == 2);
    REQUIRE(cfg.feature_dim == 512);
    REQUIRE(cfg.input_size == 224);

    auto bad = cfg;
    bad.feature_dim = 256;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}
