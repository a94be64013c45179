#include "doctest.h"
#include "tcae/tcae_model.hpp"

#include <cstdio>

using namespace tcae;

namespace {
TCAEConfig small_cfg(bool staged, std::int64_t patch = 2) {
    TCAEConfig c;
    c.image_size = 32;
    c.patch = patch;
    c.dim = 32;
    c.heads = 4;
    c.stage1_blocks = 1;
    c.stage2_blocks = 1;
    c.staged = staged;
    c.latent_channels = 16;
    c.latent_side = 4;
    return c;
}
}  // namespace

TEST_CASE("staged encode: 256 tokens -> 64 -> 4x4x16 latent") {
    auto model = TCAEModelT<float>(small_cfg(true), RngStream::from_seed(1));
    CHECK(model.cfg.token_count() == 256);
    CHECK(model.cfg.final_grid() == 8);
    CHECK(model.cfg.bottleneck_group() == 2);
    auto rng = RngStream::from_seed(2);
    auto img = Tensor::uniform({2, 3, 32, 32}, rng, -1.0f, 1.0f);
    auto [lat, trace] = model.encode(img);
    CHECK(lat.values.shape() == Shape{2, 4, 4, 16});
    CHECK(trace.tokens.shape() == Shape{2, 64, 32});
    CHECK(trace.cls.shape() == Shape{2, 32});
}

TEST_CASE("vanilla encode with p=8: 16 tokens -> 4x4x16 latent") {
    auto cfg = small_cfg(false, 8);
    auto model = TCAEModelT<float>(cfg, RngStream::from_seed(3));
    CHECK(model.cfg.bottleneck_group() == 1);
    auto rng = RngStream::from_seed(4);
    auto img = Tensor::uniform({1, 3, 32, 32}, rng, -1.0f, 1.0f);
    auto [lat, trace] = model.encode(img);
    CHECK(lat.values.shape() == Shape{1, 4, 4, 16});
    CHECK(trace.tokens.shape() == Shape{1, 16, 32});
}

TEST_CASE("encode is bitwise deterministic") {
    auto model = TCAEModelT<float>(small_cfg(true), RngStream::from_seed(5));
    auto rng = RngStream::from_seed(6);
    auto img = Tensor::uniform({1, 3, 32, 32}, rng, -1.0f, 1.0f);
    auto a = model.encode(img).first;
    auto b = model.encode(img).first;
    for (std::size_t i = 0; i < a.values.values().size(); ++i)
        CHECK(a.values.values()[i] == b.values.values()[i]);
}

TEST_CASE("staged and vanilla models with matching (p,c,h,w) emit identical latent shapes") {
    auto s = TCAEModelT<float>(small_cfg(true, 2), RngStream::from_seed(7));
    auto v = TCAEModelT<float>(small_cfg(false, 2), RngStream::from_seed(8));
    auto rng = RngStream::from_seed(9);
    auto img = Tensor::uniform({1, 3, 32, 32}, rng, -1.0f, 1.0f);
    CHECK(s.encode(img).first.values.shape() == v.encode(img).first.values.shape());
}

TEST_CASE("decode round-trips shapes and differs from input at random init") {
    for (bool staged : {true, false}) {
        auto model = TCAEModelT<float>(small_cfg(staged), RngStream::from_seed(staged ? 10 : 11));
        auto rng = RngStream::from_seed(12);
        auto img = Tensor::uniform({2, 3, 32, 32}, rng, -1.0f, 1.0f);
        auto rec = model.reconstruct(img);
        REQUIRE(rec.shape() == img.shape());
        float max_diff = 0;
        for (std::size_t i = 0; i < img.values().size(); ++i)
            max_diff = std::max(max_diff, std::abs(rec.values()[i] - img.values()[i]));
        CHECK(max_diff > 0.01f);  // sanity: a fresh model is not the identity
    }
}

TEST_CASE("decode rejects fingerprint mismatches") {
    auto a = TCAEModelT<float>(small_cfg(true), RngStream::from_seed(13));
    auto b = TCAEModelT<float>(small_cfg(false), RngStream::from_seed(14));
    auto rng = RngStream::from_seed(15);
    auto img = Tensor::uniform({1, 3, 32, 32}, rng, -1.0f, 1.0f);
    auto lat = a.encode(img).first;
    CHECK_THROWS_AS(b.decode(lat), ConfigError);
}

TEST_CASE("compression ratios reproduce the paper's 256px example: (64, 16, 1024), side 32") {
    TCAEConfig c;
    c.image_size = 256;
    c.patch = 8;
    c.staged = false;
    c.latent_side = 8;
    c.latent_channels = 128;
    auto r = compression_ratios(c);
    CHECK(r.f_pix_to_tok == 64);
    CHECK(r.f_tok_to_lat == 16);
    CHECK(r.f_pix_to_lat == 1024);
    CHECK(r.f_bottleneck == 16);
    CHECK(r.per_side == doctest::Approx(32.0));
}

TEST_CASE("identity compression: p=1 with full-resolution latent") {
    TCAEConfig c;
    c.image_size = 8;
    c.patch = 1;
    c.staged = false;
    c.latent_side = 8;
    auto r = compression_ratios(c);
    CHECK(r.f_pix_to_tok == 1);
    CHECK(r.f_tok_to_lat == 1);
    CHECK(r.f_pix_to_lat == 1);
}

TEST_CASE("staged desk example: patch factor 4, bottleneck factor 4, total 64") {
    TCAEConfig c;  // default: 32px, p=2, staged, latent 4x4
    auto r = compression_ratios(c);
    CHECK(r.f_pix_to_tok == 4);
    CHECK(r.f_bottleneck == 4);
    CHECK(r.f_intermediate == 4);
    CHECK(r.f_pix_to_lat == 64);
    // the Eq-3 decomposition stays exact: pixel->token times token->latent
    CHECK(r.f_tok_to_lat == 16);
    CHECK(r.f_pix_to_tok * r.f_tok_to_lat == r.f_pix_to_lat);
    CHECK(r.f_pix_to_tok * r.f_intermediate * r.f_bottleneck == r.f_pix_to_lat);
}

TEST_CASE("Eq-3 identity holds exactly for every default sweep config") {
    auto configs = default_sweep_configs();
    CHECK(configs.size() == 15);
    for (const auto& c : configs) {
        auto r = compression_ratios(c);
        CHECK(r.f_pix_to_tok * r.f_tok_to_lat ==
              (c.image_size * c.image_size) / (c.latent_side * c.latent_side));
        CHECK(r.f_intermediate * r.f_bottleneck == r.f_tok_to_lat);
    }
}

TEST_CASE("staged config with an incompatible grid is rejected") {
    TCAEConfig c;
    c.image_size = 32;
    c.patch = 8;  // grid 4 -> compressed grid 2 < latent side 4
    c.staged = true;
    c.latent_side = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("every parameter is reached by a reconstruction loss, mask token excluded") {
    auto model = TCAEModelT<float>(small_cfg(true), RngStream::from_seed(16));
    auto rng = RngStream::from_seed(17);
    auto img = Tensor::uniform({2, 3, 32, 32}, rng, -1.0f, 1.0f);
    auto rec = model.reconstruct(img);
    auto loss = mean_all(square(rec));
    backward(loss);
    for (const auto& p : model.params.all()) {
        float mag = 0;
        for (float g : p->grad()) mag += std::abs(g);
        if (p->name == "enc.mask") {
            // the mask token only participates in masked SSL passes
            CHECK(mag == 0.0f);
        } else {
            INFO("parameter ", p->name);
            CHECK(mag > 0.0f);
        }
    }
}

TEST_CASE("checkpoint save -> load -> encode is bitwise identical") {
    auto model = TCAEModelT<float>(small_cfg(true), RngStream::from_seed(18));
    std::string path = "/tmp/tcae_test_ckpt.tcae";
    model.save(path);
    auto loaded = TCAEModelT<float>::load(path);
    auto rng = RngStream::from_seed(19);
    auto img = Tensor::uniform({1, 3, 32, 32}, rng, -1.0f, 1.0f);
    auto a = model.encode(img).first;
    auto b = loaded.encode(img).first;
    for (std::size_t i = 0; i < a.values.values().size(); ++i)
        CHECK(a.values.values()[i] == b.values.values()[i]);
    std::remove(path.c_str());
    std::remove((path + ".json").c_str());
}

TEST_CASE("local-crop resolutions route through resampled positions") {
    auto model = TCAEModelT<float>(small_cfg(true), RngStream::from_seed(20));
    auto rng = RngStream::from_seed(21);
    auto crop = Tensor::uniform({2, 3, 16, 16}, rng, -1.0f, 1.0f);  // half resolution
    auto trace = model.encode_tokens(crop);
    CHECK(trace.tokens.shape() == Shape{2, 16, 32});  // 8x8 grid -> compressed 4x4
    CHECK(trace.cls.shape() == Shape{2, 32});
}
