#pragma once

// The TC-AE autoencoder: ViT encoder with optional staged token compression,
// pixel-shuffle latent bottleneck, and a structurally symmetric decoder.

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "tcae/checkpoint.hpp"
#include "tcae/nn.hpp"

namespace tcae {

struct TCAEConfig {
    std::int64_t image_size = 32;  // H = W
    std::int64_t patch = 2;
    std::int64_t dim = 64;
    std::int64_t heads = 4;
    std::int64_t stage1_blocks = 3;  // M, at full token resolution
    std::int64_t stage2_blocks = 3;  // N, after the intermediate compressor
    bool staged = true;
    std::int64_t latent_channels = 16;
    std::int64_t latent_side = 4;  // h = w
    std::string compressor = "two_layer_conv";
    bool class_token = true;

    std::int64_t token_grid() const { return image_size / patch; }
    std::int64_t token_count() const { return token_grid() * token_grid(); }
    std::int64_t final_grid() const { return staged ? token_grid() / 2 : token_grid(); }
    std::int64_t bottleneck_group() const { return final_grid() / latent_side; }

    void validate() const {
        TCAE_CHECK(image_size > 0 && patch > 0 && image_size % patch == 0,
                   "config: patch ", patch, " must divide image size ", image_size);
        TCAE_CHECK(dim > 0 && heads > 0 && dim % heads == 0, "config: heads must divide dim");
        TCAE_CHECK(stage1_blocks >= 0 && stage2_blocks >= 0, "config: negative depth");
        TCAE_CHECK(latent_channels > 0 && latent_side > 0, "config: bad latent shape");
        if (staged) {
            TCAE_CHECK(token_grid() % 2 == 0, "config: staged requires an even token grid, got ",
                       token_grid());
        }
        TCAE_CHECK(final_grid() % latent_side == 0, "config: latent side ", latent_side,
                   " must divide final token grid ", final_grid());
        compressor_kind_from_string(compressor);
    }

    nlohmann::json to_json() const {
        return {{"image_size", image_size}, {"patch", patch},
                {"dim", dim},              {"heads", heads},
                {"stage1_blocks", stage1_blocks}, {"stage2_blocks", stage2_blocks},
                {"staged", staged},        {"latent_channels", latent_channels},
                {"latent_side", latent_side}, {"compressor", compressor},
                {"class_token", class_token}};
    }

    static TCAEConfig from_json(const nlohmann::json& j) {
        TCAEConfig c;
        c.image_size = j.value("image_size", c.image_size);
        c.patch = j.value("patch", c.patch);
        c.dim = j.value("dim", c.dim);
        c.heads = j.value("heads", c.heads);
        c.stage1_blocks = j.value("stage1_blocks", c.stage1_blocks);
        c.stage2_blocks = j.value("stage2_blocks", c.stage2_blocks);
        c.staged = j.value("staged", c.staged);
        c.latent_channels = j.value("latent_channels", c.latent_channels);
        c.latent_side = j.value("latent_side", c.latent_side);
        c.compressor = j.value("compressor", c.compressor);
        c.class_token = j.value("class_token", c.class_token);
        return c;
    }

    std::string fingerprint() const { return hex64(fnv1a64(to_json().dump())); }
};

// Spatial compression factors (area ratios). f_pix_to_tok * f_tok_to_lat
// equals the total pixel-to-latent ratio exactly; for staged models the
// token-to-latent leg further splits into the intermediate compressor factor
// and the final bottleneck factor.
struct CompressionRatios {
    std::int64_t f_pix_to_tok = 1;   // p^2
    std::int64_t f_tok_to_lat = 1;   // N_patchify / (h*w)
    std::int64_t f_pix_to_lat = 1;   // (H*W) / (h*w)
    std::int64_t f_intermediate = 1; // token-count factor of the staged compressor
    std::int64_t f_bottleneck = 1;   // N_final_stage / (h*w)
    double per_side = 1.0;           // sqrt(f_pix_to_lat)
};

inline CompressionRatios compression_ratios(const TCAEConfig& cfg) {
    cfg.validate();
    CompressionRatios r;
    std::int64_t lat_area = cfg.latent_side * cfg.latent_side;
    TCAE_CHECK(cfg.token_count() % lat_area == 0, "token count not divisible by latent area");
    r.f_pix_to_tok = cfg.patch * cfg.patch;
    r.f_tok_to_lat = cfg.token_count() / lat_area;
    r.f_pix_to_lat = (cfg.image_size * cfg.image_size) / lat_area;
    r.f_intermediate = cfg.staged ? 4 : 1;
    r.f_bottleneck = (cfg.final_grid() * cfg.final_grid()) / lat_area;
    r.per_side = std::sqrt(double(r.f_pix_to_lat));
    return r;
}

// The 15 architecture cells of the default desk-scale sweeps at 32x32 with
// a fixed 4x4x16 latent: patch axis (vanilla {8,4,2}, staged {4,2}), stage
// depth M in {0,2,3,5,6} of 6 blocks, alpha axis (3 cells on the default
// architecture), compressor kind axis (2 cells).
inline std::vector<TCAEConfig> default_sweep_configs() {
    std::vector<TCAEConfig> out;
    TCAEConfig base;  // staged, p=2, M=3/N=3, d=64, latent 4x4x16
    for (std::int64_t p : {8, 4, 2}) {
        TCAEConfig c = base;
        c.patch = p;
        c.staged = false;
        out.push_back(c);
    }
    for (std::int64_t p : {4, 2}) {
        TCAEConfig c = base;
        c.patch = p;
        c.staged = true;
        out.push_back(c);
    }
    for (std::int64_t m : {0, 2, 3, 5, 6}) {
        TCAEConfig c = base;
        c.stage1_blocks = m;
        c.stage2_blocks = 6 - m;
        out.push_back(c);
    }
    for (int i = 0; i < 3; ++i) out.push_back(base);  // alpha axis reuses the base architecture
    for (auto kind : {"two_layer_conv", "pixel_shuffle_mlp"}) {
        TCAEConfig c = base;
        c.compressor = kind;
        out.push_back(c);
    }
    return out;
}

template <class T>
struct LatentBatchT {
    TensorT<T> values;  // [B, h, w, c]
    std::string fingerprint;
};

// Diagnostics exposed by encode(): the tokens entering the bottleneck (the
// linear-probe features A1) and the class token for the SSL heads.
template <class T>
struct TokenTraceT {
    TensorT<T> tokens;  // [B, g_final^2, d]
    TensorT<T> cls;     // [B, d]; undefined when the class token is disabled
};

template <class T>
struct TCAEModelT {
    TCAEConfig cfg;
    ParamRegistry<T> params;

    PatchEmbedT<T> patch_embed;
    PositionalEmbedT<T> pos;
    ParamPtr<T> cls_token;   // [1, d]
    ParamPtr<T> mask_token;  // [1, d]; replaces masked patch embeddings
    std::vector<TransformerBlockT<T>> enc_stage1, enc_stage2;
    TokenCompressorT<T> compressor;
    LayerNormT<T> enc_norm;
    LatentBottleneckT<T> bottleneck;

    LinearT<T> dec_in;
    PositionalEmbedT<T> dec_pos;
    std::vector<TransformerBlockT<T>> dec_stage2, dec_stage1;
    TokenExpanderT<T> expander;
    LayerNormT<T> dec_norm;
    LinearT<T> dec_out;

    TCAEModelT(TCAEConfig cfg_, RngStream rng, bool trainable = true)
        : cfg(std::move(cfg_)), params(trainable) {
        cfg.validate();
        std::int64_t d = cfg.dim, g = cfg.token_grid(), gf = cfg.final_grid();
        patch_embed = PatchEmbedT<T>(params, "enc.patch", cfg.patch, d, rng.split("patch"));
        pos = PositionalEmbedT<T>(params, "enc", g, d, rng.split("pos"));
        if (cfg.class_token)
            cls_token = params.add("enc.cls", trunc_normal_init<T>({1, d}, rng.split("cls")));
        mask_token = params.add("enc.mask", trunc_normal_init<T>({1, d}, rng.split("mask")));
        for (std::int64_t i = 0; i < cfg.stage1_blocks; ++i)
            enc_stage1.emplace_back(params, "enc.s1." + std::to_string(i), d, cfg.heads,
                                    rng.split("enc.s1." + std::to_string(i)));
        if (cfg.staged)
            compressor = TokenCompressorT<T>(params, "enc.compress",
                                             compressor_kind_from_string(cfg.compressor), d,
                                             rng.split("compress"));
        for (std::int64_t i = 0; i < cfg.stage2_blocks; ++i)
            enc_stage2.emplace_back(params, "enc.s2." + std::to_string(i), d, cfg.heads,
                                    rng.split("enc.s2." + std::to_string(i)));
        enc_norm = LayerNormT<T>(params, "enc.norm", d);
        bottleneck = LatentBottleneckT<T>(params, "enc.bottleneck", cfg.bottleneck_group(), d,
                                          cfg.latent_channels, rng.split("bottleneck"));

        std::int64_t r = cfg.bottleneck_group();
        dec_in = LinearT<T>(params, "dec.in", cfg.latent_channels, r * r * d, rng.split("dec.in"));
        dec_pos = PositionalEmbedT<T>(params, "dec", gf, d, rng.split("dec.pos"));
        for (std::int64_t i = 0; i < cfg.stage2_blocks; ++i)
            dec_stage2.emplace_back(params, "dec.s2." + std::to_string(i), d, cfg.heads,
                                    rng.split("dec.s2." + std::to_string(i)));
        if (cfg.staged) expander = TokenExpanderT<T>(params, "dec.expand", d, rng.split("expand"));
        for (std::int64_t i = 0; i < cfg.stage1_blocks; ++i)
            dec_stage1.emplace_back(params, "dec.s1." + std::to_string(i), d, cfg.heads,
                                    rng.split("dec.s1." + std::to_string(i)));
        dec_norm = LayerNormT<T>(params, "dec.norm", d);
        dec_out = LinearT<T>(params, "dec.out", d, 3 * cfg.patch * cfg.patch, rng.split("dec.out"));
    }

    std::vector<ParamPtr<T>> encoder_params() const {
        std::vector<ParamPtr<T>> out;
        for (auto& p : params.all())
            if (p->name.rfind("enc.", 0) == 0) out.push_back(p);
        return out;
    }
    std::vector<ParamPtr<T>> decoder_params() const {
        std::vector<ParamPtr<T>> out;
        for (auto& p : params.all())
            if (p->name.rfind("dec.", 0) == 0) out.push_back(p);
        return out;
    }

    // Encoder over an image batch at any resolution divisible by the patch
    // size (global crops, local crops). mask, when given, holds one byte per
    // input-grid position per image; masked positions are replaced by the
    // learned mask token before positions are added.
    TokenTraceT<T> encode_tokens(const TensorT<T>& images,
                                 const std::vector<std::uint8_t>* mask = nullptr) const {
        std::int64_t B = images.dim(0);
        std::int64_t g = images.dim(2) / cfg.patch;
        auto x = patch_embed.forward(images);  // [B,N,d]
        std::int64_t N = x.dim(1);
        if (mask) {
            TCAE_CHECK(std::int64_t(mask->size()) == B * N, "mask size mismatch: ", mask->size(),
                       " vs ", B * N);
            std::vector<T> mv(mask->begin(), mask->end());
            auto m = TensorT<T>::leaf({B, N, 1}, std::move(mv));
            auto keep = add_scalar(neg(m), T(1));
            x = add(mul(x, keep), mul(reshape(mask_token->tensor, {1, 1, cfg.dim}), m));
        }
        x = add(x, pos.at_grid(g));
        if (cfg.class_token) {
            auto cls = add(cls_token->tensor, pos.cls_pos());          // [1,d]
            auto cls_b = add(TensorT<T>::zeros({B, 1, cfg.dim}), reshape(cls, {1, 1, cfg.dim}));
            x = concat<T>({cls_b, x}, 1);
        }
        for (auto& b : enc_stage1) x = b.forward(x);
        if (cfg.staged) {
            if (cfg.class_token) {
                auto cls_part = slice(x, 1, 0, 1);
                auto spatial = compressor.forward(slice(x, 1, 1, x.dim(1)));
                x = concat<T>({cls_part, spatial}, 1);
            } else {
                x = compressor.forward(x);
            }
        }
        for (auto& b : enc_stage2) x = b.forward(x);
        x = enc_norm.forward(x);
        TokenTraceT<T> trace;
        if (cfg.class_token) {
            trace.cls = reshape(slice(x, 1, 0, 1), {B, cfg.dim});
            trace.tokens = slice(x, 1, 1, x.dim(1));
        } else {
            trace.tokens = x;
        }
        return trace;
    }

    std::pair<LatentBatchT<T>, TokenTraceT<T>> encode(const TensorT<T>& images) const {
        TCAE_CHECK(images.dim(2) == cfg.image_size && images.dim(3) == cfg.image_size,
                   "encode: resolution ", images.dim(2), "x", images.dim(3),
                   " does not match config ", cfg.image_size);
        auto trace = encode_tokens(images);
        auto lat = bottleneck.forward(trace.tokens);  // [B,(h*w),c]
        LatentBatchT<T> out;
        out.values = reshape(lat, {images.dim(0), cfg.latent_side, cfg.latent_side, cfg.latent_channels});
        out.fingerprint = cfg.fingerprint();
        return {out, trace};
    }

    TensorT<T> decode(const LatentBatchT<T>& latent) const {
        TCAE_CHECK(latent.fingerprint == cfg.fingerprint(),
                   "decode: latent fingerprint does not match this model's config");
        std::int64_t B = latent.values.dim(0);
        std::int64_t r = cfg.bottleneck_group(), gf = cfg.final_grid();
        auto x = reshape(latent.values, {B, cfg.latent_side * cfg.latent_side, cfg.latent_channels});
        x = dec_in.forward(x);                       // [B,hw,r^2 d]
        if (r > 1) x = grid_split(x, r);             // [B,gf^2,d]
        x = reshape(x, {B, gf * gf, cfg.dim});
        x = add(x, dec_pos.at_grid(gf));
        for (auto& b : dec_stage2) x = b.forward(x);
        if (cfg.staged) x = expander.forward(x);
        for (auto& b : dec_stage1) x = b.forward(x);
        x = dec_norm.forward(x);
        x = dec_out.forward(x);  // [B,N,3p^2]
        return unpatchify(x, cfg.patch, cfg.image_size, cfg.image_size);
    }

    TensorT<T> reconstruct(const TensorT<T>& images) const { return decode(encode(images).first); }

    void save(const std::string& path) const {
        save_checkpoint(path, params);
        std::ofstream f(path + ".json");
        TCAE_CHECK_IO(f.good(), "cannot write config sidecar for '", path, "'");
        f << cfg.to_json().dump(2) << "\n";
    }

    static TCAEModelT<T> load(const std::string& path, bool trainable = true) {
        std::ifstream f(path + ".json");
        TCAE_CHECK_IO(f.good(), "missing config sidecar '", path, ".json'");
        nlohmann::json j = nlohmann::json::parse(f);
        TCAEModelT<T> model(TCAEConfig::from_json(j), RngStream::from_seed(0), trainable);
        load_checkpoint(path, model.params);
        return model;
    }
};

}  // namespace tcae
