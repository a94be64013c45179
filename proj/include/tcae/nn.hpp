#pragma once

// ViT building blocks: patch embedding, pre-norm transformer blocks, token
// compressor/expander, latent bottleneck, learned positional embeddings.

#include <map>
#include <string>
#include <vector>

#include "tcae/param.hpp"
#include "tcae/tensor.hpp"

namespace tcae {

template <class T>
struct LinearT {
    ParamPtr<T> w;  // [in, out]
    ParamPtr<T> b;  // [out] or null
    std::int64_t in = 0, out = 0;

    LinearT() = default;
    LinearT(ParamRegistry<T>& reg, const std::string& prefix, std::int64_t in_, std::int64_t out_,
            RngStream rng, bool bias = true, double init_std = 0.02) {
        in = in_;
        out = out_;
        w = reg.add(prefix + ".w", trunc_normal_init<T>({in, out}, rng.split("w"), init_std));
        if (bias) b = reg.add(prefix + ".b", zeros_init<T>({out}));
    }

    TensorT<T> forward(const TensorT<T>& x) const {
        Shape s = x.shape();
        TCAE_CHECK(s.back() == in, "linear: input dim ", s.back(), " != ", in);
        auto flat = reshape(x, {-1, in});
        auto y = matmul(flat, w->tensor);
        if (b) y = add(y, b->tensor);
        s.back() = out;
        return reshape(y, std::move(s));
    }
};

template <class T>
struct LayerNormT {
    ParamPtr<T> gamma, beta;

    LayerNormT() = default;
    LayerNormT(ParamRegistry<T>& reg, const std::string& prefix, std::int64_t dim) {
        gamma = reg.add(prefix + ".g", TensorT<T>::ones({dim}));
        beta = reg.add(prefix + ".b", TensorT<T>::zeros({dim}));
    }

    TensorT<T> forward(const TensorT<T>& x) const { return layer_norm(x, gamma->tensor, beta->tensor); }
};

template <class T>
struct MultiheadAttentionT {
    LinearT<T> qkv, proj;
    std::int64_t dim = 0, heads = 0;

    MultiheadAttentionT() = default;
    MultiheadAttentionT(ParamRegistry<T>& reg, const std::string& prefix, std::int64_t dim_,
                        std::int64_t heads_, RngStream rng) {
        TCAE_CHECK(dim_ % heads_ == 0, "attention: heads must divide dim");
        dim = dim_;
        heads = heads_;
        qkv = LinearT<T>(reg, prefix + ".qkv", dim, 3 * dim, rng.split("qkv"));
        proj = LinearT<T>(reg, prefix + ".proj", dim, dim, rng.split("proj"));
    }

    // x: [B,S,d]. probs_out, when given, receives the attention matrix
    // [B*heads, S, S] (diagnostic use only).
    TensorT<T> forward(const TensorT<T>& x, TensorT<T>* probs_out = nullptr) const {
        std::int64_t B = x.dim(0), S = x.dim(1);
        std::int64_t dh = dim / heads;
        auto qkv3 = reshape(qkv.forward(x), {B, S, 3, heads, dh});
        auto split3 = permute(qkv3, {2, 0, 3, 1, 4});  // [3,B,h,S,dh]
        auto q = reshape(slice(split3, 0, 0, 1), {B * heads, S, dh});
        auto k = reshape(slice(split3, 0, 1, 2), {B * heads, S, dh});
        auto v = reshape(slice(split3, 0, 2, 3), {B * heads, S, dh});
        auto scores = mul_scalar(bmm(q, k, true), T(1.0 / std::sqrt(double(dh))));
        auto probs = softmax(scores, -1);
        if (probs_out) *probs_out = probs;
        auto ctx = bmm(probs, v);  // [B*h,S,dh]
        auto merged = reshape(permute(reshape(ctx, {B, heads, S, dh}), {0, 2, 1, 3}), {B, S, dim});
        return proj.forward(merged);
    }
};

// Pre-norm block: x + attn(ln1(x)); x + mlp(ln2(x)). MLP ratio 4 with GELU.
template <class T>
struct TransformerBlockT {
    LayerNormT<T> ln1, ln2;
    MultiheadAttentionT<T> attn;
    LinearT<T> fc1, fc2;

    TransformerBlockT() = default;
    TransformerBlockT(ParamRegistry<T>& reg, const std::string& prefix, std::int64_t dim,
                      std::int64_t heads, RngStream rng) {
        ln1 = LayerNormT<T>(reg, prefix + ".ln1", dim);
        ln2 = LayerNormT<T>(reg, prefix + ".ln2", dim);
        attn = MultiheadAttentionT<T>(reg, prefix + ".attn", dim, heads, rng.split("attn"));
        fc1 = LinearT<T>(reg, prefix + ".fc1", dim, 4 * dim, rng.split("fc1"));
        fc2 = LinearT<T>(reg, prefix + ".fc2", 4 * dim, dim, rng.split("fc2"));
    }

    TensorT<T> forward(const TensorT<T>& x) const {
        auto h = add(x, attn.forward(ln1.forward(x)));
        return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
    }
};

// Eq-1 patchify: non-overlapping p x p patches projected to d dims, tokens
// in row-major grid order. The projection is a d x (3 p^2) matrix applied
// as a stride-p convolution; patch pixels flatten as (channel, py, px).
template <class T>
struct PatchEmbedT {
    ParamPtr<T> proj;  // [d, 3*p*p]
    std::int64_t patch = 0, dim = 0, in_ch = 3;

    PatchEmbedT() = default;
    PatchEmbedT(ParamRegistry<T>& reg, const std::string& prefix, std::int64_t patch_,
                std::int64_t dim_, RngStream rng, std::int64_t in_ch_ = 3) {
        patch = patch_;
        dim = dim_;
        in_ch = in_ch_;
        proj = reg.add(prefix + ".proj",
                       trunc_normal_init<T>({dim, in_ch * patch * patch}, rng.split("proj")));
    }

    TensorT<T> forward(const TensorT<T>& img) const {
        TCAE_CHECK(img.ndim() == 4 && img.dim(1) == in_ch, "patchify: want [B,", in_ch, ",H,W]");
        std::int64_t H = img.dim(2), W = img.dim(3);
        TCAE_CHECK(H % patch == 0 && W % patch == 0, "patchify: resolution ", H, "x", W,
                   " not divisible by patch size ", patch);
        std::int64_t gh = H / patch, gw = W / patch;
        auto w4 = reshape(proj->tensor, {dim, in_ch, patch, patch});
        auto feat = conv2d(img, w4, TensorT<T>(), patch, 0);  // [B,d,gh,gw]
        return reshape(permute(feat, {0, 2, 3, 1}), {img.dim(0), gh * gw, dim});
    }
};

// Inverse grid placement of patchify for tokens holding raw patch pixels.
template <class T>
TensorT<T> unpatchify(const TensorT<T>& tokens, std::int64_t p, std::int64_t H, std::int64_t W,
                      std::int64_t ch = 3) {
    std::int64_t B = tokens.dim(0), N = tokens.dim(1);
    TCAE_CHECK(tokens.dim(2) == ch * p * p, "unpatchify: token dim ", tokens.dim(2), " != ", ch * p * p);
    std::int64_t gh = H / p, gw = W / p;
    TCAE_CHECK(gh * p == H && gw * p == W && N == gh * gw, "unpatchify: inconsistent token count ", N,
               " for ", H, "x", W, " p=", p);
    auto t = reshape(tokens, {B, gh, gw, ch, p, p});
    auto u = permute(t, {0, 3, 1, 4, 2, 5});  // [B,ch,gh,p,gw,p]
    return reshape(u, {B, ch, H, W});
}

// Learned positional table with one extra leading slot for the class token.
// Off-grid resolutions are served by bilinear resampling of the g0 x g0 part.
template <class T>
struct PositionalEmbedT {
    ParamPtr<T> table;  // [1 + g0*g0, d]
    std::int64_t g0 = 0, dim = 0;

    PositionalEmbedT() = default;
    PositionalEmbedT(ParamRegistry<T>& reg, const std::string& prefix, std::int64_t grid,
                     std::int64_t dim_, RngStream rng) {
        g0 = grid;
        dim = dim_;
        table = reg.add(prefix + ".pos", trunc_normal_init<T>({1 + grid * grid, dim}, rng.split("pos")));
    }

    TensorT<T> cls_pos() const { return slice(table->tensor, 0, 0, 1); }  // [1,d]

    // [g*g, d] positional rows for a g x g token grid.
    TensorT<T> at_grid(std::int64_t g) const {
        auto grid_part = slice(table->tensor, 0, 1, 1 + g0 * g0);
        if (g == g0) return grid_part;
        auto it = interp_cache_.find(g);
        if (it == interp_cache_.end()) {
            it = interp_cache_.emplace(g, TensorT<T>::leaf({g * g, g0 * g0}, bilinear_matrix(g, g0))).first;
        }
        return matmul(it->second, grid_part);
    }

    // Row-major dense interpolation matrix mapping a g_in grid to g_out
    // (half-pixel centers, edge clamped).
    static std::vector<T> bilinear_matrix(std::int64_t g_out, std::int64_t g_in) {
        std::vector<T> m(std::size_t(g_out * g_out * g_in * g_in), T(0));
        auto clampi = [&](std::int64_t v) { return std::max<std::int64_t>(0, std::min(g_in - 1, v)); };
        for (std::int64_t oy = 0; oy < g_out; ++oy)
            for (std::int64_t ox = 0; ox < g_out; ++ox) {
                double sy = (double(oy) + 0.5) * double(g_in) / double(g_out) - 0.5;
                double sx = (double(ox) + 0.5) * double(g_in) / double(g_out) - 0.5;
                std::int64_t y0 = std::int64_t(std::floor(sy)), x0 = std::int64_t(std::floor(sx));
                double wy = sy - double(y0), wx = sx - double(x0);
                T* row = m.data() + (oy * g_out + ox) * g_in * g_in;
                row[clampi(y0) * g_in + clampi(x0)] += T((1 - wy) * (1 - wx));
                row[clampi(y0) * g_in + clampi(x0 + 1)] += T((1 - wy) * wx);
                row[clampi(y0 + 1) * g_in + clampi(x0)] += T(wy * (1 - wx));
                row[clampi(y0 + 1) * g_in + clampi(x0 + 1)] += T(wy * wx);
            }
        return m;
    }

private:
    mutable std::map<std::int64_t, TensorT<T>> interp_cache_;
};

enum class CompressorKind { TwoLayerConv, PixelShuffleMlp };

inline CompressorKind compressor_kind_from_string(const std::string& s) {
    if (s == "two_layer_conv") return CompressorKind::TwoLayerConv;
    if (s == "pixel_shuffle_mlp") return CompressorKind::PixelShuffleMlp;
    throw ConfigError("unknown compressor kind '" + s + "'");
}

inline const char* to_string(CompressorKind k) {
    return k == CompressorKind::TwoLayerConv ? "two_layer_conv" : "pixel_shuffle_mlp";
}

// Halves the token grid per side (count / 4), dim preserved.
//  - two_layer_conv: conv(k3,s1,p1) + GELU, then conv(k3,s2,p1) on the grid
//  - pixel_shuffle_mlp: merge 2x2 neighbor groups, then a 4d -> d projection
template <class T>
struct TokenCompressorT {
    CompressorKind kind = CompressorKind::TwoLayerConv;
    ParamPtr<T> conv1_w, conv1_b, conv2_w, conv2_b;
    LinearT<T> merge_proj;
    std::int64_t dim = 0;

    TokenCompressorT() = default;
    TokenCompressorT(ParamRegistry<T>& reg, const std::string& prefix, CompressorKind kind_,
                     std::int64_t dim_, RngStream rng) {
        kind = kind_;
        dim = dim_;
        if (kind == CompressorKind::TwoLayerConv) {
            double std1 = 0.02;
            conv1_w = reg.add(prefix + ".conv1.w",
                              trunc_normal_init<T>({dim, dim, 3, 3}, rng.split("c1"), std1));
            conv1_b = reg.add(prefix + ".conv1.b", zeros_init<T>({dim}));
            conv2_w = reg.add(prefix + ".conv2.w",
                              trunc_normal_init<T>({dim, dim, 3, 3}, rng.split("c2"), std1));
            conv2_b = reg.add(prefix + ".conv2.b", zeros_init<T>({dim}));
        } else {
            merge_proj = LinearT<T>(reg, prefix + ".merge", 4 * dim, dim, rng.split("merge"));
        }
    }

    TensorT<T> forward(const TensorT<T>& tokens) const {
        std::int64_t B = tokens.dim(0), N = tokens.dim(1);
        auto g = std::int64_t(std::llround(std::sqrt(double(N))));
        TCAE_CHECK(g * g == N, "compress_tokens: token count ", N, " is not a square grid");
        TCAE_CHECK(g % 2 == 0, "compress_tokens: grid side ", g, " must be even");
        if (kind == CompressorKind::PixelShuffleMlp) {
            return merge_proj.forward(grid_merge(tokens, 2));
        }
        auto grid = permute(reshape(tokens, {B, g, g, dim}), {0, 3, 1, 2});  // [B,d,g,g]
        auto h = gelu(conv2d(grid, conv1_w->tensor, conv1_b->tensor, 1, 1));
        auto o = conv2d(h, conv2_w->tensor, conv2_b->tensor, 2, 1);  // [B,d,g/2,g/2]
        return reshape(permute(o, {0, 2, 3, 1}), {B, (g / 2) * (g / 2), dim});
    }
};

// Decoder mirror of the pixel-shuffle compressor: d -> 4d projection then a
// 2x2 scatter; used for both compressor kinds.
template <class T>
struct TokenExpanderT {
    LinearT<T> proj;

    TokenExpanderT() = default;
    TokenExpanderT(ParamRegistry<T>& reg, const std::string& prefix, std::int64_t dim, RngStream rng) {
        proj = LinearT<T>(reg, prefix + ".proj", dim, 4 * dim, rng.split("proj"));
    }

    TensorT<T> forward(const TensorT<T>& tokens) const { return grid_split(proj.forward(tokens), 2); }
};

// Token-to-latent bottleneck: group r x r token blocks by pixel shuffle,
// project the grouped dim r^2 d to c channels.
template <class T>
struct LatentBottleneckT {
    LinearT<T> proj;
    std::int64_t group = 1;

    LatentBottleneckT() = default;
    LatentBottleneckT(ParamRegistry<T>& reg, const std::string& prefix, std::int64_t r,
                      std::int64_t dim, std::int64_t channels, RngStream rng) {
        group = r;
        proj = LinearT<T>(reg, prefix + ".proj", r * r * dim, channels, rng.split("proj"));
    }

    // [B, g*g, d] -> [B, (g/r)^2, c]
    TensorT<T> forward(const TensorT<T>& tokens) const {
        return proj.forward(group > 1 ? grid_merge(tokens, group) : tokens);
    }
};

}  // namespace tcae
