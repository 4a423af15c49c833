#pragma once

// Teacher/student encoder architectures behind one contract: a pooled
// embedding plus a four-level feature pyramid with halving spatial sides.

#include <array>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "mammolab/autograd.hpp"
#include "mammolab/common.hpp"
#include "mammolab/image.hpp"
#include "mammolab/nn.hpp"

namespace mammolab {

struct EncoderOutput {
    ag::Tensor embedding;               // [D]
    std::array<ag::Tensor, 4> pyramid;  // [C_i, S_i, S_i], S halving per level
};

struct VarEncoderOutput {
    ag::Var embedding;
    std::array<ag::Var, 4> pyramid;
};

inline ag::Var image_to_var(const Image& img) {
    ag::Tensor t({1, img.rows, img.cols});
    for (std::size_t i = 0; i < img.px.size(); ++i) t[i] = double(img.px[i]) / 255.0;
    return ag::constant(std::move(t));
}

class Encoder {
public:
    virtual ~Encoder() = default;
    virtual std::string kind() const = 0;
    virtual nlohmann::json config_json() const = 0;
    virtual std::size_t embedding_dim() const = 0;
    virtual VarEncoderOutput forward(const ag::Var& image) = 0;

    // resolution-bound encoders override this to force their native side
    virtual std::size_t input_side_for(std::size_t requested) const { return requested; }

    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    EncoderOutput encode(const Image& img) {
        auto out = forward(image_to_var(img));
        EncoderOutput plain;
        plain.embedding = out.embedding->val;
        for (int i = 0; i < 4; ++i) plain.pyramid[i] = out.pyramid[i]->val;
        return plain;
    }

protected:
    nn::ParamStore params_;
};

// ---------------------------------------------------------------- TinyViT

struct TinyViTConfig {
    std::size_t image_side = 64;
    std::size_t patch_side = 8;
    std::size_t width = 64;  // D
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;

    void validate() const {
        if (image_side == 0 || patch_side == 0 || image_side % patch_side != 0)
            throw BadConfig("image_side must be divisible by patch_side");
        if (width % heads != 0) throw BadConfig("width must be divisible by heads");
    }

    std::size_t grid() const { return image_side / patch_side; }
    std::size_t n_patches() const { return grid() * grid(); }
};

class TinyViT final : public Encoder {
public:
    TinyViTConfig cfg;

    explicit TinyViT(TinyViTConfig config, std::uint64_t seed = 0) : cfg(config) {
        cfg.validate();
        Rng rng(derive_seed(seed, 0xA1));
        const std::size_t D = cfg.width, P = cfg.n_patches(), pp = cfg.patch_side * cfg.patch_side;
        patch_embed_ = nn::Dense(params_, "patch_embed", pp, D, rng, 0.02);
        cls_token_ = params_.add("cls_token", nn::trunc_normal({1, D}, 0.02, rng));
        mask_token_ = params_.add("mask_token", nn::trunc_normal({1, D}, 0.02, rng));
        pos_embed_ = params_.add("pos_embed", nn::trunc_normal({P + 1, D}, 0.02, rng));
        for (std::size_t l = 0; l < cfg.depth; ++l) {
            const std::string p = "block" + std::to_string(l);
            blocks_.push_back({nn::LayerNorm(params_, p + ".ln1", D),
                               nn::Dense(params_, p + ".qkv", D, 3 * D, rng, 0.02),
                               nn::Dense(params_, p + ".proj", D, D, rng, 0.02),
                               nn::LayerNorm(params_, p + ".ln2", D),
                               nn::Dense(params_, p + ".fc1", D, D * cfg.mlp_ratio, rng, 0.02),
                               nn::Dense(params_, p + ".fc2", D * cfg.mlp_ratio, D, rng, 0.02)});
        }
        final_ln_ = nn::LayerNorm(params_, "final_ln", D);
    }

    std::string kind() const override { return "tinyvit"; }
    std::size_t embedding_dim() const override { return cfg.width; }
    std::size_t input_side_for(std::size_t) const override { return cfg.image_side; }

    nlohmann::json config_json() const override {
        return {{"image_side", cfg.image_side}, {"patch_side", cfg.patch_side},
                {"width", cfg.width},           {"depth", cfg.depth},
                {"heads", cfg.heads},           {"mlp_ratio", cfg.mlp_ratio}};
    }

    static TinyViTConfig config_from_json(const nlohmann::json& j) {
        TinyViTConfig c;
        c.image_side = j.at("image_side").get<std::size_t>();
        c.patch_side = j.at("patch_side").get<std::size_t>();
        c.width = j.at("width").get<std::size_t>();
        c.depth = j.at("depth").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        return c;
    }

    // Token outputs [P+1, D] after the final layernorm. Masked patches are
    // replaced by the mask token at input (mask may be null).
    ag::Var forward_tokens(const ag::Var& image, const std::vector<char>* mask = nullptr) {
        const std::size_t H = image->val.dim(1), W = image->val.dim(2);
        if (H != cfg.image_side || W != cfg.image_side)
            throw ShapeMismatch("TinyViT expects side " + std::to_string(cfg.image_side));
        if (mask && mask->size() != cfg.n_patches())
            throw MaskLengthMismatch();
        const std::size_t g = cfg.grid(), p = cfg.patch_side, D = cfg.width;

        // patchify -> [P, p*p]
        ag::Tensor patches({cfg.n_patches(), p * p});
        for (std::size_t gr = 0; gr < g; ++gr)
            for (std::size_t gc = 0; gc < g; ++gc)
                for (std::size_t r = 0; r < p; ++r)
                    for (std::size_t c = 0; c < p; ++c)
                        patches[(gr * g + gc) * p * p + r * p + c] =
                            image->val[(gr * p + r) * W + gc * p + c];
        ag::Var tok = patch_embed_(ag::constant(std::move(patches)));  // [P, D]

        if (mask) {
            // masked rows replaced by the mask token: zero the row, add token
            ag::Tensor keep({cfg.n_patches(), D});
            ag::Tensor put({cfg.n_patches(), D}, 0.0);
            for (std::size_t i = 0; i < cfg.n_patches(); ++i)
                for (std::size_t j = 0; j < D; ++j) keep[i * D + j] = (*mask)[i] ? 0.0 : 1.0;
            tok = ag::mul(tok, ag::constant(keep));
            // add mask token to masked rows via matmul with indicator column
            ag::Tensor ind({cfg.n_patches(), 1});
            for (std::size_t i = 0; i < cfg.n_patches(); ++i) ind[i] = (*mask)[i] ? 1.0 : 0.0;
            tok = ag::add(tok, ag::matmul(ag::constant(std::move(ind)), mask_token_));
        }

        // prepend cls token, add positional embedding
        ag::Var x = ag::add(concat_rows2(cls_token_, tok), pos_embed_);
        for (const auto& blk : blocks_) x = ag::add(x, block_branch(blk, x));
        return final_ln_(x);
    }

    VarEncoderOutput forward(const ag::Var& image) override {
        ag::Var tokens = forward_tokens(image);
        VarEncoderOutput out;
        out.embedding = ag::row(tokens, 0);
        // patch grid as a [D, g, g] map, resized into the pyramid contract
        const std::size_t g = cfg.grid(), D = cfg.width;
        ag::Var grid_map = ag::reshape(ag::transpose(ag::slice_rows(tokens, 1, 1 + g * g)),
                                       {D, g, g});
        for (int level = 0; level < 4; ++level) {
            const std::size_t side = std::max<std::size_t>(1, cfg.image_side >> (2 + level));
            out.pyramid[level] = ag::bilinear_resize(grid_map, side, side);
        }
        return out;
    }

private:
    struct Block {
        nn::LayerNorm ln1;
        nn::Dense qkv, proj;
        nn::LayerNorm ln2;
        nn::Dense fc1, fc2;
    };

    static ag::Var concat_rows2(const ag::Var& a, const ag::Var& b) {
        // [1,D] over [P,D] -> [P+1,D]
        const std::size_t D = a->val.dim(1), P = b->val.dim(0);
        ag::Tensor out({P + 1, D});
        std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
        std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + D);
        return ag::make(std::move(out), {a, b}, [a, b, D, P](ag::Node& n) {
            for (std::size_t j = 0; j < D; ++j) a->grad[j] += n.grad[j];
            for (std::size_t i = 0; i < P * D; ++i) b->grad[i] += n.grad[D + i];
        });
    }

    ag::Var block_branch(const Block& blk, const ag::Var& x) {
        const std::size_t D = cfg.width, h = cfg.heads, dh = D / h;
        ag::Var qkv = blk.qkv(blk.ln1(x));  // [T, 3D]
        std::vector<ag::Var> head_outs;
        for (std::size_t i = 0; i < h; ++i) {
            ag::Var q = ag::slice_cols(qkv, i * dh, (i + 1) * dh);
            ag::Var k = ag::slice_cols(qkv, D + i * dh, D + (i + 1) * dh);
            ag::Var v = ag::slice_cols(qkv, 2 * D + i * dh, 2 * D + (i + 1) * dh);
            ag::Var attn = ag::softmax_rows(
                ag::scale(ag::matmul(q, ag::transpose(k)), 1.0 / std::sqrt(double(dh))));
            head_outs.push_back(ag::matmul(attn, v));
        }
        ag::Var cat = head_outs[0];
        for (std::size_t i = 1; i < h; ++i) cat = ag::concat_cols(cat, head_outs[i]);
        ag::Var attn_out = blk.proj(cat);
        ag::Var y = ag::add(x, attn_out);
        ag::Var mlp = blk.fc2(ag::gelu(blk.fc1(blk.ln2(y))));
        // returns full residual update relative to input x
        return ag::add(attn_out, mlp);
    }

    nn::Dense patch_embed_;
    ag::Var cls_token_, mask_token_, pos_embed_;
    std::vector<Block> blocks_;
    nn::LayerNorm final_ln_;
};

// ---------------------------------------------------------------- TinyCNN

struct TinyCNNConfig {
    std::array<std::size_t, 4> stage_channels = {16, 32, 64, 128};
    std::size_t stem_stride = 2;

    void validate() const {
        for (auto c : stage_channels)
            if (c == 0) throw BadConfig("stage channels must be positive");
        if (stem_stride == 0) throw BadConfig("stem_stride must be positive");
    }
};

class TinyCNN final : public Encoder {
public:
    TinyCNNConfig cfg;

    explicit TinyCNN(TinyCNNConfig config, std::uint64_t seed = 0) : cfg(config) {
        cfg.validate();
        Rng rng(derive_seed(seed, 0xB2));
        const std::size_t stem_ch = std::max<std::size_t>(4, cfg.stage_channels[0] / 2);
        stem_ = nn::Conv(params_, "stem", 1, stem_ch, 3, cfg.stem_stride, 1, rng);
        std::size_t in = stem_ch;
        for (int s = 0; s < 4; ++s) {
            const std::string p = "stage" + std::to_string(s);
            const std::size_t out = cfg.stage_channels[s];
            down_.push_back(nn::Conv(params_, p + ".down", in, out, 3, 2, 1, rng));
            mix_.push_back(nn::Conv(params_, p + ".mix", out, out, 3, 1, 1, rng));
            in = out;
        }
    }

    std::string kind() const override { return "tinycnn"; }
    std::size_t embedding_dim() const override { return cfg.stage_channels[3]; }

    nlohmann::json config_json() const override {
        return {{"stage_channels", cfg.stage_channels}, {"stem_stride", cfg.stem_stride}};
    }

    static TinyCNNConfig config_from_json(const nlohmann::json& j) {
        TinyCNNConfig c;
        auto ch = j.at("stage_channels").get<std::vector<std::size_t>>();
        if (ch.size() != 4) throw BadConfig("stage_channels must have 4 entries");
        std::copy(ch.begin(), ch.end(), c.stage_channels.begin());
        c.stem_stride = j.at("stem_stride").get<std::size_t>();
        return c;
    }

    VarEncoderOutput forward(const ag::Var& image) override {
        const std::size_t side = image->val.dim(1);
        if (side != image->val.dim(2) || side < 32 || side % 32 != 0)
            throw ShapeMismatch("TinyCNN expects a square side divisible by 32");
        VarEncoderOutput out;
        ag::Var x = ag::gelu(stem_(image));
        for (int s = 0; s < 4; ++s) {
            x = ag::gelu(down_[s](x));
            x = ag::gelu(mix_[s](x));
            out.pyramid[s] = x;
        }
        out.embedding = ag::global_avg_pool(x);
        return out;
    }

private:
    nn::Conv stem_;
    std::vector<nn::Conv> down_, mix_;
};

inline std::unique_ptr<Encoder> make_encoder(const std::string& kind, const nlohmann::json& cfg,
                                             std::uint64_t seed = 0) {
    if (kind == "tinyvit") return std::make_unique<TinyViT>(TinyViT::config_from_json(cfg), seed);
    if (kind == "tinycnn") return std::make_unique<TinyCNN>(TinyCNN::config_from_json(cfg), seed);
    throw BadConfig("unknown encoder kind: " + kind);
}

}  // namespace mammolab
