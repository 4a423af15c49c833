#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mammolab/checkpoint.hpp"
#include "mammolab/encoders.hpp"

using namespace mammolab;
namespace fs = std::filesystem;

namespace {

// FD check on a sample of parameter coordinates (full sweeps are too slow
// for encoder-sized graphs).
double sampled_grad_error(Encoder& enc, const Image& img, std::size_t n_coords,
                          std::uint64_t seed) {
    auto build = [&] { return ag::sum_all(enc.forward(image_to_var(img)).embedding); };
    enc.params().zero_grad();
    ag::backward(build());
    Rng rng(seed);
    double worst = 0;
    // larger step than the op-level checks: the summed output is O(10), so
    // 1e-6 steps lose too many bits to cancellation on small-gradient coords
    const double h = 1e-4;
    for (std::size_t k = 0; k < n_coords; ++k) {
        auto& [name, p] = enc.params().params[rand_index(rng, enc.params().params.size())];
        const std::size_t i = rand_index(rng, p->val.size());
        const double keep = p->val[i];
        p->val[i] = keep + h;
        const double up = build()->val[0];
        p->val[i] = keep - h;
        const double dn = build()->val[0];
        p->val[i] = keep;
        const double fd = (up - dn) / (2 * h);
        const double an = p->grad[i];
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
        worst = std::max(worst, std::abs(fd - an) / denom);
    }
    return worst;
}

Image random_image(std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    Image img(side, side);
    for (auto& p : img.px) p = std::uint8_t(rng() % 256);
    return img;
}

}  // namespace

TEST_CASE("zero image produces finite outputs") {
    TinyViT vit(TinyViTConfig{}, 0);
    TinyCNN cnn(TinyCNNConfig{}, 0);
    for (Encoder* enc : {static_cast<Encoder*>(&vit), static_cast<Encoder*>(&cnn)}) {
        EncoderOutput out = enc->encode(Image(64, 64, 0));
        CHECK(out.embedding.finite());
        for (const auto& level : out.pyramid) CHECK(level.finite());
    }
}

TEST_CASE("activations stay finite on extreme inputs") {
    TinyViT vit(TinyViTConfig{}, 1);
    TinyCNN cnn(TinyCNNConfig{}, 1);
    for (Encoder* enc : {static_cast<Encoder*>(&vit), static_cast<Encoder*>(&cnn)}) {
        CHECK(enc->encode(Image(64, 64, 255)).embedding.finite());
        CHECK(enc->encode(random_image(64, 3)).embedding.finite());
    }
}

TEST_CASE("CNN pyramid sides follow the stride-arithmetic rule") {
    TinyCNN cnn(TinyCNNConfig{}, 0);
    EncoderOutput out = cnn.encode(Image(128, 128, 50));
    const std::size_t expect[4] = {32, 16, 8, 4};
    for (int i = 0; i < 4; ++i) {
        CHECK(out.pyramid[i].dim(1) == expect[i]);
        CHECK(out.pyramid[i].dim(2) == expect[i]);
        CHECK(out.pyramid[i].dim(0) == cnn.cfg.stage_channels[i]);
    }
}

TEST_CASE("ViT pyramid levels halve and embedding has width D") {
    TinyViT vit(TinyViTConfig{}, 0);
    EncoderOutput out = vit.encode(Image(64, 64, 90));
    CHECK(out.embedding.size() == vit.cfg.width);
    const std::size_t expect[4] = {16, 8, 4, 2};
    for (int i = 0; i < 4; ++i) {
        CHECK(out.pyramid[i].dim(1) == expect[i]);
        CHECK(out.pyramid[i].dim(0) == vit.cfg.width);
    }
}

TEST_CASE("encode is deterministic for fixed weights") {
    TinyCNN cnn(TinyCNNConfig{}, 5);
    Image img = random_image(64, 9);
    EncoderOutput a = cnn.encode(img);
    EncoderOutput b = cnn.encode(img);
    CHECK(a.embedding.v == b.embedding.v);
    for (int i = 0; i < 4; ++i) CHECK(a.pyramid[i].v == b.pyramid[i].v);
}

TEST_CASE("shape mismatches are rejected") {
    TinyViT vit(TinyViTConfig{}, 0);
    CHECK_THROWS_AS(vit.encode(Image(32, 32, 0)), ShapeMismatch);
    TinyCNN cnn(TinyCNNConfig{}, 0);
    CHECK_THROWS_AS(cnn.encode(Image(48, 48, 0)), ShapeMismatch);
}

TEST_CASE("parameter counts match the closed-form formula") {
    TinyViTConfig vc;
    TinyViT vit(vc, 0);
    const std::size_t D = vc.width, pp = vc.patch_side * vc.patch_side, P = vc.n_patches();
    const std::size_t per_block = 2 * D + (D * 3 * D + 3 * D) + (D * D + D) + 2 * D +
                                  (D * D * vc.mlp_ratio + D * vc.mlp_ratio) +
                                  (D * vc.mlp_ratio * D + D);
    const std::size_t vit_expect =
        (pp * D + D) + D + D + (P + 1) * D + vc.depth * per_block + 2 * D;
    CHECK(vit.params().count() == vit_expect);

    TinyCNNConfig cc;
    TinyCNN cnn(cc, 0);
    std::size_t stem_ch = std::max<std::size_t>(4, cc.stage_channels[0] / 2);
    std::size_t cnn_expect = stem_ch * 1 * 9 + stem_ch;
    std::size_t in = stem_ch;
    for (auto out : cc.stage_channels) {
        cnn_expect += out * in * 9 + out;    // down
        cnn_expect += out * out * 9 + out;   // mix
        in = out;
    }
    CHECK(cnn.params().count() == cnn_expect);
}

TEST_CASE("analytic gradients match finite differences on small configs") {
    TinyViTConfig vc{.image_side = 16, .patch_side = 8, .width = 8, .depth = 1, .heads = 2,
                     .mlp_ratio = 2};
    TinyViT vit(vc, 2);
    REQUIRE(vit.params().count() <= 5000);
    CHECK(sampled_grad_error(vit, random_image(16, 4), 20, 11) < 1e-4);

    TinyCNNConfig cc{.stage_channels = {4, 6, 6, 8}, .stem_stride = 2};
    TinyCNN cnn(cc, 2);
    REQUIRE(cnn.params().count() <= 5000);
    CHECK(sampled_grad_error(cnn, random_image(32, 5), 20, 12) < 1e-4);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    TinyViTConfig vc{.image_side = 16, .patch_side = 8, .width = 8, .depth = 1, .heads = 2,
                     .mlp_ratio = 2};
    TinyViT vit(vc, 7);
    const fs::path path = fs::temp_directory_path() / "mammolab_ckpt_test.bin";
    save_checkpoint(vit, path);
    auto loaded = load_checkpoint(path);
    REQUIRE(loaded->kind() == "tinyvit");
    // loaded values equal the float32-rounded originals
    for (std::size_t i = 0; i < vit.params().params.size(); ++i) {
        const auto& a = vit.params().params[i].second->val;
        const auto& b = loaded->params().params[i].second->val;
        for (std::size_t j = 0; j < a.size(); ++j) CHECK(double(float(a[j])) == b[j]);
    }
    // save(load(x)) reproduces the file byte-for-byte
    const fs::path path2 = fs::temp_directory_path() / "mammolab_ckpt_test2.bin";
    save_checkpoint(*loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("checkpoint error paths") {
    TinyCNNConfig cc{.stage_channels = {4, 6, 6, 8}, .stem_stride = 2};
    TinyCNN cnn(cc, 1);
    const fs::path path = fs::temp_directory_path() / "mammolab_ckpt_err.bin";
    save_checkpoint(cnn, path);

    SUBCASE("truncation by one byte") {
        auto size = fs::file_size(path);
        fs::resize_file(path, size - 1);
        CHECK_THROWS_AS(load_checkpoint(path), TruncatedFile);
    }
    SUBCASE("kind mismatch") {
        CHECK_THROWS_AS(load_checkpoint(path, "tinyvit"), KindMismatch);
    }
    SUBCASE("bad magic") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
        f.close();
        CHECK_THROWS_AS(load_checkpoint(path), BadMagic);
    }
    fs::remove(path);
}
