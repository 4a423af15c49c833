#pragma once

// Two-stage pretraining: Stage 1 trains a ViT teacher with masked patch
// reconstruction and a contrastive objective against an EMA copy; Stage 2
// distills the frozen teacher into a supervised student.

#include <filesystem>
#include <fstream>
#include <numeric>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mammolab/autograd.hpp"
#include "mammolab/checkpoint.hpp"
#include "mammolab/common.hpp"
#include "mammolab/corpus.hpp"
#include "mammolab/encoders.hpp"
#include "mammolab/nn.hpp"
#include "mammolab/preprocess.hpp"

namespace mammolab {

// ----------------------------------------------------------------- configs

struct Stage1Config {
    double mask_ratio = 0.4;
    double ema_momentum = 0.99;
    double temperature = 0.1;
    double w_mim = 1.0;
    double w_con = 1.0;
    std::size_t steps = 200;
    std::size_t batch = 8;
    double learning_rate = 1e-3;

    void validate() const {
        if (mask_ratio < 0.0 || mask_ratio >= 1.0) throw BadConfig("mask_ratio must be in [0,1)");
        if (ema_momentum < 0.0 || ema_momentum > 1.0) throw BadConfig("ema_momentum in [0,1]");
        if (temperature <= 0.0) throw BadConfig("temperature must be positive");
        if (w_mim < 0.0 || w_con < 0.0 || (w_mim == 0.0 && w_con == 0.0))
            throw BadConfig("loss weights must be >=0 and not both zero");
        if (batch < 2) throw BadConfig("batch must be >= 2 for the contrastive loss");
    }
};

struct Stage2Config {
    double w_distill = 1.0;
    double w_sup = 1.0;
    double w_con = 1.0;
    double temperature = 0.1;
    std::vector<std::string> supervised_tasks = {"birads", "composition"};
    std::size_t high_side = 64;
    std::size_t low_side = 32;
    std::size_t steps = 200;
    std::size_t batch = 8;
    double learning_rate = 1e-3;
    bool no_distill = false;
    bool no_sup = false;
    bool no_cnn = false;

    double effective_w_distill() const { return no_distill ? 0.0 : w_distill; }
    double effective_w_sup() const { return no_sup ? 0.0 : w_sup; }

    void validate() const {
        if (effective_w_distill() == 0.0 && effective_w_sup() == 0.0 && w_con == 0.0)
            throw BadConfig("all Stage 2 loss weights are zero");
        if (w_distill < 0 || w_sup < 0 || w_con < 0) throw BadConfig("negative loss weight");
        if (temperature <= 0.0) throw BadConfig("temperature must be positive");
        if (batch < 2) throw BadConfig("batch must be >= 2 for the contrastive loss");
        if (low_side >= high_side) throw BadConfig("low_side must be below high_side");
    }
};

// ------------------------------------------------------------ loss pieces

// MSE over masked patches only; zero masked patches -> 0 by convention.
inline ag::Var masked_patch_mse(const ag::Var& pred, const ag::Tensor& target,
                                const std::vector<char>& mask) {
    const std::size_t p = pred->val.dim(0), pp = pred->val.dim(1);
    if (mask.size() != p) throw MaskLengthMismatch();
    if (target.shape != pred->val.shape) throw ShapeMismatch("MIM target shape");
    std::size_t n_masked = 0;
    for (char m : mask) n_masked += m != 0;
    if (n_masked == 0) return ag::constant(ag::Tensor({1}, {0.0}));
    ag::Tensor weight({p, pp});
    const double inv = 1.0 / double(n_masked * pp);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < pp; ++j) weight[i * pp + j] = mask[i] ? inv : 0.0;
    ag::Var diff = ag::sub(pred, ag::constant(target));
    return ag::sum_all(ag::mul(ag::mul(diff, diff), ag::constant(std::move(weight))));
}

// Normalized pixel patches [P, p*p] of an image, the MIM target.
inline ag::Tensor patch_targets(const Image& img, std::size_t patch_side) {
    const std::size_t g = img.rows / patch_side;
    ag::Tensor t({g * g, patch_side * patch_side});
    for (std::size_t gr = 0; gr < g; ++gr)
        for (std::size_t gc = 0; gc < g; ++gc)
            for (std::size_t r = 0; r < patch_side; ++r)
                for (std::size_t c = 0; c < patch_side; ++c)
                    t[(gr * g + gc) * patch_side * patch_side + r * patch_side + c] =
                        double(img.at(gr * patch_side + r, gc * patch_side + c)) / 255.0;
    return t;
}

// Full MIM path: masked forward through the ViT, patch decoder, masked MSE.
inline ag::Var mim_loss(TinyViT& vit, const nn::Dense& decoder, const Image& image,
                        const std::vector<char>& mask) {
    ag::Var tokens = vit.forward_tokens(image_to_var(image), &mask);
    ag::Var patch_tokens = ag::slice_rows(tokens, 1, 1 + vit.cfg.n_patches());
    ag::Var pred = decoder(patch_tokens);
    return masked_patch_mse(pred, patch_targets(image, vit.cfg.patch_side), mask);
}

// Symmetric NT-Xent over two views [B, D]; embeddings L2-normalized here.
inline ag::Var contrastive_loss(const ag::Var& view1, const ag::Var& view2, double temperature) {
    const std::size_t b = view1->val.dim(0);
    if (b < 2) throw BatchTooSmall();
    if (view2->val.shape != view1->val.shape) throw ShapeMismatch("contrastive view shapes");
    ag::Var z = ag::l2_normalize_rows(ag::concat_rows(view1, view2));
    ag::Var sim = ag::scale(ag::matmul(z, ag::transpose(z)), 1.0 / temperature);
    // exclude self-similarity from every softmax
    ag::Tensor diag_mask({2 * b, 2 * b});
    for (std::size_t i = 0; i < 2 * b; ++i) diag_mask[i * 2 * b + i] = -1e9;
    sim = ag::add(sim, ag::constant(std::move(diag_mask)));
    std::vector<int> positives(2 * b);
    for (std::size_t i = 0; i < b; ++i) {
        positives[i] = int(b + i);
        positives[b + i] = int(i);
    }
    return ag::cross_entropy(sim, positives);
}

// MSE between the projected student embedding and a fixed teacher embedding.
inline ag::Var distill_loss(const ag::Var& projected_student, const ag::Var& teacher_embedding) {
    if (projected_student->val.size() != teacher_embedding->val.size())
        throw DimMismatch("student projection does not match teacher dimension");
    return ag::mse(projected_student, ag::detach(teacher_embedding));
}

// Sum over tasks of mean cross-entropy; rows with label -1 are skipped.
inline ag::Var supervised_loss(
    const std::vector<std::pair<ag::Var, std::vector<int>>>& per_task_logits_labels) {
    ag::Var total = ag::constant(ag::Tensor({1}, {0.0}));
    std::size_t labeled = 0;
    for (const auto& [logits, labels] : per_task_logits_labels) {
        std::size_t n = 0;
        for (int l : labels) n += l >= 0;
        if (n == 0) continue;
        labeled += n;
        total = ag::add(total, ag::cross_entropy(logits, labels));
    }
    if (labeled == 0) throw NoLabeledRecords();
    return total;
}

// --------------------------------------------------------------- EMA copy

inline void ema_update(nn::ParamStore& ema, const nn::ParamStore& online, double momentum) {
    if (ema.params.size() != online.params.size()) throw ShapeMismatch("EMA parameter sets");
    for (std::size_t i = 0; i < ema.params.size(); ++i) {
        auto& t = ema.params[i].second->val;
        const auto& s = online.params[i].second->val;
        for (std::size_t j = 0; j < t.size(); ++j)
            t[j] = momentum * t[j] + (1.0 - momentum) * s[j];
    }
}

inline void copy_params(nn::ParamStore& dst, const nn::ParamStore& src) {
    for (std::size_t i = 0; i < dst.params.size(); ++i)
        dst.params[i].second->val = src.params[i].second->val;
}

// -------------------------------------------------------------- loss curve

struct CurvePoint {
    std::size_t step;
    std::vector<double> terms;  // per-term losses, last entry = total
};

inline void write_curve(const std::filesystem::path& path,
                        const std::vector<std::string>& term_names,
                        const std::vector<CurvePoint>& curve) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "step";
    for (const auto& n : term_names) out << "," << n;
    out << "\n";
    char buf[32];
    for (const auto& p : curve) {
        out << p.step;
        for (double t : p.terms) {
            std::snprintf(buf, sizeof buf, "%.6f", t);
            out << "," << buf;
        }
        out << "\n";
    }
}

// ----------------------------------------------------------------- Stage 1

struct Stage1Result {
    std::unique_ptr<TinyViT> teacher;  // the EMA copy
    std::vector<CurvePoint> curve;     // terms: mim, con, total
};

inline Stage1Result train_stage1(const Manifest& manifest, const SplitAssignment& split,
                                 const Stage1Config& cfg, const TinyViTConfig& vit_cfg,
                                 std::uint64_t seed) {
    cfg.validate();
    auto train = records_in_split(manifest, split, Split::train);
    if (train.empty()) throw EmptyTrainSplit();

    auto online = std::make_unique<TinyViT>(vit_cfg, seed);
    auto ema = std::make_unique<TinyViT>(vit_cfg, seed);  // same init as online
    nn::ParamStore aux;
    Rng init_rng(derive_seed(seed, 0xD3));
    nn::Dense decoder(aux, "mim_decoder", vit_cfg.width,
                      vit_cfg.patch_side * vit_cfg.patch_side, init_rng, 0.02);

    std::vector<ag::Var> opt_params = nn::AdamW::vars_of(online->params());
    for (auto& [_, p] : aux.params) opt_params.push_back(p);
    nn::AdamW opt(opt_params, cfg.learning_rate);

    const std::size_t n_patches = vit_cfg.n_patches();
    const std::size_t n_masked =
        static_cast<std::size_t>(cfg.mask_ratio * double(n_patches) + 0.5);

    Stage1Result result;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(seed, 0x51000 + step));
        opt.zero_grad();

        std::vector<ag::Var> z_online, z_ema;
        ag::Var mim_total = ag::constant(ag::Tensor({1}, {0.0}));
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const ImageRecord& rec = *train[rand_index(rng, train.size())];
            const Image base = resize(rec.pixels, vit_cfg.image_side);
            const Image view1 = augment({.pixels = base}, rng()).pixels;
            const Image view2 = augment({.pixels = base}, rng()).pixels;

            std::vector<char> mask(n_patches, 0);
            {
                std::vector<std::size_t> order(n_patches);
                std::iota(order.begin(), order.end(), 0);
                for (std::size_t i = n_patches; i > 1; --i)
                    std::swap(order[i - 1], order[rand_index(rng, i)]);
                for (std::size_t i = 0; i < n_masked; ++i) mask[order[i]] = 1;
            }

            ag::Var tokens = online->forward_tokens(image_to_var(view1), &mask);
            ag::Var pred = decoder(ag::slice_rows(tokens, 1, 1 + n_patches));
            mim_total = ag::add(
                mim_total, masked_patch_mse(pred, patch_targets(view1, vit_cfg.patch_side), mask));
            z_online.push_back(ag::row(tokens, 0));
            z_ema.push_back(ag::detach(ag::row(ema->forward_tokens(image_to_var(view2)), 0)));
        }
        ag::Var mim = ag::scale(mim_total, 1.0 / double(cfg.batch));
        ag::Var con = contrastive_loss(ag::stack_rows(z_online), ag::stack_rows(z_ema),
                                       cfg.temperature);
        ag::Var total =
            ag::add(ag::scale(mim, cfg.w_mim), ag::scale(con, cfg.w_con));
        ag::backward(total);
        opt.step();
        ema_update(ema->params(), online->params(), cfg.ema_momentum);

        result.curve.push_back({step, {mim->val[0], con->val[0], total->val[0]}});
    }
    result.teacher = std::move(ema);
    return result;
}

// ----------------------------------------------------------------- Stage 2

struct Stage2Result {
    std::unique_ptr<Encoder> student;
    std::vector<CurvePoint> curve;  // terms: distill, sup, con, total
};

inline std::unique_ptr<Encoder> make_stage2_student(const Stage2Config& cfg, std::uint64_t seed) {
    if (cfg.no_cnn) {
        TinyViTConfig vc;
        vc.image_side = cfg.high_side;
        return std::make_unique<TinyViT>(vc, seed);
    }
    return std::make_unique<TinyCNN>(TinyCNNConfig{}, seed);
}

inline Stage2Result train_stage2(const Manifest& manifest, const SplitAssignment& split,
                                 TinyViT& teacher, const Stage2Config& cfg, std::uint64_t seed) {
    cfg.validate();
    auto train = records_in_split(manifest, split, Split::train);
    if (train.empty()) throw EmptyTrainSplit();

    auto student = make_stage2_student(cfg, derive_seed(seed, 0x52));
    nn::ParamStore aux;
    Rng init_rng(derive_seed(seed, 0xD4));
    nn::Dense projection(aux, "distill_proj", student->embedding_dim(),
                         teacher.embedding_dim(), init_rng, 0.02);
    std::map<std::string, nn::Dense> heads;
    for (const auto& task : cfg.supervised_tasks)
        heads.emplace(task, nn::Dense(aux, "head." + task, student->embedding_dim(),
                                      task_classes(task).size(), init_rng, 0.02));

    std::vector<ag::Var> opt_params = nn::AdamW::vars_of(student->params());
    for (auto& [_, p] : aux.params) opt_params.push_back(p);
    nn::AdamW opt(opt_params, cfg.learning_rate);

    Stage2Result result;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(seed, 0x52000 + step));
        opt.zero_grad();

        std::vector<ag::Var> emb_high, emb_low, proj_high, teach_emb;
        std::map<std::string, std::vector<int>> task_labels;
        for (const auto& task : cfg.supervised_tasks) task_labels[task] = {};
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const ImageRecord& rec = *train[rand_index(rng, train.size())];
            const Image view = augment({.pixels = rec.pixels}, rng()).pixels;
            const Image high = resize(view, cfg.high_side);
            // a ViT student has a fixed input side, so its low-resolution view
            // is degraded by a down-then-up resample instead of fed smaller
            const Image low = cfg.no_cnn
                                  ? resize(resize(view, cfg.low_side), cfg.high_side)
                                  : resize(view, cfg.low_side);

            ag::Var eh = student->forward(image_to_var(high)).embedding;
            emb_high.push_back(eh);
            emb_low.push_back(student->forward(image_to_var(low)).embedding);
            if (cfg.effective_w_distill() > 0.0) {
                proj_high.push_back(projection(eh));
                const Image tview = resize(view, teacher.cfg.image_side);
                teach_emb.push_back(
                    ag::detach(ag::row(teacher.forward_tokens(image_to_var(tview)), 0)));
            }
            for (const auto& task : cfg.supervised_tasks)
                task_labels[task].push_back(rec.label(task).value_or(-1));
        }

        ag::Var total = ag::constant(ag::Tensor({1}, {0.0}));
        double distill_val = 0, sup_val = 0, con_val = 0;
        if (cfg.effective_w_distill() > 0.0) {
            ag::Var d = ag::mse(ag::stack_rows(proj_high), ag::stack_rows(teach_emb));
            distill_val = d->val[0];
            total = ag::add(total, ag::scale(d, cfg.effective_w_distill()));
        }
        if (cfg.effective_w_sup() > 0.0) {
            std::vector<std::pair<ag::Var, std::vector<int>>> per_task;
            ag::Var stacked = ag::stack_rows(emb_high);
            for (const auto& task : cfg.supervised_tasks)
                per_task.emplace_back(heads.at(task)(stacked), task_labels[task]);
            ag::Var s = supervised_loss(per_task);
            sup_val = s->val[0];
            total = ag::add(total, ag::scale(s, cfg.effective_w_sup()));
        }
        if (cfg.w_con > 0.0) {
            ag::Var c = contrastive_loss(ag::stack_rows(emb_high), ag::stack_rows(emb_low),
                                         cfg.temperature);
            con_val = c->val[0];
            total = ag::add(total, ag::scale(c, cfg.w_con));
        }
        ag::backward(total);
        opt.step();
        result.curve.push_back({step, {distill_val, sup_val, con_val, total->val[0]}});
    }
    result.student = std::move(student);
    return result;
}

}  // namespace mammolab
