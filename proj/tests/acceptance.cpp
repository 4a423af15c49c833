// Acceptance gate: one PASS/FAIL line per criterion, exit 0 only if all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mammolab/harness.hpp"

using namespace mammolab;
namespace fs = std::filesystem;

namespace {

bool all_ok = true;

double now_seconds() {
    using clock = std::chrono::steady_clock;
    static const auto t0 = clock::now();
    return std::chrono::duration<double>(clock::now() - t0).count();
}

void report(const char* name, bool ok, double seconds) {
    std::printf("%s %s (%.2f s)\n", ok ? "PASS" : "FAIL", name, seconds);
    std::fflush(stdout);
    all_ok = all_ok && ok;
}

template <typename F>
void criterion(const char* name, double budget_seconds, F body) {
    const double start = now_seconds();
    bool ok = false;
    try {
        ok = body();
    } catch (const std::exception& e) {
        std::printf("  exception: %s\n", e.what());
        ok = false;
    }
    const double elapsed = now_seconds() - start;
    if (elapsed > budget_seconds) {
        std::printf("  over budget: %.2f s > %.0f s\n", elapsed, budget_seconds);
        ok = false;
    }
    report(name, ok, elapsed);
}

ag::Var rows(std::vector<std::vector<double>> data) {
    const std::size_t r = data.size(), c = data[0].size();
    ag::Tensor t({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) t[i * c + j] = data[i][j];
    return ag::constant(std::move(t));
}

// ------------------------------------------------------- statistics fidelity

bool statistics_fidelity() {
    bool ok = true;
    ok &= std::abs(nemenyi_cd(7, 92) - 0.9393) <= 0.0005;
    ok &= std::abs(nemenyi_cd(7, 68) - 1.0925) <= 0.0005;

    Rng rng(11);
    for (int trial = 0; trial < 1000 && ok; ++trial) {
        const std::size_t k = 2 + rand_index(rng, 7), n = 1 + rand_index(rng, 10);
        std::vector<std::vector<double>> values(k, std::vector<double>(n));
        for (auto& row : values)
            for (auto& v : row) v = double(rng() % 8) / 8.0;  // forces ties
        auto ranks = rank_models(values, std::vector<char>(n, 1));
        for (std::size_t t = 0; t < n; ++t) {
            double s = 0;
            for (std::size_t m = 0; m < k; ++m) s += ranks[m][t];
            ok &= std::abs(s - double(k * (k + 1)) / 2.0) < 1e-9;
        }
    }
    return ok;
}

// ------------------------------------------------------------ metric oracles

double brute_force_auc(const std::vector<double>& scores, const std::vector<char>& labels) {
    double wins = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (!labels[i] || labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    return wins / double(pairs);
}

bool metric_oracles() {
    bool ok = true;
    Rng rng(22);
    for (int trial = 0; trial < 200 && ok; ++trial) {
        const std::size_t n = 10 + rand_index(rng, 191);
        std::vector<double> scores(n);
        std::vector<char> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = double(rng() % 20) / 19.0;  // quantized so ties occur
            labels[i] = char(rng() % 2);
        }
        labels[0] = 0;
        labels[1] = 1;
        ok &= auc_binary(scores, labels) == brute_force_auc(scores, labels);
    }

    for (int trial = 0; trial < 1000 && ok; ++trial) {
        Image pred(16, 16), truth(16, 16);
        for (auto& p : pred.px) p = (rng() % 4 == 0) ? 255 : 0;
        for (auto& p : truth.px) p = (rng() % 4 == 0) ? 255 : 0;
        auto di = dice_and_iou(pred, truth);
        ok &= std::abs(di.dice - 2.0 * di.iou / (1.0 + di.iou)) < 1e-12;
    }

    // confusion [[8,2],[3,7]] by hand: recalls 0.8 and 0.7
    std::vector<int> truth, pred;
    auto push = [&](int t, int p, int n) {
        for (int i = 0; i < n; ++i) {
            truth.push_back(t);
            pred.push_back(p);
        }
    };
    push(0, 0, 8);
    push(0, 1, 2);
    push(1, 0, 3);
    push(1, 1, 7);
    auto cm = make_confusion(truth, pred, 2);
    ok &= balanced_accuracy(cm) == 0.75;
    // f1_0 = 2*(8/11)*0.8 / (8/11 + 0.8) = 12.8/16.8; f1_1 = 9.8/13.3; equal weights
    const double expect_f1 = 0.5 * (12.8 / 16.8) + 0.5 * (9.8 / 13.3);
    ok &= std::abs(weighted_f1(cm) - expect_f1) < 1e-12;
    return ok;
}

// ------------------------------------------------------------------ bootstrap

bool bootstrap() {
    bool ok = true;
    std::vector<double> constant(50, 3.25);
    auto c = bootstrap_ci(constant, mean_of, 1000, 0.05, 7, "m");
    ok &= c.ci_high - c.ci_low == 0.0;

    std::vector<double> values = {1.0, 4.0, 2.5, 8.0, -1.0, 3.0, 3.5, 0.25};
    auto a = bootstrap_ci(values, mean_of, 1000, 0.05, 9, "m");
    auto b = bootstrap_ci(values, mean_of, 1000, 0.05, 9, "m");
    ok &= a.ci_low == b.ci_low && a.ci_high == b.ci_high;

    Rng rng(33);
    for (int trial = 0; trial < 100 && ok; ++trial) {
        std::vector<double> xs(60);
        for (auto& x : xs) x = double(trial) + 2.0 * rand_normal(rng);
        auto r = bootstrap_ci(xs, mean_of, 1000, 0.05, std::uint64_t(trial), "m");
        ok &= r.ci_low <= r.point && r.point <= r.ci_high;
        ok &= std::abs(r.point - mean_of(xs)) < 1e-12;
    }
    return ok;
}

// ---------------------------------------------------- pretraining invariants

TinyViTConfig tiny_vit() {
    return {.image_side = 16, .patch_side = 8, .width = 8, .depth = 1, .heads = 2,
            .mlp_ratio = 2};
}

bool pretraining_invariants() {
    bool ok = true;

    // EMA closed form for constant online parameters
    nn::ParamStore teacher, online;
    Rng rng(44);
    ag::Tensor t0({16}), s({16});
    for (std::size_t i = 0; i < 16; ++i) {
        t0[i] = rand_normal(rng);
        s[i] = rand_normal(rng);
    }
    auto tv = teacher.add("w", t0);
    online.add("w", s);
    const double m = 0.9;
    const int k = 7;
    for (int i = 0; i < k; ++i) ema_update(teacher, online, m);
    const double mk = std::pow(m, k);
    for (std::size_t i = 0; i < 16; ++i)
        ok &= std::abs(tv->val[i] - (mk * t0[i] + (1.0 - mk) * s[i])) < 1e-12;

    // B=2 identical embeddings -> ln 3 at any temperature
    auto same = rows({{0.3, 0.7}, {0.3, 0.7}});
    ok &= std::abs(contrastive_loss(same, same, 0.07)->val[0] - std::log(3.0)) < 1e-9;
    ok &= std::abs(contrastive_loss(same, same, 1.0)->val[0] - std::log(3.0)) < 1e-9;

    // MIM with an empty mask, distillation with matched features
    ag::Tensor target({2, 4});
    auto pred = ag::constant(ag::Tensor({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}));
    ok &= masked_patch_mse(pred, target, {0, 0})->val[0] == 0.0;
    auto feat = rows({{1.0, -2.0, 0.5}});
    ok &= distill_loss(feat, feat)->val[0] == 0.0;

    // no gradient reaches the teacher during stage 2
    Manifest manifest = generate_corpus(8, 2, {}, 3);
    auto split = split_by_patient(manifest, {0.7, 0.1, 0.2}, 0);
    TinyViT vit(tiny_vit(), 1);
    auto before = snapshot_params(vit.params());
    Stage2Config s2;
    s2.steps = 3;
    s2.batch = 2;
    train_stage2(manifest, split, vit, s2, 5);
    auto after = snapshot_params(vit.params());
    ok &= before == after;
    return ok;
}

// ------------------------------------------------------------ gradient checks

template <typename F>
double max_rel_grad_error(std::vector<nn::ParamStore*> stores, F build, int n_coords,
                          double h, std::uint64_t seed) {
    for (auto* s : stores) s->zero_grad();
    ag::backward(build());
    Rng pick(seed);
    double worst = 0;
    for (int k = 0; k < n_coords; ++k) {
        auto& store = *stores[std::size_t(k) % stores.size()];
        auto& p = store.params[rand_index(pick, store.params.size())].second;
        const std::size_t i = rand_index(pick, p->val.size());
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

bool gradient_checks() {
    bool ok = true;
    Rng rng(55);

    // stage 1 total loss on a <=5k-parameter ViT
    {
        TinyViT online(tiny_vit(), 1);
        TinyViT ema(tiny_vit(), 2);
        nn::ParamStore aux;
        Rng init(3);
        nn::Dense decoder(aux, "dec", 8, 64, init, 0.02);
        Image im1(16, 16), im2(16, 16);
        for (auto& p : im1.px) p = std::uint8_t(rng() % 256);
        for (auto& p : im2.px) p = std::uint8_t(rng() % 256);
        std::vector<char> mask = {1, 0, 0, 1};
        auto build = [&] {
            ag::Var mim = ag::add(mim_loss(online, decoder, im1, mask),
                                  mim_loss(online, decoder, im2, mask));
            ag::Var z1 = ag::stack_rows(
                {ag::row(online.forward_tokens(image_to_var(im1)), 0),
                 ag::row(online.forward_tokens(image_to_var(im2)), 0)});
            ag::Var z2 = ag::stack_rows(
                {ag::detach(ag::row(ema.forward_tokens(image_to_var(im1)), 0)),
                 ag::detach(ag::row(ema.forward_tokens(image_to_var(im2)), 0))});
            return ag::add(mim, contrastive_loss(z1, z2, 0.1));
        };
        const double err = max_rel_grad_error({&online.params(), &aux}, build, 20, 1e-6, 5);
        std::printf("  stage1 grad err %.2e\n", err);
        ok &= err < 1e-4;
    }

    // stage 2 total loss with a tiny CNN student
    {
        TinyViT teacher(tiny_vit(), 1);
        TinyCNN student(TinyCNNConfig{.stage_channels = {2, 3, 3, 4}}, 2);
        nn::ParamStore aux;
        Rng init(4);
        nn::Dense projection(aux, "proj", 4, 8, init, 0.02);
        nn::Dense head(aux, "head", 4, 4, init, 0.02);
        Image a(64, 64), b(64, 64);
        for (auto& p : a.px) p = std::uint8_t(rng() % 256);
        for (auto& p : b.px) p = std::uint8_t(rng() % 256);
        const std::vector<int> labels = {1, 2};
        auto build = [&] {
            std::vector<ag::Var> eh, el, ph, te;
            for (const Image* im : {&a, &b}) {
                ag::Var e = student.forward(image_to_var(*im)).embedding;
                eh.push_back(e);
                el.push_back(student.forward(image_to_var(resize(*im, 32))).embedding);
                ph.push_back(projection(e));
                te.push_back(ag::detach(
                    ag::row(teacher.forward_tokens(image_to_var(resize(*im, 16))), 0)));
            }
            ag::Var total = ag::mse(ag::stack_rows(ph), ag::stack_rows(te));
            total = ag::add(total,
                            supervised_loss({{head(ag::stack_rows(eh)), labels}}));
            total = ag::add(total,
                            contrastive_loss(ag::stack_rows(eh), ag::stack_rows(el), 0.1));
            return total;
        };
        const double err = max_rel_grad_error({&student.params(), &aux}, build, 20, 1e-5, 6);
        std::printf("  stage2 grad err %.2e\n", err);
        ok &= err < 1e-4;
    }

    // segmentation BCE + Dice loss
    {
        SegmentationProtocol proto;
        proto.input_side = 32;
        proto.decoder_channels = 4;
        Segmenter seg(proto, {2, 2, 2, 2}, 7);
        const auto sides = pyramid_target_sides(32);
        std::array<ag::Tensor, 4> adapted;
        for (int i = 0; i < 4; ++i) {
            adapted[std::size_t(i)] = ag::Tensor({2, sides[std::size_t(i)], sides[std::size_t(i)]});
            for (std::size_t j = 0; j < adapted[std::size_t(i)].size(); ++j)
                adapted[std::size_t(i)][j] = rand_normal(rng);
        }
        ag::Tensor mask01({32 * 32});
        for (std::size_t j = 0; j < mask01.size(); ++j) mask01[j] = double(rng() % 2);
        auto build = [&] {
            ag::Var logits = ag::reshape(seg.forward_logits(detail::as_vars(adapted)),
                                         {std::size_t(32 * 32)});
            return ag::add(ag::bce_with_logits(logits, mask01),
                           dice_loss(ag::sigmoid(logits), mask01, 1.0));
        };
        const double err = max_rel_grad_error({&seg.params}, build, 20, 1e-5, 8);
        std::printf("  bce+dice grad err %.2e\n", err);
        ok &= err < 1e-4;
    }
    return ok;
}

// -------------------------------------------------------- protocol conformance

bool protocol_conformance() {
    bool ok = true;
    ok &= pyramid_target_sides(224) == std::array<std::size_t, 4>{56, 28, 14, 7};
    ok &= pyramid_target_sides(512) == std::array<std::size_t, 4>{128, 64, 32, 16};

    EncoderOutput out;
    out.embedding = ag::Tensor({4});
    for (int i = 0; i < 4; ++i) out.pyramid[i] = ag::Tensor({2, 16, 16});
    for (std::size_t side : {std::size_t(224), std::size_t(512)}) {
        auto adapted = adapt_pyramid(out, side);
        const auto want = pyramid_target_sides(side);
        for (int i = 0; i < 4; ++i)
            ok &= adapted[i].dim(0) == 2 && adapted[i].dim(1) == want[i] &&
                  adapted[i].dim(2) == want[i];
    }

    Rng rng(66);
    for (int trial = 0; trial < 500 && ok; ++trial) {
        const std::size_t n = 1 + rand_index(rng, 30);
        std::vector<BoundingBox> boxes(n);
        std::vector<double> scores(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double x = rand_uniform(rng, 0, 48), y = rand_uniform(rng, 0, 48);
            boxes[i] = {x, y, x + rand_uniform(rng, 2, 16), y + rand_uniform(rng, 2, 16), 0};
            scores[i] = rand_uniform(rng, 0, 1);
        }
        auto keep = nms(boxes, scores, 0.5);
        for (std::size_t i = 0; i < keep.size(); ++i)
            for (std::size_t j = i + 1; j < keep.size(); ++j) {
                ok &= box_iou(boxes[keep[i]], boxes[keep[j]]) <= 0.5;
                ok &= scores[keep[i]] >= scores[keep[j]];
            }
    }

    // early stopping halts within patience of the best validation step
    const std::vector<double> log = {0.1, 0.3, 0.6, 0.55, 0.5, 0.45, 0.4, 0.35, 0.9};
    EarlyStopper stopper(3);
    std::size_t halted_at = log.size();
    for (std::size_t i = 0; i < log.size(); ++i) {
        stopper.observe(log[i]);
        if (stopper.exhausted()) {
            halted_at = i;
            break;
        }
    }
    ok &= stopper.best == 0.6 && stopper.best_index == 2;
    ok &= halted_at == 5;  // three non-improving scores after the best
    return ok;
}

// ------------------------------------------------------------ end-to-end smoke

double probe_test_bacc(Encoder& encoder, const Manifest& manifest,
                       const SplitAssignment& split) {
    ClassifyProtocol proto;
    auto r = train_probe(encoder, manifest, split, "composition", proto, 0);
    auto ev = eval_probe(encoder, *r.probe, records_in_split(manifest, split, Split::test));
    return balanced_accuracy_present(ev.truth, ev.pred);
}

bool end_to_end_smoke() {
    bool ok = true;
    Manifest manifest = generate_corpus(100, 2, {}, 0);
    auto split = split_by_patient(manifest, {0.7, 0.1, 0.2}, 0);

    Stage1Config s1;
    s1.steps = 600;
    s1.batch = 4;
    Stage1Result stage1 = train_stage1(manifest, split, s1, TinyViTConfig{}, 0);

    Stage2Config s2;
    s2.steps = 600;
    s2.batch = 4;
    Stage2Result stage2 = train_stage2(manifest, split, *stage1.teacher, s2, 0);
    Encoder& full = *stage2.student;
    auto random_init = make_stage2_student(s2, derive_seed(1, 0x52));

    // (a) frozen linear probe beats the random-init encoder by >= 0.15
    const double bacc_full = probe_test_bacc(full, manifest, split);
    const double bacc_rand = probe_test_bacc(*random_init, manifest, split);
    std::printf("  probe bacc full %.3f random %.3f\n", bacc_full, bacc_rand);
    ok &= bacc_full >= bacc_rand + 0.15;

    // (b) detection best-val mean IoU
    DetectionProtocol det;
    det.max_steps = 3000;
    det.validate_every = 250;
    auto dr = train_detector(full, manifest, split, det, 0);
    std::printf("  detection best val iou %.3f\n", dr.best_val_iou);
    ok &= dr.best_val_iou >= 0.5;

    // (c) segmentation best-val DICE
    SegmentationProtocol segp;
    segp.max_steps = 1200;
    segp.validate_every = 100;
    auto sr = train_segmenter(full, manifest, split, segp, 0);
    std::printf("  segmentation best val dice %.3f\n", sr.best_val_dice);
    ok &= sr.best_val_dice >= 0.6;

    // (d) retrieval on a label-clustered fixture
    Rng rng(77);
    std::vector<std::vector<double>> gallery, queries;
    std::vector<int> glabels, qlabels;
    auto sample = [&](int cls) {
        std::vector<double> v(8, 0.0);
        v[std::size_t(cls) * 2] = 4.0;
        for (auto& x : v) x += 0.4 * rand_normal(rng);
        return v;
    };
    for (int cls = 0; cls < 4; ++cls) {
        for (int i = 0; i < 10; ++i) {
            gallery.push_back(sample(cls));
            glabels.push_back(cls);
        }
        for (int i = 0; i < 5; ++i) {
            queries.push_back(sample(cls));
            qlabels.push_back(cls);
        }
    }
    auto idx = fit_index(gallery, glabels);
    const double acc1 = topk_accuracy(idx, queries, qlabels, 1);
    const double acc2 = topk_accuracy(idx, queries, qlabels, 2);
    const double acc3 = topk_accuracy(idx, queries, qlabels, 3);
    std::printf("  retrieval acc@1 %.3f acc@2 %.3f acc@3 %.3f\n", acc1, acc2, acc3);
    ok &= acc1 <= acc2 && acc2 <= acc3 && acc3 >= 0.8;

    // (e) full outranks the random-init ablation in average rank
    RankTable table = build_rank_table({"full", "no_mammogram"}, {"classify:composition"},
                                       {{bacc_full}, {bacc_rand}}, {1}, true);
    ok &= table.avg_rank[0] < table.avg_rank[1];
    return ok;
}

// --------------------------------------------------------------- preprocessing

Image make_image(std::initializer_list<std::initializer_list<int>> data) {
    Image img(data.size(), data.begin()->size());
    std::size_t r = 0;
    for (const auto& row : data) {
        std::size_t c = 0;
        for (int v : row) img.at(r, c++) = std::uint8_t(v);
        ++r;
    }
    return img;
}

bool preprocessing() {
    bool ok = true;
    Image fixture = make_image({{0, 0, 0, 0, 0},
                                {0, 50, 80, 0, 0},
                                {0, 60, 90, 0, 39},
                                {0, 0, 0, 0, 0},
                                {0, 0, 0, 0, 0}});
    ok &= roi_crop(fixture) == make_image({{50, 80}, {60, 90}});

    Rng rng(88);
    for (int trial = 0; trial < 1000 && ok; ++trial) {
        Image img(1 + rand_index(rng, 12), 1 + rand_index(rng, 12));
        for (auto& p : img.px) p = std::uint8_t(rng() % 256);
        Image once = roi_crop(img);
        ok &= roi_crop(once) == once;
    }
    return ok;
}

// ----------------------------------------------------------------- determinism

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

bool determinism() {
    const fs::path root = fs::temp_directory_path() / "mammolab_acceptance_det";
    fs::remove_all(root);
    ExperimentConfig cfg;
    cfg.corpus_patients = 16;
    cfg.corpus_images_per_patient = 1;
    cfg.stage1.steps = 40;
    cfg.stage1.batch = 2;
    cfg.stage2.steps = 40;
    cfg.stage2.batch = 2;
    cfg.classify.max_epochs = 20;
    cfg.bootstrap_replicates = 200;
    cfg.tasks = {"classify:composition"};
    cfg.variants = {"full", "no_mammogram"};
    cfg.out_root = root / "run";
    auto first = run_experiment(cfg);
    bool ok = first.failed.empty();

    const std::vector<fs::path> artifacts = {
        cfg.out_root / "full" / "encoder.bin",
        cfg.out_root / "no_mammogram" / "encoder.bin",
        cfg.out_root / "full" / "classify_composition" / "samples.csv",
        cfg.out_root / "metrics.csv",
        cfg.out_root / "rank_table.csv",
        cfg.out_root / "cd_diagram.csv",
    };
    std::vector<std::string> before;
    for (const auto& p : artifacts) before.push_back(slurp(p));

    auto second = run_experiment(cfg);
    ok &= second.failed.empty();
    for (std::size_t i = 0; i < artifacts.size(); ++i)
        ok &= slurp(artifacts[i]) == before[i];
    fs::remove_all(root);
    return ok;
}

}  // namespace

int main() {
    criterion("statistics_fidelity", 1.0, statistics_fidelity);
    criterion("metric_oracles", 10.0, metric_oracles);
    criterion("bootstrap", 30.0, bootstrap);
    criterion("pretraining_invariants", 10.0, pretraining_invariants);
    criterion("gradient_checks", 60.0, gradient_checks);
    criterion("protocol_conformance", 60.0, protocol_conformance);
    criterion("end_to_end_smoke", 900.0, end_to_end_smoke);
    criterion("preprocessing", 5.0, preprocessing);
    criterion("determinism", 120.0, determinism);
    return all_ok ? 0 : 1;
}
