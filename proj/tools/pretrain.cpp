#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mammolab/checkpoint.hpp"
#include "mammolab/harness.hpp"

namespace fs = std::filesystem;
using namespace mammolab;

namespace {

ExperimentConfig load_config(const std::string& path) {
    ExperimentConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    for (const auto& [k, v] : parse_config_text(in)) apply_config_entry(cfg, k, v);
    return cfg;
}

fs::path curve_path(const fs::path& ckpt) {
    return ckpt.parent_path() / (ckpt.stem().string() + "_curve.csv");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-stage hybrid pretraining"};
    app.require_subcommand(1);

    std::string config_path, corpus_dir, out_ckpt, teacher_ckpt;
    std::uint64_t seed = 0;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "flat key=value config file");
        sub->add_option("--corpus", corpus_dir, "corpus directory")->required();
        sub->add_option("--out", out_ckpt, "output checkpoint path")->required();
        sub->add_option("--seed", seed, "training seed");
    };
    auto* stage1 = app.add_subcommand("stage1", "self-supervised teacher (MIM + contrastive)");
    add_common(stage1);
    auto* stage2 = app.add_subcommand("stage2", "supervised student distillation");
    add_common(stage2);
    stage2->add_option("--teacher", teacher_ckpt, "stage 1 teacher checkpoint")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = load_config(config_path);
        Manifest manifest = load_manifest(fs::path(corpus_dir) / "manifest.jsonl");
        auto split = split_by_patient(manifest, {0.7, 0.1, 0.2}, seed);
        fs::create_directories(fs::path(out_ckpt).parent_path().empty()
                                   ? fs::path(".")
                                   : fs::path(out_ckpt).parent_path());
        if (app.got_subcommand(stage1)) {
            Stage1Result r = train_stage1(manifest, split, cfg.stage1, cfg.teacher, seed);
            save_checkpoint(*r.teacher, out_ckpt);
            write_curve(curve_path(out_ckpt), {"mim", "con", "total"}, r.curve);
        } else {
            auto encoder = load_checkpoint(teacher_ckpt, "tinyvit");
            auto* teacher = dynamic_cast<TinyViT*>(encoder.get());
            if (!teacher) throw TeacherLoadFailure(teacher_ckpt);
            Stage2Result r = train_stage2(manifest, split, *teacher, cfg.stage2, seed);
            save_checkpoint(*r.student, out_ckpt);
            write_curve(curve_path(out_ckpt), {"distill", "sup", "con", "total"}, r.curve);
        }
        std::cout << "checkpoint written to " << out_ckpt << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
