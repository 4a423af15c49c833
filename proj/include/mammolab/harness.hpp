#pragma once

// Experiment orchestration: corpus -> pretraining -> downstream tasks ->
// statistics, over the five-variant ablation matrix, with CSV reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mammolab/checkpoint.hpp"
#include "mammolab/corpus.hpp"
#include "mammolab/evalstats.hpp"
#include "mammolab/heads.hpp"
#include "mammolab/pretrain.hpp"
#include "mammolab/retrieval.hpp"

namespace mammolab {

// ------------------------------------------------------------ configuration

struct ExperimentConfig {
    std::size_t corpus_patients = 100;
    std::size_t corpus_images_per_patient = 2;
    std::uint64_t corpus_seed = 0;

    TinyViTConfig teacher;
    Stage1Config stage1;
    Stage2Config stage2;

    DetectionProtocol detection;
    SegmentationProtocol segmentation;
    ClassifyProtocol classify;
    VQAProtocol vqa;
    std::size_t retrieval_k = 3;

    std::vector<std::string> tasks = {"classify:composition"};
    std::vector<std::string> variants = {"full", "no_mammogram"};
    std::uint64_t seed = 0;
    std::size_t bootstrap_replicates = 1000;
    std::filesystem::path out_root = "runs/default";

    void validate() const {
        static const std::set<std::string> known = {"full",       "no_mammogram", "no_stage2",
                                                    "no_distill", "no_sup",       "no_cnn"};
        if (variants.empty()) throw BadConfig("no variants requested");
        for (const auto& v : variants)
            if (!known.count(v)) throw BadConfig("unknown variant: " + v);
        if (tasks.empty()) throw BadConfig("no tasks requested");
        for (const auto& t : tasks) {
            if (t == "detect" || t == "segment" || t == "vqa") continue;
            if (t.rfind("classify:", 0) == 0 || t.rfind("retrieve:", 0) == 0) continue;
            throw BadConfig("unknown task: " + t);
        }
        stage1.validate();
        stage2.validate();
        teacher.validate();
    }
};

// Flat dotted key=value config text; '#' starts a comment line.
inline std::map<std::string, std::string> parse_config_text(std::istream& in) {
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (eq == std::string::npos) throw BadConfig("config line missing '=': " + line);
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw BadConfig("config line missing key: " + line);
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace detail

inline void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                               const std::string& value) {
    auto as_u = [&] { return std::stoull(value); };
    auto as_d = [&] { return std::stod(value); };
    auto as_b = [&] {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw BadConfig("bad boolean for " + key + ": " + value);
    };
    if (key == "corpus.patients") cfg.corpus_patients = as_u();
    else if (key == "corpus.images_per_patient") cfg.corpus_images_per_patient = as_u();
    else if (key == "corpus.seed") cfg.corpus_seed = as_u();
    else if (key == "teacher.image_side") cfg.teacher.image_side = as_u();
    else if (key == "teacher.patch_side") cfg.teacher.patch_side = as_u();
    else if (key == "teacher.width") cfg.teacher.width = as_u();
    else if (key == "teacher.depth") cfg.teacher.depth = as_u();
    else if (key == "teacher.heads") cfg.teacher.heads = as_u();
    else if (key == "teacher.mlp_ratio") cfg.teacher.mlp_ratio = as_u();
    else if (key == "stage1.steps") cfg.stage1.steps = as_u();
    else if (key == "stage1.batch") cfg.stage1.batch = as_u();
    else if (key == "stage1.mask_ratio") cfg.stage1.mask_ratio = as_d();
    else if (key == "stage1.ema_momentum") cfg.stage1.ema_momentum = as_d();
    else if (key == "stage1.temperature") cfg.stage1.temperature = as_d();
    else if (key == "stage1.w_mim") cfg.stage1.w_mim = as_d();
    else if (key == "stage1.w_con") cfg.stage1.w_con = as_d();
    else if (key == "stage1.learning_rate") cfg.stage1.learning_rate = as_d();
    else if (key == "stage2.steps") cfg.stage2.steps = as_u();
    else if (key == "stage2.batch") cfg.stage2.batch = as_u();
    else if (key == "stage2.w_distill") cfg.stage2.w_distill = as_d();
    else if (key == "stage2.w_sup") cfg.stage2.w_sup = as_d();
    else if (key == "stage2.w_con") cfg.stage2.w_con = as_d();
    else if (key == "stage2.temperature") cfg.stage2.temperature = as_d();
    else if (key == "stage2.high_side") cfg.stage2.high_side = as_u();
    else if (key == "stage2.low_side") cfg.stage2.low_side = as_u();
    else if (key == "stage2.learning_rate") cfg.stage2.learning_rate = as_d();
    else if (key == "detect.max_steps") cfg.detection.max_steps = as_u();
    else if (key == "detect.validate_every") cfg.detection.validate_every = as_u();
    else if (key == "detect.batch") cfg.detection.batch = as_u();
    else if (key == "detect.learning_rate") cfg.detection.learning_rate = as_d();
    else if (key == "detect.score_threshold") cfg.detection.score_threshold = as_d();
    else if (key == "segment.max_steps") cfg.segmentation.max_steps = as_u();
    else if (key == "segment.validate_every") cfg.segmentation.validate_every = as_u();
    else if (key == "segment.batch") cfg.segmentation.batch = as_u();
    else if (key == "segment.learning_rate") cfg.segmentation.learning_rate = as_d();
    else if (key == "classify.max_epochs") cfg.classify.max_epochs = as_u();
    else if (key == "classify.patience") cfg.classify.patience = as_u();
    else if (key == "classify.batch") cfg.classify.batch = as_u();
    else if (key == "classify.learning_rate") cfg.classify.learning_rate = as_d();
    else if (key == "classify.frozen") cfg.classify.frozen = as_b();
    else if (key == "vqa.max_epochs") cfg.vqa.max_epochs = as_u();
    else if (key == "vqa.patience") cfg.vqa.patience = as_u();
    else if (key == "vqa.learning_rate") cfg.vqa.learning_rate = as_d();
    else if (key == "retrieval.k") cfg.retrieval_k = as_u();
    else if (key == "bootstrap.replicates") cfg.bootstrap_replicates = as_u();
    else if (key == "tasks") cfg.tasks = detail::split_list(value);
    else if (key == "variants") cfg.variants = detail::split_list(value);
    else if (key == "seed") cfg.seed = as_u();
    else if (key == "out") cfg.out_root = value;
    else throw BadConfig("unknown config key: " + key);
}

inline ExperimentConfig config_from_entries(const std::map<std::string, std::string>& kv) {
    ExperimentConfig cfg;
    for (const auto& [k, v] : kv) apply_config_entry(cfg, k, v);
    return cfg;
}

namespace detail {

inline std::string fmt6(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", x);
    return buf;
}

inline std::string fmt9(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9f", x);
    return buf;
}

inline std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ",";
        out += items[i];
    }
    return out;
}

}  // namespace detail

// Effective config serialized back to the flat key=value format.
inline std::map<std::string, std::string> config_to_entries(const ExperimentConfig& c) {
    std::map<std::string, std::string> kv;
    kv["corpus.patients"] = std::to_string(c.corpus_patients);
    kv["corpus.images_per_patient"] = std::to_string(c.corpus_images_per_patient);
    kv["corpus.seed"] = std::to_string(c.corpus_seed);
    kv["teacher.image_side"] = std::to_string(c.teacher.image_side);
    kv["teacher.patch_side"] = std::to_string(c.teacher.patch_side);
    kv["teacher.width"] = std::to_string(c.teacher.width);
    kv["teacher.depth"] = std::to_string(c.teacher.depth);
    kv["teacher.heads"] = std::to_string(c.teacher.heads);
    kv["teacher.mlp_ratio"] = std::to_string(c.teacher.mlp_ratio);
    kv["stage1.steps"] = std::to_string(c.stage1.steps);
    kv["stage1.batch"] = std::to_string(c.stage1.batch);
    kv["stage1.mask_ratio"] = detail::fmt6(c.stage1.mask_ratio);
    kv["stage1.ema_momentum"] = detail::fmt6(c.stage1.ema_momentum);
    kv["stage1.temperature"] = detail::fmt6(c.stage1.temperature);
    kv["stage1.w_mim"] = detail::fmt6(c.stage1.w_mim);
    kv["stage1.w_con"] = detail::fmt6(c.stage1.w_con);
    kv["stage1.learning_rate"] = detail::fmt6(c.stage1.learning_rate);
    kv["stage2.steps"] = std::to_string(c.stage2.steps);
    kv["stage2.batch"] = std::to_string(c.stage2.batch);
    kv["stage2.w_distill"] = detail::fmt6(c.stage2.w_distill);
    kv["stage2.w_sup"] = detail::fmt6(c.stage2.w_sup);
    kv["stage2.w_con"] = detail::fmt6(c.stage2.w_con);
    kv["stage2.temperature"] = detail::fmt6(c.stage2.temperature);
    kv["stage2.high_side"] = std::to_string(c.stage2.high_side);
    kv["stage2.low_side"] = std::to_string(c.stage2.low_side);
    kv["stage2.learning_rate"] = detail::fmt6(c.stage2.learning_rate);
    kv["detect.max_steps"] = std::to_string(c.detection.max_steps);
    kv["detect.validate_every"] = std::to_string(c.detection.validate_every);
    kv["detect.batch"] = std::to_string(c.detection.batch);
    kv["detect.learning_rate"] = detail::fmt6(c.detection.learning_rate);
    kv["detect.score_threshold"] = detail::fmt6(c.detection.score_threshold);
    kv["segment.max_steps"] = std::to_string(c.segmentation.max_steps);
    kv["segment.validate_every"] = std::to_string(c.segmentation.validate_every);
    kv["segment.batch"] = std::to_string(c.segmentation.batch);
    kv["segment.learning_rate"] = detail::fmt6(c.segmentation.learning_rate);
    kv["classify.max_epochs"] = std::to_string(c.classify.max_epochs);
    kv["classify.patience"] = std::to_string(c.classify.patience);
    kv["classify.batch"] = std::to_string(c.classify.batch);
    kv["classify.learning_rate"] = detail::fmt6(c.classify.learning_rate);
    kv["classify.frozen"] = c.classify.frozen ? "true" : "false";
    kv["vqa.max_epochs"] = std::to_string(c.vqa.max_epochs);
    kv["vqa.patience"] = std::to_string(c.vqa.patience);
    kv["vqa.learning_rate"] = detail::fmt6(c.vqa.learning_rate);
    kv["retrieval.k"] = std::to_string(c.retrieval_k);
    kv["bootstrap.replicates"] = std::to_string(c.bootstrap_replicates);
    kv["tasks"] = detail::join(c.tasks);
    kv["variants"] = detail::join(c.variants);
    kv["seed"] = std::to_string(c.seed);
    kv["out"] = c.out_root.string();
    return kv;
}

// ----------------------------------------------------- variant realization

// Ablation table realizations: no_mammogram skips both stages (random init),
// no_stage2 uses the Stage 1 teacher directly, no_distill and no_sup zero
// the respective Stage 2 weights, no_cnn swaps in a ViT student.
inline std::unique_ptr<Encoder> build_variant_encoder(
    const std::string& variant, const Manifest& manifest, const SplitAssignment& split,
    const ExperimentConfig& cfg, const std::filesystem::path& variant_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(variant_dir);
    if (variant == "no_mammogram")
        return make_stage2_student(cfg.stage2, derive_seed(cfg.seed, 0x52));

    Stage1Result s1 = train_stage1(manifest, split, cfg.stage1, cfg.teacher, cfg.seed);
    write_curve(variant_dir / "stage1_curve.csv", {"mim", "con", "total"}, s1.curve);
    if (variant == "no_stage2") return std::move(s1.teacher);

    Stage2Config s2cfg = cfg.stage2;
    if (variant == "no_distill") s2cfg.no_distill = true;
    if (variant == "no_sup") s2cfg.no_sup = true;
    if (variant == "no_cnn") s2cfg.no_cnn = true;
    Stage2Result s2 = train_stage2(manifest, split, *s1.teacher, s2cfg, cfg.seed);
    write_curve(variant_dir / "stage2_curve.csv", {"distill", "sup", "con", "total"}, s2.curve);
    return std::move(s2.student);
}

// ------------------------------------------------------------- task running

namespace detail {

// Per-sample task output rows; "value" rows for scalar-per-image tasks,
// "pred" rows (truth, pred, scores...) for classification-style tasks.
struct TaskSamples {
    std::string kind;  // "value" or "pred"
    std::vector<double> values;
    std::vector<int> truth, pred;
    std::vector<std::vector<double>> scores;
};

inline void write_samples(const TaskSamples& s, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << s.kind << "\n";
    if (s.kind == "value") {
        for (double v : s.values) out << fmt9(v) << "\n";
    } else {
        for (std::size_t i = 0; i < s.truth.size(); ++i) {
            out << s.truth[i] << "," << s.pred[i];
            for (double sc : s.scores[i]) out << "," << fmt9(sc);
            out << "\n";
        }
    }
}

inline TaskSamples read_samples(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    TaskSamples s;
    std::getline(in, s.kind);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (s.kind == "value") {
            s.values.push_back(std::stod(line));
        } else {
            auto parts = split_list(line);
            s.truth.push_back(std::stoi(parts[0]));
            s.pred.push_back(std::stoi(parts[1]));
            std::vector<double> sc;
            for (std::size_t i = 2; i < parts.size(); ++i) sc.push_back(std::stod(parts[i]));
            s.scores.push_back(std::move(sc));
        }
    }
    return s;
}

inline std::string task_slug(const std::string& task) {
    std::string slug = task;
    for (auto& c : slug)
        if (c == ':') c = '_';
    return slug;
}

inline TaskSamples run_task(Encoder& encoder, const std::string& task, const Manifest& manifest,
                            const SplitAssignment& split, const ExperimentConfig& cfg,
                            const std::filesystem::path& task_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(task_dir);
    auto test = records_in_split(manifest, split, Split::test);
    auto train = records_in_split(manifest, split, Split::train);
    TaskSamples s;

    auto write_log = [&](const std::vector<TrainLogEntry>& log) {
        std::ofstream out(task_dir / "train_log.csv", std::ios::binary);
        out << "step,train_loss,val_score\n";
        for (const auto& e : log) {
            out << e.step << "," << fmt6(e.train_loss) << ","
                << (std::isnan(e.val_score) ? std::string("") : fmt6(e.val_score)) << "\n";
        }
    };

    if (task == "detect") {
        auto r = train_detector(encoder, manifest, split, cfg.detection, cfg.seed);
        write_log(r.log);
        save_params(r.detector->params, task_dir / "head.bin");
        s.kind = "value";
        s.values = eval_detection(encoder, *r.detector, test);
    } else if (task == "segment") {
        auto r = train_segmenter(encoder, manifest, split, cfg.segmentation, cfg.seed);
        write_log(r.log);
        save_params(r.segmenter->params, task_dir / "head.bin");
        s.kind = "value";
        s.values = eval_segmentation(encoder, *r.segmenter, test);
    } else if (task == "vqa") {
        auto r = train_vqa(encoder, manifest, split, cfg.vqa, cfg.seed);
        write_log(r.log);
        save_params(r.head->params, task_dir / "head.bin");
        auto ev = eval_vqa(encoder, *r.head, test);
        s.kind = "pred";
        s.truth = ev.truth;
        s.pred = ev.pred;
        s.scores.assign(s.truth.size(), {});
    } else if (task.rfind("classify:", 0) == 0) {
        const std::string label_task = task.substr(9);
        auto r = train_probe(encoder, manifest, split, label_task, cfg.classify, cfg.seed);
        write_log(r.log);
        save_params(r.probe->params, task_dir / "head.bin");
        auto ev = eval_probe(encoder, *r.probe, test);
        s.kind = "pred";
        s.truth = ev.truth;
        s.pred = ev.pred;
        s.scores = ev.scores;
    } else if (task.rfind("retrieve:", 0) == 0) {
        const std::string label_task = task.substr(9);
        std::vector<std::vector<double>> gallery, queries;
        std::vector<int> glabels, qlabels;
        for (const auto* r : train)
            if (auto l = r->label(label_task)) {
                gallery.push_back(
                    encoder.encode(resize(r->pixels, cfg.classify.input_side)).embedding.v);
                glabels.push_back(*l);
            }
        for (const auto* r : test)
            if (auto l = r->label(label_task)) {
                queries.push_back(
                    encoder.encode(resize(r->pixels, cfg.classify.input_side)).embedding.v);
                qlabels.push_back(*l);
            }
        if (gallery.empty()) throw EmptyGallery();
        auto idx = fit_index(gallery, glabels);
        s.kind = "value";
        s.values = topk_hits(idx, queries, qlabels, std::min(cfg.retrieval_k, idx.size()));
    } else {
        throw BadConfig("unknown task: " + task);
    }
    write_samples(s, task_dir / "samples.csv");
    return s;
}

// Paired bootstrap over sample indices, same generator contract as
// bootstrap_ci.
inline MetricResult bootstrap_indexed(
    std::size_t n, const std::function<double(const std::vector<std::size_t>&)>& statistic,
    std::size_t n_replicates, std::uint64_t seed, const std::string& name) {
    if (n == 0) throw EmptySample();
    std::vector<std::size_t> identity(n);
    std::iota(identity.begin(), identity.end(), 0);
    std::vector<double> reps(n_replicates);
    std::vector<std::size_t> idx(n);
    for (std::size_t b = 0; b < n_replicates; ++b) {
        Rng rng(derive_seed(seed, b));
        for (auto& i : idx) i = rand_index(rng, n);
        reps[b] = statistic(idx);
    }
    MetricResult out;
    out.metric = name;
    out.point = statistic(identity);
    out.ci_low = quantile(reps, 0.025);
    out.ci_high = quantile(reps, 0.975);
    out.n_replicates = n_replicates;
    return out;
}

inline std::vector<MetricResult> task_metrics(const std::string& task, const TaskSamples& s,
                                              std::size_t n_replicates, std::uint64_t seed) {
    std::vector<MetricResult> out;
    if (s.kind == "value") {
        const std::string name = task == "detect"    ? "iou"
                                 : task == "segment" ? "dice"
                                                     : "acc_at_k";
        out.push_back(bootstrap_ci(s.values, mean_of, n_replicates, 0.05, seed, name));
        return out;
    }
    const std::size_t n = s.truth.size();
    out.push_back(detail::bootstrap_indexed(
        n,
        [&](const std::vector<std::size_t>& idx) {
            std::vector<int> t, p;
            for (std::size_t i : idx) {
                t.push_back(s.truth[i]);
                p.push_back(s.pred[i]);
            }
            return balanced_accuracy_present(t, p);
        },
        n_replicates, seed, "balanced_acc"));
    if (!s.scores.empty() && !s.scores[0].empty()) {
        const std::size_t n_classes = s.scores[0].size();
        out.push_back(detail::bootstrap_indexed(
            n,
            [&](const std::vector<std::size_t>& idx) {
                std::vector<int> t, p;
                for (std::size_t i : idx) {
                    t.push_back(s.truth[i]);
                    p.push_back(s.pred[i]);
                }
                return weighted_f1(make_confusion(t, p, n_classes));
            },
            n_replicates, seed, "weighted_f1"));
        out.push_back(detail::bootstrap_indexed(
            n,
            [&](const std::vector<std::size_t>& idx) {
                std::vector<std::vector<double>> sc;
                std::vector<int> t;
                for (std::size_t i : idx) {
                    sc.push_back(s.scores[i]);
                    t.push_back(s.truth[i]);
                }
                try {
                    return auc_multiclass(sc, t);
                } catch (const DegenerateLabels&) {
                    return 0.5;  // resample collapsed to one class
                }
            },
            n_replicates, seed, "auc"));
    }
    return out;
}

inline std::string primary_metric(const std::string& task) {
    if (task == "detect") return "iou";
    if (task == "segment") return "dice";
    if (task.rfind("retrieve:", 0) == 0) return "acc_at_k";
    return "balanced_acc";
}

}  // namespace detail

// ------------------------------------------------------------------ report

struct ExperimentResult {
    std::filesystem::path root;
    std::vector<std::string> completed;
    std::map<std::string, std::string> failed;  // variant -> error
};

inline void write_rank_table_csv(const RankTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "variant";
    for (const auto& t : table.tasks) out << "," << t;
    out << ",avg_rank\n";
    for (std::size_t m = 0; m < table.models.size(); ++m) {
        out << table.models[m];
        for (std::size_t t = 0; t < table.tasks.size(); ++t)
            out << "," << detail::fmt6(table.ranks[m][t]);
        out << "," << detail::fmt6(table.avg_rank[m]) << "\n";
    }
    out << "cd," << detail::fmt6(table.cd) << "\n";
    for (const auto& [a, b] : table.significant_pairs)
        out << "significant," << table.models[a] << "," << table.models[b] << "\n";
}

// Models sorted by average rank with greedy grouping of models whose ranks
// sit within one critical difference of the group leader.
inline void write_cd_diagram_csv(const RankTable& table, const std::filesystem::path& path) {
    std::vector<std::size_t> order(table.models.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (table.avg_rank[a] != table.avg_rank[b]) return table.avg_rank[a] < table.avg_rank[b];
        return table.models[a] < table.models[b];
    });
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "model,avg_rank,group_id\n";
    std::size_t group = 0;
    double group_leader = table.avg_rank[order.empty() ? 0 : order[0]];
    for (std::size_t i = 0; i < order.size(); ++i) {
        const double r = table.avg_rank[order[i]];
        if (table.cd > 0 && r - group_leader > table.cd) {
            ++group;
            group_leader = r;
        }
        out << table.models[order[i]] << "," << detail::fmt6(r) << "," << group << "\n";
    }
}

inline void emit_report(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::ifstream cfg_in(root / "config.txt");
    if (!cfg_in) throw IoError("no config echo at " + (root / "config.txt").string());
    auto kv = parse_config_text(cfg_in);
    ExperimentConfig cfg = config_from_entries(kv);

    // discover completed variants in config order
    std::vector<std::string> completed;
    for (const auto& v : cfg.variants) {
        std::ifstream st(root / v / "status.txt");
        std::string status;
        if (st && std::getline(st, status) && status == "completed") completed.push_back(v);
    }
    if (completed.empty()) throw NoCompletedVariants();

    // metrics table
    std::ofstream metrics(root / "metrics.csv", std::ios::binary);
    metrics << "variant,task,metric,point,ci_low,ci_high,n_replicates\n";
    std::vector<std::vector<double>> rank_values(completed.size());
    for (std::size_t vi = 0; vi < completed.size(); ++vi) {
        for (const auto& task : cfg.tasks) {
            auto samples = detail::read_samples(root / completed[vi] /
                                                detail::task_slug(task) / "samples.csv");
            auto results =
                detail::task_metrics(task, samples, cfg.bootstrap_replicates, cfg.seed);
            for (const auto& m : results)
                metrics << completed[vi] << "," << task << "," << m.metric << ","
                        << detail::fmt6(m.point) << "," << detail::fmt6(m.ci_low) << ","
                        << detail::fmt6(m.ci_high) << "," << m.n_replicates << "\n";
            const std::string primary = detail::primary_metric(task);
            for (const auto& m : results)
                if (m.metric == primary) rank_values[vi].push_back(m.point);
        }
    }
    metrics.close();

    // rank table over primary metrics (all higher-is-better)
    RankTable table = build_rank_table(completed, cfg.tasks, rank_values,
                                       std::vector<char>(cfg.tasks.size(), 1),
                                       completed.size() >= 2 && completed.size() <= 10);
    write_rank_table_csv(table, root / "rank_table.csv");
    write_cd_diagram_csv(table, root / "cd_diagram.csv");
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    cfg.validate();
    fs::create_directories(cfg.out_root);
    {
        std::ofstream echo(cfg.out_root / "config.txt", std::ios::binary);
        for (const auto& [k, v] : config_to_entries(cfg)) echo << k << "=" << v << "\n";
        std::ofstream ver(cfg.out_root / "versions.txt", std::ios::binary);
        ver << "mammolab=1\ncheckpoint_format=1\n";
    }

    Manifest manifest = generate_corpus(cfg.corpus_patients, cfg.corpus_images_per_patient, {},
                                        cfg.corpus_seed);
    auto split = split_by_patient(manifest, {0.7, 0.1, 0.2}, cfg.seed);

    ExperimentResult result;
    result.root = cfg.out_root;
    for (const auto& variant : cfg.variants) {
        const fs::path vdir = cfg.out_root / variant;
        try {
            auto encoder = build_variant_encoder(variant, manifest, split, cfg, vdir);
            save_checkpoint(*encoder, vdir / "encoder.bin");
            for (const auto& task : cfg.tasks)
                detail::run_task(*encoder, task, manifest, split, cfg,
                                 vdir / detail::task_slug(task));
            std::ofstream(vdir / "status.txt", std::ios::binary) << "completed\n";
            result.completed.push_back(variant);
        } catch (const std::exception& e) {
            fs::create_directories(vdir);
            std::ofstream(vdir / "status.txt", std::ios::binary)
                << "failed\n" << e.what() << "\n";
            result.failed[variant] = e.what();
        }
    }
    if (!result.completed.empty()) emit_report(cfg.out_root);
    return result;
}

}  // namespace mammolab
