#pragma once

// Data model shared by every task: image records, task label schemas,
// line-delimited manifest i/o, and patient-level train/val/test splitting.

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mammolab/common.hpp"
#include "mammolab/image.hpp"

namespace mammolab {

// ------------------------------------------------------------ task schemas

// Ordered class lists per classification task. Class counts follow the
// benchmark's label vocabularies, scaled to the phantom corpus.
inline const std::map<std::string, std::vector<std::string>>& task_schemas() {
    static const std::map<std::string, std::vector<std::string>> schemas = {
        {"composition", {"A", "B", "C", "D"}},
        {"masking", {"M1", "M2", "M3", "M4", "M5", "M6", "M7", "M8"}},
        {"finding", {"No finding", "Mass", "Calcification"}},
        {"birads", {"0", "1", "2", "3", "4", "5"}},
        {"birads4", {"4A", "4B", "4C"}},
        {"pathology", {"benign", "malignant"}},
        {"mastitis", {"no", "yes"}},
        {"invasive", {"no", "yes"}},
        {"subtype", {"LuminalA", "LuminalB", "HER2", "TripleNegative"}},
        {"view", {"CC", "MLO"}},
        {"laterality", {"L", "R"}},
    };
    return schemas;
}

inline const std::vector<std::string>& task_classes(const std::string& task) {
    const auto& schemas = task_schemas();
    auto it = schemas.find(task);
    if (it == schemas.end()) throw UnknownTask("unknown task: " + task);
    return it->second;
}

// VQA question topics; answers index into the named task's class list.
inline const std::vector<std::string>& vqa_question_types() {
    static const std::vector<std::string> types = {
        "view", "laterality", "composition", "masking",
        "abnormality", "subtlety", "birads", "pathology"};
    return types;
}

inline const std::vector<std::string>& vqa_answer_classes(const std::string& qtype) {
    if (qtype == "abnormality") return task_classes("finding");
    if (qtype == "subtlety") {
        static const std::vector<std::string> subtlety = {"S1", "S2", "S3", "S4", "S5"};
        return subtlety;
    }
    const auto& types = vqa_question_types();
    if (std::find(types.begin(), types.end(), qtype) == types.end())
        throw UnknownTask("unknown question type: " + qtype);
    return task_classes(qtype);
}

// ------------------------------------------------------------ record types

struct BoundingBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    int class_id = 0;

    bool operator==(const BoundingBox&) const = default;
    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
};

inline double box_iou(const BoundingBox& a, const BoundingBox& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

struct QAPair {
    std::string question_type;
    int answer_id = 0;

    bool operator==(const QAPair&) const = default;
};

struct ImageRecord {
    std::string patient_id;
    std::string image_id;
    std::string image_path;  // relative to manifest directory
    Image pixels;
    std::map<std::string, int> labels;  // task name -> class id
    std::vector<BoundingBox> boxes;
    std::string mask_path;
    std::optional<Image> mask;  // binary 0/1, same shape as pixels
    std::vector<QAPair> qa;

    std::optional<int> label(const std::string& task) const {
        auto it = labels.find(task);
        if (it == labels.end()) return std::nullopt;
        return it->second;
    }
};

inline void validate_record(const ImageRecord& rec) {
    if (rec.pixels.empty()) throw MalformedRecord("empty pixel array: " + rec.image_id);
    if (rec.mask && (rec.mask->rows != rec.pixels.rows || rec.mask->cols != rec.pixels.cols))
        throw MalformedRecord("mask shape differs from pixels: " + rec.image_id);
    for (const auto& b : rec.boxes) {
        if (!(b.x1 < b.x2 && b.y1 < b.y2) || b.x1 < 0 || b.y1 < 0 ||
            b.x2 > double(rec.pixels.cols) || b.y2 > double(rec.pixels.rows))
            throw MalformedRecord("box out of bounds: " + rec.image_id);
    }
    for (const auto& [task, label] : rec.labels) {
        const auto& classes = task_classes(task);
        if (label < 0 || label >= int(classes.size()))
            throw LabelOutOfRange("label " + std::to_string(label) + " out of range for task " +
                                  task);
    }
    for (const auto& qa : rec.qa) {
        const auto& answers = vqa_answer_classes(qa.question_type);
        if (qa.answer_id < 0 || qa.answer_id >= int(answers.size()))
            throw LabelOutOfRange("answer " + std::to_string(qa.answer_id) +
                                  " out of range for question " + qa.question_type);
    }
}

struct Manifest {
    std::filesystem::path root;  // directory image paths are relative to
    std::vector<ImageRecord> records;

    std::size_t size() const { return records.size(); }

    std::vector<std::string> patient_ids() const {
        std::set<std::string> seen;
        std::vector<std::string> ids;
        for (const auto& r : records)
            if (seen.insert(r.patient_id).second) ids.push_back(r.patient_id);
        std::sort(ids.begin(), ids.end());
        return ids;
    }
};

// ------------------------------------------------------------ manifest i/o

inline nlohmann::json record_to_json(const ImageRecord& rec) {
    nlohmann::json j;
    j["patient_id"] = rec.patient_id;
    j["image_id"] = rec.image_id;
    j["image_path"] = rec.image_path;
    for (const auto& [task, label] : rec.labels) j["label." + task] = label;
    if (!rec.boxes.empty()) {
        auto arr = nlohmann::json::array();
        for (const auto& b : rec.boxes)
            arr.push_back({b.x1, b.y1, b.x2, b.y2, b.class_id});
        j["boxes"] = arr;
    }
    if (!rec.mask_path.empty()) j["mask_path"] = rec.mask_path;
    if (!rec.qa.empty()) {
        auto arr = nlohmann::json::array();
        for (const auto& qa : rec.qa) arr.push_back({qa.question_type, qa.answer_id});
        j["qa"] = arr;
    }
    return j;
}

inline void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const auto& rec : manifest.records) out << record_to_json(rec).dump() << "\n";
}

inline Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    Manifest manifest;
    manifest.root = path.parent_path();
    std::set<std::string> image_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw MalformedRecord("line " + std::to_string(line_no) + ": " + e.what());
        }
        ImageRecord rec;
        try {
            rec.patient_id = j.at("patient_id").get<std::string>();
            rec.image_id = j.at("image_id").get<std::string>();
            rec.image_path = j.at("image_path").get<std::string>();
            for (const auto& [key, value] : j.items()) {
                if (key.rfind("label.", 0) == 0)
                    rec.labels[key.substr(6)] = value.get<int>();
            }
            if (j.contains("boxes")) {
                for (const auto& b : j["boxes"]) {
                    BoundingBox box{b.at(0).get<double>(), b.at(1).get<double>(),
                                    b.at(2).get<double>(), b.at(3).get<double>(),
                                    b.size() > 4 ? b.at(4).get<int>() : 0};
                    rec.boxes.push_back(box);
                }
            }
            if (j.contains("mask_path")) rec.mask_path = j["mask_path"].get<std::string>();
            if (j.contains("qa")) {
                for (const auto& q : j["qa"])
                    rec.qa.push_back({q.at(0).get<std::string>(), q.at(1).get<int>()});
            }
        } catch (const nlohmann::json::exception& e) {
            throw MalformedRecord("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!image_ids.insert(rec.image_id).second)
            throw DuplicateImageId("duplicate image_id: " + rec.image_id);
        rec.pixels = load_image(manifest.root / rec.image_path);
        if (!rec.mask_path.empty()) {
            Image m = load_image(manifest.root / rec.mask_path);
            for (auto& p : m.px) p = p != 0 ? 1 : 0;
            rec.mask = std::move(m);
        }
        validate_record(rec);
        manifest.records.push_back(std::move(rec));
    }
    return manifest;
}

// --------------------------------------------------------------- splitting

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

using SplitAssignment = std::map<std::string, Split>;

// Patient-level 7:1:2 split. Quotas by largest-remainder rounding on the
// patient count; assignment order by seeded shuffle of the sorted ids.
inline SplitAssignment split_by_patient(const Manifest& manifest,
                                        const std::array<double, 3>& ratios,
                                        std::uint64_t seed) {
    std::vector<std::string> patients = manifest.patient_ids();
    if (patients.empty()) throw EmptyManifest();

    Rng rng(seed);
    for (std::size_t i = patients.size(); i > 1; --i)
        std::swap(patients[i - 1], patients[rand_index(rng, i)]);

    const std::size_t n = patients.size();
    std::array<std::size_t, 3> quota{};
    std::array<double, 3> remainder{};
    std::size_t assigned = 0;
    for (int b = 0; b < 3; ++b) {
        const double exact = ratios[b] * double(n);
        quota[b] = static_cast<std::size_t>(exact);
        remainder[b] = exact - double(quota[b]);
        assigned += quota[b];
    }
    while (assigned < n) {
        int best = 0;
        for (int b = 1; b < 3; ++b)
            if (remainder[b] > remainder[best]) best = b;
        ++quota[best];
        remainder[best] = -1.0;
        ++assigned;
    }

    SplitAssignment out;
    std::size_t idx = 0;
    const Split buckets[3] = {Split::train, Split::val, Split::test};
    for (int b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < quota[b]; ++i) out[patients[idx++]] = buckets[b];
    return out;
}

inline std::vector<const ImageRecord*> records_in_split(const Manifest& manifest,
                                                        const SplitAssignment& assignment,
                                                        Split split) {
    std::vector<const ImageRecord*> out;
    for (const auto& rec : manifest.records) {
        auto it = assignment.find(rec.patient_id);
        if (it != assignment.end() && it->second == split) out.push_back(&rec);
    }
    return out;
}

}  // namespace mammolab
