#pragma once

// Record-level augmentation and the synthetic phantom corpus generator that
// stands in for real mammograms: textured backgrounds whose streak density
// tracks the composition label, disc lesions with ground-truth boxes and
// masks, and orientation markers for the view/laterality tasks.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "mammolab/common.hpp"
#include "mammolab/corpus.hpp"
#include "mammolab/image.hpp"

namespace mammolab {

// ------------------------------------------------------------ augmentation

// Random horizontal/vertical flips (probability 0.5 each, decided by seed),
// applied consistently to pixels, boxes, and mask.
inline ImageRecord augment(const ImageRecord& rec, std::uint64_t seed) {
    Rng rng(seed);
    const bool hflip = rand_uniform(rng) < 0.5;
    const bool vflip = rand_uniform(rng) < 0.5;

    ImageRecord out = rec;
    const double w = double(rec.pixels.cols);
    const double h = double(rec.pixels.rows);
    if (hflip) {
        out.pixels = flip_horizontal(out.pixels);
        if (out.mask) out.mask = flip_horizontal(*out.mask);
        for (auto& b : out.boxes) b = {w - b.x2, b.y1, w - b.x1, b.y2, b.class_id};
    }
    if (vflip) {
        out.pixels = flip_vertical(out.pixels);
        if (out.mask) out.mask = flip_vertical(*out.mask);
        for (auto& b : out.boxes) b = {b.x1, h - b.y2, b.x2, h - b.y1, b.class_id};
    }
    return out;
}

// --------------------------------------------------------------- phantoms

enum class LesionKind { none, mass, calcification };

struct PhantomSpec {
    std::size_t image_size = 64;
    LesionKind lesion_kind = LesionKind::none;
    double lesion_center_row = 32, lesion_center_col = 32;
    double lesion_radius = 8;
    int density_level = 0;  // 0..3, monotone in mean background intensity
    double noise_sigma = 8.0;
    std::uint64_t seed = 0;
};

// Mass radius above this is labeled malignant.
inline constexpr double kMalignantRadiusThreshold = 7.0;

namespace detail {

// Low-frequency cosine mixture; large enough to blur the per-level mean
// intensity gap so composition is not readable from the image mean alone.
struct SmoothField {
    struct Wave {
        double fr, fc, phase, amp;
    };
    std::vector<Wave> waves;

    explicit SmoothField(Rng& rng, std::size_t side) {
        for (int k = 0; k < 3; ++k) {
            const double cycles = 0.4 + 1.2 * rand_uniform(rng);
            const double angle = rand_uniform(rng, 0.0, 6.283185307179586);
            waves.push_back({cycles * std::cos(angle) / double(side),
                            cycles * std::sin(angle) / double(side),
                            rand_uniform(rng, 0.0, 6.283185307179586),
                            8.0 + 10.0 * rand_uniform(rng)});
        }
    }

    double at(std::size_t r, std::size_t c) const {
        double v = 0;
        for (const auto& w : waves)
            v += w.amp * std::cos(6.283185307179586 * (w.fr * double(r) + w.fc * double(c)) +
                                  w.phase);
        return v;
    }
};

inline void draw_streak(std::vector<double>& buf, std::size_t side, Rng& rng) {
    // Short fibrous segment; signed contrast keeps the image mean unchanged
    // so streak count is a texture cue, not an intensity cue.
    const double cr = rand_uniform(rng, 6.0, double(side) - 6.0);
    const double cc = rand_uniform(rng, 6.0, double(side) - 6.0);
    const double angle = rand_uniform(rng, 0.0, 6.283185307179586);
    const double len = double(side) * (0.15 + 0.15 * rand_uniform(rng));
    const double contrast = (rng() & 1) ? 35.0 : -35.0;
    const double dr = std::sin(angle), dc = std::cos(angle);
    for (double t = -len / 2; t <= len / 2; t += 0.5) {
        const long r = std::lround(cr + t * dr);
        const long c = std::lround(cc + t * dc);
        if (r >= 0 && c >= 0 && r < long(side) && c < long(side))
            buf[std::size_t(r) * side + std::size_t(c)] += contrast;
    }
}

}  // namespace detail

inline ImageRecord generate_phantom(const PhantomSpec& spec) {
    const std::size_t side = spec.image_size;
    if (side == 0) throw EmptyImage();
    if (spec.density_level < 0 || spec.density_level > 3)
        throw BadConfig("density_level must be in 0..3");
    if (spec.lesion_kind != LesionKind::none) {
        if (spec.lesion_center_row - spec.lesion_radius < 0 ||
            spec.lesion_center_col - spec.lesion_radius < 0 ||
            spec.lesion_center_row + spec.lesion_radius > double(side) ||
            spec.lesion_center_col + spec.lesion_radius > double(side))
            throw LesionOutOfBounds();
    }

    Rng rng(derive_seed(spec.seed, 0xF0));
    const bool view_cc = (spec.seed & 1) == 0;
    const bool side_left = (spec.seed & 2) == 0;

    std::vector<double> buf(side * side, 0.0);
    const double base = 70.0 + 18.0 * spec.density_level;
    detail::SmoothField field(rng, side);
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c)
            buf[r * side + c] = base + field.at(r, c);

    const int n_streaks = 2 + 3 * spec.density_level;
    for (int k = 0; k < n_streaks; ++k) detail::draw_streak(buf, side, rng);

    // orientation markers: view = horizontal vs diagonal bar, laterality =
    // bright edge band
    const std::size_t bar0 = side / 4, bar1 = 3 * side / 4;
    if (view_cc) {
        for (std::size_t c = bar0; c < bar1; ++c)
            for (std::size_t r = 1; r <= 2; ++r) buf[r * side + c] = 235.0;
    } else {
        for (std::size_t c = bar0; c < bar1; ++c) {
            const std::size_t r = 1 + (c - bar0) / 8;
            if (r + 1 < side) {
                buf[r * side + c] = 235.0;
                buf[(r + 1) * side + c] = 235.0;
            }
        }
    }
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < 3; ++c)
            buf[r * side + (side_left ? c : side - 1 - c)] = 210.0;

    // lesion
    Image mask(side, side, 0);
    std::vector<BoundingBox> boxes;
    if (spec.lesion_kind != LesionKind::none) {
        const double cr = spec.lesion_center_row, cc = spec.lesion_center_col;
        const double rad = spec.lesion_radius;
        for (std::size_t r = 0; r < side; ++r) {
            for (std::size_t c = 0; c < side; ++c) {
                const double d2 = (double(r) - cr) * (double(r) - cr) +
                                  (double(c) - cc) * (double(c) - cc);
                if (d2 <= rad * rad) mask.at(r, c) = 1;
                if (spec.lesion_kind == LesionKind::mass) {
                    buf[r * side + c] += 60.0 * std::exp(-d2 / (2.0 * (rad / 1.5) * (rad / 1.5)));
                } else if (spec.lesion_kind == LesionKind::calcification && d2 <= rad * rad) {
                    buf[r * side + c] += 28.0;
                }
            }
        }
        if (spec.lesion_kind == LesionKind::calcification) {
            const int n_dots = 8;
            for (int k = 0; k < n_dots; ++k) {
                const double ang = rand_uniform(rng, 0.0, 6.283185307179586);
                const double dist = rand_uniform(rng, 0.0, rad - 1.0);
                const long r = std::lround(cr + dist * std::sin(ang));
                const long c = std::lround(cc + dist * std::cos(ang));
                for (long dr = -1; dr <= 1; ++dr)
                    for (long dc = -1; dc <= 1; ++dc) {
                        const long rr = r + dr, cci = c + dc;
                        if (rr >= 0 && cci >= 0 && rr < long(side) && cci < long(side))
                            buf[std::size_t(rr) * side + std::size_t(cci)] += 70.0;
                    }
            }
        }
        boxes.push_back({cc - rad, cr - rad, cc + rad, cr + rad,
                         spec.lesion_kind == LesionKind::calcification ? 1 : 0});
    }

    // noise + quantization
    Image pixels(side, side);
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const double v = buf[i] + spec.noise_sigma * rand_normal(rng);
        pixels.px[i] = static_cast<std::uint8_t>(std::clamp(v + 0.5, 0.0, 255.0));
    }

    ImageRecord rec;
    rec.pixels = std::move(pixels);
    rec.mask = std::move(mask);
    rec.boxes = std::move(boxes);
    rec.labels["composition"] = spec.density_level;
    rec.labels["view"] = view_cc ? 0 : 1;
    rec.labels["laterality"] = side_left ? 0 : 1;
    switch (spec.lesion_kind) {
        case LesionKind::none:
            rec.labels["finding"] = 0;
            rec.labels["birads"] = 1;
            break;
        case LesionKind::mass:
            rec.labels["finding"] = 1;
            if (spec.lesion_radius > kMalignantRadiusThreshold) {
                rec.labels["pathology"] = 1;
                rec.labels["birads"] = 5;
            } else {
                rec.labels["pathology"] = 0;
                rec.labels["birads"] = 3;
            }
            break;
        case LesionKind::calcification:
            rec.labels["finding"] = 2;
            rec.labels["birads"] = 2;
            break;
    }
    return rec;
}

// ---------------------------------------------------------- corpus builder

// Deterministic label-balanced corpus. Lesion kinds cycle with period 6 so
// the finding marginal is uniform and mass radii alternate small/large so
// pathology is balanced among mass records.
inline Manifest generate_corpus(std::size_t n_patients, std::size_t images_per_patient,
                                const std::set<std::string>& task_mix, std::uint64_t seed,
                                std::size_t image_size = 64) {
    if (n_patients == 0) throw BadConfig("n_patients must be >= 1");
    Manifest manifest;
    std::size_t i = 0;
    for (std::size_t p = 0; p < n_patients; ++p) {
        char pid[32];
        std::snprintf(pid, sizeof pid, "P%04zu", p);
        for (std::size_t k = 0; k < images_per_patient; ++k, ++i) {
            PhantomSpec spec;
            spec.image_size = image_size;
            spec.density_level = int((i / 4) % 4);
            spec.noise_sigma = 8.0;
            // low two seed bits drive view/laterality; cycle them for balance
            spec.seed = (derive_seed(seed, i) & ~std::uint64_t(3)) | (i % 2) |
                        (((i / 2) % 2) << 1);
            Rng rng(derive_seed(seed, 0x10000 + i));
            static const LesionKind kinds[6] = {LesionKind::none, LesionKind::mass,
                                                LesionKind::calcification, LesionKind::none,
                                                LesionKind::mass, LesionKind::calcification};
            spec.lesion_kind = kinds[i % 6];
            if (spec.lesion_kind == LesionKind::mass)
                spec.lesion_radius = ((i / 6) % 2 == 0) ? 5.0 : 9.0;
            else
                spec.lesion_radius = 6.0;
            const double margin = spec.lesion_radius + 4.0;
            spec.lesion_center_row = rand_uniform(rng, margin, double(image_size) - margin);
            spec.lesion_center_col = rand_uniform(rng, margin, double(image_size) - margin);

            ImageRecord rec = generate_phantom(spec);
            rec.patient_id = pid;
            rec.image_id = std::string(pid) + "_I" + std::to_string(k);

            // attribute-free plumbing labels, cycled for balance
            rec.labels["masking"] = int(i % 8);
            rec.labels["birads4"] = int(i % 3);
            rec.labels["mastitis"] = int(i % 2);
            rec.labels["invasive"] = int((i / 2) % 2);
            rec.labels["subtype"] = int(i % 4);

            if (!task_mix.empty()) {
                std::map<std::string, int> kept;
                for (const auto& [task, label] : rec.labels)
                    if (task_mix.count(task)) kept[task] = label;
                rec.labels = std::move(kept);
            }

            if (task_mix.empty() || task_mix.count("vqa")) {
                auto add_qa = [&](const std::string& qtype, int answer) {
                    rec.qa.push_back({qtype, answer});
                };
                add_qa("view", rec.label("view").value_or(int(i % 2)));
                add_qa("laterality", rec.label("laterality").value_or(int((i / 2) % 2)));
                add_qa("composition", spec.density_level);
                add_qa("masking", int(i % 8));
                add_qa("abnormality", spec.lesion_kind == LesionKind::none ? 0
                                      : spec.lesion_kind == LesionKind::mass ? 1
                                                                             : 2);
                add_qa("subtlety", int(i % 5));
                add_qa("birads", spec.lesion_kind == LesionKind::none ? 1
                                 : spec.lesion_kind == LesionKind::calcification
                                     ? 2
                                     : (spec.lesion_radius > kMalignantRadiusThreshold ? 5 : 3));
                if (spec.lesion_kind == LesionKind::mass)
                    add_qa("pathology",
                           spec.lesion_radius > kMalignantRadiusThreshold ? 1 : 0);
            }
            validate_record(rec);
            manifest.records.push_back(std::move(rec));
        }
    }
    return manifest;
}

// Writes images (8-bit PGM), masks, and the manifest file under dir.
inline void write_corpus(Manifest& manifest, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    for (auto& rec : manifest.records) {
        rec.image_path = "images/" + rec.image_id + ".pgm";
        write_pgm(rec.pixels, dir / rec.image_path);
        if (rec.mask) {
            rec.mask_path = "masks/" + rec.image_id + ".pgm";
            Image vis = *rec.mask;
            for (auto& p : vis.px) p = p ? 255 : 0;
            write_pgm(vis, dir / rec.mask_path);
        }
    }
    manifest.root = dir;
    save_manifest(manifest, dir / "manifest.jsonl");
}

}  // namespace mammolab
