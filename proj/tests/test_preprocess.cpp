#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mammolab/image.hpp"
#include "mammolab/preprocess.hpp"

using namespace mammolab;

namespace {

Image make_image(std::initializer_list<std::initializer_list<int>> rows) {
    Image img(rows.size(), rows.begin()->size());
    std::size_t r = 0;
    for (const auto& row : rows) {
        std::size_t c = 0;
        for (int v : row) img.at(r, c++) = std::uint8_t(v);
        ++r;
    }
    return img;
}

Image random_image(Rng& rng, std::size_t max_side = 12) {
    Image img(1 + rand_index(rng, max_side), 1 + rand_index(rng, max_side));
    for (auto& p : img.px) p = std::uint8_t(rng() % 256);
    return img;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("roi_crop hand-traced fixture") {
    Image img = make_image({{0, 0, 0, 0, 0},
                            {0, 50, 80, 0, 0},
                            {0, 60, 90, 0, 39},
                            {0, 0, 0, 0, 0},
                            {0, 0, 0, 0, 0}});
    Image out = roi_crop(img);
    CHECK(out == make_image({{50, 80}, {60, 90}}));
}

TEST_CASE("roi_crop identity when nothing to trim") {
    Image img = make_image({{50, 80, 41}, {60, 90, 120}, {77, 44, 99}});
    CHECK(roi_crop(img) == img);
}

TEST_CASE("roi_crop all-zero input reduces to single pixel") {
    Image img(4, 6, 0);
    Image out = roi_crop(img);
    CHECK(out.rows == 1);
    CHECK(out.cols == 1);
    CHECK(out.at(0, 0) == 0);
}

TEST_CASE("roi_crop rejects empty input") {
    CHECK_THROWS_AS(roi_crop(Image{}), EmptyImage);
}

TEST_CASE("roi_crop idempotence and shrinking on random arrays") {
    Rng rng(42);
    for (int i = 0; i < 1000; ++i) {
        Image img = random_image(rng);
        Image once = roi_crop(img);
        CHECK(once.rows <= img.rows);
        CHECK(once.cols <= img.cols);
        CHECK(roi_crop(once) == once);
    }
}

TEST_CASE("roi_crop leaves no constant border rows or columns") {
    Rng rng(7);
    auto row_const = [](const Image& m, std::size_t r) {
        for (std::size_t c = 1; c < m.cols; ++c)
            if (m.at(r, c) != m.at(r, 0)) return false;
        return true;
    };
    auto col_const = [](const Image& m, std::size_t c) {
        for (std::size_t r = 1; r < m.rows; ++r)
            if (m.at(r, c) != m.at(0, c)) return false;
        return true;
    };
    for (int i = 0; i < 300; ++i) {
        Image out = roi_crop(random_image(rng));
        if (out.rows == 1 && out.cols == 1) continue;
        CHECK_FALSE(row_const(out, 0));
        CHECK_FALSE(row_const(out, out.rows - 1));
        CHECK_FALSE(col_const(out, 0));
        CHECK_FALSE(col_const(out, out.cols - 1));
    }
}

TEST_CASE("resize keeps constant fields constant") {
    Image img(64, 64, 100);
    Image out = resize(img, 32);
    CHECK(out.rows == 32);
    for (auto p : out.px) CHECK(p == 100);
}

TEST_CASE("resize bilinear closed form on 2x2 ramp") {
    Image img = make_image({{0, 255}, {0, 255}});
    Image out = resize(img, 4);
    // horizontal interpolation of [0, 255] at 0, 1/3, 2/3, 1
    for (std::size_t r = 0; r < 4; ++r) {
        CHECK(out.at(r, 0) == 0);
        CHECK(out.at(r, 1) == 85);
        CHECK(out.at(r, 2) == 170);
        CHECK(out.at(r, 3) == 255);
    }
}

TEST_CASE("resize to own side is identity") {
    Rng rng(3);
    Image img(17, 17);
    for (auto& p : img.px) p = std::uint8_t(rng() % 256);
    CHECK(resize(img, 17) == img);
}

TEST_CASE("augment flips boxes and masks consistently") {
    ImageRecord rec;
    rec.pixels = Image(10, 10);
    for (std::size_t i = 0; i < rec.pixels.px.size(); ++i)
        rec.pixels.px[i] = std::uint8_t(i % 251);
    rec.mask = Image(10, 10, 0);
    rec.mask->at(2, 3) = 1;
    rec.boxes.push_back({1, 2, 4, 6, 0});

    // find seeds that force each flip combination
    std::uint64_t seed_none = 0, seed_h = 0;
    bool found_none = false, found_h = false;
    for (std::uint64_t s = 0; s < 200 && !(found_none && found_h); ++s) {
        Rng rng(s);
        const bool h = rand_uniform(rng) < 0.5;
        const bool v = rand_uniform(rng) < 0.5;
        if (!h && !v && !found_none) { seed_none = s; found_none = true; }
        if (h && !v && !found_h) { seed_h = s; found_h = true; }
    }
    REQUIRE(found_none);
    REQUIRE(found_h);

    SUBCASE("both flips off is identity") {
        ImageRecord out = augment(rec, seed_none);
        CHECK(out.pixels == rec.pixels);
        CHECK(out.boxes == rec.boxes);
        CHECK(*out.mask == *rec.mask);
    }
    SUBCASE("horizontal flip reflects the box") {
        ImageRecord out = augment(rec, seed_h);
        CHECK(out.boxes[0] == BoundingBox{10 - 4, 2, 10 - 1, 6, 0});
        CHECK(out.mask->at(2, 10 - 1 - 3) == 1);
    }
    SUBCASE("same flip twice is an involution") {
        ImageRecord twice = augment(augment(rec, seed_h), seed_h);
        CHECK(twice.pixels == rec.pixels);
        CHECK(twice.boxes == rec.boxes);
        CHECK(*twice.mask == *rec.mask);
    }
}

TEST_CASE("augment with both flips preserves the pixel multiset") {
    Rng rng(11);
    ImageRecord rec;
    rec.pixels = random_image(rng);
    for (std::uint64_t s = 0; s < 64; ++s) {
        ImageRecord out = augment(rec, s);
        auto a = rec.pixels.px, b = out.pixels.px;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
    }
}

TEST_CASE("generate_phantom: no lesion") {
    PhantomSpec spec;
    spec.lesion_kind = LesionKind::none;
    ImageRecord rec = generate_phantom(spec);
    CHECK(rec.boxes.empty());
    CHECK(rec.labels.at("finding") == 0);
    for (auto p : rec.mask->px) CHECK(p == 0);
}

TEST_CASE("generate_phantom: mass geometry via disc-area oracle") {
    PhantomSpec spec;
    spec.image_size = 64;
    spec.lesion_kind = LesionKind::mass;
    spec.lesion_center_row = 32;
    spec.lesion_center_col = 32;
    spec.lesion_radius = 8;
    ImageRecord rec = generate_phantom(spec);
    REQUIRE(rec.boxes.size() == 1);
    CHECK(rec.boxes[0].x1 == doctest::Approx(24));
    CHECK(rec.boxes[0].y2 == doctest::Approx(40));
    std::size_t mask_count = 0;
    for (auto p : rec.mask->px) mask_count += p;
    const double expected = 3.14159265358979 * 64.0;
    CHECK(double(mask_count) >= 0.95 * expected);
    CHECK(double(mask_count) <= 1.05 * expected);
    // mask subset of box
    for (std::size_t r = 0; r < 64; ++r)
        for (std::size_t c = 0; c < 64; ++c)
            if (rec.mask->at(r, c)) {
                CHECK(double(c) >= rec.boxes[0].x1 - 0.5);
                CHECK(double(c) <= rec.boxes[0].x2 + 0.5);
                CHECK(double(r) >= rec.boxes[0].y1 - 0.5);
                CHECK(double(r) <= rec.boxes[0].y2 + 0.5);
            }
    CHECK(rec.labels.at("pathology") == 1);  // radius 8 > malignancy threshold
}

TEST_CASE("generate_phantom: lesion contrast exceeds 3 sigma over background") {
    for (auto kind : {LesionKind::mass, LesionKind::calcification}) {
        PhantomSpec spec;
        spec.lesion_kind = kind;
        spec.lesion_radius = 7;
        spec.seed = 5;
        ImageRecord rec = generate_phantom(spec);
        double lesion_sum = 0, bg_sum = 0;
        std::size_t lesion_n = 0, bg_n = 0;
        const double cr = spec.lesion_center_row, cc = spec.lesion_center_col;
        for (std::size_t r = 8; r < 56; ++r)
            for (std::size_t c = 8; c < 56; ++c) {
                const double d2 = (r - cr) * (r - cr) + (c - cc) * (c - cc);
                if (rec.mask->at(r, c)) {
                    lesion_sum += rec.pixels.at(r, c);
                    ++lesion_n;
                } else if (d2 > 14 * 14 && d2 < 20 * 20) {  // local annulus
                    bg_sum += rec.pixels.at(r, c);
                    ++bg_n;
                }
            }
        REQUIRE(lesion_n > 0);
        REQUIRE(bg_n > 0);
        CHECK(lesion_sum / double(lesion_n) - bg_sum / double(bg_n) >= 3.0 * spec.noise_sigma);
    }
}

TEST_CASE("generate_phantom: deterministic per seed") {
    PhantomSpec spec;
    spec.lesion_kind = LesionKind::mass;
    spec.seed = 99;
    ImageRecord a = generate_phantom(spec);
    ImageRecord b = generate_phantom(spec);
    CHECK(a.pixels == b.pixels);
    CHECK(*a.mask == *b.mask);
    CHECK(a.labels == b.labels);
}

TEST_CASE("generate_phantom rejects out-of-bounds lesions") {
    PhantomSpec spec;
    spec.lesion_kind = LesionKind::mass;
    spec.lesion_center_row = 2;
    spec.lesion_radius = 8;
    CHECK_THROWS_AS(generate_phantom(spec), LesionOutOfBounds);
}

TEST_CASE("generate_corpus counts and patient ids") {
    Manifest m = generate_corpus(10, 2, {}, 1);
    CHECK(m.records.size() == 20);
    CHECK(m.patient_ids().size() == 10);
    for (const auto& rec : m.records) validate_record(rec);
}

TEST_CASE("generate_corpus task_mix restricts labels") {
    Manifest m = generate_corpus(6, 2, {"pathology"}, 1);
    for (const auto& rec : m.records) {
        for (const auto& [task, _] : rec.labels) CHECK(task == "pathology");
        CHECK(rec.qa.empty());
    }
}

TEST_CASE("generate_corpus label marginals near uniform") {
    Manifest m = generate_corpus(48, 2, {}, 3);  // 96 records
    for (const std::string task : {"composition", "finding", "view", "laterality", "masking"}) {
        std::map<int, int> counts;
        std::size_t total = 0;
        for (const auto& rec : m.records)
            if (auto l = rec.label(task)) {
                counts[*l] += 1;
                ++total;
            }
        const double uniform = double(total) / double(counts.size());
        for (const auto& [_, c] : counts) {
            CHECK(double(c) >= uniform * 0.9 - 1.0);
            CHECK(double(c) <= uniform * 1.1 + 1.0);
        }
    }
    // pathology balanced among labeled records
    int benign = 0, malignant = 0;
    for (const auto& rec : m.records)
        if (auto l = rec.label("pathology")) (*l ? malignant : benign) += 1;
    CHECK(benign == malignant);
}

TEST_CASE("write_corpus output is byte-identical across runs") {
    namespace fs = std::filesystem;
    const fs::path dir1 = fs::temp_directory_path() / "mammolab_corpus_a";
    const fs::path dir2 = fs::temp_directory_path() / "mammolab_corpus_b";
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    Manifest m1 = generate_corpus(4, 2, {}, 7);
    Manifest m2 = generate_corpus(4, 2, {}, 7);
    write_corpus(m1, dir1);
    write_corpus(m2, dir2);
    CHECK(slurp(dir1 / "manifest.jsonl") == slurp(dir2 / "manifest.jsonl"));
    CHECK(slurp(dir1 / m1.records[0].image_path) == slurp(dir2 / m2.records[0].image_path));
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}
