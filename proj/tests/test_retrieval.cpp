#include <doctest.h>

#include "mammolab/retrieval.hpp"

using namespace mammolab;

namespace {

std::vector<std::vector<double>> random_embeddings(std::size_t n, std::size_t d,
                                                   std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> out(n, std::vector<double>(d));
    for (auto& row : out)
        for (auto& x : row) x = 10.0 * rand_normal(rng);
    return out;
}

}  // namespace

TEST_CASE("min-max maps gallery midpoints to 0.5") {
    std::vector<std::vector<double>> g = {{0.0, -4.0}, {2.0, 4.0}, {1.0, 0.0}};
    auto idx = fit_index(g, {0, 1, 2});
    CHECK(idx.gallery[2][0] == doctest::Approx(0.5));
    CHECK(idx.gallery[2][1] == doctest::Approx(0.5));
    CHECK(idx.gallery[0][0] == doctest::Approx(0.0));
    CHECK(idx.gallery[1][1] == doctest::Approx(1.0));
}

TEST_CASE("constant dimensions normalize to 0.5 everywhere") {
    std::vector<std::vector<double>> g = {{7.0, 1.0}, {7.0, 2.0}, {7.0, 3.0}};
    auto idx = fit_index(g, {0, 1, 2});
    for (const auto& row : idx.gallery) CHECK(row[0] == doctest::Approx(0.5));
    // a query also sees 0.5 in that dimension regardless of its value
    auto hits = query(idx, {123.0, 2.0}, 1);
    CHECK(hits[0] == 1);
}

TEST_CASE("query matches a brute-force scan on 500 items") {
    auto g = random_embeddings(500, 8, 5);
    std::vector<int> labels(500);
    for (std::size_t i = 0; i < 500; ++i) labels[i] = int(i % 7);
    auto idx = fit_index(g, labels);
    auto q = random_embeddings(20, 8, 6);
    for (const auto& e : q) {
        auto got = query(idx, e, 5);
        // brute force over the normalized space
        std::vector<double> nq(8);
        for (std::size_t j = 0; j < 8; ++j)
            nq[j] = std::clamp((e[j] - idx.lo[j]) / (idx.hi[j] - idx.lo[j]), 0.0, 1.0);
        std::vector<std::pair<double, std::size_t>> dist;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 8; ++j)
                s += (idx.gallery[i][j] - nq[j]) * (idx.gallery[i][j] - nq[j]);
            dist.emplace_back(s, i);
        }
        std::sort(dist.begin(), dist.end());
        for (std::size_t i = 0; i < 5; ++i) CHECK(got[i] == dist[i].second);
    }
}

TEST_CASE("distance ties break by ascending gallery id") {
    std::vector<std::vector<double>> g = {{0.0}, {1.0}, {0.0}, {1.0}};
    auto idx = fit_index(g, {0, 1, 2, 3});
    auto got = query(idx, {0.0}, 4);
    CHECK(got == std::vector<std::size_t>{0, 2, 1, 3});
}

TEST_CASE("min-max retrieval is invariant to per-dimension affine rescaling") {
    auto g = random_embeddings(60, 4, 9);
    std::vector<int> labels(60);
    for (std::size_t i = 0; i < 60; ++i) labels[i] = int(i % 3);
    auto q = random_embeddings(10, 4, 10);

    auto scaled = g;
    auto qs = q;
    const double a[4] = {3.0, 0.25, 10.0, 7.5};
    const double b[4] = {-2.0, 5.0, 0.0, 100.0};
    for (auto& row : scaled)
        for (std::size_t j = 0; j < 4; ++j) row[j] = a[j] * row[j] + b[j];
    for (auto& row : qs)
        for (std::size_t j = 0; j < 4; ++j) row[j] = a[j] * row[j] + b[j];

    auto i1 = fit_index(g, labels);
    auto i2 = fit_index(scaled, labels);
    for (std::size_t i = 0; i < q.size(); ++i)
        CHECK(query(i1, q[i], 3) == query(i2, qs[i], 3));
}

TEST_CASE("top-k accuracy is monotone in k") {
    auto g = random_embeddings(80, 6, 13);
    std::vector<int> labels(80);
    for (std::size_t i = 0; i < 80; ++i) labels[i] = int(i % 4);
    auto idx = fit_index(g, labels);
    auto q = random_embeddings(30, 6, 14);
    std::vector<int> qlabels(30);
    for (std::size_t i = 0; i < 30; ++i) qlabels[i] = int(i % 4);
    double prev = 0;
    for (std::size_t k = 1; k <= 20; ++k) {
        double acc = topk_accuracy(idx, q, qlabels, k);
        CHECK(acc >= prev);
        prev = acc;
    }
    // with k = N and every label present, accuracy is 1
    CHECK(topk_accuracy(idx, q, qlabels, 80) == doctest::Approx(1.0));
}

TEST_CASE("error paths") {
    CHECK_THROWS_AS(fit_index({}, {}), EmptyGallery);
    auto idx = fit_index({{0.0}, {1.0}}, {0, 1});
    CHECK_THROWS_AS(query(idx, {0.5}, 3), KExceedsGallery);
    CHECK_THROWS_AS(query(idx, {0.5}, 0), KExceedsGallery);
}

TEST_CASE("zscore normalization standardizes the gallery") {
    std::vector<std::vector<double>> g = {{1.0}, {3.0}, {5.0}};
    auto idx = fit_index(g, {0, 1, 2}, FeatureNorm::zscore);
    CHECK(idx.lo[0] == doctest::Approx(3.0));
    const double sd = std::sqrt(8.0 / 3.0);
    CHECK(idx.hi[0] == doctest::Approx(sd));
    CHECK(idx.gallery[0][0] == doctest::Approx(-2.0 / sd));
    CHECK(idx.gallery[1][0] == doctest::Approx(0.0));
}
