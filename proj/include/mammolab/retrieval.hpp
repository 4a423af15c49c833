#pragma once

// Feature-normalized nearest-neighbor retrieval with top-k accuracy.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mammolab/common.hpp"

namespace mammolab {

enum class FeatureNorm { minmax, zscore };

struct RetrievalIndex {
    std::vector<std::vector<double>> gallery;  // normalized, [N][D]
    std::vector<int> labels;
    std::vector<double> lo, hi;  // per-dimension fit parameters
    FeatureNorm norm = FeatureNorm::minmax;

    std::size_t size() const { return gallery.size(); }
};

namespace detail {

// Min-max maps to [0,1] with constant dimensions pinned at 0.5; z-score
// stores mean in lo and stddev in hi.
inline double normalize_dim(double x, double lo, double hi, FeatureNorm norm) {
    if (norm == FeatureNorm::minmax) {
        if (hi <= lo) return 0.5;
        return std::clamp((x - lo) / (hi - lo), 0.0, 1.0);
    }
    return hi > 0 ? (x - lo) / hi : 0.0;
}

}  // namespace detail

inline RetrievalIndex fit_index(const std::vector<std::vector<double>>& embeddings,
                                const std::vector<int>& labels,
                                FeatureNorm norm = FeatureNorm::minmax) {
    if (embeddings.empty()) throw EmptyGallery();
    const std::size_t d = embeddings[0].size();
    RetrievalIndex idx;
    idx.norm = norm;
    idx.labels = labels;
    idx.lo.assign(d, 0.0);
    idx.hi.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        if (norm == FeatureNorm::minmax) {
            double lo = embeddings[0][j], hi = embeddings[0][j];
            for (const auto& e : embeddings) {
                lo = std::min(lo, e[j]);
                hi = std::max(hi, e[j]);
            }
            idx.lo[j] = lo;
            idx.hi[j] = hi;
        } else {
            double mu = 0;
            for (const auto& e : embeddings) mu += e[j];
            mu /= double(embeddings.size());
            double var = 0;
            for (const auto& e : embeddings) var += (e[j] - mu) * (e[j] - mu);
            idx.lo[j] = mu;
            idx.hi[j] = std::sqrt(var / double(embeddings.size()));
        }
    }
    idx.gallery.reserve(embeddings.size());
    for (const auto& e : embeddings) {
        std::vector<double> row(d);
        for (std::size_t j = 0; j < d; ++j)
            row[j] = detail::normalize_dim(e[j], idx.lo[j], idx.hi[j], norm);
        idx.gallery.push_back(std::move(row));
    }
    return idx;
}

// k nearest gallery ids by L2 distance in normalized feature space; ties
// broken by ascending gallery id.
inline std::vector<std::size_t> query(const RetrievalIndex& idx,
                                      const std::vector<double>& embedding, std::size_t k) {
    if (k < 1 || k > idx.size()) throw KExceedsGallery();
    const std::size_t d = idx.lo.size();
    std::vector<double> q(d);
    for (std::size_t j = 0; j < d; ++j)
        q[j] = detail::normalize_dim(embedding[j], idx.lo[j], idx.hi[j], idx.norm);

    std::vector<std::pair<double, std::size_t>> dist(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = idx.gallery[i][j] - q[j];
            s += diff * diff;
        }
        dist[i] = {s, i};
    }
    std::sort(dist.begin(), dist.end());
    std::vector<std::size_t> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = dist[i].second;
    return out;
}

// Fraction of queries whose top-k retrieved items include >=1 gallery item
// with the query's label. Also usable per-query for bootstrapping.
inline std::vector<double> topk_hits(const RetrievalIndex& idx,
                                     const std::vector<std::vector<double>>& queries,
                                     const std::vector<int>& query_labels, std::size_t k) {
    std::vector<double> hits(queries.size(), 0.0);
    for (std::size_t i = 0; i < queries.size(); ++i) {
        for (std::size_t g : query(idx, queries[i], k)) {
            if (idx.labels[g] == query_labels[i]) {
                hits[i] = 1.0;
                break;
            }
        }
    }
    return hits;
}

inline double topk_accuracy(const RetrievalIndex& idx,
                            const std::vector<std::vector<double>>& queries,
                            const std::vector<int>& query_labels, std::size_t k) {
    if (queries.empty()) return 0.0;
    const auto hits = topk_hits(idx, queries, query_labels, k);
    return std::accumulate(hits.begin(), hits.end(), 0.0) / double(hits.size());
}

}  // namespace mammolab
