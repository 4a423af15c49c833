#pragma once

// Benchmark metrics and statistics: balanced accuracy, weighted F1, AUC,
// DICE/IoU, percentile bootstrap CIs, tie-averaged rank tables, and the
// Nemenyi critical difference.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mammolab/common.hpp"
#include "mammolab/image.hpp"

namespace mammolab {

struct MetricResult {
    std::string metric;
    double point = 0;
    double ci_low = 0;
    double ci_high = 0;
    std::size_t n_replicates = 0;
};

// ------------------------------------------------------- confusion metrics

using Confusion = std::vector<std::vector<std::size_t>>;  // [true][pred]

inline Confusion make_confusion(const std::vector<int>& truth, const std::vector<int>& pred,
                                std::size_t n_classes) {
    Confusion m(n_classes, std::vector<std::size_t>(n_classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) m[truth[i]][pred[i]] += 1;
    return m;
}

// Mean per-class recall.
inline double balanced_accuracy(const Confusion& confusion) {
    const std::size_t c = confusion.size();
    double sum = 0;
    for (std::size_t i = 0; i < c; ++i) {
        const std::size_t support =
            std::accumulate(confusion[i].begin(), confusion[i].end(), std::size_t{0});
        if (support == 0) throw EmptyClass("class " + std::to_string(i) + " has no instances");
        sum += double(confusion[i][i]) / double(support);
    }
    return sum / double(c);
}

// Support-weighted mean of per-class F1 (F1 = 0 where precision+recall = 0).
inline double weighted_f1(const Confusion& confusion) {
    const std::size_t c = confusion.size();
    double total = 0, acc = 0;
    for (std::size_t i = 0; i < c; ++i) {
        const double support =
            double(std::accumulate(confusion[i].begin(), confusion[i].end(), std::size_t{0}));
        double pred_count = 0;
        for (std::size_t j = 0; j < c; ++j) pred_count += double(confusion[j][i]);
        const double tp = double(confusion[i][i]);
        const double precision = pred_count > 0 ? tp / pred_count : 0.0;
        const double recall = support > 0 ? tp / support : 0.0;
        const double f1 =
            precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        acc += support * f1;
        total += support;
    }
    if (total == 0) throw EmptyClass("no samples");
    return acc / total;
}

// ------------------------------------------------------------------- AUC

// Binary AUC = Mann-Whitney U / (n+ * n-), half credit for score ties.
inline double auc_binary(const std::vector<double>& scores, const std::vector<char>& labels) {
    std::size_t n_pos = 0, n_neg = 0;
    for (char l : labels) (l ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0) throw DegenerateLabels("need >=1 positive and negative");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (double(i + 1) + double(j));  // 1-based tie average
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos - double(n_pos) * double(n_pos + 1) / 2.0;
    return u / (double(n_pos) * double(n_neg));
}

// Macro one-vs-rest AUC; scores [n][C]. Classes without both positives and
// negatives are skipped.
inline double auc_multiclass(const std::vector<std::vector<double>>& scores,
                             const std::vector<int>& labels) {
    if (scores.empty()) throw DegenerateLabels("no samples");
    const std::size_t c = scores[0].size();
    double sum = 0;
    std::size_t used = 0;
    for (std::size_t cls = 0; cls < c; ++cls) {
        std::vector<double> s(scores.size());
        std::vector<char> y(scores.size());
        std::size_t pos = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            s[i] = scores[i][cls];
            y[i] = labels[i] == int(cls);
            pos += y[i];
        }
        if (pos == 0 || pos == scores.size()) continue;
        sum += auc_binary(s, y);
        ++used;
    }
    if (used == 0) throw DegenerateLabels("no class with both positives and negatives");
    return sum / double(used);
}

// ------------------------------------------------------------- DICE / IoU

struct DiceIou {
    double dice = 0, iou = 0;
};

// Both-empty masks score (1.0, 1.0).
inline DiceIou dice_and_iou(const Image& pred, const Image& truth) {
    if (pred.rows != truth.rows || pred.cols != truth.cols)
        throw ShapeMismatch("mask shapes differ");
    std::size_t inter = 0, p = 0, t = 0;
    for (std::size_t i = 0; i < pred.px.size(); ++i) {
        const bool a = pred.px[i] != 0, b = truth.px[i] != 0;
        inter += a && b;
        p += a;
        t += b;
    }
    if (p + t == 0) return {1.0, 1.0};
    DiceIou out;
    out.dice = 2.0 * double(inter) / double(p + t);
    out.iou = double(inter) / double(p + t - inter);
    return out;
}

// --------------------------------------------------------------- bootstrap

// Linear-interpolation quantile between order statistics.
inline double quantile(std::vector<double> xs, double q) {
    std::sort(xs.begin(), xs.end());
    const double h = q * double(xs.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(h);
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (h - double(lo)) * (xs[hi] - xs[lo]);
}

inline double mean_of(const std::vector<double>& xs) {
    return std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
}

// Percentile bootstrap of `statistic` over per-sample values. Replicate b
// draws with engine Rng(derive_seed(seed, b)), indices via rand_index; this
// generator contract is part of the function's definition.
inline MetricResult bootstrap_ci(
    const std::vector<double>& values,
    const std::function<double(const std::vector<double>&)>& statistic = mean_of,
    std::size_t n_replicates = 1000, double alpha = 0.05, std::uint64_t seed = 0,
    const std::string& metric_name = "") {
    if (values.empty()) throw EmptySample();
    std::vector<double> replicates(n_replicates);
    std::vector<double> resample(values.size());
    for (std::size_t b = 0; b < n_replicates; ++b) {
        Rng rng(derive_seed(seed, b));
        for (auto& x : resample) x = values[rand_index(rng, values.size())];
        replicates[b] = statistic(resample);
    }
    MetricResult out;
    out.metric = metric_name;
    out.point = statistic(values);
    out.ci_low = quantile(replicates, alpha / 2.0);
    out.ci_high = quantile(replicates, 1.0 - alpha / 2.0);
    out.n_replicates = n_replicates;
    return out;
}

// ----------------------------------------------------------------- ranking

struct RankTable {
    std::vector<std::string> models;
    std::vector<std::string> tasks;
    std::vector<std::vector<double>> values;  // [model][task]
    std::vector<std::vector<double>> ranks;   // [model][task], 1 = best
    std::vector<double> avg_rank;             // per model
    double cd = 0;                            // 0 when not computed
    std::vector<std::pair<std::size_t, std::size_t>> significant_pairs;
};

// Per-task ranks with tie averaging; rank 1 = best.
inline std::vector<std::vector<double>> rank_models(
    const std::vector<std::vector<double>>& values, const std::vector<char>& higher_is_better) {
    if (values.empty()) throw MissingCell("empty value matrix");
    const std::size_t k = values.size(), n_tasks = values[0].size();
    for (const auto& row : values) {
        if (row.size() != n_tasks) throw MissingCell("ragged value matrix");
        for (double v : row)
            if (!std::isfinite(v)) throw MissingCell("non-finite cell");
    }
    std::vector<std::vector<double>> ranks(k, std::vector<double>(n_tasks, 0.0));
    for (std::size_t t = 0; t < n_tasks; ++t) {
        const bool hib = t < higher_is_better.size() ? higher_is_better[t] != 0 : true;
        std::vector<std::size_t> order(k);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return hib ? values[a][t] > values[b][t] : values[a][t] < values[b][t];
        });
        std::size_t i = 0;
        while (i < k) {
            std::size_t j = i;
            while (j < k && values[order[j]][t] == values[order[i]][t]) ++j;
            const double avg = 0.5 * (double(i + 1) + double(j));
            for (std::size_t m = i; m < j; ++m) ranks[order[m]][t] = avg;
            i = j;
        }
    }
    return ranks;
}

// Studentized-range-based critical values q_0.05 for the Nemenyi test,
// k = 2..10.
inline double nemenyi_q05(std::size_t k) {
    static constexpr double q[9] = {1.960, 2.343, 2.569, 2.728, 2.850,
                                    2.949, 3.031, 3.102, 3.164};
    if (k < 2 || k > 10) throw KOutOfTableRange("k must be in 2..10");
    return q[k - 2];
}

// CD = q_alpha(k) * sqrt(k(k+1) / (6N)); only alpha = 0.05 is tabulated.
inline double nemenyi_cd(std::size_t k, std::size_t n_tasks, double alpha = 0.05) {
    if (alpha != 0.05) throw KOutOfTableRange("only alpha = 0.05 is tabulated");
    if (n_tasks < 1) throw BadConfig("need N >= 1 tasks");
    return nemenyi_q05(k) * std::sqrt(double(k * (k + 1)) / (6.0 * double(n_tasks)));
}

inline RankTable build_rank_table(std::vector<std::string> models, std::vector<std::string> tasks,
                                  std::vector<std::vector<double>> values,
                                  const std::vector<char>& higher_is_better,
                                  bool with_cd = true) {
    RankTable t;
    t.models = std::move(models);
    t.tasks = std::move(tasks);
    t.values = std::move(values);
    t.ranks = rank_models(t.values, higher_is_better);
    const std::size_t k = t.models.size(), n = t.tasks.size();
    t.avg_rank.resize(k);
    for (std::size_t m = 0; m < k; ++m)
        t.avg_rank[m] = std::accumulate(t.ranks[m].begin(), t.ranks[m].end(), 0.0) / double(n);
    if (with_cd && k >= 2 && k <= 10) {
        t.cd = nemenyi_cd(k, n);
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = a + 1; b < k; ++b)
                if (std::abs(t.avg_rank[a] - t.avg_rank[b]) > t.cd)
                    t.significant_pairs.emplace_back(a, b);
    }
    return t;
}

}  // namespace mammolab
