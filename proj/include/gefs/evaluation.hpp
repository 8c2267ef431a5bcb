#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gefs/circuit.hpp"
#include "gefs/dataset.hpp"
#include "gefs/error.hpp"
#include "gefs/robustness.hpp"

namespace gefs {

/// Per-row scores tagged with where the rows came from.
struct ScoreSeries {
    std::vector<double> scores;
    std::vector<std::size_t> ids;
    std::string source;
};

/// log p(x) per row. Lower means more anomalous.
template <class Model>
ScoreSeries outlier_scores(const Model& model, const DataTable& table, std::string source = "in-domain") {
    ScoreSeries s{{}, {}, std::move(source)};
    s.scores.reserve(table.rows());
    for (std::size_t i = 0; i < table.rows(); ++i) {
        s.scores.push_back(log_marginal(model, table.row(i)));
        s.ids.push_back(i);
    }
    return s;
}

/// max_y p(y | x) per row.
template <class Model>
ScoreSeries confidence_scores(const Model& model, const DataTable& table, std::string source = "in-domain") {
    ScoreSeries s{{}, {}, std::move(source)};
    for (std::size_t i = 0; i < table.rows(); ++i) {
        const auto p = posterior(model, table.row(i));
        s.scores.push_back(*std::max_element(p.begin(), p.end()));
        s.ids.push_back(i);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Gaussian KDE baseline

struct BandwidthRule {
    enum class Kind { silverman, fixed } kind = Kind::silverman;
    double value = 1.0;

    static BandwidthRule fixed_width(double h) { return {Kind::fixed, h}; }
};

/// Product-Gaussian kernel density over one-hot encoded rows.
struct KdeModel {
    SchemaPtr schema;
    std::size_t dims = 0;
    std::vector<double> points;  // rows x dims
    std::vector<double> bandwidth;
};

/// Continuous features map to one dimension, categorical ones to one 0/1 dimension per category.
inline std::vector<double> kde_encode(const Schema& schema, std::span<const double> x) {
    std::vector<double> out;
    for (std::size_t j = 0; j < schema.feature_count(); ++j) {
        if (is_missing(x[j])) throw DataError("kde: missing values are not supported");
        if (!schema.is_categorical(j)) {
            out.push_back(x[j]);
            continue;
        }
        const std::size_t card = schema.feature(j).cardinality;
        for (std::size_t k = 0; k < card; ++k) out.push_back(static_cast<double>(k) == x[j] ? 1.0 : 0.0);
    }
    return out;
}

/// Silverman's rule per dimension: h_j = sigma_j * (4 / ((d + 2) n))^(1 / (d + 4)).
inline KdeModel kde_fit(const DataTable& table, const BandwidthRule& rule = {}) {
    if (table.rows() < 2) throw DataError("kde: need at least two rows");
    KdeModel kde;
    kde.schema = table.schema_ptr();
    for (std::size_t i = 0; i < table.rows(); ++i) {
        auto e = kde_encode(table.schema(), table.row(i));
        kde.dims = e.size();
        kde.points.insert(kde.points.end(), e.begin(), e.end());
    }
    const std::size_t n = table.rows();
    const std::size_t d = kde.dims;
    kde.bandwidth.assign(d, rule.value);
    if (rule.kind == BandwidthRule::Kind::fixed) {
        if (!(rule.value > 0)) throw DataError("kde: bandwidth must be positive");
        return kde;
    }
    const double factor = std::pow(4.0 / ((static_cast<double>(d) + 2.0) * static_cast<double>(n)), 1.0 / (static_cast<double>(d) + 4.0));
    for (std::size_t k = 0; k < d; ++k) {
        long double sum = 0;
        for (std::size_t i = 0; i < n; ++i) sum += kde.points[i * d + k];
        const long double mean = sum / static_cast<long double>(n);
        long double sq = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const long double dv = kde.points[i * d + k] - mean;
            sq += dv * dv;
        }
        const double sd = static_cast<double>(std::sqrt(sq / static_cast<long double>(n - 1)));
        kde.bandwidth[k] = std::max(sd * factor, 1e-6 * std::max(1.0, std::abs(static_cast<double>(mean))));
    }
    return kde;
}

inline double kde_log_pdf(const KdeModel& kde, std::span<const double> x) {
    check_evidence(*kde.schema, x);
    const auto e = kde_encode(*kde.schema, x);
    const std::size_t d = kde.dims;
    const std::size_t n = kde.points.size() / d;
    double log_norm = 0.0;
    for (double h : kde.bandwidth) log_norm -= std::log(h) + 0.5 * std::log(2.0 * std::numbers::pi);
    std::vector<double> terms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double z = (e[k] - kde.points[i * d + k]) / kde.bandwidth[k];
            s -= 0.5 * z * z;
        }
        terms[i] = s;
    }
    return log_sum_exp(terms) + log_norm - std::log(static_cast<double>(n));
}

inline ScoreSeries kde_scores(const KdeModel& kde, const DataTable& table, std::string source = "in-domain") {
    ScoreSeries s{{}, {}, std::move(source)};
    for (std::size_t i = 0; i < table.rows(); ++i) {
        s.scores.push_back(kde_log_pdf(kde, table.row(i)));
        s.ids.push_back(i);
    }
    return s;
}

// ---------------------------------------------------------------------------
// ROC

/// P(score+ > score-) + 0.5 P(score+ = score-), by a sorted sweep.
inline double roc_auc(std::span<const double> positives, std::span<const double> negatives) {
    if (positives.empty() || negatives.empty()) throw Error("roc_auc: both score sets must be non-empty");
    std::vector<double> pos(positives.begin(), positives.end());
    std::vector<double> neg(negatives.begin(), negatives.end());
    for (double v : pos)
        if (std::isnan(v)) throw Error("roc_auc: NaN score");
    for (double v : neg)
        if (std::isnan(v)) throw Error("roc_auc: NaN score");
    std::sort(pos.begin(), pos.end());
    std::sort(neg.begin(), neg.end());
    // twice the number of (pos, neg) wins, counting ties as one half.
    unsigned long long twice_wins = 0;
    std::size_t below = 0;
    std::size_t i = 0;
    while (i < pos.size()) {
        std::size_t j = i;
        while (j < pos.size() && pos[j] == pos[i]) ++j;
        while (below < neg.size() && neg[below] < pos[i]) ++below;
        std::size_t equal_end = below;
        while (equal_end < neg.size() && neg[equal_end] == pos[i]) ++equal_end;
        twice_wins += static_cast<unsigned long long>(j - i) * (2 * below + (equal_end - below));
        i = j;
    }
    const unsigned long long twice_total = 2ULL * pos.size() * neg.size();
    // Evaluate the smaller side directly so auc(A, B) + auc(B, A) == 1 exactly.
    if (2 * twice_wins <= twice_total) return static_cast<double>(twice_wins) / static_cast<double>(twice_total);
    return 1.0 - static_cast<double>(twice_total - twice_wins) / static_cast<double>(twice_total);
}

// ---------------------------------------------------------------------------
// Robustness vs accuracy

struct CurvePoint {
    double threshold = 0.0;
    /// Accuracy over rows with epsilon* < threshold; absent when fewer than min_bucket rows.
    std::optional<double> acc_below;
    /// Accuracy over rows with epsilon* >= threshold.
    std::optional<double> acc_above;
    std::size_t n_below = 0;
    std::size_t n_above = 0;
};

inline std::vector<double> default_threshold_grid() {
    std::vector<double> grid;
    for (int i = 0; i <= 20; ++i) grid.push_back(i / 20.0);
    return grid;
}

/// Buckets precomputed (epsilon*, correct) pairs at each threshold.
inline std::vector<CurvePoint> accuracy_curves(std::span<const double> epsilon_star, const std::vector<bool>& correct,
                                               std::span<const double> thresholds, std::size_t min_bucket = 30) {
    if (epsilon_star.size() != correct.size()) throw Error("curves: size mismatch");
    std::vector<CurvePoint> out;
    for (double t : thresholds) {
        CurvePoint p;
        p.threshold = t;
        std::size_t right_below = 0;
        std::size_t right_above = 0;
        for (std::size_t i = 0; i < epsilon_star.size(); ++i) {
            if (epsilon_star[i] < t) {
                ++p.n_below;
                right_below += correct[i] ? 1 : 0;
            } else {
                ++p.n_above;
                right_above += correct[i] ? 1 : 0;
            }
        }
        if (p.n_below >= min_bucket && p.n_below > 0) p.acc_below = static_cast<double>(right_below) / static_cast<double>(p.n_below);
        if (p.n_above >= min_bucket && p.n_above > 0) p.acc_above = static_cast<double>(right_above) / static_cast<double>(p.n_above);
        out.push_back(p);
    }
    return out;
}

/// Computes epsilon* once per labelled row, then the curves.
template <class Model>
std::vector<CurvePoint> robustness_accuracy_curves(const Model& model, const DataTable& table, std::span<const double> thresholds,
                                                   std::size_t min_bucket = 30, const RobustnessOptions& options = {}) {
    if (!table.has_labels()) throw DataError("curves: table has no class labels");
    const auto results = robustness_all(model, table, options);
    std::vector<double> eps(results.size());
    std::vector<bool> correct(results.size());
    for (std::size_t i = 0; i < results.size(); ++i) {
        eps[i] = results[i].epsilon_star;
        correct[i] = results[i].predicted_label == table.label(i);
    }
    return accuracy_curves(eps, correct, thresholds, min_bucket);
}

/// Ids of the k lowest and k highest scores. Ties are ordered by id.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> rank_extremes(const ScoreSeries& series, std::size_t k) {
    if (series.scores.size() != series.ids.size()) throw Error("rank_extremes: scores and ids differ in length");
    std::vector<std::size_t> order(series.scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    k = std::min(k, order.size());
    auto ascending = [&](std::size_t a, std::size_t b) {
        if (series.scores[a] != series.scores[b]) return series.scores[a] < series.scores[b];
        return series.ids[a] < series.ids[b];
    };
    auto descending = [&](std::size_t a, std::size_t b) {
        if (series.scores[a] != series.scores[b]) return series.scores[a] > series.scores[b];
        return series.ids[a] < series.ids[b];
    };
    std::vector<std::size_t> low = order;
    std::partial_sort(low.begin(), low.begin() + static_cast<std::ptrdiff_t>(k), low.end(), ascending);
    std::vector<std::size_t> high = order;
    std::partial_sort(high.begin(), high.begin() + static_cast<std::ptrdiff_t>(k), high.end(), descending);
    std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < k; ++i) {
        out.first.push_back(series.ids[low[i]]);
        out.second.push_back(series.ids[high[i]]);
    }
    return out;
}

}  // namespace gefs
