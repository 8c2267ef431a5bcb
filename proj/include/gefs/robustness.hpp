#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <span>
#include <thread>
#include <vector>

#include "gefs/circuit.hpp"
#include "gefs/dataset.hpp"
#include "gefs/error.hpp"

namespace gefs {

/// Parameters of the epsilon-contamination set.
///
/// Every sum node's weights w range over {(1-eps) w + eps v : v in simplex};
/// class and categorical factors are contaminated the same way; each Normal
/// mean ranges over mu +- mean_scale * eps * sigma with sigma held fixed.
struct ContaminationSpec {
    double epsilon = 0.0;
    /// Contaminate the uniform mixture node over the trees of a GeF+.
    bool contaminate_root_mixture = true;
    double mean_scale = 1.0;
};

/// Which nodes credal propagation visits. Both give bit-identical results for
/// fully observed inputs, since off-path subtrees evaluate to exactly zero.
enum class Traversal { path, full };

struct DiffBounds {
    double lower = 0.0;
    double upper = 0.0;
};

namespace detail {

/// log range of the contaminated product of a leaf's feature factors (truncation constant included).
struct FeatureBounds {
    double log_lower = 0.0;
    double log_upper = 0.0;
};

inline void check_contamination(const ContaminationSpec& spec) {
    if (!(spec.epsilon >= 0.0 && spec.epsilon <= 1.0)) throw Error("contamination: epsilon must lie in [0, 1]");
    if (!(spec.mean_scale >= 0.0)) throw Error("contamination: mean scale must be non-negative");
}

/// x must be fully observed and inside the leaf's cell. The truncation mass
/// is a fixed per-leaf constant evaluated at the fitted means.
inline FeatureBounds leaf_feature_bounds(const LeafDensity& leaf, const Schema& schema, std::span<const double> x, double eps, double mean_scale) {
    FeatureBounds b;
    const std::size_t m = schema.feature_count();
    for (std::size_t j = 0; j < m; ++j) {
        const double v = x[j];
        if (schema.is_categorical(j)) {
            const double q = leaf.category_prob(schema, j, v);
            b.log_lower += std::log((1.0 - eps) * q);
            b.log_upper += std::log((1.0 - eps) * q + eps);
            continue;
        }
        const double mu = leaf.mean[j];
        const double sigma = leaf.stddev[j];
        const double half = mean_scale * eps * sigma;
        const double lo = mu - half;
        const double hi = mu + half;
        const double nearest = std::clamp(v, lo, hi);
        const double farthest = (v - lo) >= (hi - v) ? lo : hi;
        b.log_upper += normal_log_pdf(v, nearest, sigma);
        b.log_lower += normal_log_pdf(v, farthest, sigma);
    }
    const double t = leaf.truncation_log_mass();
    b.log_lower -= t;
    b.log_upper -= t;
    return b;
}

/// Range of (q'_{alt} - q'_{y}) over the contaminated class distribution.
inline DiffBounds class_diff_range(const LeafDensity& leaf, Label y, Label alt, double eps) {
    const double base = (1.0 - eps) * (leaf.class_probs[alt] - leaf.class_probs[y]);
    return {base - eps, base + eps};
}

/// Max of F * d over F in [exp(lo), exp(hi)] (scaled by exp(-log_scale)) and fixed d.
inline double scaled_product_max(const FeatureBounds& fb, double d, double log_scale) {
    return d >= 0.0 ? std::exp(fb.log_upper - log_scale) * d : std::exp(fb.log_lower - log_scale) * d;
}

inline double scaled_product_min(const FeatureBounds& fb, double d, double log_scale) {
    return d >= 0.0 ? std::exp(fb.log_lower - log_scale) * d : std::exp(fb.log_upper - log_scale) * d;
}

/// Contaminated max of a sum node whose child maxima are m0, m1.
inline double contaminated_sum(const std::array<double, 2>& w, double m0, double m1, double eps) {
    return (1.0 - eps) * (w[0] * m0 + w[1] * m1) + eps * std::max(m0, m1);
}

}  // namespace detail

/// Bounds of the contaminated leaf value p(x, alt) - p(x, y). Zero when x is outside the cell.
inline DiffBounds leaf_diff_bounds(const LeafDensity& leaf, const Schema& schema, std::span<const double> x, Label y, Label alt,
                                   double eps, double mean_scale = 1.0) {
    if (y == alt) throw Error("leaf_diff_bounds: labels must differ");
    detail::check_contamination({eps, true, mean_scale});
    check_evidence(schema, x);
    for (double v : x)
        if (is_missing(v)) throw DataError("leaf_diff_bounds: evidence must be fully observed");
    if (!leaf.cell.contains(x)) return {0.0, 0.0};
    const auto fb = detail::leaf_feature_bounds(leaf, schema, x, eps, mean_scale);
    const auto d = detail::class_diff_range(leaf, y, alt, eps);
    return {detail::scaled_product_min(fb, d.lower, 0.0), detail::scaled_product_max(fb, d.upper, 0.0)};
}

/// Per-instance state of credal max propagation at one epsilon.
///
/// Leaf feature bounds do not depend on the class pair, so they are computed
/// once here and reused for every max_diff query. Values are carried scaled
/// by exp(-log_scale) so high-dimensional densities do not underflow; the
/// sign of a scaled value is the sign of the true value.
class CredalQuery {
public:
    CredalQuery(const GeFPlus& model, std::span<const double> x, const ContaminationSpec& spec, Traversal traversal = Traversal::path)
        : schema_(model.schema.get()), spec_(spec), traversal_(traversal), mixture_(true) {
        for (const auto& g : model.components) components_.push_back(&g);
        init(x);
    }

    CredalQuery(const GeDT& model, std::span<const double> x, const ContaminationSpec& spec, Traversal traversal = Traversal::path)
        : schema_(model.schema.get()), spec_(spec), traversal_(traversal), mixture_(false) {
        components_.push_back(&model);
        init(x);
    }

    double log_scale() const noexcept { return log_scale_; }

    /// max over the contamination set of p(x, alt) - p(x, y), times exp(-log_scale()).
    double scaled_max_diff(Label y, Label alt) const {
        const std::size_t classes = schema_->class_count();
        if (y >= classes || alt >= classes) throw DataError("credal query: class label out of range");
        if (y == alt) throw Error("credal query: labels must differ");
        const double eps = spec_.epsilon;
        std::vector<double> values(components_.size());
        for (std::size_t j = 0; j < components_.size(); ++j) {
            values[j] = traversal_ == Traversal::path ? path_value(j, y, alt) : full_value(j, components_[j]->nodes.front(), y, alt);
        }
        if (!mixture_) return values.front();
        const double w = 1.0 / static_cast<double>(values.size());
        double mean = 0.0;
        for (double v : values) mean += w * v;
        if (!spec_.contaminate_root_mixture) return mean;
        return (1.0 - eps) * mean + eps * *std::max_element(values.begin(), values.end());
    }

    double max_diff(Label y, Label alt) const { return scaled_max_diff(y, alt) * std::exp(log_scale_); }

    /// True iff every alternative class has a negative contaminated max difference.
    bool robust_for(Label y) const {
        for (Label alt = 0; alt < schema_->class_count(); ++alt) {
            if (alt == y) continue;
            if (!(scaled_max_diff(y, alt) < 0.0)) return false;
        }
        return true;
    }

private:
    struct Step {
        const SumNode* node;
        int taken;
    };

    void init(std::span<const double> x) {
        detail::check_contamination(spec_);
        check_evidence(*schema_, x);
        for (double v : x)
            if (is_missing(v)) throw DataError("robustness: evidence must be fully observed");
        x_.assign(x.begin(), x.end());
        paths_.resize(components_.size());
        leaf_of_.resize(components_.size());
        bounds_.resize(components_.size());
        log_scale_ = neg_inf;
        for (std::size_t j = 0; j < components_.size(); ++j) {
            const GeDT& g = *components_[j];
            if (traversal_ == Traversal::path) {
                std::uint32_t node = 0;
                while (const auto* s = std::get_if<SumNode>(&g.nodes[node])) {
                    const int k = s->test.goes_left(x_[s->test.feature]) ? 0 : 1;
                    paths_[j].push_back({s, k});
                    node = s->children[static_cast<std::size_t>(k)];
                }
                const auto leaf = std::get<LeafRef>(g.nodes[node]).leaf;
                leaf_of_[j] = leaf;
                bounds_[j].assign(1, detail::leaf_feature_bounds(g.leaves[leaf], *schema_, x_, spec_.epsilon, spec_.mean_scale));
                log_scale_ = std::max(log_scale_, bounds_[j][0].log_upper);
            } else {
                bounds_[j].assign(g.leaves.size(), {});
                contained_.emplace_back(g.leaves.size(), false);
                for (std::size_t l = 0; l < g.leaves.size(); ++l) {
                    if (!g.leaves[l].cell.contains(x_)) continue;
                    contained_.back()[l] = true;
                    bounds_[j][l] = detail::leaf_feature_bounds(g.leaves[l], *schema_, x_, spec_.epsilon, spec_.mean_scale);
                    log_scale_ = std::max(log_scale_, bounds_[j][l].log_upper);
                }
            }
        }
        if (!std::isfinite(log_scale_)) log_scale_ = 0.0;
    }

    double leaf_value(const LeafDensity& leaf, const detail::FeatureBounds& fb, Label y, Label alt) const {
        const auto d = detail::class_diff_range(leaf, y, alt, spec_.epsilon);
        return detail::scaled_product_max(fb, d.upper, log_scale_);
    }

    double path_value(std::size_t j, Label y, Label alt) const {
        const GeDT& g = *components_[j];
        double value = leaf_value(g.leaves[leaf_of_[j]], bounds_[j][0], y, alt);
        const auto& path = paths_[j];
        for (auto it = path.rbegin(); it != path.rend(); ++it) {
            const double m0 = it->taken == 0 ? value : 0.0;
            const double m1 = it->taken == 1 ? value : 0.0;
            value = detail::contaminated_sum(it->node->weights, m0, m1, spec_.epsilon);
        }
        return value;
    }

    double full_value(std::size_t j, const CircuitNode& node, Label y, Label alt) const {
        const GeDT& g = *components_[j];
        if (const auto* s = std::get_if<SumNode>(&node)) {
            const double m0 = full_value(j, g.nodes[s->children[0]], y, alt);
            const double m1 = full_value(j, g.nodes[s->children[1]], y, alt);
            return detail::contaminated_sum(s->weights, m0, m1, spec_.epsilon);
        }
        const auto leaf = std::get<LeafRef>(node).leaf;
        if (!contained_[j][leaf]) return 0.0;
        return leaf_value(g.leaves[leaf], bounds_[j][leaf], y, alt);
    }

    const Schema* schema_;
    ContaminationSpec spec_;
    Traversal traversal_;
    bool mixture_;
    std::vector<const GeDT*> components_;
    std::vector<double> x_;
    std::vector<std::vector<Step>> paths_;
    std::vector<std::uint32_t> leaf_of_;
    std::vector<std::vector<detail::FeatureBounds>> bounds_;
    std::vector<std::vector<bool>> contained_;
    double log_scale_ = 0.0;
};

/// max over the contamination set of p(x, alt) - p(x, y).
///
/// Its sign equals that of max E[1{Y=alt} - 1{Y=y} | x], since p(x) > 0.
template <class Model>
double credal_max_diff(const Model& model, std::span<const double> x, Label y, Label alt, const ContaminationSpec& spec,
                       Traversal traversal = Traversal::path) {
    return CredalQuery(model, x, spec, traversal).max_diff(y, alt);
}

/// Whether `predicted` stays the strict winner over the whole contamination set.
template <class Model>
bool is_robust_at(const Model& model, std::span<const double> x, Label predicted, const ContaminationSpec& spec,
                  Traversal traversal = Traversal::path) {
    if (predicted >= model.schema->class_count()) throw DataError("is_robust_at: class label out of range");
    return CredalQuery(model, x, spec, traversal).robust_for(predicted);
}

struct RobustnessOptions {
    /// Search resolution; ceil(log2(1/tol)) bisection steps.
    double tol = 1e-3;
    bool contaminate_root_mixture = true;
    double mean_scale = 1.0;
    Traversal traversal = Traversal::path;
};

struct RobustnessResult {
    Label predicted_label = 0;
    /// Largest epsilon verified robust by the search; within tol of the true maximum.
    double epsilon_star = 0.0;
    std::size_t iterations = 0;
    /// False when the prediction is not robust even at epsilon = 0 (a tie).
    bool certified = false;
};

inline std::size_t search_iterations(double tol) {
    if (!(tol > 0.0 && tol < 1.0)) throw Error("robustness: tol must lie in (0, 1)");
    return static_cast<std::size_t>(std::ceil(std::log2(1.0 / tol)));
}

/// Epsilon-robustness of the prediction at x by bisection on [0, 1].
template <class Model>
RobustnessResult robustness_epsilon(const Model& model, std::span<const double> x, const RobustnessOptions& options = {}) {
    const std::size_t steps = search_iterations(options.tol);
    RobustnessResult result;
    result.predicted_label = predict(model, x);
    auto robust = [&](double eps) {
        return CredalQuery(model, x, ContaminationSpec{eps, options.contaminate_root_mixture, options.mean_scale}, options.traversal)
            .robust_for(result.predicted_label);
    };
    if (!robust(0.0)) return result;
    result.certified = true;
    if (robust(1.0)) {
        result.epsilon_star = 1.0;
        return result;
    }
    double lo = 0.0;
    double hi = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
        const double mid = lo + (hi - lo) / 2;
        if (robust(mid)) lo = mid;
        else hi = mid;
        ++result.iterations;
    }
    result.epsilon_star = lo;
    return result;
}

/// robustness_epsilon for every row, evaluated in parallel; output in row order.
template <class Model>
std::vector<RobustnessResult> robustness_all(const Model& model, const DataTable& table, const RobustnessOptions& options = {},
                                             unsigned threads = 0) {
    std::vector<RobustnessResult> out(table.rows());
    std::vector<std::exception_ptr> errors(table.rows());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < table.rows(); i = next++) {
            try {
                out[i] = robustness_epsilon(model, table.row(i), options);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    {
        std::vector<std::jthread> pool;
        for (unsigned i = 1; i < threads; ++i) pool.emplace_back(worker);
        worker();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

}  // namespace gefs
