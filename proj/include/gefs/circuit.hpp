#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <variant>
#include <vector>

#include "gefs/dataset.hpp"
#include "gefs/error.hpp"
#include "gefs/forest.hpp"

namespace gefs {

inline constexpr double neg_inf = -std::numeric_limits<double>::infinity();

/// log(sum(exp(v))) with max subtraction. A single finite element is returned unchanged.
inline double log_sum_exp(std::span<const double> v) {
    if (v.empty()) return neg_inf;
    const double hi = *std::max_element(v.begin(), v.end());
    if (hi == neg_inf) return neg_inf;
    if (std::isinf(hi)) return hi;
    double sum = 0.0;
    for (double x : v) sum += std::exp(x - hi);
    return hi + std::log(sum);
}

inline double normal_log_pdf(double x, double mean, double stddev) {
    const double z = (x - mean) / stddev;
    return -0.5 * z * z - std::log(stddev) - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double standard_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// log P(lower < X <= upper) for X ~ Normal(mean, stddev), accurate in both tails.
inline double normal_log_interval_mass(double lower, double upper, double mean, double stddev) {
    const double a = (lower - mean) / stddev;
    const double b = (upper - mean) / stddev;
    double mass;
    if (a > 0) mass = standard_normal_cdf(-a) - standard_normal_cdf(-b);
    else if (b < 0) mass = standard_normal_cdf(b) - standard_normal_cdf(a);
    else mass = 1.0 - standard_normal_cdf(a) - standard_normal_cdf(-b);
    return std::log(std::max(mass, std::numeric_limits<double>::min()));
}

// ---------------------------------------------------------------------------
// Leaf cells and densities

/// lower < x <= upper on a continuous feature.
struct IntervalConstraint {
    std::size_t feature = 0;
    double lower = -std::numeric_limits<double>::infinity();
    double upper = std::numeric_limits<double>::infinity();

    bool contains(double v) const noexcept { return lower < v && v <= upper; }
};

/// Allowed codes of a categorical feature.
struct CategoryConstraint {
    std::size_t feature = 0;
    std::vector<bool> allowed;

    bool contains(double v) const noexcept {
        const auto k = static_cast<std::size_t>(v);
        return k < allowed.size() && allowed[k];
    }
};

/// Axis-aligned box of a leaf. Only features tested on the root-to-leaf path
/// are constrained. Missing values satisfy every constraint.
struct Cell {
    std::vector<IntervalConstraint> intervals;
    std::vector<CategoryConstraint> categories;

    bool contains(std::span<const double> x) const {
        for (const auto& c : intervals)
            if (!is_missing(x[c.feature]) && !c.contains(x[c.feature])) return false;
        for (const auto& c : categories)
            if (!is_missing(x[c.feature]) && !c.contains(x[c.feature])) return false;
        return true;
    }

    /// Narrows the box by one decision edge.
    void restrict(const SplitTest& test, bool left, std::size_t cardinality) {
        if (test.kind == SplitTest::Kind::threshold) {
            auto it = std::find_if(intervals.begin(), intervals.end(), [&](const auto& c) { return c.feature == test.feature; });
            if (it == intervals.end()) {
                intervals.push_back({test.feature});
                it = intervals.end() - 1;
            }
            if (left) it->upper = std::min(it->upper, test.threshold);
            else it->lower = std::max(it->lower, test.threshold);
        } else {
            auto it = std::find_if(categories.begin(), categories.end(), [&](const auto& c) { return c.feature == test.feature; });
            if (it == categories.end()) {
                categories.push_back({test.feature, std::vector<bool>(cardinality, true)});
                it = categories.end() - 1;
            }
            for (std::size_t k = 0; k < cardinality; ++k)
                if ((k == test.category) != left) it->allowed[k] = false;
        }
    }

    void canonicalize() {
        std::sort(intervals.begin(), intervals.end(), [](const auto& a, const auto& b) { return a.feature < b.feature; });
        std::sort(categories.begin(), categories.end(), [](const auto& a, const auto& b) { return a.feature < b.feature; });
    }
};

struct LeafConfig {
    /// Additive smoothing for class and categorical factors.
    double alpha = 1.0;
    /// Divide each Normal factor by its mass inside the cell so the leaf integrates to one.
    bool truncate = true;
    /// sigma_min = max(sigma_floor_absolute, sigma_floor_relative * global feature std).
    double sigma_floor_relative = 1e-3;
    double sigma_floor_absolute = 1e-6;
};

/// Fully factorised leaf density restricted to a cell:
/// p(x, y) = 1{x in cell} * prod_j p_j(x_j) * q(y), with Normal factors for
/// continuous features and cell-restricted Multinomials for categorical ones.
struct LeafDensity {
    Cell cell;
    /// Per feature; unused (0) for categorical features.
    std::vector<double> mean;
    std::vector<double> stddev;
    /// Categorical factor probabilities, pooled at Schema::category_offset(j).
    std::vector<double> category_probs;
    std::vector<double> class_probs;
    /// log mass of the Normal factor inside each cell interval, parallel to cell.intervals.
    std::vector<double> interval_log_mass;
    bool truncated = true;

    /// Sum of interval_log_mass when truncation is on, else 0.
    double truncation_log_mass() const {
        if (!truncated) return 0.0;
        double s = 0.0;
        for (double v : interval_log_mass) s += v;
        return s;
    }

    double category_prob(const Schema& schema, std::size_t feature, double code) const {
        return category_probs[schema.category_offset(feature) + static_cast<std::size_t>(code)];
    }
};

/// Per-feature Normal std floors from the training table.
inline std::vector<double> sigma_floors(const DataTable& table, const LeafConfig& config) {
    const std::size_t m = table.feature_count();
    std::vector<double> floors(m, config.sigma_floor_absolute);
    for (std::size_t j = 0; j < m; ++j) {
        if (table.schema().is_categorical(j) || table.rows() == 0) continue;
        long double sum = 0;
        for (std::size_t i = 0; i < table.rows(); ++i) sum += table.value(i, j);
        const long double mean = sum / static_cast<long double>(table.rows());
        long double sq = 0;
        for (std::size_t i = 0; i < table.rows(); ++i) {
            const long double d = table.value(i, j) - mean;
            sq += d * d;
        }
        const double sd = static_cast<double>(std::sqrt(sq / static_cast<long double>(table.rows())));
        floors[j] = std::max(config.sigma_floor_absolute, config.sigma_floor_relative * sd);
    }
    return floors;
}

/// Fits the leaf factors on `rows` of `table`.
///
/// Normals use the sample mean and population std floored at `floors[j]`.
/// Categorical factors smooth counts over the cell's allowed categories only,
/// so no smoothed mass falls outside the cell.
inline LeafDensity fit_leaf_density(const DataTable& table, std::span<const std::size_t> rows, Cell cell,
                                    const LeafConfig& config, std::span<const double> floors) {
    if (rows.empty()) throw ModelError("fit_leaf_density: leaf has no rows");
    if (config.alpha < 0) throw ModelError("fit_leaf_density: smoothing must be non-negative");
    const Schema& schema = table.schema();
    const std::size_t m = schema.feature_count();
    const auto n = static_cast<double>(rows.size());
    cell.canonicalize();

    LeafDensity leaf;
    leaf.truncated = config.truncate;
    leaf.mean.assign(m, 0.0);
    leaf.stddev.assign(m, 0.0);
    leaf.category_probs.assign(schema.total_categories(), 0.0);

    for (std::size_t j = 0; j < m; ++j) {
        if (!schema.is_categorical(j)) {
            long double sum = 0;
            for (auto r : rows) sum += table.value(r, j);
            const long double mu = sum / static_cast<long double>(rows.size());
            long double sq = 0;
            for (auto r : rows) {
                const long double d = table.value(r, j) - mu;
                sq += d * d;
            }
            leaf.mean[j] = static_cast<double>(mu);
            leaf.stddev[j] = std::max(static_cast<double>(std::sqrt(sq / static_cast<long double>(rows.size()))), floors[j]);
            continue;
        }
        const std::size_t card = schema.feature(j).cardinality;
        std::vector<bool> allowed(card, true);
        for (const auto& c : cell.categories)
            if (c.feature == j) allowed = c.allowed;
        std::vector<double> counts(card, 0.0);
        for (auto r : rows) counts[static_cast<std::size_t>(table.value(r, j))] += 1.0;
        const auto n_allowed = static_cast<double>(std::count(allowed.begin(), allowed.end(), true));
        const double denom = n + config.alpha * n_allowed;
        const std::size_t off = schema.category_offset(j);
        for (std::size_t k = 0; k < card; ++k)
            leaf.category_probs[off + k] = allowed[k] ? (counts[k] + config.alpha) / denom : 0.0;
    }

    const std::size_t classes = schema.class_count();
    std::vector<double> class_counts(classes, 0.0);
    for (auto r : rows) class_counts[table.label(r)] += 1.0;
    leaf.class_probs.resize(classes);
    const double class_denom = n + config.alpha * static_cast<double>(classes);
    for (std::size_t c = 0; c < classes; ++c) leaf.class_probs[c] = (class_counts[c] + config.alpha) / class_denom;

    for (const auto& iv : cell.intervals)
        leaf.interval_log_mass.push_back(normal_log_interval_mass(iv.lower, iv.upper, leaf.mean[iv.feature], leaf.stddev[iv.feature]));
    leaf.cell = std::move(cell);
    return leaf;
}

/// log of prod_j p_j(x_j) over observed features, with the cell-mass terms;
/// -inf outside the cell. Class factor excluded.
///
/// Missing continuous features integrate out: a truncated factor contributes 1,
/// an untruncated one contributes its mass inside the cell.
inline double leaf_feature_log_density(const LeafDensity& leaf, const Schema& schema, std::span<const double> x) {
    if (!leaf.cell.contains(x)) return neg_inf;
    double s = 0.0;
    const std::size_t m = schema.feature_count();
    for (std::size_t j = 0; j < m; ++j) {
        const double v = x[j];
        if (is_missing(v)) continue;
        if (schema.is_categorical(j)) s += std::log(leaf.category_prob(schema, j, v));
        else s += normal_log_pdf(v, leaf.mean[j], leaf.stddev[j]);
    }
    for (std::size_t k = 0; k < leaf.cell.intervals.size(); ++k) {
        const bool observed = !is_missing(x[leaf.cell.intervals[k].feature]);
        if (leaf.truncated && observed) s -= leaf.interval_log_mass[k];
        if (!leaf.truncated && !observed) s += leaf.interval_log_mass[k];
    }
    return s;
}

// ---------------------------------------------------------------------------
// Generative decision trees

/// Sum node born from a decision node. Child 0 carries the indicator of the
/// test holding, child 1 of its negation.
struct SumNode {
    SplitTest test;
    std::array<std::uint32_t, 2> children{};
    std::array<double, 2> weights{};
};

struct LeafRef {
    std::uint32_t leaf = 0;
};

using CircuitNode = std::variant<SumNode, LeafRef>;

/// Tree-shaped circuit over (X, Y): internal nodes are sum nodes, leaves are
/// LeafDensity. Node 0 is the root.
struct GeDT {
    SchemaPtr schema;
    std::vector<CircuitNode> nodes;
    std::vector<LeafDensity> leaves;

    void validate() const {
        if (!schema) throw ModelError("circuit: missing schema");
        if (nodes.empty()) throw ModelError("circuit: no nodes");
        const std::size_t m = schema->feature_count();
        std::vector<int> parents(nodes.size(), 0);
        std::vector<int> leaf_uses(leaves.size(), 0);
        for (const auto& node : nodes) {
            if (const auto* s = std::get_if<SumNode>(&node)) {
                for (auto c : s->children) {
                    if (c == 0 || c >= nodes.size()) throw ModelError("circuit: bad child index");
                    ++parents[c];
                }
                if (s->test.feature >= m) throw ModelError("circuit: split feature out of range");
                for (double w : s->weights)
                    if (!(w >= 0.0)) throw ModelError("circuit: negative sum weight");
                if (std::abs(s->weights[0] + s->weights[1] - 1.0) > 1e-9) throw ModelError("circuit: sum weights do not add to one");
            } else {
                const auto idx = std::get<LeafRef>(node).leaf;
                if (idx >= leaves.size()) throw ModelError("circuit: bad leaf index");
                ++leaf_uses[idx];
            }
        }
        for (std::size_t i = 1; i < nodes.size(); ++i)
            if (parents[i] != 1) throw ModelError("circuit: not tree-shaped");
        for (int u : leaf_uses)
            if (u != 1) throw ModelError("circuit: leaf referenced more than once");
        for (const auto& leaf : leaves) {
            if (leaf.class_probs.size() != schema->class_count() || leaf.mean.size() != m || leaf.stddev.size() != m ||
                leaf.category_probs.size() != schema->total_categories() || leaf.interval_log_mass.size() != leaf.cell.intervals.size())
                throw ModelError("circuit: leaf parameter sizes do not match the schema");
            for (std::size_t j = 0; j < m; ++j)
                if (!schema->is_categorical(j) && !(leaf.stddev[j] > 0.0)) throw ModelError("circuit: non-positive std");
        }
    }
};

/// GeDT of `tree`, whose leaves' row indices refer to `table`.
inline GeDT convert_tree(const DecisionTree& tree, const DataTable& table, const LeafConfig& config, std::span<const double> floors) {
    const Schema& schema = table.schema();
    if (tree.feature_count() != schema.feature_count() || tree.class_count() != schema.class_count())
        throw ModelError("convert_tree: tree does not match the table schema");
    GeDT out;
    out.schema = table.schema_ptr();
    out.nodes.resize(tree.size());

    struct Work {
        std::uint32_t node;
        Cell cell;
    };
    std::vector<Work> stack{{0, Cell{}}};
    while (!stack.empty()) {
        Work work = std::move(stack.back());
        stack.pop_back();
        const TreeNode& tn = tree.node(work.node);
        if (const auto* d = std::get_if<DecisionNode>(&tn)) {
            const std::size_t n_left = tree.count(d->left);
            const std::size_t n_right = tree.count(d->right);
            if (n_left + n_right != d->n_routed || d->n_routed == 0) throw ModelError("convert_tree: inconsistent counts");
            SumNode s;
            s.test = d->test;
            s.children = {d->left, d->right};
            s.weights = {static_cast<double>(n_left) / static_cast<double>(d->n_routed),
                         static_cast<double>(n_right) / static_cast<double>(d->n_routed)};
            out.nodes[work.node] = s;
            const std::size_t card = schema.is_categorical(d->test.feature) ? schema.feature(d->test.feature).cardinality : 0;
            Cell left_cell = work.cell;
            left_cell.restrict(d->test, true, card);
            work.cell.restrict(d->test, false, card);
            stack.push_back({d->right, std::move(work.cell)});
            stack.push_back({d->left, std::move(left_cell)});
        } else {
            const auto& leaf = std::get<LeafNode>(tn);
            if (leaf.row_indices.size() != leaf.n) throw ModelError("convert_tree: inconsistent counts (leaf rows unavailable)");
            std::vector<std::size_t> class_counts(schema.class_count(), 0);
            for (auto r : leaf.row_indices) {
                if (r >= table.rows()) throw ModelError("convert_tree: leaf row index outside the table");
                ++class_counts[table.label(r)];
            }
            if (class_counts != leaf.class_counts) throw ModelError("convert_tree: inconsistent counts (labels differ from the fitting table)");
            out.nodes[work.node] = LeafRef{static_cast<std::uint32_t>(out.leaves.size())};
            out.leaves.push_back(fit_leaf_density(table, leaf.row_indices, std::move(work.cell), config, floors));
        }
    }
    return out;
}

inline GeDT convert_tree(const DecisionTree& tree, const DataTable& table, const LeafConfig& config = {}) {
    const auto floors = sigma_floors(table, config);
    return convert_tree(tree, table, config, floors);
}

/// Uniform mixture of GeDTs: p(x, y) = (1/n_t) * sum_j p_j(x, y).
struct GeFPlus {
    SchemaPtr schema;
    std::vector<GeDT> components;

    double component_weight() const { return 1.0 / static_cast<double>(components.size()); }
};

inline GeFPlus build_gef_plus(std::vector<GeDT> gedts) {
    if (gedts.empty()) throw ModelError("build_gef_plus: need at least one GeDT");
    SchemaPtr schema = gedts.front().schema;
    for (const auto& g : gedts)
        if (!g.schema || (g.schema != schema && !(*g.schema == *schema))) throw ModelError("build_gef_plus: schema mismatch");
    return GeFPlus{std::move(schema), std::move(gedts)};
}

/// Converts every tree of a forest fitted on `table` and mixes them uniformly.
inline GeFPlus convert_forest(const RandomForest& forest, const DataTable& table, const LeafConfig& config = {}) {
    const auto floors = sigma_floors(table, config);
    std::vector<GeDT> gedts;
    gedts.reserve(forest.trees.size());
    for (const auto& tree : forest.trees) gedts.push_back(convert_tree(tree, table, config, floors));
    return build_gef_plus(std::move(gedts));
}

// ---------------------------------------------------------------------------
// Inference

inline void check_evidence(const Schema& schema, std::span<const double> x) {
    if (x.size() != schema.feature_count())
        throw DataError("evidence has " + std::to_string(x.size()) + " features, expected " + std::to_string(schema.feature_count()));
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double v = x[j];
        if (is_missing(v)) continue;
        if (!std::isfinite(v)) throw DataError("evidence: non-finite value for feature " + std::to_string(j));
        if (schema.is_categorical(j) && (v < 0 || v != std::floor(v) || v >= static_cast<double>(schema.feature(j).cardinality)))
            throw DataError("evidence: category code out of range for feature " + std::to_string(j));
    }
}

namespace detail {

/// Collects log(path weight) + leaf feature log density for every leaf reachable under x.
inline void reachable_leaves(const GeDT& g, std::uint32_t node, double log_prefix, std::span<const double> x,
                             std::vector<std::pair<std::uint32_t, double>>& out) {
    const auto& n = g.nodes[node];
    if (const auto* s = std::get_if<SumNode>(&n)) {
        const double v = x[s->test.feature];
        if (is_missing(v)) {
            reachable_leaves(g, s->children[0], log_prefix + std::log(s->weights[0]), x, out);
            reachable_leaves(g, s->children[1], log_prefix + std::log(s->weights[1]), x, out);
        } else {
            const int k = s->test.goes_left(v) ? 0 : 1;
            reachable_leaves(g, s->children[k], log_prefix + std::log(s->weights[k]), x, out);
        }
        return;
    }
    const auto leaf = std::get<LeafRef>(n).leaf;
    out.emplace_back(leaf, log_prefix + leaf_feature_log_density(g.leaves[leaf], *g.schema, x));
}

}  // namespace detail

/// log p(x, y) for every class y. Missing features (NaN) are marginalised.
inline std::vector<double> class_log_joint(const GeDT& g, std::span<const double> x) {
    check_evidence(*g.schema, x);
    std::vector<std::pair<std::uint32_t, double>> reached;
    detail::reachable_leaves(g, 0, 0.0, x, reached);
    const std::size_t classes = g.schema->class_count();
    std::vector<double> out(classes);
    std::vector<double> terms(reached.size());
    for (std::size_t y = 0; y < classes; ++y) {
        for (std::size_t k = 0; k < reached.size(); ++k)
            terms[k] = reached[k].second + std::log(g.leaves[reached[k].first].class_probs[y]);
        out[y] = log_sum_exp(terms);
    }
    return out;
}

inline std::vector<double> class_log_joint(const GeFPlus& model, std::span<const double> x) {
    const std::size_t classes = model.schema->class_count();
    const double log_w = -std::log(static_cast<double>(model.components.size()));
    std::vector<std::vector<double>> per(model.components.size());
    for (std::size_t j = 0; j < model.components.size(); ++j) per[j] = class_log_joint(model.components[j], x);
    std::vector<double> out(classes);
    std::vector<double> terms(model.components.size());
    for (std::size_t y = 0; y < classes; ++y) {
        for (std::size_t j = 0; j < per.size(); ++j) terms[j] = log_w + per[j][y];
        out[y] = log_sum_exp(terms);
    }
    return out;
}

template <class Model>
double log_joint(const Model& model, std::span<const double> x, Label y) {
    if (y >= model.schema->class_count()) throw DataError("log_joint: class label out of range");
    return class_log_joint(model, x)[y];
}

/// log p(x) = log sum_y p(x, y).
template <class Model>
double log_marginal(const Model& model, std::span<const double> x) {
    const auto lj = class_log_joint(model, x);
    return log_sum_exp(lj);
}

/// p(y | x). Throws when p(x) = 0.
template <class Model>
std::vector<double> posterior(const Model& model, std::span<const double> x) {
    auto lj = class_log_joint(model, x);
    const double lm = log_sum_exp(lj);
    if (!std::isfinite(lm)) throw ModelError("posterior: evidence has zero probability under the model");
    for (auto& v : lj) v = std::exp(v - lm);
    return lj;
}

/// argmax_y p(x, y); ties go to the lowest class index.
template <class Model>
Label predict(const Model& model, std::span<const double> x) {
    const auto lj = class_log_joint(model, x);
    if (!std::isfinite(log_sum_exp(lj))) throw ModelError("predict: evidence has zero probability under the model");
    return argmax_lowest(std::span<const double>(lj));
}

}  // namespace gefs
