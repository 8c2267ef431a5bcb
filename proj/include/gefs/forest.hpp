#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <span>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "gefs/dataset.hpp"
#include "gefs/error.hpp"
#include "gefs/random.hpp"

namespace gefs {

inline constexpr std::uint64_t default_seed = 2020;

/// Axis-aligned test of a decision node. Rows for which the test holds go left.
struct SplitTest {
    enum class Kind : std::uint8_t { threshold, category };

    std::size_t feature = 0;
    Kind kind = Kind::threshold;
    /// Continuous: left iff x <= threshold.
    double threshold = 0.0;
    /// Categorical: left iff x == category.
    Label category = 0;

    static SplitTest at_threshold(std::size_t feature, double t) { return {feature, Kind::threshold, t, 0}; }
    static SplitTest equals(std::size_t feature, Label c) { return {feature, Kind::category, 0.0, c}; }

    bool goes_left(double v) const noexcept {
        return kind == Kind::threshold ? v <= threshold : v == static_cast<double>(category);
    }

    bool operator==(const SplitTest&) const = default;
};

struct DecisionNode {
    SplitTest test;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    std::size_t n_routed = 0;
};

struct LeafNode {
    std::vector<std::size_t> class_counts;
    std::size_t n = 0;
    /// Training rows (indices into the fitting table, with bootstrap repeats) in this cell.
    std::vector<std::size_t> row_indices;
};

using TreeNode = std::variant<DecisionNode, LeafNode>;

/// Index of the largest count; ties go to the lowest index.
template <class T>
inline Label argmax_lowest(std::span<const T> values) {
    Label best = 0;
    for (std::size_t k = 1; k < values.size(); ++k)
        if (values[k] > values[best]) best = static_cast<Label>(k);
    return best;
}

/// A fitted classification tree stored as a flat node array; node 0 is the root.
class DecisionTree {
public:
    DecisionTree(std::vector<TreeNode> nodes, std::size_t feature_count, std::size_t class_count)
        : nodes_(std::move(nodes)), feature_count_(feature_count), class_count_(class_count) {
        if (nodes_.empty()) throw ModelError("tree: no nodes");
        std::vector<int> parents(nodes_.size(), 0);
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (const auto* d = std::get_if<DecisionNode>(&nodes_[i])) {
                if (d->left >= nodes_.size() || d->right >= nodes_.size() || d->left == 0 || d->right == 0 || d->left == d->right)
                    throw ModelError("tree: bad child index at node " + std::to_string(i));
                ++parents[d->left];
                ++parents[d->right];
                if (d->test.feature >= feature_count_) throw ModelError("tree: split feature out of range");
                if (d->n_routed != count(d->left) + count(d->right))
                    throw ModelError("tree: routed count mismatch at node " + std::to_string(i));
            } else {
                const auto& leaf = std::get<LeafNode>(nodes_[i]);
                std::size_t total = 0;
                for (auto c : leaf.class_counts) total += c;
                if (leaf.class_counts.size() != class_count_ || total != leaf.n || leaf.n == 0)
                    throw ModelError("tree: inconsistent leaf counts at node " + std::to_string(i));
            }
        }
        for (std::size_t i = 1; i < nodes_.size(); ++i)
            if (parents[i] != 1) throw ModelError("tree: node " + std::to_string(i) + " is not tree-shaped");
        if (parents[0] != 0) throw ModelError("tree: root has a parent");
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const TreeNode& node(std::size_t i) const { return nodes_.at(i); }
    const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
    std::size_t feature_count() const noexcept { return feature_count_; }
    std::size_t class_count() const noexcept { return class_count_; }

    /// Samples that reached node i.
    std::size_t count(std::size_t i) const {
        if (const auto* d = std::get_if<DecisionNode>(&nodes_.at(i))) return d->n_routed;
        return std::get<LeafNode>(nodes_[i]).n;
    }

    std::size_t leaf_count() const {
        return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const TreeNode& n) { return std::holds_alternative<LeafNode>(n); }));
    }

    /// Longest root-to-leaf path, in edges.
    std::size_t depth() const {
        std::size_t best = 0;
        std::vector<std::pair<std::uint32_t, std::size_t>> stack{{0, 0}};
        while (!stack.empty()) {
            auto [i, d] = stack.back();
            stack.pop_back();
            best = std::max(best, d);
            if (const auto* dn = std::get_if<DecisionNode>(&nodes_[i])) {
                stack.emplace_back(dn->left, d + 1);
                stack.emplace_back(dn->right, d + 1);
            }
        }
        return best;
    }

    /// Node index of the leaf whose cell contains x.
    std::size_t leaf_of(std::span<const double> x) const {
        if (x.size() != feature_count_) throw DataError("predict: expected " + std::to_string(feature_count_) + " features, got " + std::to_string(x.size()));
        std::size_t i = 0;
        while (const auto* d = std::get_if<DecisionNode>(&nodes_[i])) {
            const double v = x[d->test.feature];
            if (is_missing(v)) throw DataError("predict: missing value for split feature " + std::to_string(d->test.feature));
            i = d->test.goes_left(v) ? d->left : d->right;
        }
        return i;
    }

private:
    std::vector<TreeNode> nodes_;
    std::size_t feature_count_;
    std::size_t class_count_;
};

// ---------------------------------------------------------------------------
// Split search

/// 1 - sum_c p_c^2.
inline double gini_impurity(std::span<const std::size_t> class_counts) {
    std::size_t total = 0;
    for (auto c : class_counts) total += c;
    if (total == 0) throw Error("gini: empty count vector");
    long double sum_sq = 0;
    for (auto c : class_counts) {
        const long double p = static_cast<long double>(c) / static_cast<long double>(total);
        sum_sq += p * p;
    }
    return static_cast<double>(1.0L - sum_sq);
}

struct SplitChoice {
    SplitTest test;
    double weighted_impurity = 0.0;
};

namespace detail {

/// Split quality as the exact fraction (S_L/n_L + S_R/n_R) = num/den, where
/// S = sum of squared class counts. Larger is better; it equals n * (1 - weighted gini).
struct SplitScore {
    unsigned __int128 num = 0;
    unsigned __int128 den = 1;

    static SplitScore make(std::uint64_t sum_sq_left, std::uint64_t n_left, std::uint64_t sum_sq_right, std::uint64_t n_right) {
        SplitScore s;
        s.num = static_cast<unsigned __int128>(sum_sq_left) * n_right + static_cast<unsigned __int128>(sum_sq_right) * n_left;
        s.den = static_cast<unsigned __int128>(n_left) * n_right;
        return s;
    }

    /// -1, 0, 1 for less, equal, greater.
    int compare(const SplitScore& other) const {
        // num/den vs other.num/other.den. Values are bounded by n^5, far inside 128 bits for any table that fits in memory.
        const unsigned __int128 lhs = num * other.den;
        const unsigned __int128 rhs = other.num * den;
        return lhs < rhs ? -1 : (lhs > rhs ? 1 : 0);
    }

    double weighted_impurity(std::uint64_t n) const {
        const long double value = static_cast<long double>(num) / static_cast<long double>(den);
        return static_cast<double>((static_cast<long double>(n) - value) / static_cast<long double>(n));
    }
};

struct Candidate {
    SplitScore score;
    SplitTest test;
};

/// True when a beats b: higher score, then lower feature index, then lower threshold/category.
inline bool better(const Candidate& a, const std::optional<Candidate>& b) {
    if (!b) return true;
    const int cmp = a.score.compare(b->score);
    if (cmp != 0) return cmp > 0;
    if (a.test.feature != b->test.feature) return a.test.feature < b->test.feature;
    if (a.test.kind == SplitTest::Kind::threshold) return a.test.threshold < b->test.threshold;
    return a.test.category < b->test.category;
}

}  // namespace detail

/// Best gini split of `rows` over `candidate_features`, or nullopt when no test separates the rows.
///
/// Continuous thresholds are midpoints of consecutive distinct values; categorical
/// tests are one-vs-rest on a single code.
inline std::optional<SplitChoice> best_split(const DataTable& table, std::span<const std::size_t> rows,
                                             std::span<const std::size_t> candidate_features) {
    if (rows.empty()) return std::nullopt;
    const Schema& schema = table.schema();
    const std::size_t classes = schema.class_count();
    const std::uint64_t n = rows.size();

    std::vector<std::uint64_t> totals(classes, 0);
    for (auto r : rows) ++totals[table.label(r)];
    std::uint64_t total_sq = 0;
    for (auto t : totals) total_sq += t * t;

    std::optional<detail::Candidate> best;
    std::vector<std::pair<double, Label>> values;
    std::vector<std::uint64_t> left(classes);
    std::vector<std::uint64_t> per_category;

    for (std::size_t feature : candidate_features) {
        if (feature >= schema.feature_count()) throw Error("best_split: feature index out of range");
        if (!schema.is_categorical(feature)) {
            values.clear();
            for (auto r : rows) values.emplace_back(table.value(r, feature), table.label(r));
            std::sort(values.begin(), values.end());
            std::fill(left.begin(), left.end(), 0);
            std::uint64_t sq_left = 0;
            std::uint64_t sq_right = total_sq;
            for (std::size_t i = 0; i + 1 < values.size(); ++i) {
                const Label c = values[i].second;
                const std::uint64_t right_c = totals[c] - left[c];
                sq_left += 2 * left[c] + 1;
                sq_right -= 2 * right_c - 1;
                ++left[c];
                const double a = values[i].first;
                const double b = values[i + 1].first;
                if (!(a < b)) continue;
                double mid = a + (b - a) / 2;
                if (!(mid < b)) mid = a;
                const std::uint64_t n_left = i + 1;
                detail::Candidate cand{detail::SplitScore::make(sq_left, n_left, sq_right, n - n_left), SplitTest::at_threshold(feature, mid)};
                if (detail::better(cand, best)) best = cand;
            }
        } else {
            const std::size_t card = schema.feature(feature).cardinality;
            per_category.assign(card * classes, 0);
            for (auto r : rows) ++per_category[static_cast<std::size_t>(table.value(r, feature)) * classes + table.label(r)];
            for (std::size_t k = 0; k < card; ++k) {
                std::uint64_t n_left = 0;
                std::uint64_t sq_left = 0;
                std::uint64_t sq_right = 0;
                for (std::size_t c = 0; c < classes; ++c) {
                    const std::uint64_t l = per_category[k * classes + c];
                    const std::uint64_t r = totals[c] - l;
                    n_left += l;
                    sq_left += l * l;
                    sq_right += r * r;
                }
                if (n_left == 0 || n_left == n) continue;
                detail::Candidate cand{detail::SplitScore::make(sq_left, n_left, sq_right, n - n_left), SplitTest::equals(feature, static_cast<Label>(k))};
                if (detail::better(cand, best)) best = cand;
            }
        }
    }
    if (!best) return std::nullopt;
    return SplitChoice{best->test, best->score.weighted_impurity(n)};
}

// ---------------------------------------------------------------------------
// Tree growth

/// ceil(sqrt(m)), at least 1.
inline std::size_t default_mtry(std::size_t feature_count) {
    if (feature_count == 0) return 1;
    auto k = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(feature_count))));
    while (k * k < feature_count) ++k;
    while (k > 1 && (k - 1) * (k - 1) >= feature_count) --k;
    return k;
}

/// Grows a tree on `rows` of `table` (repeats allowed) until every leaf is
/// class-pure, holds a single sample, or has no separating test.
///
/// Each node draws a random feature order from its own derived seed and
/// searches it in blocks of `mtry`, moving to the next block only when the
/// current one contains no separating test.
inline DecisionTree grow_tree(const DataTable& table, std::span<const std::size_t> rows, std::size_t mtry, std::uint64_t seed) {
    if (rows.empty()) throw DataError("fit_tree: empty table");
    if (!table.has_labels()) throw DataError("fit_tree: table has no class labels");
    if (table.has_missing()) throw DataError("fit_tree: training data contains missing values");
    const Schema& schema = table.schema();
    const std::size_t m = schema.feature_count();
    const std::size_t classes = schema.class_count();
    if (m > 0 && (mtry < 1 || mtry > m)) throw Error("fit_tree: mtry must lie in [1, m]");

    struct Work {
        std::uint32_t node;
        std::vector<std::size_t> rows;
    };
    std::vector<TreeNode> nodes;
    nodes.emplace_back(LeafNode{});
    std::vector<Work> stack;
    stack.push_back({0, std::vector<std::size_t>(rows.begin(), rows.end())});
    std::vector<std::size_t> order(m);
    std::vector<std::size_t> counts(classes);

    while (!stack.empty()) {
        Work work = std::move(stack.back());
        stack.pop_back();
        std::fill(counts.begin(), counts.end(), 0);
        for (auto r : work.rows) ++counts[table.label(r)];
        const bool pure = std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }) <= 1;

        std::optional<SplitChoice> split;
        if (!pure && work.rows.size() > 1 && m > 0) {
            for (std::size_t j = 0; j < m; ++j) order[j] = j;
            Rng rng(derive_seed(seed, work.node));
            rng.shuffle(std::span<std::size_t>(order));
            for (std::size_t start = 0; start < m && !split; start += mtry) {
                const std::size_t len = std::min(mtry, m - start);
                split = best_split(table, work.rows, std::span<const std::size_t>(order).subspan(start, len));
            }
        }
        if (!split) {
            nodes[work.node] = LeafNode{counts, work.rows.size(), std::move(work.rows)};
            continue;
        }
        std::vector<std::size_t> left_rows;
        std::vector<std::size_t> right_rows;
        for (auto r : work.rows) (split->test.goes_left(table.value(r, split->test.feature)) ? left_rows : right_rows).push_back(r);
        const auto left_id = static_cast<std::uint32_t>(nodes.size());
        nodes.emplace_back(LeafNode{});
        const auto right_id = static_cast<std::uint32_t>(nodes.size());
        nodes.emplace_back(LeafNode{});
        nodes[work.node] = DecisionNode{split->test, left_id, right_id, work.rows.size()};
        // Right pushed first so the left subtree is grown first.
        stack.push_back({right_id, std::move(right_rows)});
        stack.push_back({left_id, std::move(left_rows)});
    }
    return DecisionTree(std::move(nodes), m, classes);
}

inline DecisionTree fit_tree(const DataTable& table, std::size_t mtry, std::uint64_t seed) {
    std::vector<std::size_t> rows(table.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return grow_tree(table, rows, mtry, seed);
}

inline Label predict_tree(const DecisionTree& tree, std::span<const double> x) {
    const auto& leaf = std::get<LeafNode>(tree.node(tree.leaf_of(x)));
    return argmax_lowest(std::span<const std::size_t>(leaf.class_counts));
}

// ---------------------------------------------------------------------------
// Forest

struct ForestOptions {
    std::size_t n_trees = 30;
    /// Features per split; 0 selects ceil(sqrt(m)).
    std::size_t mtry = 0;
    std::uint64_t seed = default_seed;
    /// Worker threads; 0 uses the hardware concurrency. Output does not depend on it.
    unsigned threads = 0;
};

struct RandomForest {
    SchemaPtr schema;
    std::vector<DecisionTree> trees;
    std::size_t mtry = 1;
    std::uint64_t seed = default_seed;
};

/// Seeds for tree t: (bootstrap seed, growth seed).
inline std::pair<std::uint64_t, std::uint64_t> tree_seeds(std::uint64_t master, std::size_t t) {
    const std::uint64_t s = derive_seed(master, t);
    return {derive_seed(s, 0), derive_seed(s, 1)};
}

/// Fits each tree on its own bootstrap of `table`. Leaf row indices refer to `table`.
inline RandomForest fit_forest(const DataTable& table, const ForestOptions& options = {}) {
    if (table.rows() == 0) throw DataError("fit_forest: empty table");
    if (options.n_trees < 1) throw Error("fit_forest: need at least one tree");
    const std::size_t m = table.feature_count();
    const std::size_t mtry = options.mtry == 0 ? default_mtry(m) : options.mtry;
    if (m > 0 && mtry > m) throw Error("fit_forest: mtry exceeds feature count");

    std::vector<std::optional<DecisionTree>> slots(options.n_trees);
    std::vector<std::exception_ptr> errors(options.n_trees);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t t = next++; t < options.n_trees; t = next++) {
            try {
                const auto [boot_seed, grow_seed] = tree_seeds(options.seed, t);
                const auto drawn = bootstrap_indices(table.rows(), boot_seed);
                slots[t].emplace(grow_tree(table, drawn, mtry, grow_seed));
            } catch (...) {
                errors[t] = std::current_exception();
            }
        }
    };
    unsigned threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, options.n_trees));
    {
        std::vector<std::jthread> pool;
        for (unsigned i = 1; i < threads; ++i) pool.emplace_back(worker);
        worker();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    RandomForest forest{table.schema_ptr(), {}, mtry, options.seed};
    forest.trees.reserve(options.n_trees);
    for (auto& s : slots) forest.trees.push_back(std::move(*s));
    return forest;
}

enum class Aggregation { vote, probability };

/// Classical RF prediction: majority vote (default) or averaged leaf class frequencies.
inline Label predict_forest(const RandomForest& forest, std::span<const double> x, Aggregation aggregation = Aggregation::vote) {
    const std::size_t classes = forest.schema->class_count();
    if (aggregation == Aggregation::vote) {
        std::vector<std::size_t> votes(classes, 0);
        for (const auto& tree : forest.trees) ++votes[predict_tree(tree, x)];
        return argmax_lowest(std::span<const std::size_t>(votes));
    }
    std::vector<double> mass(classes, 0.0);
    for (const auto& tree : forest.trees) {
        const auto& leaf = std::get<LeafNode>(tree.node(tree.leaf_of(x)));
        for (std::size_t c = 0; c < classes; ++c) mass[c] += static_cast<double>(leaf.class_counts[c]) / static_cast<double>(leaf.n);
    }
    return argmax_lowest(std::span<const double>(mass));
}

}  // namespace gefs
