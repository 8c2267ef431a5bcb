#pragma once

// Builders and brute-force oracles shared by the unit and acceptance tests.

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "gefs/gefs.hpp"

namespace gefs::testing {

/// Per-process scratch directory for files written by tests.
inline std::filesystem::path scratch_dir() {
    static const auto dir = [] {
        auto d = std::filesystem::temp_directory_path() / ("gefs_test_" + std::to_string(::getpid()));
        std::filesystem::create_directories(d);
        return d;
    }();
    return dir;
}

inline std::string write_scratch(const std::string& name, const std::string& contents) {
    const auto path = scratch_dir() / name;
    std::ofstream(path, std::ios::binary) << contents;
    return path.string();
}

inline Column continuous(std::string name) { return Column{std::move(name), ColumnKind::continuous, 0, {}}; }

inline Column categorical(std::string name, std::size_t k) { return Column{std::move(name), ColumnKind::categorical, k, {}}; }

/// Features in the given order, then a class column "y" with `classes` labels.
inline SchemaPtr make_schema(std::vector<Column> features, std::size_t classes) {
    features.push_back(categorical("y", classes));
    const std::size_t target = features.size() - 1;
    return std::make_shared<const Schema>(std::move(features), target);
}

/// One-leaf GeDT with the given factors. Empty `mean` means no continuous features.
inline GeDT single_leaf(SchemaPtr schema, std::vector<double> class_probs, std::vector<double> mean = {}, std::vector<double> stddev = {},
                        std::vector<double> category_probs = {}) {
    LeafDensity leaf;
    const std::size_t m = schema->feature_count();
    leaf.mean = mean.empty() ? std::vector<double>(m, 0.0) : std::move(mean);
    leaf.stddev = stddev.empty() ? std::vector<double>(m, 1.0) : std::move(stddev);
    leaf.category_probs = std::move(category_probs);
    leaf.category_probs.resize(schema->total_categories(), 0.0);
    leaf.class_probs = std::move(class_probs);
    leaf.truncated = false;
    GeDT g{std::move(schema), {LeafRef{0}}, {std::move(leaf)}};
    g.validate();
    return g;
}

/// A 100-row, two-feature worked example: X1 binary categorical, X2 continuous.
/// Grown to purity with both features available it gives X2 <= .5 at the root
/// (80 / 20 rows), then X1 = 0 (40 / 40) with leaves (0,40), (10,30), (20,0).
inline DataTable worked_example_table() {
    auto schema = make_schema({categorical("X1", 2), continuous("X2")}, 2);
    std::vector<double> f;
    std::vector<Label> y;
    auto add = [&](double x1, double x2, Label c, int times) {
        for (int i = 0; i < times; ++i) {
            f.push_back(x1);
            f.push_back(x2);
            y.push_back(c);
        }
    };
    add(0, 0.25, 1, 40);
    add(1, 0.25, 0, 10);
    add(1, 0.25, 1, 30);
    add(1, 0.75, 0, 20);
    return DataTable(schema, std::move(f), std::move(y));
}

/// Random table whose label depends on the features, so trees have structure.
inline DataTable random_table(std::size_t n, std::size_t n_continuous, std::vector<std::size_t> cat_cards, std::size_t classes, std::uint64_t seed) {
    std::vector<Column> cols;
    for (std::size_t j = 0; j < n_continuous; ++j) cols.push_back(continuous("c" + std::to_string(j)));
    for (std::size_t j = 0; j < cat_cards.size(); ++j) cols.push_back(categorical("k" + std::to_string(j), cat_cards[j]));
    auto schema = make_schema(cols, classes);
    Rng rng(seed);
    const std::size_t m = cols.size();
    std::vector<double> f(n * m);
    std::vector<Label> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double score = 0.0;
        for (std::size_t j = 0; j < n_continuous; ++j) {
            const double v = std::round((rng.uniform() * 4.0 - 2.0) * 1000.0) / 1000.0;
            f[i * m + j] = v;
            score += (j % 2 ? -1.0 : 1.0) * v;
        }
        for (std::size_t j = 0; j < cat_cards.size(); ++j) {
            const auto c = rng.below(cat_cards[j]);
            f[i * m + n_continuous + j] = static_cast<double>(c);
            score += 0.7 * static_cast<double>(c);
        }
        score += rng.uniform() - 0.5;
        const double z = std::clamp((score + 3.0) / 6.0, 0.0, 0.999999);
        y[i] = static_cast<Label>(z * static_cast<double>(classes));
        if (rng.uniform() < 0.1) y[i] = static_cast<Label>(rng.below(classes));
    }
    return DataTable(schema, std::move(f), std::move(y));
}

// ---------------------------------------------------------------------------
// Random small circuits

inline std::vector<double> random_simplex(Rng& rng, std::size_t k, double floor = 0.02) {
    std::vector<double> p(k);
    double s = 0.0;
    for (auto& v : p) {
        v = floor + rng.uniform();
        s += v;
    }
    for (auto& v : p) v /= s;
    return p;
}

/// Flat Dirichlet(1, ..., 1) draw.
inline std::vector<double> dirichlet(Rng& rng, std::size_t k) {
    std::vector<double> p(k);
    double s = 0.0;
    for (auto& v : p) {
        v = -std::log(1.0 - rng.uniform());
        s += v;
    }
    for (auto& v : p) v /= s;
    return p;
}

/// GeDT over `schema` with at most `max_sums` sum nodes and random parameters.
inline GeDT random_gedt(SchemaPtr schema, std::size_t max_sums, Rng& rng) {
    GeDT g;
    g.schema = schema;
    const std::size_t m = schema->feature_count();
    std::size_t budget = m == 0 ? 0 : max_sums;
    std::function<std::uint32_t(Cell)> build = [&](Cell cell) -> std::uint32_t {
        const auto id = static_cast<std::uint32_t>(g.nodes.size());
        g.nodes.emplace_back(LeafRef{});
        if (budget > 0 && rng.uniform() < 0.7) {
            --budget;
            const std::size_t j = rng.below(m);
            const bool cat = schema->is_categorical(j);
            const std::size_t card = cat ? schema->feature(j).cardinality : 0;
            SumNode s;
            s.test = cat ? SplitTest::equals(j, static_cast<Label>(rng.below(card))) : SplitTest::at_threshold(j, rng.uniform() * 2.0 - 1.0);
            const double w0 = 0.05 + 0.9 * rng.uniform();
            s.weights = {w0, 1.0 - w0};
            Cell left = cell;
            left.restrict(s.test, true, card);
            cell.restrict(s.test, false, card);
            s.children[0] = build(std::move(left));
            s.children[1] = build(std::move(cell));
            g.nodes[id] = s;
            return id;
        }
        cell.canonicalize();
        LeafDensity leaf;
        leaf.mean.assign(m, 0.0);
        leaf.stddev.assign(m, 0.0);
        leaf.category_probs.assign(schema->total_categories(), 0.0);
        for (std::size_t j = 0; j < m; ++j) {
            if (!schema->is_categorical(j)) {
                leaf.mean[j] = rng.uniform() * 2.0 - 1.0;
                leaf.stddev[j] = 0.3 + 1.2 * rng.uniform();
                continue;
            }
            const std::size_t card = schema->feature(j).cardinality;
            std::vector<bool> allowed(card, true);
            for (const auto& c : cell.categories)
                if (c.feature == j) allowed = c.allowed;
            const auto p = random_simplex(rng, card);
            double s = 0.0;
            for (std::size_t k = 0; k < card; ++k) s += allowed[k] ? p[k] : 0.0;
            for (std::size_t k = 0; k < card; ++k) leaf.category_probs[schema->category_offset(j) + k] = allowed[k] ? p[k] / s : 0.0;
        }
        leaf.class_probs = random_simplex(rng, schema->class_count());
        leaf.truncated = rng.uniform() < 0.5;
        for (const auto& iv : cell.intervals)
            leaf.interval_log_mass.push_back(normal_log_interval_mass(iv.lower, iv.upper, leaf.mean[iv.feature], leaf.stddev[iv.feature]));
        leaf.cell = std::move(cell);
        g.nodes[id] = LeafRef{static_cast<std::uint32_t>(g.leaves.size())};
        g.leaves.push_back(std::move(leaf));
        return id;
    };
    build(Cell{});
    g.validate();
    return g;
}

inline std::vector<double> random_point(const Schema& schema, Rng& rng) {
    std::vector<double> x(schema.feature_count());
    for (std::size_t j = 0; j < x.size(); ++j)
        x[j] = schema.is_categorical(j) ? static_cast<double>(rng.below(schema.feature(j).cardinality)) : rng.uniform() * 4.0 - 2.0;
    return x;
}

// ---------------------------------------------------------------------------
// Vertex-enumeration credal oracle

namespace oracle_detail {

/// One leaf's candidate parameter settings: every Gaussian mean in
/// {lower end, upper end, clip(x)}, every categorical and class factor at a
/// simplex vertex of its contamination set.
struct LeafChoices {
    std::vector<double> feature_values;  // F(x) per combination, truncation constant included
    std::vector<std::vector<double>> class_vectors;
};

inline LeafChoices leaf_choices(const LeafDensity& leaf, const Schema& schema, std::span<const double> x, double eps, double mean_scale) {
    std::vector<double> values{0.0};  // log F
    for (std::size_t j = 0; j < schema.feature_count(); ++j) {
        std::vector<double> options;
        if (schema.is_categorical(j)) {
            const std::size_t card = schema.feature(j).cardinality;
            const auto code = static_cast<std::size_t>(x[j]);
            for (std::size_t k = 0; k < card; ++k)
                options.push_back(std::log((1.0 - eps) * leaf.category_prob(schema, j, x[j]) + (k == code ? eps : 0.0)));
        } else {
            const double half = mean_scale * eps * leaf.stddev[j];
            const double lo = leaf.mean[j] - half;
            const double hi = leaf.mean[j] + half;
            for (double mu : {lo, hi, std::clamp(x[j], lo, hi)}) options.push_back(normal_log_pdf(x[j], mu, leaf.stddev[j]));
        }
        std::vector<double> next;
        for (double v : values)
            for (double o : options) next.push_back(v + o);
        values = std::move(next);
    }
    LeafChoices c;
    for (double v : values) c.feature_values.push_back(std::exp(v - leaf.truncation_log_mass()));
    const std::size_t classes = leaf.class_probs.size();
    for (std::size_t k = 0; k < classes; ++k) {
        std::vector<double> q(classes);
        for (std::size_t c2 = 0; c2 < classes; ++c2) q[c2] = (1.0 - eps) * leaf.class_probs[c2] + (c2 == k ? eps : 0.0);
        c.class_vectors.push_back(std::move(q));
    }
    return c;
}

/// A circuit flattened to its choice points, in a fixed order.
struct Flat {
    struct Sum {
        std::vector<double> base;  // fitted weights
        std::vector<int> child;    // flat child ids (>= 0 sum, < 0 leaf ~id)
    };
    std::vector<Sum> sums;
    std::vector<const LeafDensity*> leaves;
    int root = 0;
};

inline int flatten(const GeDT& g, std::uint32_t node, Flat& f) {
    if (const auto* s = std::get_if<SumNode>(&g.nodes[node])) {
        const int id = static_cast<int>(f.sums.size());
        f.sums.push_back({{s->weights[0], s->weights[1]}, {}});
        const int a = flatten(g, s->children[0], f);
        const int b = flatten(g, s->children[1], f);
        f.sums[static_cast<std::size_t>(id)].child = {a, b};
        return id;
    }
    f.leaves.push_back(&g.leaves[std::get<LeafRef>(g.nodes[node]).leaf]);
    return ~static_cast<int>(f.leaves.size() - 1);
}

}  // namespace oracle_detail

/// max over every vertex configuration of p'(x, alt) - p'(x, y), by exhaustive enumeration.
/// `components` of size 1 and `mixture = false` is a plain GeDT.
inline double oracle_max_diff(const std::vector<const GeDT*>& components, bool mixture, std::span<const double> x, Label y, Label alt,
                              double eps, bool contaminate_root, double mean_scale = 1.0) {
    using namespace oracle_detail;
    const Schema& schema = *components.front()->schema;
    Flat flat;
    std::vector<int> roots;
    for (const auto* g : components) roots.push_back(flatten(*g, 0, flat));
    const bool root_choice = mixture && contaminate_root;
    if (mixture) {
        std::vector<double> w(components.size(), 1.0 / static_cast<double>(components.size()));
        flat.sums.push_back({w, roots});
        flat.root = static_cast<int>(flat.sums.size() - 1);
    } else {
        flat.root = roots.front();
    }

    // Choice points: each sum node (fixed weights if it is an uncontaminated root), then each leaf in its cell.
    std::vector<std::size_t> radix;
    for (std::size_t s = 0; s < flat.sums.size(); ++s) {
        const bool fixed = mixture && static_cast<int>(s) == flat.root && !root_choice;
        radix.push_back(fixed ? 1 : flat.sums[s].base.size());
    }
    std::vector<LeafChoices> lc(flat.leaves.size());
    std::vector<bool> inside(flat.leaves.size());
    for (std::size_t l = 0; l < flat.leaves.size(); ++l) {
        inside[l] = flat.leaves[l]->cell.contains(x);
        if (!inside[l]) {
            radix.push_back(1);
            radix.push_back(1);
            continue;
        }
        lc[l] = leaf_choices(*flat.leaves[l], schema, x, eps, mean_scale);
        radix.push_back(lc[l].feature_values.size());
        radix.push_back(lc[l].class_vectors.size());
    }

    std::vector<std::size_t> digit(radix.size(), 0);
    double best = -std::numeric_limits<double>::infinity();
    while (true) {
        std::function<double(int)> eval = [&](int node) -> double {
            if (node < 0) {
                const auto l = static_cast<std::size_t>(~node);
                if (!inside[l]) return 0.0;
                const std::size_t base = flat.sums.size() + 2 * l;
                const double F = lc[l].feature_values[digit[base]];
                const auto& q = lc[l].class_vectors[digit[base + 1]];
                return F * (q[alt] - q[y]);
            }
            const auto& s = flat.sums[static_cast<std::size_t>(node)];
            const std::size_t k = digit[static_cast<std::size_t>(node)];
            const bool fixed = radix[static_cast<std::size_t>(node)] == 1;
            double v = 0.0;
            for (std::size_t c = 0; c < s.child.size(); ++c) {
                const double w = fixed ? s.base[c] : (1.0 - eps) * s.base[c] + (c == k ? eps : 0.0);
                v += w * eval(s.child[c]);
            }
            return v;
        };
        best = std::max(best, eval(flat.root));
        std::size_t i = 0;
        while (i < digit.size() && ++digit[i] == radix[i]) digit[i++] = 0;
        if (i == digit.size()) break;
    }
    return best;
}

// ---------------------------------------------------------------------------
// Random contamination sampling

/// log p'(x, y) for all y under one random member of the contamination set.
/// Only the routed path of each component matters for fully observed x.
inline std::vector<double> sampled_contaminated_log_joint(const GeFPlus& model, std::span<const double> x, double eps, bool contaminate_root,
                                                          double mean_scale, Rng& rng) {
    const Schema& schema = *model.schema;
    const std::size_t classes = schema.class_count();
    const std::size_t nt = model.components.size();
    std::vector<double> root(nt, 1.0 / static_cast<double>(nt));
    if (contaminate_root) {
        const auto v = dirichlet(rng, nt);
        for (std::size_t j = 0; j < nt; ++j) root[j] = (1.0 - eps) * root[j] + eps * v[j];
    }
    std::vector<std::vector<double>> per(classes, std::vector<double>(nt));
    for (std::size_t j = 0; j < nt; ++j) {
        const GeDT& g = model.components[j];
        double log_path = std::log(root[j]);
        std::uint32_t node = 0;
        while (const auto* s = std::get_if<SumNode>(&g.nodes[node])) {
            const auto v = dirichlet(rng, 2);
            const int k = s->test.goes_left(x[s->test.feature]) ? 0 : 1;
            log_path += std::log((1.0 - eps) * s->weights[static_cast<std::size_t>(k)] + eps * v[static_cast<std::size_t>(k)]);
            node = s->children[static_cast<std::size_t>(k)];
        }
        const LeafDensity& leaf = g.leaves[std::get<LeafRef>(g.nodes[node]).leaf];
        double lf = -leaf.truncation_log_mass();
        for (std::size_t f = 0; f < schema.feature_count(); ++f) {
            if (schema.is_categorical(f)) {
                const std::size_t card = schema.feature(f).cardinality;
                const auto v = dirichlet(rng, card);
                lf += std::log((1.0 - eps) * leaf.category_prob(schema, f, x[f]) + eps * v[static_cast<std::size_t>(x[f])]);
            } else {
                const double mu = leaf.mean[f] + (rng.uniform() * 2.0 - 1.0) * mean_scale * eps * leaf.stddev[f];
                lf += normal_log_pdf(x[f], mu, leaf.stddev[f]);
            }
        }
        const auto v = dirichlet(rng, classes);
        for (std::size_t c = 0; c < classes; ++c) per[c][j] = log_path + lf + std::log((1.0 - eps) * leaf.class_probs[c] + eps * v[c]);
    }
    std::vector<double> out(classes);
    for (std::size_t c = 0; c < classes; ++c) out[c] = log_sum_exp(per[c]);
    return out;
}

}  // namespace gefs::testing
