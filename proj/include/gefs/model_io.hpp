#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "gefs/circuit.hpp"
#include "gefs/dataset.hpp"
#include "gefs/error.hpp"
#include "gefs/forest.hpp"

namespace gefs {

inline constexpr int model_format_version = 1;
inline constexpr std::string_view model_format_name = "gefc-model";

struct Provenance {
    std::uint64_t seed = default_seed;
    std::size_t n_trees = 0;
    std::size_t mtry = 0;
    std::string dataset_hash;
    std::size_t train_rows = 0;
    double test_fraction = 0.0;
};

/// Everything a saved model carries: the forest, its circuit form and how both were made.
///
/// Loaded forests have no leaf row indices; they predict but cannot be re-converted.
struct ModelFile {
    RandomForest forest;
    GeFPlus model;
    LeafConfig leaf_config;
    Provenance provenance;
};

namespace io_detail {

using nlohmann::json;

inline json bound_to_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double bound_from_json(const json& j, double if_null) { return j.is_null() ? if_null : j.get<double>(); }

inline json test_to_json(const SplitTest& t) {
    json j;
    j["feature"] = t.feature;
    if (t.kind == SplitTest::Kind::threshold) {
        j["threshold"] = t.threshold;
    } else {
        j["category"] = t.category;
    }
    return j;
}

inline SplitTest test_from_json(const json& j) {
    const auto feature = j.at("feature").get<std::size_t>();
    if (j.contains("threshold")) return SplitTest::at_threshold(feature, j.at("threshold").get<double>());
    return SplitTest::equals(feature, j.at("category").get<Label>());
}

inline json schema_to_json(const Schema& s) {
    json cols = json::array();
    for (const auto& c : s.columns()) {
        json jc;
        jc["name"] = c.name;
        jc["kind"] = c.kind == ColumnKind::continuous ? "continuous" : "categorical";
        if (c.kind == ColumnKind::categorical) jc["labels"] = c.labels;
        cols.push_back(jc);
    }
    return json{{"columns", cols}, {"target_index", s.target_index()}};
}

inline SchemaPtr schema_from_json(const json& j) {
    std::vector<Column> columns;
    for (const auto& jc : j.at("columns")) {
        Column c;
        c.name = jc.at("name").get<std::string>();
        const auto kind = jc.at("kind").get<std::string>();
        if (kind == "categorical") {
            c.kind = ColumnKind::categorical;
            c.labels = jc.at("labels").get<std::vector<std::string>>();
            c.cardinality = c.labels.size();
        } else if (kind != "continuous") {
            throw ModelError("model file: unknown column kind '" + kind + "'");
        }
        columns.push_back(std::move(c));
    }
    return std::make_shared<const Schema>(std::move(columns), j.at("target_index").get<std::size_t>());
}

inline json tree_to_json(const DecisionTree& tree) {
    json nodes = json::array();
    for (const auto& n : tree.nodes()) {
        if (const auto* d = std::get_if<DecisionNode>(&n)) {
            nodes.push_back({{"test", test_to_json(d->test)}, {"left", d->left}, {"right", d->right}, {"n", d->n_routed}});
        } else {
            nodes.push_back({{"class_counts", std::get<LeafNode>(n).class_counts}});
        }
    }
    return nodes;
}

inline DecisionTree tree_from_json(const json& j, const Schema& schema) {
    std::vector<TreeNode> nodes;
    for (const auto& jn : j) {
        if (jn.contains("class_counts")) {
            LeafNode leaf;
            leaf.class_counts = jn.at("class_counts").get<std::vector<std::size_t>>();
            for (auto c : leaf.class_counts) leaf.n += c;
            nodes.emplace_back(std::move(leaf));
        } else {
            nodes.emplace_back(DecisionNode{test_from_json(jn.at("test")), jn.at("left").get<std::uint32_t>(), jn.at("right").get<std::uint32_t>(),
                                            jn.at("n").get<std::size_t>()});
        }
    }
    return DecisionTree(std::move(nodes), schema.feature_count(), schema.class_count());
}

inline json leaf_to_json(const LeafDensity& leaf) {
    json intervals = json::array();
    for (std::size_t k = 0; k < leaf.cell.intervals.size(); ++k) {
        const auto& iv = leaf.cell.intervals[k];
        intervals.push_back({{"feature", iv.feature}, {"lower", bound_to_json(iv.lower)}, {"upper", bound_to_json(iv.upper)}, {"log_mass", bound_to_json(leaf.interval_log_mass[k])}});
    }
    json categories = json::array();
    for (const auto& c : leaf.cell.categories) {
        std::vector<int> allowed(c.allowed.begin(), c.allowed.end());
        categories.push_back({{"feature", c.feature}, {"allowed", allowed}});
    }
    return json{{"mean", leaf.mean},
                {"stddev", leaf.stddev},
                {"category_probs", leaf.category_probs},
                {"class_probs", leaf.class_probs},
                {"intervals", intervals},
                {"categories", categories},
                {"truncated", leaf.truncated}};
}

inline LeafDensity leaf_from_json(const json& j) {
    LeafDensity leaf;
    leaf.mean = j.at("mean").get<std::vector<double>>();
    leaf.stddev = j.at("stddev").get<std::vector<double>>();
    leaf.category_probs = j.at("category_probs").get<std::vector<double>>();
    leaf.class_probs = j.at("class_probs").get<std::vector<double>>();
    leaf.truncated = j.at("truncated").get<bool>();
    for (const auto& ji : j.at("intervals")) {
        leaf.cell.intervals.push_back({ji.at("feature").get<std::size_t>(), bound_from_json(ji.at("lower"), -std::numeric_limits<double>::infinity()),
                                       bound_from_json(ji.at("upper"), std::numeric_limits<double>::infinity())});
        leaf.interval_log_mass.push_back(bound_from_json(ji.at("log_mass"), -std::numeric_limits<double>::infinity()));
    }
    for (const auto& jc : j.at("categories")) {
        const auto allowed = jc.at("allowed").get<std::vector<int>>();
        leaf.cell.categories.push_back({jc.at("feature").get<std::size_t>(), std::vector<bool>(allowed.begin(), allowed.end())});
    }
    return leaf;
}

inline json gedt_to_json(const GeDT& g) {
    json nodes = json::array();
    for (const auto& n : g.nodes) {
        if (const auto* s = std::get_if<SumNode>(&n)) {
            nodes.push_back({{"test", test_to_json(s->test)}, {"children", s->children}, {"weights", s->weights}});
        } else {
            nodes.push_back({{"leaf", std::get<LeafRef>(n).leaf}});
        }
    }
    json leaves = json::array();
    for (const auto& l : g.leaves) leaves.push_back(leaf_to_json(l));
    return json{{"nodes", nodes}, {"leaves", leaves}};
}

inline GeDT gedt_from_json(const json& j, SchemaPtr schema) {
    GeDT g;
    g.schema = std::move(schema);
    for (const auto& jn : j.at("nodes")) {
        if (jn.contains("leaf")) {
            g.nodes.emplace_back(LeafRef{jn.at("leaf").get<std::uint32_t>()});
        } else {
            SumNode s;
            s.test = test_from_json(jn.at("test"));
            s.children = jn.at("children").get<std::array<std::uint32_t, 2>>();
            s.weights = jn.at("weights").get<std::array<double, 2>>();
            g.nodes.emplace_back(s);
        }
    }
    for (const auto& jl : j.at("leaves")) g.leaves.push_back(leaf_from_json(jl));
    g.validate();
    return g;
}

}  // namespace io_detail

/// Model file text: one JSON document, doubles written in shortest round-trip form.
inline std::string serialize_model(const ModelFile& m) {
    using io_detail::json;
    json trees = json::array();
    for (const auto& t : m.forest.trees) trees.push_back(io_detail::tree_to_json(t));
    json components = json::array();
    for (const auto& g : m.model.components) components.push_back(io_detail::gedt_to_json(g));
    json doc;
    doc["format"] = model_format_name;
    doc["format_version"] = model_format_version;
    doc["schema"] = io_detail::schema_to_json(*m.model.schema);
    doc["leaf_config"] = {{"alpha", m.leaf_config.alpha},
                          {"truncate", m.leaf_config.truncate},
                          {"sigma_floor_relative", m.leaf_config.sigma_floor_relative},
                          {"sigma_floor_absolute", m.leaf_config.sigma_floor_absolute}};
    doc["provenance"] = {{"seed", m.provenance.seed},
                         {"n_trees", m.provenance.n_trees},
                         {"mtry", m.provenance.mtry},
                         {"dataset_hash", m.provenance.dataset_hash},
                         {"train_rows", m.provenance.train_rows},
                         {"test_fraction", m.provenance.test_fraction}};
    doc["forest"] = {{"mtry", m.forest.mtry}, {"seed", m.forest.seed}, {"trees", trees}};
    doc["circuit"] = {{"components", components}};
    return doc.dump(1) + "\n";
}

inline ModelFile parse_model(std::string_view text) {
    using io_detail::json;
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ModelError(std::string("model file: not valid JSON (") + e.what() + ")");
    }
    try {
        if (!doc.is_object() || doc.value("format", std::string{}) != model_format_name) throw ModelError("model file: not a gefc model");
        const int version = doc.at("format_version").get<int>();
        if (version != model_format_version)
            throw ModelError("model file: unsupported format_version " + std::to_string(version) + " (expected " + std::to_string(model_format_version) + ")");
        ModelFile m;
        auto schema = io_detail::schema_from_json(doc.at("schema"));
        const auto& lc = doc.at("leaf_config");
        m.leaf_config.alpha = lc.at("alpha").get<double>();
        m.leaf_config.truncate = lc.at("truncate").get<bool>();
        m.leaf_config.sigma_floor_relative = lc.at("sigma_floor_relative").get<double>();
        m.leaf_config.sigma_floor_absolute = lc.at("sigma_floor_absolute").get<double>();
        const auto& pv = doc.at("provenance");
        m.provenance.seed = pv.at("seed").get<std::uint64_t>();
        m.provenance.n_trees = pv.at("n_trees").get<std::size_t>();
        m.provenance.mtry = pv.at("mtry").get<std::size_t>();
        m.provenance.dataset_hash = pv.at("dataset_hash").get<std::string>();
        m.provenance.train_rows = pv.at("train_rows").get<std::size_t>();
        m.provenance.test_fraction = pv.at("test_fraction").get<double>();
        const auto& jf = doc.at("forest");
        m.forest.schema = schema;
        m.forest.mtry = jf.at("mtry").get<std::size_t>();
        m.forest.seed = jf.at("seed").get<std::uint64_t>();
        for (const auto& jt : jf.at("trees")) m.forest.trees.push_back(io_detail::tree_from_json(jt, *schema));
        std::vector<GeDT> gedts;
        for (const auto& jc : doc.at("circuit").at("components")) gedts.push_back(io_detail::gedt_from_json(jc, schema));
        m.model = build_gef_plus(std::move(gedts));
        return m;
    } catch (const json::exception& e) {
        throw ModelError(std::string("model file: malformed (") + e.what() + ")");
    }
}

/// Writes `contents` to `path` via a temporary file and rename, so a failed write leaves no partial file.
inline void write_file_atomic(const std::string& path, std::string_view contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write '" + path + "'");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw Error("cannot write '" + path + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw Error("cannot write '" + path + "'");
    }
}

inline void save_model(const ModelFile& m, const std::string& path) { write_file_atomic(path, serialize_model(m)); }

inline ModelFile load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError("cannot open model file '" + path + "'");
    return parse_model(std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()));
}

}  // namespace gefs
