#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gefs/circuit.hpp"
#include "gefs/dataset.hpp"
#include "gefs/error.hpp"
#include "gefs/evaluation.hpp"
#include "gefs/forest.hpp"
#include "gefs/model_io.hpp"
#include "gefs/robustness.hpp"

/// Command implementations behind the gefc tool. Each returns its results and
/// writes files only after every computation has succeeded.
namespace gefs::cli {

/// Stream of the master seed that drives the train/test split.
inline constexpr std::uint64_t split_stream = 0x5117;

/// Writes `text` to `path`, or to `fallback` when no path is given.
inline void emit(const std::string& path, const std::string& text, std::ostream& fallback) {
    if (path.empty() || path == "-") fallback << text;
    else write_file_atomic(path, text);
}

inline std::string fmt(double v) { return detail::format_double(v); }

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string{}; }

/// Threshold grid from "start:stop:step" or a comma-separated list.
inline std::vector<double> parse_grid(std::string_view text) {
    auto number = [&](std::string_view s) {
        auto v = detail::parse_number(s);
        if (!v || !std::isfinite(*v)) throw Error("grid: bad number '" + std::string(s) + "'");
        return *v;
    };
    std::vector<double> grid;
    if (text.find(':') != std::string_view::npos) {
        const auto a = text.find(':');
        const auto b = text.find(':', a + 1);
        if (b == std::string_view::npos) throw Error("grid: expected start:stop:step");
        const double start = number(text.substr(0, a));
        const double stop = number(text.substr(a + 1, b - a - 1));
        const double step = number(text.substr(b + 1));
        if (!(step > 0) || stop < start) throw Error("grid: need step > 0 and stop >= start");
        const auto count = static_cast<long long>(std::floor((stop - start) / step + 1e-9));
        // Rounded to 12 decimals so 0:1:0.05 yields 0.15, not 0.15000000000000002.
        for (long long i = 0; i <= count; ++i) grid.push_back(std::round((start + static_cast<double>(i) * step) * 1e12) / 1e12);
    } else {
        std::size_t pos = 0;
        while (pos <= text.size()) {
            const auto comma = std::min(text.find(',', pos), text.size());
            grid.push_back(number(text.substr(pos, comma - pos)));
            pos = comma + 1;
        }
    }
    if (grid.empty()) throw Error("grid: empty");
    return grid;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
    std::string data;
    std::string schema;
    std::string target;
    std::size_t trees = 30;
    std::size_t mtry = 0;
    std::uint64_t seed = default_seed;
    /// 0 trains on every row.
    double test_fraction = 0.3;
    LeafConfig leaf;
    std::string out;
    /// Held-out rows as CSV, for later predict/robustness runs.
    std::string test_out;
    /// Training rows as CSV, e.g. for the KDE baseline of transfer-test.
    std::string train_out;
    unsigned threads = 0;
};

struct TrainSummary {
    ModelFile model;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    double train_accuracy = 0.0;
    std::optional<double> test_accuracy;
    std::optional<double> forest_test_accuracy;
};

template <class Model>
double accuracy(const Model& model, const DataTable& table) {
    std::size_t right = 0;
    for (std::size_t i = 0; i < table.rows(); ++i) right += predict(model, table.row(i)) == table.label(i) ? 1 : 0;
    return static_cast<double>(right) / static_cast<double>(table.rows());
}

inline TrainSummary cmd_train(const TrainOptions& opt, std::ostream& report) {
    if (opt.out.empty()) throw Error("train: --out is required");
    LoadOptions load;
    if (!opt.schema.empty()) load.sidecar = load_schema_spec(opt.schema);
    if (!opt.target.empty()) load.target = opt.target;
    const std::string bytes = read_file(opt.data);
    const DataTable full = load_csv_text(bytes, load);

    std::optional<DataTable> train;
    std::optional<DataTable> test;
    if (opt.test_fraction > 0.0) {
        auto [a, b] = train_test_split(full, opt.test_fraction, derive_seed(opt.seed, split_stream));
        train.emplace(std::move(a));
        test.emplace(std::move(b));
    } else {
        train.emplace(full);
    }

    TrainSummary s;
    s.model.forest = fit_forest(*train, ForestOptions{opt.trees, opt.mtry, opt.seed, opt.threads});
    s.model.model = convert_forest(s.model.forest, *train, opt.leaf);
    s.model.leaf_config = opt.leaf;
    s.model.provenance = Provenance{opt.seed, opt.trees, s.model.forest.mtry, content_hash(bytes), train->rows(), opt.test_fraction};
    s.n_train = train->rows();
    s.train_accuracy = accuracy(s.model.model, *train);
    report << "rows: " << s.n_train << " train";
    if (test) {
        s.n_test = test->rows();
        s.test_accuracy = accuracy(s.model.model, *test);
        std::size_t right = 0;
        for (std::size_t i = 0; i < test->rows(); ++i) right += predict_forest(s.model.forest, test->row(i)) == test->label(i) ? 1 : 0;
        s.forest_test_accuracy = static_cast<double>(right) / static_cast<double>(test->rows());
        report << ", " << s.n_test << " test";
    }
    report << "\ntrees: " << opt.trees << ", mtry: " << s.model.forest.mtry << ", seed: " << opt.seed << '\n';
    report << "train accuracy: " << fmt(s.train_accuracy) << '\n';
    if (test) {
        report << "test accuracy: " << fmt(*s.test_accuracy) << '\n';
        report << "test accuracy (forest vote): " << fmt(*s.forest_test_accuracy) << '\n';
    }

    std::string test_csv;
    if (!opt.test_out.empty()) {
        if (!test) throw Error("train: --test-out needs a test split");
        std::ostringstream os;
        write_csv(*test, os);
        test_csv = os.str();
    }
    std::string train_csv;
    if (!opt.train_out.empty()) {
        std::ostringstream os;
        write_csv(*train, os);
        train_csv = os.str();
    }
    save_model(s.model, opt.out);
    if (!opt.test_out.empty()) write_file_atomic(opt.test_out, test_csv);
    if (!opt.train_out.empty()) write_file_atomic(opt.train_out, train_csv);
    return s;
}

// ---------------------------------------------------------------------------
// predict

struct PredictOptions {
    std::string model;
    std::string data;
    std::string out;
};

/// CSV: row, label, one posterior column per class, log_px. `?` cells are marginalised.
inline std::string predict_csv(const GeFPlus& model, const DataTable& table) {
    const Schema& schema = *model.schema;
    std::ostringstream os;
    os << "row,label";
    for (const auto& l : schema.target().labels) os << ",p_" << l;
    os << ",log_px\n";
    for (std::size_t i = 0; i < table.rows(); ++i) {
        const auto lj = class_log_joint(model, table.row(i));
        const double lp = log_sum_exp(lj);
        if (!std::isfinite(lp)) throw ModelError("predict: row " + std::to_string(i) + " has zero density");
        os << i << ',' << schema.target().labels[argmax_lowest(std::span<const double>(lj))];
        for (double v : lj) os << ',' << fmt(std::exp(v - lp));
        os << ',' << fmt(lp) << '\n';
    }
    return os.str();
}

inline void cmd_predict(const PredictOptions& opt, std::ostream& out) {
    const auto m = load_model(opt.model);
    const auto table = load_csv_with_schema(opt.data, m.model.schema, true, false);
    emit(opt.out, predict_csv(m.model, table), out);
}

// ---------------------------------------------------------------------------
// robustness / curves

struct RobustnessCommandOptions {
    std::string model;
    std::string data;
    double tol = 1e-3;
    bool contaminate_root = true;
    double mean_scale = 1.0;
    std::vector<double> grid = default_threshold_grid();
    std::size_t min_bucket = 30;
    std::string out;
    std::string curves_out;
    std::size_t rank_k = 10;
    unsigned threads = 0;
};

inline RobustnessOptions search_options(const RobustnessCommandOptions& opt) {
    RobustnessOptions r;
    r.tol = opt.tol;
    r.contaminate_root_mixture = opt.contaminate_root;
    r.mean_scale = opt.mean_scale;
    return r;
}

inline std::string curves_csv(const std::vector<CurvePoint>& curve) {
    std::ostringstream os;
    os << "threshold,acc_below,acc_above,n_below,n_above\n";
    for (const auto& p : curve) os << fmt(p.threshold) << ',' << fmt(p.acc_below) << ',' << fmt(p.acc_above) << ',' << p.n_below << ',' << p.n_above << '\n';
    return os.str();
}

struct RobustnessReport {
    std::vector<RobustnessResult> results;
    std::vector<CurvePoint> curve;
    std::vector<std::size_t> lowest;
    std::vector<std::size_t> highest;
};

inline RobustnessReport cmd_robustness(const RobustnessCommandOptions& opt, std::ostream& report) {
    const auto m = load_model(opt.model);
    const auto table = load_csv_with_schema(opt.data, m.model.schema, true);
    const auto& labels = m.model.schema->target().labels;

    RobustnessReport r;
    r.results = robustness_all(m.model, table, search_options(opt), opt.threads);

    std::ostringstream rows;
    rows << "row,predicted,label,epsilon_star,certified,iterations\n";
    ScoreSeries eps{{}, {}, "epsilon_star"};
    for (std::size_t i = 0; i < r.results.size(); ++i) {
        const auto& res = r.results[i];
        rows << i << ',' << labels[res.predicted_label] << ',' << (table.has_labels() ? labels[table.label(i)] : std::string{}) << ','
             << fmt(res.epsilon_star) << ',' << (res.certified ? 1 : 0) << ',' << res.iterations << '\n';
        eps.scores.push_back(res.epsilon_star);
        eps.ids.push_back(i);
    }
    std::tie(r.lowest, r.highest) = rank_extremes(eps, opt.rank_k);

    std::string curve_text;
    if (!opt.curves_out.empty()) {
        if (!table.has_labels()) throw DataError("robustness: curves need the class column in the data");
        std::vector<bool> correct(r.results.size());
        for (std::size_t i = 0; i < correct.size(); ++i) correct[i] = r.results[i].predicted_label == table.label(i);
        r.curve = accuracy_curves(eps.scores, correct, opt.grid, opt.min_bucket);
        curve_text = curves_csv(r.curve);
    }

    auto listing = [&](const char* name, const std::vector<std::size_t>& ids) {
        report << name << ':';
        for (auto id : ids) report << ' ' << id << '(' << fmt(r.results[id].epsilon_star) << ')';
        report << '\n';
    };
    listing("lowest epsilon*", r.lowest);
    listing("highest epsilon*", r.highest);

    emit(opt.out, rows.str(), report);
    if (!opt.curves_out.empty()) write_file_atomic(opt.curves_out, curve_text);
    return r;
}

inline std::vector<CurvePoint> cmd_curves(const RobustnessCommandOptions& opt, std::ostream& out) {
    const auto m = load_model(opt.model);
    const auto table = load_csv_with_schema(opt.data, m.model.schema, true);
    if (!table.has_labels()) throw DataError("curves: data has no class column");
    auto curve = robustness_accuracy_curves(m.model, table, opt.grid, opt.min_bucket, search_options(opt));
    emit(opt.out, curves_csv(curve), out);
    return curve;
}

// ---------------------------------------------------------------------------
// transfer-test

struct TransferOptions {
    std::string model;
    std::string in_domain;
    std::string out_of_domain;
    /// Training CSV for the KDE baseline; the baseline is skipped without it.
    std::string train;
    /// Per-row scores as CSV.
    std::string out;
};

struct TransferReport {
    std::size_t n_in = 0;
    std::size_t n_out = 0;
    double auc_log_px = 0.0;
    double auc_confidence = 0.0;
    std::optional<double> auc_kde;
};

/// Scores both sets; AUCs treat in-domain rows as positives (higher score = more in-domain).
inline TransferReport transfer_test(const GeFPlus& model, const DataTable& in_domain, const DataTable& out_of_domain, const KdeModel* kde,
                                    std::string* scores_csv = nullptr) {
    TransferReport r;
    r.n_in = in_domain.rows();
    r.n_out = out_of_domain.rows();
    const auto lp_in = outlier_scores(model, in_domain, "in");
    const auto lp_out = outlier_scores(model, out_of_domain, "out");
    const auto cf_in = confidence_scores(model, in_domain, "in");
    const auto cf_out = confidence_scores(model, out_of_domain, "out");
    r.auc_log_px = roc_auc(lp_in.scores, lp_out.scores);
    r.auc_confidence = roc_auc(cf_in.scores, cf_out.scores);
    std::optional<ScoreSeries> kd_in;
    std::optional<ScoreSeries> kd_out;
    if (kde) {
        kd_in = kde_scores(*kde, in_domain, "in");
        kd_out = kde_scores(*kde, out_of_domain, "out");
        r.auc_kde = roc_auc(kd_in->scores, kd_out->scores);
    }
    if (scores_csv) {
        std::ostringstream os;
        os << "source,row,log_px,confidence,kde\n";
        auto rows = [&](const ScoreSeries& lp, const ScoreSeries& cf, const std::optional<ScoreSeries>& kd) {
            for (std::size_t i = 0; i < lp.scores.size(); ++i)
                os << lp.source << ',' << lp.ids[i] << ',' << fmt(lp.scores[i]) << ',' << fmt(cf.scores[i]) << ',' << (kd ? fmt(kd->scores[i]) : std::string{})
                   << '\n';
        };
        rows(lp_in, cf_in, kd_in);
        rows(lp_out, cf_out, kd_out);
        *scores_csv = os.str();
    }
    return r;
}

inline TransferReport cmd_transfer_test(const TransferOptions& opt, std::ostream& report) {
    const auto m = load_model(opt.model);
    const auto in = load_csv_with_schema(opt.in_domain, m.model.schema, true, false);
    const auto out = load_csv_with_schema(opt.out_of_domain, m.model.schema, true, false);
    std::optional<KdeModel> kde;
    if (!opt.train.empty()) kde = kde_fit(load_csv_with_schema(opt.train, m.model.schema, false, false));
    std::string scores;
    const auto r = transfer_test(m.model, in, out, kde ? &*kde : nullptr, opt.out.empty() ? nullptr : &scores);
    report << "in-domain rows: " << r.n_in << ", out-of-domain rows: " << r.n_out << '\n';
    report << "auc log p(x): " << fmt(r.auc_log_px) << '\n';
    report << "auc max-confidence: " << fmt(r.auc_confidence) << '\n';
    if (r.auc_kde) report << "auc kde: " << fmt(*r.auc_kde) << '\n';
    if (!opt.out.empty()) write_file_atomic(opt.out, scores);
    return r;
}

}  // namespace gefs::cli
