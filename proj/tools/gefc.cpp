#include <iostream>
#include <string>

#include <CLI11/CLI11.hpp>

#include "gefs/cli.hpp"

namespace {

void add_search_flags(CLI::App& cmd, gefs::cli::RobustnessCommandOptions& o, std::string& grid) {
    cmd.add_option("--model", o.model, "Model file from `gefc train`")->required();
    cmd.add_option("--data", o.data, "CSV to score (columns matched by name)")->required();
    cmd.add_option("--tol", o.tol, "Bisection resolution on epsilon")->capture_default_str();
    cmd.add_option("--contaminate-root", o.contaminate_root, "Also contaminate the uniform mixture over trees (true|false)")->capture_default_str();
    cmd.add_option("--mean-scale", o.mean_scale, "Gaussian mean interval half-width, in units of eps * sigma")->capture_default_str();
    cmd.add_option("--grid", grid, "Thresholds as start:stop:step or a comma list")->capture_default_str();
    cmd.add_option("--min-bucket", o.min_bucket, "Fewest rows for a bucket accuracy to be reported")->capture_default_str();
    cmd.add_option("--threads", o.threads, "Worker threads (0 = all cores)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gefc: generative forests from random forests, with outlier scores and credal robustness"};
    app.require_subcommand(1);

    gefs::cli::TrainOptions train;
    bool no_truncation = false;
    auto* c_train = app.add_subcommand("train", "Fit a random forest, convert it to a generative forest, save the model");
    c_train->add_option("--data", train.data, "Training CSV with a header row")->required();
    c_train->add_option("--schema", train.schema, "Schema sidecar (name: continuous|categorical[:k]|target)");
    c_train->add_option("--target", train.target, "Class column name (default: last column)");
    c_train->add_option("--trees", train.trees, "Number of trees")->capture_default_str();
    c_train->add_option("--mtry", train.mtry, "Features per split (0 = ceil(sqrt(m)))")->capture_default_str();
    c_train->add_option("--seed", train.seed, "Master seed")->capture_default_str();
    c_train->add_option("--test-fraction", train.test_fraction, "Held-out fraction (0 = no split)")->capture_default_str();
    c_train->add_option("--alpha", train.leaf.alpha, "Additive smoothing for class and categorical factors")->capture_default_str();
    c_train->add_flag("--no-truncation", no_truncation, "Keep untruncated Normal leaf factors");
    c_train->add_option("--out", train.out, "Model file to write")->required();
    c_train->add_option("--test-out", train.test_out, "Write the held-out rows to this CSV");
    c_train->add_option("--train-out", train.train_out, "Write the training rows to this CSV");
    c_train->add_option("--threads", train.threads, "Worker threads (0 = all cores)");

    gefs::cli::PredictOptions pred;
    auto* c_pred = app.add_subcommand("predict", "Label, posterior and log p(x) per row; `?` cells are marginalised");
    c_pred->add_option("--model", pred.model, "Model file")->required();
    c_pred->add_option("--data", pred.data, "CSV to score")->required();
    c_pred->add_option("--out", pred.out, "Output CSV (default: stdout)");

    gefs::cli::RobustnessCommandOptions rob;
    std::string rob_grid = "0:1:0.05";
    auto* c_rob = app.add_subcommand("robustness", "Per-row epsilon* by bisection, accuracy curves and extreme rankings");
    add_search_flags(*c_rob, rob, rob_grid);
    c_rob->add_option("--out", rob.out, "Per-row CSV (default: stdout)");
    c_rob->add_option("--curves", rob.curves_out, "Write robustness-vs-accuracy curves to this CSV");
    c_rob->add_option("--rank", rob.rank_k, "How many lowest/highest epsilon* rows to list")->capture_default_str();

    gefs::cli::RobustnessCommandOptions cur;
    std::string cur_grid = "0:1:0.05";
    auto* c_cur = app.add_subcommand("curves", "Robustness-vs-accuracy curves only");
    add_search_flags(*c_cur, cur, cur_grid);
    c_cur->add_option("--out", cur.out, "Curves CSV (default: stdout)");

    gefs::cli::TransferOptions tr;
    auto* c_tr = app.add_subcommand("transfer-test", "ROC AUC of in-domain vs out-of-domain rows for log p(x), max-confidence and KDE");
    c_tr->add_option("--model", tr.model, "Model trained on the in-domain data")->required();
    c_tr->add_option("--data", tr.in_domain, "In-domain test CSV")->required();
    c_tr->add_option("--ood", tr.out_of_domain, "Out-of-domain CSV")->required();
    c_tr->add_option("--train", tr.train, "In-domain training CSV, enables the KDE baseline");
    c_tr->add_option("--out", tr.out, "Per-row scores CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "gefc: error: " << e.what() << '\n';
        return 2;
    }

    try {
        if (*c_train) {
            train.leaf.truncate = !no_truncation;
            gefs::cli::cmd_train(train, std::cout);
        } else if (*c_pred) {
            gefs::cli::cmd_predict(pred, std::cout);
        } else if (*c_rob) {
            rob.grid = gefs::cli::parse_grid(rob_grid);
            gefs::cli::cmd_robustness(rob, std::cout);
        } else if (*c_cur) {
            cur.grid = gefs::cli::parse_grid(cur_grid);
            gefs::cli::cmd_curves(cur, std::cout);
        } else if (*c_tr) {
            gefs::cli::cmd_transfer_test(tr, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "gefc: error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
