#include <gtest/gtest.h>

#include "support.hpp"

using namespace gefs;
using namespace gefs::testing;

namespace {

/// One leaf, no features: p(x, y) is just the class distribution.
GeDT class_only(std::vector<double> probs) {
    auto schema = make_schema({}, probs.size());
    return single_leaf(schema, std::move(probs));
}

GeFPlus small_forest(std::uint64_t seed, std::size_t trees = 5) {
    const auto t = random_table(250, 2, {3}, 3, seed);
    return convert_forest(fit_forest(t, {.n_trees = trees, .seed = seed}), t);
}

void expect_close(double got, double want, const std::string& what) {
    EXPECT_NEAR(got, want, 1e-9 * std::max(1.0, std::abs(want))) << what;
}

}  // namespace

TEST(LeafBounds, ZeroEpsilonIsExact) {
    auto schema = make_schema({continuous("x"), categorical("k", 2)}, 2);
    const auto g = single_leaf(schema, {0.3, 0.7}, {0.5, 0.0}, {2.0, 0.0}, {0.25, 0.75});
    const std::vector<double> x{1.0, 1.0};
    const auto b = leaf_diff_bounds(g.leaves[0], *schema, x, 0, 1, 0.0);
    const double want = std::exp(normal_log_pdf(1.0, 0.5, 2.0)) * 0.75 * 0.4;
    EXPECT_NEAR(b.lower, want, 1e-15);
    EXPECT_NEAR(b.upper, want, 1e-15);
}

TEST(LeafBounds, ClassFactorRange) {
    const auto g = class_only({0.9, 0.1});
    for (double eps : {0.0, 0.1, 0.3, 0.7}) {
        const auto b = leaf_diff_bounds(g.leaves[0], *g.schema, std::vector<double>{}, 0, 1, eps);
        EXPECT_NEAR(b.upper, -0.8 * (1 - eps) + eps, 1e-15);
        EXPECT_NEAR(b.lower, -0.8 * (1 - eps) - eps, 1e-15);
    }
}

TEST(LeafBounds, FullContaminationTakesFactorMaxima) {
    auto schema = make_schema({continuous("x"), categorical("k", 3)}, 2);
    const auto g = single_leaf(schema, {0.6, 0.4}, {0.0, 0.0}, {1.0, 0.0}, {0.2, 0.3, 0.5});
    const std::vector<double> x{0.7, 2.0};
    const auto b = leaf_diff_bounds(g.leaves[0], *schema, x, 0, 1, 1.0);
    // Mean can move to x itself; category and class probabilities can reach one.
    EXPECT_NEAR(b.upper, std::exp(normal_log_pdf(0.0, 0.0, 1.0)), 1e-15);
    EXPECT_NEAR(b.lower, -b.upper, 1e-15);
}

TEST(LeafBounds, OutsideCellIsZero) {
    auto schema = make_schema({continuous("x")}, 2);
    auto g = single_leaf(schema, {0.5, 0.5});
    g.leaves[0].cell.restrict(SplitTest::at_threshold(0, 0.0), true, 0);
    g.leaves[0].interval_log_mass = {std::log(0.5)};
    const auto b = leaf_diff_bounds(g.leaves[0], *schema, std::vector<double>{1.0}, 0, 1, 0.2);
    EXPECT_EQ(b.lower, 0.0);
    EXPECT_EQ(b.upper, 0.0);
    EXPECT_THROW(leaf_diff_bounds(g.leaves[0], *schema, std::vector<double>{missing_value}, 0, 1, 0.2), DataError);
    EXPECT_THROW(leaf_diff_bounds(g.leaves[0], *schema, std::vector<double>{0.0}, 1, 1, 0.2), Error);
    EXPECT_THROW(leaf_diff_bounds(g.leaves[0], *schema, std::vector<double>{0.0}, 0, 1, 1.5), Error);
}

TEST(SumNode, ContaminatedMaximum) {
    EXPECT_DOUBLE_EQ(detail::contaminated_sum({0.5, 0.5}, -2.0, -1.0, 0.5), -1.25);
    EXPECT_DOUBLE_EQ(detail::contaminated_sum({0.3, 0.7}, 4.0, 1.0, 0.0), 1.9);
    EXPECT_DOUBLE_EQ(detail::contaminated_sum({0.3, 0.7}, 4.0, 1.0, 1.0), 4.0);
}

TEST(Credal, MatchesVertexOracleOnTrees) {
    auto schema = make_schema({continuous("a"), categorical("b", 3), continuous("c")}, 3);
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        Rng rng(seed);
        const auto g = random_gedt(schema, 4, rng);
        const auto x = random_point(*schema, rng);
        for (double eps : {0.0, 0.1, 0.5, 0.9, 1.0})
            for (Label y = 0; y < 3; ++y)
                for (Label alt = 0; alt < 3; ++alt) {
                    if (y == alt) continue;
                    const double want = oracle_max_diff({&g}, false, x, y, alt, eps, false);
                    expect_close(credal_max_diff(g, x, y, alt, {eps, true, 1.0}), want, "seed " + std::to_string(seed));
                }
    }
}

TEST(Credal, MatchesVertexOracleOnMixtures) {
    auto schema = make_schema({continuous("a"), categorical("b", 2)}, 2);
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        Rng rng(seed + 1000);
        std::vector<GeDT> comps;
        for (int i = 0; i < 3; ++i) comps.push_back(random_gedt(schema, 2, rng));
        const auto model = build_gef_plus(comps);
        const std::vector<const GeDT*> ptrs{&model.components[0], &model.components[1], &model.components[2]};
        const auto x = random_point(*schema, rng);
        for (bool root : {true, false})
            for (double eps : {0.0, 0.1, 0.5, 0.9, 1.0}) {
                const double want = oracle_max_diff(ptrs, true, x, 0, 1, eps, root, 0.5);
                expect_close(credal_max_diff(model, x, 0, 1, {eps, root, 0.5}), want, "seed " + std::to_string(seed));
            }
    }
}

TEST(Credal, ZeroEpsilonIsInferenceDifference) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto model = small_forest(seed);
        Rng rng(seed);
        for (int k = 0; k < 40; ++k) {
            const auto x = random_point(*model.schema, rng);
            const auto lj = class_log_joint(model, x);
            for (Label y = 0; y < 3; ++y)
                for (Label alt = 0; alt < 3; ++alt)
                    if (y != alt) expect_close(credal_max_diff(model, x, y, alt, {}), std::exp(lj[alt]) - std::exp(lj[y]), "");
        }
    }
}

TEST(Credal, PathAndFullTraversalAgreeExactly) {
    const auto model = small_forest(3, 8);
    Rng rng(9);
    for (int k = 0; k < 50; ++k) {
        const auto x = random_point(*model.schema, rng);
        for (double eps : {0.0, 0.05, 0.3, 1.0}) {
            const CredalQuery path(model, x, {eps, true, 1.0}, Traversal::path);
            const CredalQuery full(model, x, {eps, true, 1.0}, Traversal::full);
            for (Label y = 0; y < 3; ++y)
                for (Label alt = 0; alt < 3; ++alt)
                    if (y != alt) {
                        EXPECT_EQ(path.scaled_max_diff(y, alt), full.scaled_max_diff(y, alt));
                    }
        }
    }
}

TEST(Credal, ScalingAvoidsUnderflow) {
    // 400 features at a far point: p(x, y) underflows a double, the sign must not.
    std::vector<Column> cols;
    for (int j = 0; j < 400; ++j) cols.push_back(continuous("f" + std::to_string(j)));
    auto schema = make_schema(cols, 2);
    const auto g = single_leaf(schema, {0.7, 0.3});
    const std::vector<double> x(400, 3.0);
    EXPECT_EQ(std::exp(log_joint(g, x, 0)), 0.0);
    const CredalQuery q(g, x, {0.1, true, 1.0});
    EXPECT_LT(q.scaled_max_diff(0, 1), 0.0);
    EXPECT_GT(q.scaled_max_diff(1, 0), 0.0);
    EXPECT_TRUE(q.robust_for(0));
}

TEST(Search, ClosedFormFourNinths) {
    const auto g = class_only({0.9, 0.1});
    const auto r = robustness_epsilon(g, std::vector<double>{}, {.tol = 1e-4});
    EXPECT_EQ(r.predicted_label, 0u);
    EXPECT_TRUE(r.certified);
    EXPECT_NEAR(r.epsilon_star, 4.0 / 9.0, 1e-4);
    EXPECT_LE(r.epsilon_star, 4.0 / 9.0);
    EXPECT_EQ(r.iterations, search_iterations(1e-4));
    EXPECT_EQ(search_iterations(1e-3), 10u);
}

TEST(Search, TieIsNotCertified) {
    const auto g = class_only({0.5, 0.5});
    const auto r = robustness_epsilon(g, std::vector<double>{});
    EXPECT_EQ(r.predicted_label, 0u);
    EXPECT_FALSE(r.certified);
    EXPECT_EQ(r.epsilon_star, 0.0);
}

TEST(Search, NothingIsRobustAtFullContamination) {
    const auto model = small_forest(1);
    Rng rng(1);
    for (int k = 0; k < 30; ++k) {
        const auto x = random_point(*model.schema, rng);
        EXPECT_FALSE(is_robust_at(model, x, predict(model, x), {1.0, true, 1.0}));
        EXPECT_LT(robustness_epsilon(model, x).epsilon_star, 1.0);
    }
}

TEST(Search, PostHocVerification) {
    const double tol = 1e-3;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto model = small_forest(seed + 10);
        Rng rng(seed);
        for (int k = 0; k < 40; ++k) {
            const auto x = random_point(*model.schema, rng);
            const auto r = robustness_epsilon(model, x, {.tol = tol});
            if (!r.certified) continue;
            EXPECT_TRUE(is_robust_at(model, x, r.predicted_label, {r.epsilon_star, true, 1.0}));
            if (r.epsilon_star + 2 * tol <= 1.0) {
                EXPECT_FALSE(is_robust_at(model, x, r.predicted_label, {r.epsilon_star + 2 * tol, true, 1.0}));
            }
        }
    }
}

TEST(Search, RobustnessIsMonotone) {
    const auto model = small_forest(4);
    Rng rng(4);
    for (int k = 0; k < 40; ++k) {
        const auto x = random_point(*model.schema, rng);
        const Label y = predict(model, x);
        bool seen_fail = false;
        for (int i = 0; i <= 40; ++i) {
            const bool ok = is_robust_at(model, x, y, {i / 40.0, true, 1.0});
            if (seen_fail) {
                EXPECT_FALSE(ok) << "eps " << i / 40.0;
            }
            seen_fail = seen_fail || !ok;
        }
    }
}

TEST(Search, SampledContaminationsNeverFlipTheLabel) {
    const auto model = small_forest(6);
    Rng rng(6);
    for (int k = 0; k < 20; ++k) {
        const auto x = random_point(*model.schema, rng);
        const auto r = robustness_epsilon(model, x);
        if (!r.certified) continue;
        const double eps = r.epsilon_star;
        const double bound = credal_max_diff(model, x, r.predicted_label, (r.predicted_label + 1) % 3, {eps, true, 1.0});
        for (int s = 0; s < 50; ++s) {
            const auto lj = sampled_contaminated_log_joint(model, x, eps, true, 1.0, rng);
            EXPECT_EQ(argmax_lowest(std::span<const double>(lj)), r.predicted_label);
            const Label alt = (r.predicted_label + 1) % 3;
            EXPECT_LE(std::exp(lj[alt]) - std::exp(lj[r.predicted_label]), bound + 1e-12 * std::abs(bound));
        }
    }
}

TEST(Search, RootContaminationOnlyLowersEpsilon) {
    const auto model = small_forest(7);
    Rng rng(7);
    for (int k = 0; k < 30; ++k) {
        const auto x = random_point(*model.schema, rng);
        const auto with = robustness_epsilon(model, x, {.contaminate_root_mixture = true});
        const auto without = robustness_epsilon(model, x, {.contaminate_root_mixture = false});
        EXPECT_LE(with.epsilon_star, without.epsilon_star);
    }
}

TEST(Search, ParallelMatchesSerial) {
    const auto t = random_table(120, 2, {3}, 3, 2);
    const auto model = convert_forest(fit_forest(t, {.n_trees = 6, .seed = 2}), t);
    const auto a = robustness_all(model, t, {}, 1);
    const auto b = robustness_all(model, t, {}, 4);
    ASSERT_EQ(a.size(), t.rows());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].epsilon_star, b[i].epsilon_star);
        EXPECT_EQ(a[i].predicted_label, b[i].predicted_label);
    }
}

TEST(Search, Errors) {
    const auto g = class_only({0.9, 0.1});
    EXPECT_THROW(robustness_epsilon(g, std::vector<double>{}, {.tol = 0.0}), Error);
    EXPECT_THROW(robustness_epsilon(g, std::vector<double>{}, {.tol = 1.0}), Error);
    EXPECT_THROW(is_robust_at(g, std::vector<double>{}, 2, {}), DataError);
    EXPECT_THROW(is_robust_at(g, std::vector<double>{}, 0, {-0.1, true, 1.0}), Error);
}
