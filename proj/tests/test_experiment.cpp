#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "tnpde/experiment.hpp"

using namespace tnpde;

namespace {

RunResult fake_run(ArchitectureSpec a, std::uint64_t seed, std::optional<std::size_t> epoch, double err) {
  RunResult r;
  r.problem = "bsb";
  r.architecture = a;
  r.param_count = a.formula_param_count();
  r.seed = seed;
  r.epochs_run = 3000;
  r.convergence_epoch = epoch;
  r.final_loss = 0.25 + 0.001 * static_cast<double>(seed);
  r.reference_y0 = 12.336780599567432;
  r.final_y0 = r.reference_y0 * (1.0 + err);
  r.rel_error = std::abs(err);
  r.reached_1pct = std::abs(err) < 0.01;
  r.wall_time_s = 1.5;
  return r;
}

std::string strip_wall_time(const std::string& csv) {
  std::istringstream is(csv);
  std::string line, out;
  while (std::getline(is, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

ExperimentPlan tiny_plan() {
  ExperimentPlan plan;
  plan.problem = "bsb";
  plan.steps = 5;
  plan.train.epochs = 3;
  plan.train.batch_size = 8;
  plan.seeds = {1, 2};
  plan.auto_threshold = false;
  plan.convergence.threshold = 100.0;
  return plan;
}

}  // namespace

TEST(Enumerate, CohortFor353) {
  const auto m = enumerate_dnn_matches(353, 11);
  EXPECT_EQ(m, (std::vector<std::pair<std::size_t, std::size_t>>{{2, 82}, {6, 35}}));
  EXPECT_TRUE(enumerate_dnn_matches(13, 11).empty());
}

TEST(Enumerate, EveryMatchBuildsWithExactCount) {
  for (const std::size_t target : {353u, 481u, 737u, 1057u, 2000u}) {
    std::size_t brute = 0;
    for (std::size_t x = 1; x <= target; ++x)
      for (std::size_t y = 1; y <= target; ++y) brute += 12 * x + (x + 1) * y + (y + 1) == target;
    const auto m = enumerate_dnn_matches(target, 11);
    EXPECT_EQ(m.size(), brute) << target;
    for (const auto& [x, y] : m) {
      const auto net = build_network(ArchitectureSpec::dnn(x, y, 11), Activation::tanh, InitScheme::glorot, 0);
      EXPECT_EQ(param_count(net), target) << x << "," << y;
    }
  }
  const auto c = enumerate_dnn_matches(ArchitectureSpec::dnn(6, 35, 11).formula_param_count(), 11);
  EXPECT_NE(std::find(c.begin(), c.end(), std::make_pair<std::size_t, std::size_t>(6, 35)), c.end());
}

TEST(Enumerate, HalfSquareBondMeetsDenseCohort) {
  const auto cohort = same_count_cohort(ArchitectureSpec::tnn(16, 8, 11));
  EXPECT_NE(std::find(cohort.begin(), cohort.end(), ArchitectureSpec::dnn(16, 16, 11)), cohort.end());
  EXPECT_EQ(cohort.front(), ArchitectureSpec::tnn(16, 8, 11));
}

TEST(Sweeps, ArchitectureLists) {
  const auto bonds = bond_sweep_architectures(16, {4, 16}, 11);
  EXPECT_EQ(bonds.front(), ArchitectureSpec::tnn(16, 4, 11));
  EXPECT_NE(std::find(bonds.begin(), bonds.end(), ArchitectureSpec::dnn(6, 35, 11)), bonds.end());
  EXPECT_NE(std::find(bonds.begin(), bonds.end(), ArchitectureSpec::tnn(16, 16, 11)), bonds.end());
  const auto widths = width_sweep_architectures({16, 64}, 2, 11);
  EXPECT_NE(std::find(widths.begin(), widths.end(), ArchitectureSpec::tnn(64, 2, 11)), widths.end());
  EXPECT_THROW(width_sweep_architectures({99}, 2, 11), InvalidArchitecture);
}

TEST(Aggregate, TwoRunsUseSampleStd) {
  const auto a = ArchitectureSpec::tnn(16, 4, 11);
  const auto g = aggregate({fake_run(a, 1, 100, 0.001), fake_run(a, 2, 300, 0.003)}, ConvergenceParams{});
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(*g[0].mean_epoch, 200.0);
  EXPECT_NEAR(*g[0].std_epoch, 141.42135623730950488, 1e-12);
  EXPECT_EQ(*g[0].median_epoch, 200.0);
  EXPECT_EQ(g[0].frac_1pct, 1.0);
}

TEST(Aggregate, SingleRunAndNonConverged) {
  const auto a = ArchitectureSpec::dnn(6, 35, 11);
  const auto one = aggregate({fake_run(a, 1, 50, 0.02)}, ConvergenceParams{});
  EXPECT_EQ(*one[0].std_epoch, 0.0);
  EXPECT_EQ(one[0].frac_1pct, 0.0);

  const auto g =
      aggregate({fake_run(a, 1, 50, 0.0), fake_run(a, 2, std::nullopt, 0.0), fake_run(a, 3, std::nullopt, 0.0)},
                ConvergenceParams{});
  EXPECT_EQ(g[0].converged, 1u);
  EXPECT_EQ(g[0].not_converged, 2u);
  EXPECT_EQ(*g[0].mean_epoch, 50.0);
  EXPECT_TRUE(std::isinf(g[0].median_epoch_all));
}

TEST(Aggregate, MatchesBruteForceRecomputation) {
  Xoshiro256 rng(4);
  std::vector<RunResult> runs;
  const std::vector<ArchitectureSpec> archs{ArchitectureSpec::tnn(16, 4, 11), ArchitectureSpec::dnn(2, 82, 11),
                                            ArchitectureSpec::dnn(6, 35, 11)};
  for (const auto& a : archs)
    for (std::uint64_t s = 0; s < 7; ++s) {
      std::optional<std::size_t> e;
      if (rng.uniform() < 0.8) e = 1 + static_cast<std::size_t>(rng.uniform() * 2999);
      runs.push_back(fake_run(a, s, e, 0.03 * (rng.uniform() - 0.5)));
    }
  const auto groups = aggregate(runs, ConvergenceParams{});
  ASSERT_EQ(groups.size(), 3u);
  for (const auto& g : groups) {
    std::vector<double> e, err;
    std::size_t hit = 0;
    for (const auto& r : runs) {
      if (!(r.architecture == g.architecture)) continue;
      if (r.convergence_epoch) e.push_back(static_cast<double>(*r.convergence_epoch));
      err.push_back(*r.rel_error);
      hit += r.reached_1pct;
    }
    double m = 0.0;
    for (double v : e) m += v;
    m /= static_cast<double>(e.size());
    double ss = 0.0;
    for (double v : e) ss += (v - m) * (v - m);
    std::sort(e.begin(), e.end());
    const double med = e.size() % 2 ? e[e.size() / 2] : 0.5 * (e[e.size() / 2 - 1] + e[e.size() / 2]);
    EXPECT_NEAR(*g.mean_epoch, m, 1e-9);
    EXPECT_NEAR(*g.std_epoch, std::sqrt(ss / static_cast<double>(e.size() - 1)), 1e-9);
    EXPECT_EQ(*g.median_epoch, med);
    EXPECT_EQ(g.frac_1pct, static_cast<double>(hit) / 7.0);
    EXPECT_EQ(g.converged, e.size());
  }
}

TEST(Compare, BestDenseAndGap) {
  const auto t = ArchitectureSpec::tnn(16, 4, 11);
  const auto d1 = ArchitectureSpec::dnn(2, 82, 11), d2 = ArchitectureSpec::dnn(6, 35, 11);
  std::vector<RunResult> runs;
  for (std::uint64_t s = 0; s < 3; ++s) {
    runs.push_back(fake_run(t, s, 700, 0.001));
    runs.push_back(fake_run(d1, s, 500, 0.05));  // fast but inaccurate: filtered out
    runs.push_back(fake_run(d2, s, 1000, 0.002));
  }
  const auto cmp = compare_all(aggregate(runs, ConvergenceParams{}));
  ASSERT_EQ(cmp.size(), 1u);
  ASSERT_TRUE(cmp[0].best_dnn.has_value());
  EXPECT_EQ(cmp[0].best_dnn->architecture, d2);
  EXPECT_EQ(cmp[0].dnn_total, 2u);
  EXPECT_EQ(cmp[0].dnn_excluded, 1u);
  EXPECT_NEAR(*cmp[0].gap_percent, 30.0, 1e-12);
}

TEST(Compare, TiesPreferSmallerErrorThenSmallerWidth) {
  GroupSummary a, b, c;
  a.architecture = ArchitectureSpec::dnn(6, 35, 11);
  b.architecture = ArchitectureSpec::dnn(2, 82, 11);
  c.architecture = ArchitectureSpec::dnn(9, 9, 11);
  a.median_epoch_all = b.median_epoch_all = c.median_epoch_all = 400;
  a.median_rel_error = 0.001;
  b.median_rel_error = 0.001;
  c.median_rel_error = 0.0005;
  EXPECT_EQ(best_dense({a, b})->architecture, b.architecture);
  EXPECT_EQ(best_dense({a, b, c})->architecture, c.architecture);
  EXPECT_FALSE(best_dense({}).has_value());
  EXPECT_FALSE(gap_percent(INFINITY, INFINITY).has_value());
  EXPECT_EQ(*gap_percent(100, INFINITY), 100.0);
}

TEST(Csv, EmptyTableIsHeaderOnly) {
  std::ostringstream os;
  write_results_csv(os, {});
  EXPECT_EQ(os.str(),
            "problem,arch_kind,width_x,width_y_or_chi,param_count,seed,epochs_run,convergence_epoch,final_loss,"
            "final_y0,reference_y0,rel_error,reached_1pct,wall_time_s\n");
}

TEST(Csv, RowUsesEmptyMarkerForMissingValues) {
  RunResult r = fake_run(ArchitectureSpec::tnn(16, 4, 11), 3, std::nullopt, 0.004);
  std::ostringstream os;
  write_results_csv(os, {r});
  std::istringstream is(os.str());
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  EXPECT_EQ(row.rfind("bsb,tnn,16,4,353,3,3000,,", 0), 0u) << row;
  EXPECT_NE(row.find(",true,1.5"), std::string::npos);
  std::size_t commas = 0;
  for (char ch : row) commas += ch == ',';
  EXPECT_EQ(commas, 13u);
}

TEST(Csv, RoundTripReproducesTable) {
  std::vector<RunResult> runs;
  Xoshiro256 rng(9);
  for (std::uint64_t s = 0; s < 5; ++s) {
    runs.push_back(fake_run(ArchitectureSpec::dnn(2, 82, 11), s, s % 2 ? std::optional<std::size_t>(s * 97) : std::nullopt,
                            0.1 * (rng.uniform() - 0.5)));
    runs.push_back(fake_run(ArchitectureSpec::tnn(16, 4, 11), s, 1234, 1e-3 * rng.uniform()));
  }
  runs[3].final_y0.reset();
  runs[3].rel_error.reset();
  runs[3].final_loss.reset();
  runs[3].reached_1pct = false;
  std::ostringstream os;
  write_results_csv(os, runs);
  std::istringstream is(os.str());
  const auto back = read_results_csv(is);
  std::sort(runs.begin(), runs.end(), result_order);
  ASSERT_EQ(back.size(), runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) {
    EXPECT_EQ(back[i].architecture, runs[i].architecture);
    EXPECT_EQ(back[i].param_count, runs[i].param_count);
    EXPECT_EQ(back[i].seed, runs[i].seed);
    EXPECT_EQ(back[i].epochs_run, runs[i].epochs_run);
    EXPECT_EQ(back[i].convergence_epoch, runs[i].convergence_epoch);
    EXPECT_EQ(back[i].final_loss, runs[i].final_loss);
    EXPECT_EQ(back[i].final_y0, runs[i].final_y0);
    EXPECT_EQ(back[i].reference_y0, runs[i].reference_y0);
    EXPECT_EQ(back[i].rel_error, runs[i].rel_error);
    EXPECT_EQ(back[i].reached_1pct, runs[i].reached_1pct);
    EXPECT_EQ(back[i].wall_time_s, runs[i].wall_time_s);
  }
  std::ostringstream again;
  write_results_csv(again, back);
  EXPECT_EQ(again.str(), os.str());
}

TEST(Csv, UnwritablePathNamesThePath) {
  try {
    emit_csv({}, "/nonexistent-dir/x.csv");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent-dir/x.csv"), std::string::npos);
  }
}

TEST(RunPlan, SmokePlanHasOneRowPerArchitectureAndSeed) {
  ExperimentPlan plan = tiny_plan();
  plan.train.epochs = 1;
  plan.seeds = {5};
  plan.architectures = {ArchitectureSpec::tnn(16, 4, 11), ArchitectureSpec::dnn(6, 35, 11)};
  const auto rows = run_plan(plan);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_FALSE(r.convergence_epoch.has_value());
    EXPECT_EQ(r.param_count, r.architecture.formula_param_count());
    EXPECT_EQ(r.param_count, 353u);
    EXPECT_EQ(r.epochs_run, 1u);
    EXPECT_TRUE(r.final_y0.has_value());
    EXPECT_NEAR(r.reference_y0, 12.336780599567432, 1e-12);
  }
  EXPECT_FALSE(rows[0].architecture.is_tnn());  // dense rows sort first
}

TEST(RunPlan, WorkerCountDoesNotChangeOutput) {
  ExperimentPlan plan = tiny_plan();
  plan.architectures = {ArchitectureSpec::tnn(16, 4, 11), ArchitectureSpec::dnn(2, 82, 11)};
  const auto serial = run_plan(plan);
  plan.workers = 3;
  const auto parallel = run_plan(plan);
  std::ostringstream a, b;
  write_results_csv(a, serial);
  write_results_csv(b, parallel);
  EXPECT_EQ(strip_wall_time(a.str()), strip_wall_time(b.str()));
  ASSERT_EQ(serial.size(), parallel.size());
  for (std::size_t i = 0; i < serial.size(); ++i) EXPECT_EQ(serial[i].loss, parallel[i].loss);
}

TEST(RunPlan, RejectsBadPlans) {
  ExperimentPlan plan = tiny_plan();
  EXPECT_THROW(run_plan(plan), InvalidArgument);
  plan.architectures = {ArchitectureSpec::tnn(16, 4, 5)};
  EXPECT_THROW(run_plan(plan), InvalidArchitecture);
  plan.architectures = {ArchitectureSpec::tnn(16, 4, 11)};
  plan.seeds.clear();
  EXPECT_THROW(run_plan(plan), InvalidArgument);
  EXPECT_THROW(make_problem("heat"), InvalidArgument);
  EXPECT_THROW(make_problem("hjbx"), InvalidArgument);
  EXPECT_EQ(make_problem("hjb10").dim, 10u);
  EXPECT_EQ(make_problem("hjb").dim, 100u);
}

TEST(MatchDnn, EmptyLadderAndSelfMatch) {
  ExperimentPlan plan = tiny_plan();
  const auto tnn = ArchitectureSpec::tnn(16, 4, 11);
  EXPECT_THROW(experiment_match_dnn(plan, tnn, {}, MatchTolerances{}), InvalidArgument);
  const auto out = experiment_match_dnn(plan, tnn, {tnn}, MatchTolerances{});
  ASSERT_TRUE(out.match.has_value());
  EXPECT_EQ(out.match->architecture, tnn);
  EXPECT_EQ(out.match->param_count, 353u);
}

TEST(MatchDnn, RuleUsesEpochAndAccuracyTolerances) {
  GroupSummary t, c;
  t.median_epoch_all = 1000;
  t.median_rel_error = 0.02;
  c.median_epoch_all = 1090;
  c.median_rel_error = 0.021;
  EXPECT_FALSE(matches(c, t, MatchTolerances{0.1, 0.0}));
  EXPECT_TRUE(matches(c, t, MatchTolerances{0.1, 0.002}));
  c.median_epoch_all = 1200;
  EXPECT_FALSE(matches(c, t, MatchTolerances{0.1, 0.002}));
}

TEST(Threshold, OnePercentLevelBracketsExactLoss) {
  const auto c = calibrate_threshold("bsb", LossKind::hybrid, 100, 50, 4, 1);
  EXPECT_GT(c.threshold, c.exact_loss);
  EXPECT_EQ(c.threshold, std::max(c.low_loss, c.high_loss));
  EXPECT_GT(c.exact_loss, 1.0);
  EXPECT_LT(c.exact_loss, 4.0);
}

TEST(SeriesCsv, OneRowPerEpoch) {
  RunResult r = fake_run(ArchitectureSpec::tnn(16, 4, 11), 3, 2, 0.0);
  r.loss = {1.0, 0.0};
  r.y0 = {5.0, 6.0};
  std::ostringstream os;
  write_series_csv(os, {r}, 0.9);
  EXPECT_EQ(os.str(), "run_id,epoch,loss,smoothed_loss,y0\ntnn_16_4_s3,1,1,1,5\ntnn_16_4_s3,2,0,0.90000000000000002,6\n");
}
