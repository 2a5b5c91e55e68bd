#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tnpde/errors.hpp"
#include "tnpde/fbsde.hpp"
#include "tnpde/nn.hpp"
#include "tnpde/problems.hpp"
#include "tnpde/random.hpp"
#include "tnpde/training.hpp"

namespace tnpde {

// ---------------------------------------------------------------------------
// Problem registry

struct ReferenceValue {
  double value = 0.0;
  double std_error = 0.0;  // zero for closed forms
};

/// "bsb" (10-d), "hjb" (100-d) or "hjb<d>" for a d-dimensional HJB instance.
inline FBSDEProblem make_problem(const std::string& id, std::size_t steps = 50, std::size_t mc_samples = 100000,
                                 std::uint64_t mc_seed = 2024) {
  if (id == "bsb") {
    BSBParams p;
    p.steps = steps;
    return bsb_problem(p);
  }
  if (id.rfind("hjb", 0) == 0) {
    HJBParams p;
    if (id.size() > 3) {
      const std::string digits = id.substr(3);
      if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }))
        throw InvalidArgument("unknown problem '" + id + "'");
      p.dim = std::stoul(digits);
      if (p.dim < 1) throw InvalidArgument("unknown problem '" + id + "'");
    }
    p.steps = steps;
    p.mc_samples = mc_samples;
    p.mc_seed = mc_seed;
    return hjb_problem(p);
  }
  throw InvalidArgument("unknown problem '" + id + "'");
}

inline ReferenceValue reference_y0(const std::string& id, std::size_t mc_samples = 100000,
                                   std::uint64_t mc_seed = 2024) {
  const FBSDEProblem prob = make_problem(id, 50, mc_samples, mc_seed);
  if (id == "bsb") return {prob.exact(0.0, prob.x0), 0.0};
  const McEstimate e = HjbReferenceCache::get(0.0, prob.x0, mc_samples, mc_seed, prob.horizon);
  return {e.value, e.std_error};
}

/// Loss level of a solution that is off by 1%: the mean training loss of
/// 0.99 u and 1.01 u (u the closed form, or Monte Carlo for HJB) over
/// `batches` fresh path batches, taking the larger of the two.
struct ThresholdCalibration {
  double threshold = 0.0;
  double exact_loss = 0.0;  // the unscaled reference, for comparison
  double low_loss = 0.0;    // 0.99 u
  double high_loss = 0.0;   // 1.01 u
};

inline ThresholdCalibration calibrate_threshold(const std::string& id, LossKind kind, std::size_t batch_size,
                                                std::size_t steps, std::size_t batches, std::uint64_t seed,
                                                std::size_t mc_samples = 2000) {
  if (batches < 1 || batch_size < 1) throw InvalidArgument("calibrate_threshold: need at least one batch and path");
  const FBSDEProblem problem = make_problem(id, steps, 1);
  auto model_for = [&](double scale) -> SolutionModel {
    if (id == "bsb") {
      BSBParams p;
      p.steps = steps;
      return bsb_solution_model(p, scale);
    }
    HJBParams p;
    p.dim = problem.dim;
    p.steps = steps;
    return hjb_solution_model(p, mc_samples, derive_seed(seed, {7}), scale);
  };
  auto mean_loss = [&](double scale) {
    const SolutionModel model = model_for(scale);
    double s = 0.0;
    for (std::size_t k = 0; k < batches; ++k) {
      Graph g;
      const Rollout r = rollout(problem, model, sample_paths(problem, batch_size, derive_seed(seed, {3, k})), g);
      s += loss(r, kind).value().item();
    }
    return s / static_cast<double>(batches);
  };
  ThresholdCalibration c;
  c.exact_loss = mean_loss(1.0);
  c.low_loss = mean_loss(0.99);
  c.high_loss = mean_loss(1.01);
  c.threshold = std::max(c.low_loss, c.high_loss);
  return c;
}

// ---------------------------------------------------------------------------
// Runs

struct ExperimentPlan {
  std::string problem = "bsb";
  std::vector<ArchitectureSpec> architectures;
  std::vector<std::uint64_t> seeds;
  TrainConfig train;  // its seed field is replaced per run
  std::size_t steps = 50;
  Activation activation = Activation::tanh;
  InitScheme init = InitScheme::glorot;
  ConvergenceParams convergence;
  std::size_t workers = 1;
  std::size_t mc_samples = 100000;
  std::uint64_t mc_seed = 2024;
  std::string output;
  /// Replace convergence.threshold by calibrate_threshold before running.
  bool auto_threshold = true;
  std::size_t calibration_batches = 20;
  std::uint64_t calibration_seed = 99;

  void validate() const {
    if (architectures.empty()) throw InvalidArgument("experiment plan has no architectures");
    if (seeds.empty()) throw InvalidArgument("experiment plan has no seeds");
    for (const auto& a : architectures) a.validate();
    convergence.validate();
  }
};

struct RunResult {
  std::string problem;
  ArchitectureSpec architecture;
  std::size_t param_count = 0;
  std::uint64_t seed = 0;
  std::size_t epochs_run = 0;
  std::optional<std::size_t> convergence_epoch;
  std::optional<double> final_loss;
  std::optional<double> final_y0;
  double reference_y0 = 0.0;
  std::optional<double> rel_error;
  bool reached_1pct = false;
  double wall_time_s = 0.0;
  std::vector<double> loss;  // per-epoch series
  std::vector<double> y0;
  std::string error;  // non-empty if training failed
};

/// Row identifier used in the per-epoch CSV.
inline std::string run_id(const RunResult& r) {
  return std::string(r.architecture.is_tnn() ? "tnn" : "dnn") + "_" + std::to_string(r.architecture.width) + "_" +
         std::to_string(r.architecture.second) + "_s" + std::to_string(r.seed);
}

/// Trains one (architecture, seed) pair. Init and path streams are derived
/// from the seed so runs are independent of scheduling.
inline RunResult run_single(const ExperimentPlan& plan, const ArchitectureSpec& arch, std::uint64_t seed,
                            const FBSDEProblem& problem, const ReferenceValue& reference) {
  RunResult r;
  r.problem = plan.problem;
  r.architecture = arch;
  r.seed = seed;
  r.reference_y0 = reference.value;
  Network net = build_network(arch, plan.activation, plan.init, derive_seed(seed, {1}));
  r.param_count = param_count(net);
  TrainConfig cfg = plan.train;
  cfg.seed = derive_seed(seed, {2});
  MetricsLog log;
  try {
    log = train(problem, net, cfg, [&](std::size_t, const MetricsLog& l) { r.epochs_run = l.epochs(); });
  } catch (const TrainingError& e) {
    r.error = e.what();
  }
  r.epochs_run = log.epochs();
  r.wall_time_s = log.total_wall_time();
  r.loss = log.loss;
  r.y0 = log.y0;
  if (r.error.empty()) {
    if (!log.loss.empty()) {
      r.final_loss = log.loss.back();
      r.convergence_epoch = convergence_epoch(log.loss, plan.convergence);
    }
    const double y = evaluate_u(net, 0.0, problem.x0);
    if (std::isfinite(y)) {
      r.final_y0 = y;
      r.rel_error = std::abs(y - reference.value) / std::abs(reference.value);
      r.reached_1pct = *r.rel_error < 0.01;
    }
  }
  return r;
}

inline bool result_order(const RunResult& a, const RunResult& b) {
  const auto key = [](const RunResult& r) {
    return std::make_tuple(r.architecture.is_tnn(), r.architecture.width, r.architecture.second, r.seed);
  };
  return key(a) < key(b);
}

using ProgressCallback = std::function<void(const RunResult&)>;

/// Runs every (architecture, seed) pair on a pool of plan.workers threads.
/// Output order is fixed by result_order, independent of scheduling.
/// Fills in the calibrated threshold if the plan asks for one.
inline std::optional<ThresholdCalibration> resolve_threshold(ExperimentPlan& plan) {
  if (!plan.auto_threshold) return std::nullopt;
  const auto c = calibrate_threshold(plan.problem, plan.train.loss_kind, plan.train.batch_size, plan.steps,
                                     plan.calibration_batches, plan.calibration_seed);
  plan.convergence.threshold = c.threshold;
  plan.auto_threshold = false;
  return c;
}

inline std::vector<RunResult> run_plan(ExperimentPlan plan, const ProgressCallback& progress = {}) {
  resolve_threshold(plan);
  plan.validate();
  const FBSDEProblem problem = make_problem(plan.problem, plan.steps, plan.mc_samples, plan.mc_seed);
  for (const auto& a : plan.architectures) {
    if (a.input_dim != problem.dim + 1) {
      throw InvalidArchitecture(a.name() + " has input width " + std::to_string(a.input_dim) + " but " + plan.problem +
                                " needs " + std::to_string(problem.dim + 1));
    }
  }
  const ReferenceValue reference = reference_y0(plan.problem, plan.mc_samples, plan.mc_seed);

  std::vector<std::pair<ArchitectureSpec, std::uint64_t>> jobs;
  for (const auto& a : plan.architectures)
    for (std::uint64_t s : plan.seeds) jobs.emplace_back(a, s);
  std::vector<RunResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      results[i] = run_single(plan, jobs[i].first, jobs[i].second, problem, reference);
      if (progress) {
        std::lock_guard lock(progress_mutex);
        progress(results[i]);
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(plan.workers, jobs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < n; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::stable_sort(results.begin(), results.end(), result_order);
  return results;
}

// ---------------------------------------------------------------------------
// Architecture enumeration

/// All (x, y) with (input_dim + 1) x + (x + 1) y + (y + 1) = target, x, y >= 1.
inline std::vector<std::pair<std::size_t, std::size_t>> enumerate_dnn_matches(std::size_t target,
                                                                               std::size_t input_dim) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t x = 1; x <= target; ++x) {
    const std::size_t fixed = (input_dim + 1) * x + 1;  // first layer plus the output bias
    if (fixed >= target) break;
    const std::size_t rest = target - fixed;  // = (x + 2) y
    if (rest % (x + 2) == 0 && rest / (x + 2) >= 1) out.emplace_back(x, rest / (x + 2));
  }
  return out;
}

/// The TNN followed by every dense network with exactly its parameter count.
inline std::vector<ArchitectureSpec> same_count_cohort(const ArchitectureSpec& tnn) {
  tnn.validate();
  std::vector<ArchitectureSpec> out{tnn};
  for (const auto& [x, y] : enumerate_dnn_matches(tnn.formula_param_count(), tnn.input_dim))
    out.push_back(ArchitectureSpec::dnn(x, y, tnn.input_dim));
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

struct GroupSummary {
  ArchitectureSpec architecture;
  std::size_t param_count = 0;
  std::size_t runs = 0;
  std::size_t converged = 0;
  std::size_t not_converged = 0;
  std::size_t failed = 0;
  std::optional<double> mean_epoch, std_epoch, median_epoch;
  std::optional<double> mean_rel_error, std_rel_error, median_rel_error;
  double frac_1pct = 0.0;
  /// Median over all runs with non-converged runs counted as +infinity.
  double median_epoch_all = std::numeric_limits<double>::infinity();
  /// Detector applied to the mean loss series over the group's runs.
  std::optional<std::size_t> mean_series_epoch;
};

namespace detail {
inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}
/// Sample standard deviation (n - 1); zero for a single value.
inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}
inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  const double a = v[n / 2 - 1], b = v[n / 2];
  if (std::isinf(a) || std::isinf(b)) return std::isinf(a) ? a : b;
  return 0.5 * (a + b);
}
}  // namespace detail

/// Groups results by architecture, in result_order.
inline std::vector<GroupSummary> aggregate(const std::vector<RunResult>& results, const ConvergenceParams& conv) {
  std::vector<RunResult> sorted = results;
  std::stable_sort(sorted.begin(), sorted.end(), result_order);
  std::vector<GroupSummary> out;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].architecture == sorted[i].architecture) ++j;
    GroupSummary g;
    g.architecture = sorted[i].architecture;
    g.param_count = sorted[i].param_count;
    g.runs = j - i;
    std::vector<double> epochs, all_epochs, errors;
    std::size_t reached = 0;
    std::vector<double> mean_series;
    std::size_t series_count = 0;
    for (std::size_t k = i; k < j; ++k) {
      const RunResult& r = sorted[k];
      if (!r.error.empty()) ++g.failed;
      if (r.convergence_epoch) {
        ++g.converged;
        epochs.push_back(static_cast<double>(*r.convergence_epoch));
        all_epochs.push_back(static_cast<double>(*r.convergence_epoch));
      } else {
        ++g.not_converged;
        all_epochs.push_back(std::numeric_limits<double>::infinity());
      }
      if (r.rel_error) errors.push_back(*r.rel_error);
      reached += r.reached_1pct;
      if (r.error.empty() && !r.loss.empty()) {
        if (mean_series.empty()) mean_series.assign(r.loss.size(), 0.0);
        if (r.loss.size() == mean_series.size()) {
          for (std::size_t e = 0; e < r.loss.size(); ++e) mean_series[e] += r.loss[e];
          ++series_count;
        }
      }
    }
    if (!epochs.empty()) {
      g.mean_epoch = detail::mean_of(epochs);
      g.std_epoch = detail::std_of(epochs);
      g.median_epoch = detail::median_of(epochs);
    }
    if (!errors.empty()) {
      g.mean_rel_error = detail::mean_of(errors);
      g.std_rel_error = detail::std_of(errors);
      g.median_rel_error = detail::median_of(errors);
    }
    g.median_epoch_all = detail::median_of(all_epochs);
    g.frac_1pct = static_cast<double>(reached) / static_cast<double>(g.runs);
    if (series_count > 0) {
      for (double& v : mean_series) v /= static_cast<double>(series_count);
      g.mean_series_epoch = convergence_epoch(mean_series, conv);
    }
    out.push_back(std::move(g));
    i = j;
  }
  return out;
}

// ---------------------------------------------------------------------------
// TNN versus dense comparisons

struct Comparison {
  GroupSummary tnn;
  std::optional<GroupSummary> best_dnn;  // none if no dense architecture qualifies
  std::size_t dnn_total = 0;
  std::size_t dnn_excluded = 0;  // dense architectures that failed the 1% filter
  /// (best_dnn - tnn) / best_dnn in percent, on median_epoch_all. Positive
  /// means the TNN converges in fewer epochs.
  std::optional<double> gap_percent;
};

/// A group passes the accuracy filter if at least `min_fraction` of its runs
/// end within 1% of the reference. Zero disables the filter.
inline bool reaches_accuracy(const GroupSummary& g, double min_fraction = 0.5) {
  return g.frac_1pct >= min_fraction;
}

/// Best dense architecture: smallest median convergence epoch (non-converged
/// runs count as +infinity), then smaller median error, then smaller x.
inline std::optional<GroupSummary> best_dense(const std::vector<GroupSummary>& dense) {
  std::optional<GroupSummary> best;
  for (const auto& g : dense) {
    if (!best) {
      best = g;
      continue;
    }
    const double e1 = g.median_rel_error.value_or(INFINITY), e0 = best->median_rel_error.value_or(INFINITY);
    if (std::make_tuple(g.median_epoch_all, e1, g.architecture.width) <
        std::make_tuple(best->median_epoch_all, e0, best->architecture.width))
      best = g;
  }
  return best;
}

inline std::optional<double> gap_percent(double tnn_epoch, double dnn_epoch) {
  if (std::isinf(dnn_epoch) && std::isinf(tnn_epoch)) return std::nullopt;
  if (std::isinf(dnn_epoch)) return 100.0;
  if (std::isinf(tnn_epoch)) return -INFINITY;
  return 100.0 * (dnn_epoch - tnn_epoch) / dnn_epoch;
}

/// Compares the TNN group against the dense groups with the same parameter
/// count in `groups`.
inline Comparison compare_to_dense(const GroupSummary& tnn, const std::vector<GroupSummary>& groups,
                                   double min_fraction = 0.5) {
  Comparison c;
  c.tnn = tnn;
  std::vector<GroupSummary> eligible;
  for (const auto& g : groups) {
    if (g.architecture.is_tnn() || g.param_count != tnn.param_count) continue;
    ++c.dnn_total;
    if (reaches_accuracy(g, min_fraction)) eligible.push_back(g);
    else ++c.dnn_excluded;
  }
  c.best_dnn = best_dense(eligible);
  if (c.best_dnn) c.gap_percent = gap_percent(tnn.median_epoch_all, c.best_dnn->median_epoch_all);
  return c;
}

inline std::vector<Comparison> compare_all(const std::vector<GroupSummary>& groups, double min_fraction = 0.5) {
  std::vector<Comparison> out;
  for (const auto& g : groups)
    if (g.architecture.is_tnn()) out.push_back(compare_to_dense(g, groups, min_fraction));
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

/// Each TNN(width, chi) for chi in `bonds` plus its same-count dense cohort.
inline std::vector<ArchitectureSpec> bond_sweep_architectures(std::size_t width, const std::vector<std::size_t>& bonds,
                                                              std::size_t input_dim) {
  std::vector<ArchitectureSpec> out;
  for (std::size_t chi : bonds) {
    for (const auto& a : same_count_cohort(ArchitectureSpec::tnn(width, chi, input_dim))) {
      if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
    }
  }
  return out;
}

inline std::vector<ArchitectureSpec> width_sweep_architectures(const std::vector<std::size_t>& widths,
                                                               std::size_t chi, std::size_t input_dim) {
  std::vector<ArchitectureSpec> out;
  for (std::size_t x : widths) {
    for (const auto& a : same_count_cohort(ArchitectureSpec::tnn(x, chi, input_dim))) {
      if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
    }
  }
  return out;
}

inline std::vector<RunResult> experiment_bond_sweep(ExperimentPlan plan, std::size_t width,
                                                    const std::vector<std::size_t>& bonds,
                                                    const ProgressCallback& progress = {}) {
  const std::size_t input_dim = make_problem(plan.problem, plan.steps, 1).dim + 1;
  plan.architectures = bond_sweep_architectures(width, bonds, input_dim);
  return run_plan(plan, progress);
}

inline std::vector<RunResult> experiment_width_sweep(ExperimentPlan plan, const std::vector<std::size_t>& widths,
                                                     std::size_t chi, const ProgressCallback& progress = {}) {
  const std::size_t input_dim = make_problem(plan.problem, plan.steps, 1).dim + 1;
  plan.architectures = width_sweep_architectures(widths, chi, input_dim);
  return run_plan(plan, progress);
}

struct MatchTolerances {
  double epoch = 0.1;     // candidate median epoch <= (1 + epoch) * TNN median epoch
  double accuracy = 0.0;  // candidate median error <= TNN median error + accuracy, or <= 1%
};

struct MatchOutcome {
  std::vector<RunResult> results;
  std::vector<GroupSummary> groups;
  GroupSummary tnn;
  std::optional<GroupSummary> match;  // smallest matching ladder entry
};

inline bool matches(const GroupSummary& candidate, const GroupSummary& tnn, const MatchTolerances& tol) {
  const bool speed = candidate.median_epoch_all <= (1.0 + tol.epoch) * tnn.median_epoch_all;
  const double err = candidate.median_rel_error.value_or(INFINITY);
  const double ref = tnn.median_rel_error.value_or(INFINITY);
  const bool accurate = err <= ref + tol.accuracy || err < 0.01;
  return speed && accurate;
}

/// Trains the TNN and every ladder entry, then reports the smallest ladder
/// architecture (by parameter count) that matches the TNN.
inline MatchOutcome experiment_match_dnn(ExperimentPlan plan, const ArchitectureSpec& tnn,
                                         const std::vector<ArchitectureSpec>& ladder, const MatchTolerances& tol,
                                         const ProgressCallback& progress = {}) {
  if (ladder.empty()) throw InvalidArgument("match-dnn: no candidates in the ladder");
  tnn.validate();
  plan.architectures = {tnn};
  for (const auto& a : ladder)
    if (std::find(plan.architectures.begin(), plan.architectures.end(), a) == plan.architectures.end())
      plan.architectures.push_back(a);
  resolve_threshold(plan);
  MatchOutcome out;
  out.results = run_plan(plan, progress);
  out.groups = aggregate(out.results, plan.convergence);
  std::vector<GroupSummary> candidates;
  for (const auto& g : out.groups) {
    if (g.architecture == tnn) out.tnn = g;
    if (std::find(ladder.begin(), ladder.end(), g.architecture) != ladder.end()) candidates.push_back(g);
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const GroupSummary& a, const GroupSummary& b) { return a.param_count < b.param_count; });
  for (const auto& g : candidates) {
    if (matches(g, out.tnn, tol)) {
      out.match = g;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{"problem",      "arch_kind",      "width_x",     "width_y_or_chi",
                                             "param_count",  "seed",           "epochs_run",  "convergence_epoch",
                                             "final_loss",   "final_y0",       "reference_y0", "rel_error",
                                             "reached_1pct", "wall_time_s"};
  return cols;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string format_optional(const std::optional<T>& v) {
  if (!v) return "";
  if constexpr (std::is_floating_point_v<T>) return format_double(*v);
  else return std::to_string(*v);
}

inline std::string csv_row(const RunResult& r) {
  std::ostringstream os;
  os << r.problem << ',' << (r.architecture.is_tnn() ? "tnn" : "dnn") << ',' << r.architecture.width << ','
     << r.architecture.second << ',' << r.param_count << ',' << r.seed << ',' << r.epochs_run << ','
     << format_optional(r.convergence_epoch) << ',' << format_optional(r.final_loss) << ','
     << format_optional(r.final_y0) << ',' << format_double(r.reference_y0) << ',' << format_optional(r.rel_error)
     << ',' << (r.reached_1pct ? "true" : "false") << ',' << format_double(r.wall_time_s);
  return os.str();
}

inline void write_results_csv(std::ostream& os, const std::vector<RunResult>& results) {
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  std::vector<RunResult> sorted = results;
  std::stable_sort(sorted.begin(), sorted.end(), result_order);
  for (const auto& r : sorted) os << csv_row(r) << '\n';
}

inline void emit_csv(const std::vector<RunResult>& results, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path, "cannot open for writing");
  write_results_csv(f, results);
  f.flush();
  if (!f) throw IoError(path, "write failed");
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}
}  // namespace detail

/// Parses a results CSV written by write_results_csv (series are not stored).
inline std::vector<RunResult> read_results_csv(std::istream& is, std::size_t input_dim_hint = 0) {
  std::string line;
  if (!std::getline(is, line)) throw InvalidArgument("results csv: missing header");
  const auto header = detail::split_csv_line(line);
  if (header != csv_columns()) throw InvalidArgument("results csv: unexpected header");
  std::vector<RunResult> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) throw InvalidArgument("results csv: wrong field count in '" + line + "'");
    auto opt_d = [](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      return std::stod(s);
    };
    RunResult r;
    r.problem = f[0];
    std::size_t input_dim = input_dim_hint;
    if (input_dim == 0) input_dim = make_problem(r.problem, 1, 1).dim + 1;
    const std::size_t x = std::stoul(f[2]), y = std::stoul(f[3]);
    if (f[1] == "tnn") r.architecture = ArchitectureSpec::tnn(x, y, input_dim);
    else if (f[1] == "dnn") r.architecture = ArchitectureSpec::dnn(x, y, input_dim);
    else throw InvalidArgument("results csv: unknown arch_kind '" + f[1] + "'");
    r.param_count = std::stoul(f[4]);
    r.seed = std::stoull(f[5]);
    r.epochs_run = std::stoul(f[6]);
    if (!f[7].empty()) r.convergence_epoch = std::stoul(f[7]);
    r.final_loss = opt_d(f[8]);
    r.final_y0 = opt_d(f[9]);
    r.reference_y0 = std::stod(f[10]);
    r.rel_error = opt_d(f[11]);
    if (f[12] != "true" && f[12] != "false") throw InvalidArgument("results csv: bad boolean '" + f[12] + "'");
    r.reached_1pct = f[12] == "true";
    r.wall_time_s = std::stod(f[13]);
    out.push_back(std::move(r));
  }
  return out;
}

/// One row per epoch: run_id, epoch (1-based), loss, smoothed_loss, y0.
inline void write_series_csv(std::ostream& os, const std::vector<RunResult>& results, double alpha) {
  os << "run_id,epoch,loss,smoothed_loss,y0\n";
  std::vector<RunResult> sorted = results;
  std::stable_sort(sorted.begin(), sorted.end(), result_order);
  for (const auto& r : sorted) {
    if (r.loss.empty()) continue;
    const auto smooth = ema_smooth(r.loss, alpha);
    const std::string id = run_id(r);
    for (std::size_t e = 0; e < r.loss.size(); ++e) {
      os << id << ',' << e + 1 << ',' << format_double(r.loss[e]) << ',' << format_double(smooth[e]) << ','
         << format_double(r.y0[e]) << '\n';
    }
  }
}

/// Per-architecture statistics plus the convergence threshold in force.
inline void write_summary_csv(std::ostream& os, const std::string& problem, const std::vector<GroupSummary>& groups,
                              const ConvergenceParams& conv) {
  os << "problem,arch_kind,width_x,width_y_or_chi,param_count,runs,converged,not_converged,failed,mean_epoch,"
        "std_epoch,median_epoch,median_epoch_all,mean_series_epoch,mean_rel_error,std_rel_error,median_rel_error,"
        "frac_1pct,threshold_h,alpha,window,batch,tolerance\n";
  for (const auto& g : groups) {
    os << problem << ',' << (g.architecture.is_tnn() ? "tnn" : "dnn") << ',' << g.architecture.width << ','
       << g.architecture.second << ',' << g.param_count << ',' << g.runs << ',' << g.converged << ','
       << g.not_converged << ',' << g.failed << ',' << format_optional(g.mean_epoch) << ','
       << format_optional(g.std_epoch) << ',' << format_optional(g.median_epoch) << ','
       << (std::isinf(g.median_epoch_all) ? std::string() : format_double(g.median_epoch_all)) << ','
       << format_optional(g.mean_series_epoch) << ',' << format_optional(g.mean_rel_error) << ','
       << format_optional(g.std_rel_error) << ',' << format_optional(g.median_rel_error) << ','
       << format_double(g.frac_1pct) << ',' << format_double(conv.threshold) << ',' << format_double(conv.alpha)
       << ',' << conv.window << ',' << conv.batch << ',' << format_double(conv.tolerance) << '\n';
  }
}

}  // namespace tnpde
