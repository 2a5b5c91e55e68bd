// Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
// criterion fails. Usage: acceptance <path-to-tnpde-cli> [--quick]
// --quick shrinks the training runs to check plumbing only; its verdicts on
// criteria 5, 6, 7 and 9 are meaningless.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tnpde/alloc.hpp"
#include "tnpde/experiment.hpp"

using namespace tnpde;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Verdict& v) {
  std::printf("CRITERION %d %s: %s; %s\n", id, v.pass ? "PASS" : "FAIL", title.c_str(), v.detail.c_str());
  std::fflush(stdout);
  failures += !v.pass;
}

void note(const std::string& text) {
  std::printf("  %s\n", text.c_str());
  std::fflush(stdout);
}

std::string format(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double rel_err(const Tensor& a, const Tensor& b) {
  double scale = 1.0;
  for (double v : b.data()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, b) / scale;
}

// ---------------------------------------------------------------------------

Verdict parameter_counts() {
  const auto count = [](const ArchitectureSpec& a) {
    return param_count(build_network(a, Activation::tanh, InitScheme::glorot, 0));
  };
  const std::size_t tnn = count(ArchitectureSpec::tnn(16, 4, 11));
  const std::size_t dnn = count(ArchitectureSpec::dnn(6, 35, 11));
  const auto matches = enumerate_dnn_matches(353, 11);
  const bool ok = tnn == 353 && dnn == 353 &&
                  matches == std::vector<std::pair<std::size_t, std::size_t>>{{2, 82}, {6, 35}};
  std::string m;
  for (const auto& [x, y] : matches) m += "(" + std::to_string(x) + "," + std::to_string(y) + ")";
  return {ok, "TNN(16,4)=" + std::to_string(tnn) + " DNN(6,35)=" + std::to_string(dnn) + " matches(353,11)=" + m};
}

struct Primitive {
  const char* name;
  std::vector<Shape> shapes;
  std::function<VarRef(const std::vector<VarRef>&)> build;
  bool avoid_zero = false;
};

Verdict autodiff_checks() {
  const std::vector<Primitive> ops{
      {"matmul", {{3, 4}, {4, 2}}, [](const auto& in) { return matmul(in[0], in[1]); }},
      {"add", {{3, 2}, {3, 2}}, [](const auto& in) { return in[0] + in[1]; }},
      {"add_scalar", {{3, 2}, {}}, [](const auto& in) { return in[0] + in[1]; }},
      {"sub", {{2, 3}, {2, 3}}, [](const auto& in) { return in[0] - in[1]; }},
      {"mul", {{4}, {4}}, [](const auto& in) { return in[0] * in[1]; }},
      {"mul_scalar", {{2, 2}, {}}, [](const auto& in) { return in[0] * in[1]; }},
      {"reshape", {{2, 6}}, [](const auto& in) { return reshape(in[0], Shape{3, 4}); }},
      {"transpose", {{2, 3, 2, 2}}, [](const auto& in) { return transpose(in[0], {0, 2, 1, 3}); }},
      {"concat", {{3, 1}, {3, 2}}, [](const auto& in) { return concat({in[0], in[1]}, 1); }},
      {"sum", {{3, 3}}, [](const auto& in) { return sum(in[0]); }},
      {"mean", {{5}}, [](const auto& in) { return mean(in[0]); }},
      {"square", {{2, 3}}, [](const auto& in) { return square(in[0]); }},
      {"tanh", {{2, 3}}, [](const auto& in) { return tanh(in[0]); }},
      {"sin", {{2, 3}}, [](const auto& in) { return sin(in[0]); }},
      {"relu", {{2, 3}}, [](const auto& in) { return relu(in[0]); }, true},
      {"ln_cosh", {{2, 3}}, [](const auto& in) { return ln_cosh(in[0]); }},
      {"norm_sq", {{2, 3}}, [](const auto& in) { return norm_sq(in[0]); }},
  };
  constexpr double h = 1e-5;
  double worst_primitive = 0.0;
  std::string worst_name;
  for (const auto& op : ops) {
    for (std::uint64_t point = 0; point < 20; ++point) {
      std::vector<Tensor> inputs;
      for (std::size_t k = 0; k < op.shapes.size(); ++k) {
        Tensor t = randn(op.shapes[k], 0.0, 1.0, derive_seed(point, {k, 5}));
        if (op.avoid_zero)
          for (double& v : t.data())
            if (std::abs(v) < 1e-3) v = 0.5;
        inputs.push_back(std::move(t));
      }
      auto weighted = [&](const std::vector<Tensor>& in, const Tensor* w, std::vector<VarRef>* vars, Graph& g) {
        std::vector<VarRef> v;
        for (const Tensor& t : in) v.push_back(vars ? g.variable(t) : g.constant(t));
        if (vars) *vars = v;
        const VarRef out = op.build(v);
        const Tensor weights = w ? *w : randn(out.shape(), 0.0, 1.0, derive_seed(point, {77}));
        return sum(out * g.constant(weights));
      };
      Graph g;
      std::vector<VarRef> vars;
      const VarRef l = weighted(inputs, nullptr, &vars, g);
      const Tensor weights = randn(op.build(vars).shape(), 0.0, 1.0, derive_seed(point, {77}));
      const auto grads = g.grad(l, vars, false);
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor fd = Tensor::zeros(inputs[k].shape());
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
          auto plus = inputs, minus = inputs;
          plus[k][i] += h;
          minus[k][i] -= h;
          Graph gp, gm;
          fd[i] = (weighted(plus, &weights, nullptr, gp).value().item() -
                   weighted(minus, &weights, nullptr, gm).value().item()) /
                  (2 * h);
        }
        const double e = rel_err(grads[vars[k]], fd);
        if (e > worst_primitive) {
          worst_primitive = e;
          worst_name = op.name;
        }
      }
    }
  }

  BSBParams bp;
  bp.dim = 2;
  bp.steps = 2;
  const auto prob = bsb_problem(bp);
  const PathBatch paths = sample_paths(prob, 2, 13);
  double worst_loss = 0.0;
  for (const auto& spec : {ArchitectureSpec::tnn(4, 2, 3), ArchitectureSpec::dnn(3, 4, 3)}) {
    for (const LossKind kind : {LossKind::hybrid, LossKind::mse}) {
      Network net = build_network(spec, Activation::tanh, InitScheme::glorot, 8);
      for (Tensor* p : net.parameters())
        for (double& v : p->data()) v += 0.1;
      auto eval = [&] {
        Graph g;
        const auto params = bind_parameters(g, net);
        return loss(rollout(prob, net, params, paths, g), kind).value().item();
      };
      Graph g;
      const auto params = bind_parameters(g, net);
      const auto grads = g.grad(loss(rollout(prob, net, params, paths, g), kind), params, false);
      auto ptrs = net.parameters();
      for (std::size_t k = 0; k < ptrs.size(); ++k) {
        Tensor fd = Tensor::zeros(ptrs[k]->shape());
        for (std::size_t i = 0; i < fd.size(); ++i) {
          const double orig = (*ptrs[k])[i], step = 1e-6;
          (*ptrs[k])[i] = orig + step;
          const double up = eval();
          (*ptrs[k])[i] = orig - step;
          const double dn = eval();
          (*ptrs[k])[i] = orig;
          fd[i] = (up - dn) / (2 * step);
        }
        worst_loss = std::max(worst_loss, rel_err(grads[params[k]], fd));
      }
    }
  }
  return {worst_primitive < 1e-6 && worst_loss < 1e-4,
          "worst primitive rel err " + format("%.2e", worst_primitive) + " (" + worst_name +
              ", bound 1e-6); worst end-to-end loss rel err " + format("%.2e", worst_loss) + " (bound 1e-4)"};
}

Verdict mpo_contraction() {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + trial % 6, chi = 1 + (trial / 6) % 8;
    TNLayer layer(d, chi, Activation::tanh);
    layer.core_a = randn(layer.core_a.shape(), 0.0, 1.0, derive_seed(21, {trial, 0}));
    layer.core_b = randn(layer.core_b.shape(), 0.0, 1.0, derive_seed(21, {trial, 1}));
    const auto n = static_cast<std::int64_t>(d * d);
    Tensor naive = Tensor::zeros({n, n});
    const Tensor &a = layer.core_a, &b = layer.core_b;
    for (std::size_t al = 0; al < chi; ++al)
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
          for (std::size_t k = 0; k < d; ++k)
            for (std::size_t l = 0; l < d; ++l)
              naive.at(i * d + k, j * d + l) += a[(i * d + j) * chi + al] * b[(k * d + l) * chi + al];
    worst = std::max(worst, max_abs_diff(tn_contract_weight(layer), naive));
  }
  return {worst < 1e-12, "max abs diff over 100 layers " + format("%.2e", worst) + " (bound 1e-12)"};
}

Verdict expressivity() {
  const std::size_t d = 4, chi = 16;
  const Tensor target = randn({16, 16}, 0.0, 1.0, 2024);
  TNLayer tn(d, chi, Activation::identity);
  init_tn_cores(tn, tn_core_stddev(d, chi) * 2.0, 3);
  std::vector<Tensor*> cores{&tn.core_a, &tn.core_b};
  AdamState st;
  st.lr = 1e-2;
  double err = INFINITY;
  std::size_t steps = 0;
  for (; steps < 20000 && err >= 1e-4; ++steps) {
    Graph g;
    const VarRef a = g.variable(tn.core_a), b = g.variable(tn.core_b);
    const VarRef w = tn_contract_weight(a, b);
    err = max_abs_diff(w.value(), target);
    const auto grads = g.grad(norm_sq(w - g.constant(target)), {a, b}, false);
    adam_step(cores, std::vector<Tensor>{grads[a], grads[b]}, st);
  }
  err = max_abs_diff(tn_contract_weight(tn), target);
  return {err < 1e-3, "max reconstruction error " + format("%.2e", err) + " after " + std::to_string(steps) +
                          " Adam steps (bound 1e-3)"};
}

std::optional<std::size_t> brute_force(const std::vector<double>& l, const ConvergenceParams& p) {
  std::vector<double> s(l.size());
  s[0] = l[0];
  for (std::size_t i = 1; i < l.size(); ++i) s[i] = p.alpha * s[i - 1] + (1 - p.alpha) * l[i];
  if (p.window >= l.size()) return std::nullopt;
  for (std::size_t i = 1; i <= l.size() - p.window; ++i) {
    bool below = true;
    for (std::size_t k = 0; k < p.window; ++k) below = below && s[i - 1 + k] < p.threshold;
    double first = 0.0, last = 0.0;
    for (std::size_t k = 0; k < p.batch; ++k) first += s[i - 1 + k];
    for (std::size_t k = p.window - p.batch; k < p.window; ++k) last += s[i - 1 + k];
    const double diff = std::abs(first / static_cast<double>(p.batch)) - std::abs(last / static_cast<double>(p.batch));
    if (below && diff < p.tolerance) return i;
  }
  return std::nullopt;
}

Verdict detector_equivalence() {
  std::size_t agree = 0, converged = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Xoshiro256 rng(derive_seed(s, {31}));
    NormalSampler noise(derive_seed(s, {32}));
    const std::size_t n = 100 + static_cast<std::size_t>(rng.uniform() * 2900);
    const double a = 1.0 + 9.0 * rng.uniform(), rate = 0.95 + 0.049 * rng.uniform();
    const double floor = 0.05 + 0.3 * rng.uniform(), amp = 0.1 * rng.uniform();
    std::vector<double> series(n);
    for (std::size_t k = 0; k < n; ++k) series[k] = a * std::pow(rate, static_cast<double>(k)) + floor + amp * noise();
    ConvergenceParams p;
    p.alpha = 0.5 + 0.49 * rng.uniform();
    p.window = 10 + static_cast<std::size_t>(rng.uniform() * 200);
    p.batch = 1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(p.window));
    p.threshold = 0.1 + 0.6 * rng.uniform();
    p.tolerance = std::pow(10.0, -1.0 - 4.0 * rng.uniform());
    const auto got = convergence_epoch(series, p);
    agree += got == brute_force(series, p);
    converged += got.has_value();
  }
  return {agree == 1000, std::to_string(agree) + "/1000 series agree exactly (" + std::to_string(converged) +
                             " converged, " + std::to_string(1000 - converged) + " never)"};
}

// ---------------------------------------------------------------------------

struct Scale {
  std::size_t seeds = 10;
  std::size_t epochs = 3000;
};

ProgressCallback progress(std::chrono::steady_clock::time_point t0) {
  return [t0](const RunResult& r) {
    std::fprintf(stderr, "[%7.0fs] %s seed %llu: conv %s, y0 %.6f, rel err %.3e\n", elapsed_since(t0),
                 r.architecture.name().c_str(), static_cast<unsigned long long>(r.seed),
                 r.convergence_epoch ? std::to_string(*r.convergence_epoch).c_str() : "none",
                 r.final_y0.value_or(NAN), r.rel_error.value_or(NAN));
  };
}

ExperimentPlan base_plan(const std::string& problem, const Scale& scale) {
  ExperimentPlan plan;
  plan.problem = problem;
  for (std::uint64_t s = 0; s < scale.seeds; ++s) plan.seeds.push_back(s);
  plan.train.epochs = scale.epochs;
  return plan;
}

void save(const std::string& stem, const std::vector<RunResult>& results, const ExperimentPlan& plan,
          const std::vector<GroupSummary>& groups) {
  emit_csv(results, stem + ".csv");
  std::ofstream series(stem + "_series.csv", std::ios::binary);
  write_series_csv(series, results, plan.convergence.alpha);
  std::ofstream summary(stem + "_summary.csv", std::ios::binary);
  write_summary_csv(summary, plan.problem, groups, plan.convergence);
}

const GroupSummary* find_group(const std::vector<GroupSummary>& groups, const ArchitectureSpec& a) {
  for (const auto& g : groups)
    if (g.architecture == a) return &g;
  return nullptr;
}

std::string epoch_text(double e) { return std::isinf(e) ? "never" : format("%.1f", e); }

std::string gap_text(const std::optional<double>& g) { return g ? format("%.1f", *g) + "%" : "undefined"; }

void describe_comparison(const Comparison& c, const char* label) {
  if (!c.best_dnn) {
    note(std::string(label) + ": " + c.tnn.architecture.name() + " median epoch " +
         epoch_text(c.tnn.median_epoch_all) + "; no dense network qualifies (" + std::to_string(c.dnn_excluded) +
         " of " + std::to_string(c.dnn_total) + " excluded)");
    return;
  }
  note(std::string(label) + ": " + c.tnn.architecture.name() + " median epoch " + epoch_text(c.tnn.median_epoch_all) +
       " vs best dense " + c.best_dnn->architecture.name() + " " + epoch_text(c.best_dnn->median_epoch_all) +
       ", gap " + gap_text(c.gap_percent) + " (" +
       std::to_string(c.dnn_excluded) + " of " + std::to_string(c.dnn_total) + " dense excluded)");
}

/// Smoothed loss at the last epoch below 1% of the smoothed loss at epoch 10,
/// median over runs.
void loss_decrease_invariant(const std::vector<RunResult>& runs, const ArchitectureSpec& a, double alpha) {
  std::vector<double> ratios;
  for (const auto& r : runs) {
    if (!(r.architecture == a) || r.loss.size() < 10) continue;
    const auto s = ema_smooth(r.loss, alpha);
    ratios.push_back(s.back() / s[9]);
  }
  if (ratios.empty()) return;
  std::sort(ratios.begin(), ratios.end());
  const double med = ratios.size() % 2 ? ratios[ratios.size() / 2]
                                       : 0.5 * (ratios[ratios.size() / 2 - 1] + ratios[ratios.size() / 2]);
  note("invariant (loss decrease, " + a.name() + "): median final/epoch-10 smoothed loss ratio " +
       format("%.4f", med) + (med < 0.01 ? " < 0.01 holds" : " >= 0.01 violated"));
}

void bsb_criteria(const Scale& scale) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentPlan plan = base_plan("bsb", scale);
  if (const auto c = resolve_threshold(plan)) {
    note("BSB threshold h = " + format("%.6g", c->threshold) + " (exact solution loss " +
         format("%.6g", c->exact_loss) + ")");
  }
  const auto results = experiment_bond_sweep(plan, 16, {4, 16}, progress(t0));
  const auto groups = aggregate(results, plan.convergence);
  save("acceptance_bsb", results, plan, groups);
  for (const auto& g : groups) {
    note(g.architecture.name() + ": median epoch " + epoch_text(g.median_epoch_all) + ", converged " +
         std::to_string(g.converged) + "/" + std::to_string(g.runs) + ", median rel err " +
         format("%.3e", g.median_rel_error.value_or(NAN)) + ", within 1%: " + format("%.0f", g.frac_1pct * 100) +
         "%");
  }

  const auto tnn4 = ArchitectureSpec::tnn(16, 4, 11), tnn16 = ArchitectureSpec::tnn(16, 16, 11);
  std::size_t within = 0, total = 0;
  for (const auto& r : results) {
    if (!(r.architecture == tnn4)) continue;
    ++total;
    within += r.rel_error && *r.rel_error < 0.01;
  }
  loss_decrease_invariant(results, tnn4, plan.convergence.alpha);
  report(5, "BSB accuracy, TNN(16,4) final u(0,1) within 1% of 12.336780",
         {within >= 8 && total == scale.seeds,
          std::to_string(within) + "/" + std::to_string(total) + " seeds within 1% (need >= 8 of 10)"});

  const Comparison all4 = compare_to_dense(*find_group(groups, tnn4), groups, 0.0);
  const Comparison all16 = compare_to_dense(*find_group(groups, tnn16), groups, 0.0);
  describe_comparison(all4, "chi=4, all same-count dense");
  describe_comparison(compare_to_dense(*find_group(groups, tnn4), groups), "chi=4, dense within 1% on >= half");
  describe_comparison(all16, "chi=16, all same-count dense");
  describe_comparison(compare_to_dense(*find_group(groups, tnn16), groups), "chi=16, dense within 1% on >= half");

  const bool c6 = all4.best_dnn && all4.tnn.median_epoch_all < all4.best_dnn->median_epoch_all;
  report(6, "convergence speed, TNN(16,4) median epoch below best same-count DNN",
         {c6, "TNN " + epoch_text(all4.tnn.median_epoch_all) + " vs " +
                  (all4.best_dnn ? all4.best_dnn->architecture.name() + " " +
                                       epoch_text(all4.best_dnn->median_epoch_all)
                                 : std::string("none")) +
                  ", gap " + gap_text(all4.gap_percent)});

  const bool c7 = all4.gap_percent && all16.gap_percent && *all4.gap_percent > *all16.gap_percent;
  report(7, "bond trend, gap at chi=4 exceeds gap at chi=16",
         {c7, "gap(chi=4) " + gap_text(all4.gap_percent) + " vs gap(chi=16) " + gap_text(all16.gap_percent)});
}

void hjb_criterion(const Scale& scale) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentPlan plan = base_plan("hjb10", scale);
  plan.auto_threshold = true;
  const auto c = resolve_threshold(plan);
  const ReferenceValue ref = reference_y0("hjb10", plan.mc_samples, plan.mc_seed);
  note("HJB d=10 reference u(0,0) = " + format("%.6f", ref.value) + " (Monte Carlo, " +
       std::to_string(plan.mc_samples) + " samples, std error " + format("%.2e", ref.std_error) + "); threshold h = " +
       format("%.6g", c->threshold));
  plan.architectures = {ArchitectureSpec::tnn(64, 2, 11)};
  const auto results = run_plan(plan, progress(t0));
  const auto groups = aggregate(results, plan.convergence);
  save("acceptance_hjb10", results, plan, groups);
  std::size_t within = 0;
  std::string errs;
  for (const auto& r : results) {
    within += r.rel_error && *r.rel_error < 0.02;
    errs += (errs.empty() ? "" : " ") + format("%.4f", r.rel_error.value_or(NAN));
  }
  note("HJB relative errors: " + errs);
  report(9, "HJB d=10 smoke, TNN(64,2) within 2% of the Monte Carlo reference",
         {within >= 7 && results.size() == scale.seeds,
          std::to_string(within) + "/" + std::to_string(results.size()) + " seeds within 2% (need >= 7 of 10)"});
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string without_last_column(const std::string& csv) {
  std::istringstream is(csv);
  std::string line, out;
  while (std::getline(is, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

Verdict cli_determinism(const std::string& cli) {
  {
    std::ofstream cfg("acceptance_determinism.json");
    cfg << R"({
  "problem": "bsb",
  "architectures": ["tnn:16,4", "dnn:6,35"],
  "seeds": [3, 4],
  "epochs": 60,
  "steps": 10,
  "batch_size": 20,
  "convergence": {"window": 20, "batch": 5, "tolerance": 0.01}
})";
  }
  std::vector<std::string> csv, series;
  for (int k = 0; k < 2; ++k) {
    const std::string out = "acceptance_det_" + std::to_string(k);
    const std::string cmd = "\"" + cli + "\" train --config acceptance_determinism.json --output " + out +
                            ".csv --full_series " + out + "_series.csv --workers " + std::to_string(k + 1) +
                            " > " + out + ".log 2>&1";
    if (std::system(cmd.c_str()) != 0) return {false, "CLI invocation failed: " + cmd};
    csv.push_back(read_file(out + ".csv"));
    series.push_back(read_file(out + "_series.csv"));
  }
  const bool same = !csv[0].empty() && without_last_column(csv[0]) == without_last_column(csv[1]) &&
                    series[0] == series[1];
  return {same, same ? "two train invocations (1 and 2 workers) gave identical results and per-epoch CSVs"
                     : "CSV outputs differ"};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <tnpde-cli> [--quick]\n");
    return 2;
  }
  const std::string cli = argv[1];
  Scale scale;
  if (argc > 2 && std::string(argv[2]) == "--quick") scale = {2, 150};

  try {
    report(1, "parameter counts", parameter_counts());
    report(2, "autodiff finite-difference checks", autodiff_checks());
    report(3, "MPO contraction equals explicit Kronecker sum", mpo_contraction());
    report(4, "TN layer at chi=d^2 fits a random 16x16 matrix", expressivity());
    bsb_criteria(scale);
    report(8, "convergence detector equals brute force on 1000 series", detector_equivalence());
    hjb_criterion(scale);
    report(10, "CLI determinism", cli_determinism(cli));
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
