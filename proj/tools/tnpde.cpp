// tnpde: experiment harness. Every subcommand reads an optional JSON config
// (nested objects flatten to dotted keys) and every key is also a flag.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tnpde/alloc.hpp"
#include "tnpde/experiment.hpp"

using namespace tnpde;
using nlohmann::json;

namespace {

struct Settings {
  std::string problem = "bsb";
  std::vector<std::string> architectures{"tnn:16,4"};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::size_t epochs = 3000;
  std::size_t batch_size = 100;
  std::size_t steps = 50;
  double lr = 1e-3;
  std::string loss = "hybrid";
  std::string activation = "tanh";
  std::string init = "glorot";
  bool resample_paths = true;
  std::size_t workers = 1;
  std::string output = "results.csv";
  std::string full_series;
  std::string summary;

  double alpha = 0.9;
  std::size_t window = 200;
  std::size_t batch = 50;
  std::string threshold = "auto";
  double tolerance = 1e-4;
  std::size_t calibration_batches = 20;

  std::size_t mc_samples = 100000;
  std::uint64_t mc_seed = 2024;

  std::size_t sweep_width = 16;
  std::vector<std::size_t> sweep_bonds{2, 4, 8, 16, 32};
  std::vector<std::size_t> sweep_widths{16, 64, 144, 256};
  std::size_t sweep_chi = 4;

  std::string match_tnn = "tnn:16,4";
  std::vector<std::string> match_ladder{"dnn:16,16", "dnn:16,24", "dnn:16,32", "dnn:16,48", "dnn:16,64", "dnn:32,32"};
  double match_epoch_tolerance = 0.1;
  double match_accuracy_tolerance = 0.0;

  std::size_t params = 353;
  std::size_t input_dim = 11;
  std::string tnn;
};

/// A config key bound to a flag of the same name.
struct Binding {
  std::string key;
  CLI::Option* option;
  std::function<void(const json&)> assign;
};

class Options {
 public:
  Options(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON config file; flags override its values")->check(CLI::ExistingFile);
  }

  template <class T>
  Options& add(const std::string& key, T& var, const std::string& help) {
    CLI::Option* opt = app_->add_option("--" + key, var, help)->capture_default_str();
    // Numeric lists also accept "1,2,3"; architecture lists are space separated.
    if constexpr (requires { var.begin(); } && !std::is_same_v<T, std::string> &&
                  !std::is_same_v<T, std::vector<std::string>>)
      opt->delimiter(',');
    bindings_.push_back({key, opt, [&var](const json& j) {
                           if constexpr (std::is_same_v<T, std::string>) {
                             if (j.is_number()) {
                               var = j.dump();
                               return;
                             }
                           }
                           var = j.get<T>();
                         }});
    return *this;
  }

  Options& flag(const std::string& key, bool& var, const std::string& help) {
    CLI::Option* opt = app_->add_option("--" + key, var, help)->capture_default_str();
    bindings_.push_back({key, opt, [&var](const json& j) { var = j.get<bool>(); }});
    return *this;
  }

  /// Applies config values for keys not given on the command line.
  void apply_config() const {
    if (config_path_.empty()) return;
    std::ifstream f(config_path_);
    if (!f) throw IoError(config_path_, "cannot open config");
    json root;
    try {
      root = json::parse(f, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw InvalidArgument(config_path_ + ": " + e.what());
    }
    std::map<std::string, json> flat;
    flatten(root, "", flat);
    std::set<std::string> known;
    for (const auto& b : bindings_) known.insert(b.key);
    for (const auto& [key, value] : flat) {
      if (!known.count(key)) throw InvalidArgument(config_path_ + ": unknown key '" + key + "'");
    }
    for (const auto& b : bindings_) {
      auto it = flat.find(b.key);
      if (it == flat.end() || b.option->count() > 0) continue;
      try {
        b.assign(it->second);
      } catch (const json::exception& e) {
        throw InvalidArgument(config_path_ + ": bad value for '" + b.key + "': " + e.what());
      }
    }
  }

 private:
  static void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
    if (!j.is_object()) {
      if (prefix.empty()) throw InvalidArgument("config must be a JSON object");
      out[prefix] = j;
      return;
    }
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  }

  CLI::App* app_;
  std::string config_path_;
  std::vector<Binding> bindings_;
};

void add_run_options(Options& o, Settings& s) {
  o.add("problem", s.problem, "bsb, hjb (100-d) or hjb<d>")
      .add("seeds", s.seeds, "seed list")
      .add("epochs", s.epochs, "training epochs per run")
      .add("batch_size", s.batch_size, "paths per epoch")
      .add("steps", s.steps, "time steps N")
      .add("lr", s.lr, "Adam learning rate")
      .add("loss", s.loss, "hybrid or mse")
      .add("activation", s.activation, "tanh, sine, relu or identity")
      .add("init", s.init, "glorot or matched")
      .flag("resample_paths", s.resample_paths, "fresh Brownian paths every epoch")
      .add("workers", s.workers, "concurrent runs")
      .add("output", s.output, "results CSV path")
      .add("full_series", s.full_series, "per-epoch CSV path (optional)")
      .add("summary", s.summary, "per-architecture summary CSV path (optional)")
      .add("convergence.alpha", s.alpha, "EMA coefficient")
      .add("convergence.window", s.window, "window size w")
      .add("convergence.batch", s.batch, "batch size b")
      .add("convergence.threshold", s.threshold, "threshold h, or auto for the 1% loss level")
      .add("convergence.tolerance", s.tolerance, "tolerance")
      .add("convergence.calibration_batches", s.calibration_batches, "path batches for the auto threshold")
      .add("mc.samples", s.mc_samples, "Monte Carlo samples for the HJB reference")
      .add("mc.seed", s.mc_seed, "Monte Carlo seed for the HJB reference");
}

std::size_t input_dim_of(const Settings& s) { return make_problem(s.problem, s.steps, 1).dim + 1; }

ExperimentPlan make_plan(const Settings& s) {
  ExperimentPlan plan;
  plan.problem = s.problem;
  plan.seeds = s.seeds;
  plan.steps = s.steps;
  plan.train.epochs = s.epochs;
  plan.train.batch_size = s.batch_size;
  plan.train.lr = s.lr;
  plan.train.loss_kind = parse_loss(s.loss);
  plan.train.resample_paths = s.resample_paths;
  plan.activation = parse_activation(s.activation);
  plan.init = parse_init(s.init);
  plan.workers = s.workers;
  plan.mc_samples = s.mc_samples;
  plan.mc_seed = s.mc_seed;
  plan.output = s.output;
  plan.convergence.alpha = s.alpha;
  plan.convergence.window = s.window;
  plan.convergence.batch = s.batch;
  plan.convergence.tolerance = s.tolerance;
  plan.calibration_batches = s.calibration_batches;
  if (s.threshold == "auto") {
    plan.auto_threshold = true;
  } else {
    plan.auto_threshold = false;
    try {
      plan.convergence.threshold = std::stod(s.threshold);
    } catch (const std::exception&) {
      throw InvalidArgument("convergence.threshold must be a number or 'auto'");
    }
  }
  return plan;
}

std::string fmt(const std::optional<double>& v, const char* spec = "%.6g") {
  if (!v) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, *v);
  return buf;
}

std::string fmt_epoch(double v) { return std::isinf(v) ? "never" : fmt(v, "%.1f"); }

void print_groups(const std::vector<GroupSummary>& groups) {
  std::printf("%-18s %6s %5s %5s %12s %12s %12s %10s\n", "architecture", "params", "conv", "runs", "median_ep",
              "mean_ep", "median_err", "frac_1pct");
  for (const auto& g : groups) {
    std::printf("%-18s %6zu %5zu %5zu %12s %12s %12s %10.2f\n", g.architecture.name().c_str(), g.param_count,
                g.converged, g.runs, fmt_epoch(g.median_epoch_all).c_str(), fmt(g.mean_epoch, "%.1f").c_str(),
                fmt(g.median_rel_error, "%.3e").c_str(), g.frac_1pct);
  }
}

void print_comparison(const Comparison& c, const char* cohort) {
  std::printf("%s vs %s: ", c.tnn.architecture.name().c_str(), cohort);
  if (!c.best_dnn) {
    std::printf("no dense network qualifies (%zu of %zu excluded)\n", c.dnn_excluded, c.dnn_total);
    return;
  }
  std::printf("median epoch %s vs best %s %s, gap %s%% (%zu of %zu excluded)\n",
              fmt_epoch(c.tnn.median_epoch_all).c_str(), c.best_dnn->architecture.name().c_str(),
              fmt_epoch(c.best_dnn->median_epoch_all).c_str(), fmt(c.gap_percent, "%.1f").c_str(), c.dnn_excluded,
              c.dnn_total);
}

void print_comparisons(const std::vector<GroupSummary>& groups) {
  const auto all = compare_all(groups, 0.0), filtered = compare_all(groups);
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].dnn_total == 0) continue;
    print_comparison(all[i], "all same-count dense");
    print_comparison(filtered[i], "dense within 1% on at least half the seeds");
  }
}

void write_outputs(const Settings& s, const ExperimentPlan& plan, const std::vector<RunResult>& results,
                   const std::vector<GroupSummary>& groups) {
  emit_csv(results, s.output);
  if (!s.full_series.empty()) {
    std::ofstream f(s.full_series, std::ios::binary);
    if (!f) throw IoError(s.full_series, "cannot open for writing");
    write_series_csv(f, results, plan.convergence.alpha);
    if (!f) throw IoError(s.full_series, "write failed");
  }
  if (!s.summary.empty()) {
    std::ofstream f(s.summary, std::ios::binary);
    if (!f) throw IoError(s.summary, "cannot open for writing");
    write_summary_csv(f, plan.problem, groups, plan.convergence);
    if (!f) throw IoError(s.summary, "write failed");
  }
}

ProgressCallback progress_printer() {
  return [](const RunResult& r) {
    std::fprintf(stderr, "  %s seed %llu: %zu epochs, conv %s, y0 %s, err %s%s\n", r.architecture.name().c_str(),
                 static_cast<unsigned long long>(r.seed), r.epochs_run,
                 r.convergence_epoch ? std::to_string(*r.convergence_epoch).c_str() : "-",
                 fmt(r.final_y0, "%.6f").c_str(), fmt(r.rel_error, "%.3e").c_str(),
                 r.error.empty() ? "" : ("  [" + r.error + "]").c_str());
  };
}

/// Resolves the threshold once so the report and the summary show it.
void announce_threshold(ExperimentPlan& plan) {
  if (const auto c = resolve_threshold(plan)) {
    std::printf("threshold h = %.6g (loss of 0.99u %.6g, 1.01u %.6g, exact %.6g)\n", c->threshold, c->low_loss,
                c->high_loss, c->exact_loss);
  } else {
    std::printf("threshold h = %.6g\n", plan.convergence.threshold);
  }
}

int finish(const Settings& s, const ExperimentPlan& plan, const std::vector<RunResult>& results) {
  const auto groups = aggregate(results, plan.convergence);
  write_outputs(s, plan, results, groups);
  print_groups(groups);
  print_comparisons(groups);
  std::printf("wrote %s\n", s.output.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Deep BSDE experiments with tensor-network and dense networks"};
  app.require_subcommand(1);
  Settings s;

  auto* train_cmd = app.add_subcommand("train", "train every architecture over every seed");
  Options train_opts(train_cmd);
  add_run_options(train_opts, s);
  train_opts.add("architectures", s.architectures, "architectures, e.g. tnn:16,4 dnn:6,35");

  auto* bond_cmd = app.add_subcommand("sweep-bond", "TNN bond sweep with same-count dense cohorts");
  Options bond_opts(bond_cmd);
  add_run_options(bond_opts, s);
  bond_opts.add("sweep.width", s.sweep_width, "TNN width").add("sweep.bonds", s.sweep_bonds, "bond dimensions");

  auto* width_cmd = app.add_subcommand("sweep-width", "TNN width sweep with same-count dense cohorts");
  Options width_opts(width_cmd);
  add_run_options(width_opts, s);
  width_opts.add("sweep.widths", s.sweep_widths, "TNN widths (perfect squares)")
      .add("sweep.chi", s.sweep_chi, "bond dimension");

  auto* match_cmd = app.add_subcommand("match-dnn", "smallest dense network matching a TNN");
  Options match_opts(match_cmd);
  add_run_options(match_opts, s);
  match_opts.add("match.tnn", s.match_tnn, "TNN to match")
      .add("match.ladder", s.match_ladder, "dense candidates")
      .add("match.epoch_tolerance", s.match_epoch_tolerance, "allowed relative excess in median epoch")
      .add("match.accuracy_tolerance", s.match_accuracy_tolerance, "allowed excess in median relative error");

  auto* enum_cmd = app.add_subcommand("enumerate", "two-layer dense networks with a given parameter count");
  Options enum_opts(enum_cmd);
  enum_opts.add("params", s.params, "target parameter count")
      .add("input_dim", s.input_dim, "network input width (d + 1)")
      .add("tnn", s.tnn, "take the target from this TNN instead");

  auto* ref_cmd = app.add_subcommand("reference", "reference u(0, x0) and the auto threshold");
  Options ref_opts(ref_cmd);
  add_run_options(ref_opts, s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*enum_cmd) {
      enum_opts.apply_config();
      if (!s.tnn.empty()) {
        const auto t = parse_architecture(s.tnn, s.input_dim);
        s.params = t.formula_param_count();
        std::printf("# %s has %zu parameters\n", t.name().c_str(), s.params);
      }
      if (s.params <= s.input_dim + 2) throw InvalidArgument("params must exceed input_dim + 2");
      std::printf("x,y,param_count\n");
      for (const auto& [x, y] : enumerate_dnn_matches(s.params, s.input_dim))
        std::printf("%zu,%zu,%zu\n", x, y, ArchitectureSpec::dnn(x, y, s.input_dim).formula_param_count());
      return 0;
    }

    if (*ref_cmd) {
      ref_opts.apply_config();
      ExperimentPlan plan = make_plan(s);
      const auto ref = reference_y0(s.problem, s.mc_samples, s.mc_seed);
      std::printf("problem %s\nreference u(0, x0) = %.12g", s.problem.c_str(), ref.value);
      if (ref.std_error > 0) std::printf("  (Monte Carlo, %zu samples, std error %.3g)", s.mc_samples, ref.std_error);
      std::printf("\n");
      announce_threshold(plan);
      return 0;
    }

    if (*train_cmd) {
      train_opts.apply_config();
      ExperimentPlan plan = make_plan(s);
      const std::size_t in = input_dim_of(s);
      for (const auto& a : s.architectures) plan.architectures.push_back(parse_architecture(a, in));
      announce_threshold(plan);
      return finish(s, plan, run_plan(plan, progress_printer()));
    }

    if (*bond_cmd) {
      bond_opts.apply_config();
      ExperimentPlan plan = make_plan(s);
      announce_threshold(plan);
      const auto results = experiment_bond_sweep(plan, s.sweep_width, s.sweep_bonds, progress_printer());
      return finish(s, plan, results);
    }

    if (*width_cmd) {
      width_opts.apply_config();
      ExperimentPlan plan = make_plan(s);
      announce_threshold(plan);
      const auto results = experiment_width_sweep(plan, s.sweep_widths, s.sweep_chi, progress_printer());
      return finish(s, plan, results);
    }

    if (*match_cmd) {
      match_opts.apply_config();
      ExperimentPlan plan = make_plan(s);
      const std::size_t in = input_dim_of(s);
      const auto tnn = parse_architecture(s.match_tnn, in);
      std::vector<ArchitectureSpec> ladder;
      for (const auto& a : s.match_ladder) ladder.push_back(parse_architecture(a, in));
      announce_threshold(plan);
      const auto out = experiment_match_dnn(plan, tnn, ladder,
                                            MatchTolerances{s.match_epoch_tolerance, s.match_accuracy_tolerance},
                                            progress_printer());
      finish(s, plan, out.results);
      if (out.match) {
        std::printf("smallest match for %s: %s with %zu parameters\n", tnn.name().c_str(),
                    out.match->architecture.name().c_str(), out.match->param_count);
      } else {
        std::printf("no ladder entry matches %s\n", tnn.name().c_str());
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
