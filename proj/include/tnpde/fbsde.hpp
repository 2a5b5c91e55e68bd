#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tnpde/autodiff.hpp"
#include "tnpde/errors.hpp"
#include "tnpde/nn.hpp"
#include "tnpde/tensor.hpp"

namespace tnpde {

/// Coupled forward-backward SDE on [0, T]:
///   dX = mu(t, X, Y, Z) dt + sigma(t, X, Y) dW,      X_0 = x0
///   dY = phi(t, X, Y, Z) dt + Z^T sigma(t, X, Y) dW,  Y_T = g(X_T)
struct FBSDEProblem {
  using PointMap = std::function<void(double t, std::span<const double> x, double y,
                                      std::span<const double> v, std::span<double> out)>;

  std::string name;
  std::size_t dim = 1;
  double horizon = 1.0;
  std::size_t steps = 1;
  std::vector<double> x0;

  /// mu(t, x, y, z), written into `out`.
  PointMap drift;
  /// sigma(t, x, y) as a dim x dim matrix.
  std::function<Tensor(double t, std::span<const double> x, double y)> diffusion;
  /// Optional fast sigma(t, x, y) * v; falls back to `diffusion` when empty.
  PointMap diffusion_apply;
  /// phi on a batch: t is rows x 1, x rows x dim (data), y rows x 1 and z
  /// rows x dim (graph nodes). Returns rows x 1.
  std::function<VarRef(const Tensor& t, const Tensor& x, VarRef y, VarRef z)> generator;
  /// g(x).
  std::function<double(std::span<const double> x)> terminal;
  /// Reference solution u(t, x), if one is known.
  std::function<double(double t, std::span<const double> x)> exact;
  /// mu and sigma ignore (y, z); the forward paths then need no network values.
  bool decoupled = true;

  double dt() const { return horizon / static_cast<double>(steps); }

  void validate() const {
    if (!(horizon > 0.0)) throw InvalidArgument(name + ": horizon must be positive");
    if (steps < 1) throw InvalidArgument(name + ": need at least one time step");
    if (dim < 1 || x0.size() != dim) throw InvalidArgument(name + ": x0 does not match the state dimension");
    if (!drift || !diffusion || !generator || !terminal) {
      throw InvalidArgument(name + ": drift, diffusion, generator and terminal are required");
    }
  }

  void apply_diffusion(double t, std::span<const double> x, double y, std::span<const double> v,
                       std::span<double> out) const {
    if (diffusion_apply) {
      diffusion_apply(t, x, y, v, out);
      return;
    }
    const Tensor s = diffusion(t, x, y);
    for (std::size_t i = 0; i < dim; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < dim; ++j) acc += s.at(i, j) * v[j];
      out[i] = acc;
    }
  }
};

/// phi(t, x, y, z) at a single point.
inline double generator_value(const FBSDEProblem& p, double t, std::span<const double> x, double y,
                              std::span<const double> z) {
  Graph g;
  const auto d = static_cast<std::int64_t>(x.size());
  const VarRef out =
      p.generator(Tensor::full({1, 1}, t), Tensor(Shape{1, d}, std::vector<double>(x.begin(), x.end())),
                  g.constant(Tensor::full({1, 1}, y)), g.constant(Tensor(Shape{1, d}, std::vector<double>(z.begin(), z.end()))));
  return out.value().item();
}

/// Brownian increments for M paths on the uniform grid t_n = n T / N.
struct PathBatch {
  Tensor increments;  // M x N x d, entries ~ N(0, dt)
  std::vector<double> times;
  std::size_t paths = 0;
  double dt = 0.0;
};

inline PathBatch sample_paths(const FBSDEProblem& problem, std::size_t paths, std::uint64_t seed) {
  if (paths < 1) throw InvalidArgument("sample_paths: need at least one path");
  const double dt = problem.dt();
  PathBatch batch;
  batch.paths = paths;
  batch.dt = dt;
  batch.increments = randn({static_cast<std::int64_t>(paths), static_cast<std::int64_t>(problem.steps),
                            static_cast<std::int64_t>(problem.dim)},
                           0.0, std::sqrt(dt), seed);
  for (std::size_t n = 0; n <= problem.steps; ++n) {
    batch.times.push_back(n == problem.steps ? problem.horizon : static_cast<double>(n) * dt);
  }
  return batch;
}

/// Evaluates a candidate solution u and its spatial gradient on a batch.
using SolutionModel = std::function<NetworkOutput(Graph&, const Tensor& t, const Tensor& x)>;

/// Wraps a network whose parameters are bound in some graph. In any other
/// graph the parameters are bound afresh as variables.
inline SolutionModel network_model(const Network& net, std::vector<VarRef> params) {
  return [&net, params = std::move(params)](Graph& g, const Tensor& t, const Tensor& x) {
    if (!params.empty() && params.front().graph() == &g) return network_eval(net, params, g, t, x);
    const auto local = bind_parameters(g, net);
    return network_eval(net, local, g, t, x);
  };
}

/// Euler-Maruyama discretisation. Batch rows are path-major:
/// row m * (N + 1) + n holds path m at time t_n.
struct Rollout {
  Tensor states;           // X: M x (N+1) x d
  VarRef values;           // Y: M x (N+1)
  VarRef gradients;        // Z: M(N+1) x d, path-major rows
  VarRef residuals;        // M x N
  VarRef terminal_values;  // Y_N: M x 1
  Tensor terminal_targets; // g(X_N): M x 1

  /// u(0, x0) as seen by this rollout.
  double y0() const { return values.value()[0]; }
};

/// Forward states are data: X is advanced with the values of Y and Z, and
/// gradients flow only through Y and Z. sigma in the Z-term uses (t_n, X_n, Y_n).
inline Rollout rollout(const FBSDEProblem& problem, const SolutionModel& model, const PathBatch& paths,
                       Graph& graph) {
  problem.validate();
  const std::size_t M = paths.paths;
  const std::size_t N = problem.steps;
  const std::size_t d = problem.dim;
  const std::size_t R = M * (N + 1);
  const double dt = paths.dt;
  if (paths.increments.shape() != Shape{static_cast<std::int64_t>(M), static_cast<std::int64_t>(N),
                                         static_cast<std::int64_t>(d)}) {
    throw ShapeError("rollout: increments " + paths.increments.shape().to_string() + " do not match problem");
  }

  std::vector<double> x(R * d);
  std::vector<double> sigma_dw(R * d, 0.0);
  std::vector<double> t_col(R);
  for (std::size_t m = 0; m < M; ++m) {
    std::copy(problem.x0.begin(), problem.x0.end(), x.begin() + static_cast<std::ptrdiff_t>(m * (N + 1) * d));
    for (std::size_t n = 0; n <= N; ++n) t_col[m * (N + 1) + n] = paths.times[n];
  }

  const auto dW = paths.increments.data();
  std::vector<double> mu(d), zero_z(d, 0.0);
  std::vector<double> y_step(M, 0.0), z_step(M * d, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const double t = paths.times[n];
    if (!problem.decoupled) {
      // Values of u and grad u at (t_n, X_n) drive the forward dynamics.
      Graph scratch;
      std::vector<double> xs(M * d);
      for (std::size_t m = 0; m < M; ++m)
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((m * (N + 1) + n) * d), d,
                    xs.begin() + static_cast<std::ptrdiff_t>(m * d));
      const auto rows = static_cast<std::int64_t>(M);
      const auto out = model(scratch, Tensor::full({rows, 1}, t),
                             Tensor(Shape{rows, static_cast<std::int64_t>(d)}, std::move(xs)));
      std::copy(out.u.value().data().begin(), out.u.value().data().end(), y_step.begin());
      std::copy(out.grad_x.value().data().begin(), out.grad_x.value().data().end(), z_step.begin());
    }
    for (std::size_t m = 0; m < M; ++m) {
      const std::size_t row = m * (N + 1) + n;
      const std::span<const double> xn(x.data() + row * d, d);
      const std::span<const double> z =
          problem.decoupled ? std::span<const double>(zero_z) : std::span<const double>(z_step.data() + m * d, d);
      const double y = y_step[m];
      problem.drift(t, xn, y, z, mu);
      problem.apply_diffusion(t, xn, y, dW.subspan((m * N + n) * d, d), std::span<double>(sigma_dw.data() + row * d, d));
      double* next = x.data() + (row + 1) * d;
      for (std::size_t i = 0; i < d; ++i) next[i] = xn[i] + mu[i] * dt + sigma_dw[row * d + i];
      if (!all_finite(std::span<const double>(next, d))) {
        throw DivergedRollout(n + 1, "non-finite forward state on path " + std::to_string(m));
      }
    }
  }

  const auto Ri = static_cast<std::int64_t>(R);
  const auto Mi = static_cast<std::int64_t>(M);
  const auto Ni = static_cast<std::int64_t>(N);
  const auto di = static_cast<std::int64_t>(d);
  Tensor t_batch(Shape{Ri, 1}, std::move(t_col));
  Tensor x_batch(Shape{Ri, di}, x);
  const NetworkOutput out = model(graph, t_batch, x_batch);

  // Row selectors on the time axis: difference Y_{n+1} - Y_n, drop t_N, pick t_N.
  Tensor diff_t = Tensor::zeros({Ni + 1, Ni});
  Tensor head_t = Tensor::zeros({Ni + 1, Ni});
  Tensor last = Tensor::zeros({Ni + 1, 1});
  for (std::size_t n = 0; n < N; ++n) {
    diff_t.at(n, n) = -1.0;
    diff_t.at(n + 1, n) = 1.0;
    head_t.at(n, n) = 1.0;
  }
  last.at(N, 0) = 1.0;

  const VarRef y = reshape(out.u, Shape{Mi, Ni + 1});
  const VarRef phi = problem.generator(t_batch, x_batch, out.u, out.grad_x);
  const VarRef z_sigma_dw =
      matmul(out.grad_x * graph.constant(Tensor(Shape{Ri, di}, std::move(sigma_dw))), graph.constant(Tensor::ones({di, 1})));
  const VarRef increments = reshape(phi * dt + z_sigma_dw, Shape{Mi, Ni + 1});
  const VarRef residuals =
      matmul(y, graph.constant(std::move(diff_t))) - matmul(increments, graph.constant(std::move(head_t)));

  std::vector<double> targets(M);
  for (std::size_t m = 0; m < M; ++m) targets[m] = problem.terminal(std::span<const double>(x.data() + (m * (N + 1) + N) * d, d));

  Rollout r{Tensor(Shape{Mi, Ni + 1, di}, std::move(x)),
            y,
            out.grad_x,
            residuals,
            matmul(y, graph.constant(std::move(last))),
            Tensor(Shape{Mi, 1}, std::move(targets))};
  return r;
}

inline Rollout rollout(const FBSDEProblem& problem, const Network& net, std::span<const VarRef> params,
                       const PathBatch& paths, Graph& graph) {
  if (net.state_dim() != problem.dim) {
    throw ShapeError("rollout: network input width " + std::to_string(net.input_dim()) + " needs problem dimension " +
                     std::to_string(net.state_dim()) + ", problem has " + std::to_string(problem.dim));
  }
  return rollout(problem, network_model(net, std::vector<VarRef>(params.begin(), params.end())), paths, graph);
}

enum class LossKind { hybrid, mse };

inline std::string to_string(LossKind k) { return k == LossKind::hybrid ? "hybrid" : "mse"; }

inline LossKind parse_loss(const std::string& name) {
  if (name == "hybrid") return LossKind::hybrid;
  if (name == "mse") return LossKind::mse;
  throw InvalidArgument("unknown loss '" + name + "'");
}

/// Sum of squared residuals over paths and steps plus the mean log-cosh
/// terminal mismatch.
inline VarRef loss_hybrid(const Rollout& r) {
  Graph& g = *r.residuals.graph();
  return norm_sq(r.residuals) + mean(ln_cosh(r.terminal_values - g.constant(r.terminal_targets)));
}

/// Sum of squared residuals plus the summed squared terminal mismatch.
inline VarRef loss_mse(const Rollout& r) {
  Graph& g = *r.residuals.graph();
  return norm_sq(r.residuals) + norm_sq(r.terminal_values - g.constant(r.terminal_targets));
}

inline VarRef loss(const Rollout& r, LossKind kind) {
  return kind == LossKind::hybrid ? loss_hybrid(r) : loss_mse(r);
}

}  // namespace tnpde
