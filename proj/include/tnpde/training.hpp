#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tnpde/autodiff.hpp"
#include "tnpde/errors.hpp"
#include "tnpde/fbsde.hpp"
#include "tnpde/nn.hpp"
#include "tnpde/random.hpp"
#include "tnpde/tensor.hpp"

namespace tnpde {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update in place. Moments are created lazily on the
/// first call.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.push_back(Tensor::zeros(p->shape()));
      state.v.push_back(Tensor::zeros(p->shape()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match the parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->shape() != grads[k].shape() || state.m[k].shape() != grads[k].shape()) {
      throw ShapeError("adam_step: parameter " + std::to_string(k) + " has shape " +
                       params[k]->shape().to_string() + ", gradient " + grads[k].shape().to_string());
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    double* p = params[k]->data().data();
    double* m = state.m[k].data().data();
    double* v = state.v[k].data().data();
    const auto g = grads[k].data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      p[i] -= state.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::size_t batch_size = 100;
  std::size_t epochs = 3000;
  LossKind loss_kind = LossKind::hybrid;
  std::uint64_t seed = 0;
  /// Draw new Brownian paths every epoch; otherwise reuse the epoch-0 batch.
  bool resample_paths = true;
  double lr = 1e-3;
};

struct MetricsLog {
  std::vector<double> loss;
  std::vector<double> y0;         // u(0, x0) at the start of each epoch
  std::vector<double> wall_time;  // seconds spent in each epoch

  std::size_t epochs() const noexcept { return loss.size(); }
  double total_wall_time() const {
    double s = 0.0;
    for (double t : wall_time) s += t;
    return s;
  }
};

/// Called after every epoch with the 0-based epoch index and the log so far.
using EpochCallback = std::function<void(std::size_t epoch, const MetricsLog&)>;

/// Seed of the path batch used at `epoch`.
inline std::uint64_t path_seed(const TrainConfig& cfg, std::size_t epoch) {
  return derive_seed(cfg.seed, {cfg.resample_paths ? epoch : 0});
}

/// Value of the training loss and its gradient for every parameter.
struct LossEvaluation {
  double loss = 0.0;
  double y0 = 0.0;
  std::vector<Tensor> grads;
};

inline LossEvaluation evaluate_loss(const FBSDEProblem& problem, const Network& net, const PathBatch& paths,
                                    LossKind kind) {
  Graph g;
  const std::vector<VarRef> params = bind_parameters(g, net);
  const Rollout r = rollout(problem, net, params, paths, g);
  const VarRef l = loss(r, kind);
  const GradientMap grads = g.grad(l, params, false);
  LossEvaluation out{l.value().item(), r.y0(), {}};
  for (const VarRef& p : params) out.grads.push_back(grads[p]);
  return out;
}

/// Trains `net` in place with Adam on freshly sampled paths.
inline MetricsLog train(const FBSDEProblem& problem, Network& net, const TrainConfig& cfg,
                        const EpochCallback& on_epoch = {}) {
  if (cfg.batch_size < 1) throw InvalidArgument("train: batch size must be at least 1");
  if (net.state_dim() != problem.dim) {
    throw ShapeError("train: network input width " + std::to_string(net.input_dim()) + " does not fit problem " +
                     problem.name + " of dimension " + std::to_string(problem.dim));
  }
  problem.validate();
  MetricsLog log;
  AdamState adam;
  adam.lr = cfg.lr;
  std::optional<PathBatch> fixed;
  const std::vector<Tensor*> params = net.parameters();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    try {
      const PathBatch* paths = nullptr;
      PathBatch fresh;
      if (cfg.resample_paths) {
        fresh = sample_paths(problem, cfg.batch_size, path_seed(cfg, epoch));
        paths = &fresh;
      } else {
        if (!fixed) fixed = sample_paths(problem, cfg.batch_size, path_seed(cfg, 0));
        paths = &*fixed;
      }
      LossEvaluation eval = evaluate_loss(problem, net, *paths, cfg.loss_kind);
      if (!std::isfinite(eval.loss)) throw NonFiniteError("loss is not finite");
      adam_step(params, eval.grads, adam);
      log.loss.push_back(eval.loss);
      log.y0.push_back(eval.y0);
    } catch (const DivergedRollout& e) {
      throw TrainingError(epoch, std::string("diverged rollout: ") + e.what());
    } catch (const NonFiniteError& e) {
      throw TrainingError(epoch, std::string("non-finite value: ") + e.what());
    }
    log.wall_time.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    if (on_epoch) on_epoch(epoch, log);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Convergence detection

/// l^_1 = l_1, l^_i = alpha l^_{i-1} + (1 - alpha) l_i.
inline std::vector<double> ema_smooth(std::span<const double> series, double alpha) {
  if (series.empty()) throw InvalidArgument("ema_smooth: empty series");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("ema_smooth: alpha must lie in (0, 1)");
  std::vector<double> out(series.size());
  out[0] = series[0];
  for (std::size_t i = 1; i < series.size(); ++i) out[i] = alpha * out[i - 1] + (1.0 - alpha) * series[i];
  return out;
}

struct ConvergenceParams {
  double alpha = 0.9;
  std::size_t window = 200;
  std::size_t batch = 50;
  double threshold = 1.0;
  double tolerance = 1e-4;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("convergence: alpha must lie in (0, 1)");
    if (window < 1 || batch < 1 || batch > window) {
      throw InvalidArgument("convergence: need 1 <= batch <= window");
    }
    if (!(threshold > 0.0) || !(tolerance > 0.0)) {
      throw InvalidArgument("convergence: threshold and tolerance must be positive");
    }
  }
};

/// First 1-based window start i in [1, n - w] whose smoothed window
/// l^_i .. l^_{i+w-1} lies entirely below the threshold and whose
/// |mean(first b)| - |mean(last b)| is below the tolerance.
inline std::optional<std::size_t> convergence_epoch(std::span<const double> series, const ConvergenceParams& p) {
  p.validate();
  if (series.empty()) throw InvalidArgument("convergence_epoch: empty series");
  const std::size_t n = series.size();
  const std::size_t w = p.window;
  const std::size_t b = p.batch;
  if (w >= n) return std::nullopt;
  const std::vector<double> s = ema_smooth(series, p.alpha);

  // next_bad[k]: first index >= k with s >= threshold (n if none).
  std::vector<std::size_t> next_bad(n + 1, n);
  for (std::size_t k = n; k-- > 0;) next_bad[k] = s[k] < p.threshold ? next_bad[k + 1] : k;

  const auto bd = static_cast<double>(b);
  for (std::size_t start = 0; start + w < n; ++start) {
    if (next_bad[start] < start + w) continue;
    // Summed directly (not via running prefix sums) so the result matches a
    // naive evaluation bit for bit.
    double head = 0.0, tail = 0.0;
    for (std::size_t k = 0; k < b; ++k) head += s[start + k];
    for (std::size_t k = w - b; k < w; ++k) tail += s[start + k];
    const double diff = std::abs(head / bd) - std::abs(tail / bd);
    if (diff < p.tolerance) return start + 1;
  }
  return std::nullopt;
}

}  // namespace tnpde
