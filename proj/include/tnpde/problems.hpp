#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <numeric>
#include <span>
#include <tuple>
#include <vector>

#include "tnpde/autodiff.hpp"
#include "tnpde/errors.hpp"
#include "tnpde/fbsde.hpp"
#include "tnpde/random.hpp"
#include "tnpde/tensor.hpp"

namespace tnpde {

namespace detail {
inline double squared_norm(std::span<const double> x) {
  return std::inner_product(x.begin(), x.end(), x.begin(), 0.0);
}

/// Row sums of a rows x d node, as rows x 1.
inline VarRef row_sum(VarRef m) {
  const auto d = static_cast<std::int64_t>(m.shape()[1]);
  return matmul(m, m.graph()->constant(Tensor::ones({d, 1})));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Black-Scholes-Barenblatt

struct BSBParams {
  std::size_t dim = 10;
  double horizon = 1.0;
  double sigma = 0.4;
  double rate = 0.05;
  std::size_t steps = 50;
  double x0_value = 1.0;
};

/// Closed form exp((r + sigma^2)(T - t)) |x|^2.
inline double bsb_exact(const BSBParams& p, double t, std::span<const double> x) {
  return std::exp((p.rate + p.sigma * p.sigma) * (p.horizon - t)) * detail::squared_norm(x);
}

/// dX = sigma diag(X) dW,  dY = r (Y - Z'X) dt + sigma Z' diag(X) dW,  Y_T = |X_T|^2.
inline FBSDEProblem bsb_problem(const BSBParams& p = {}) {
  FBSDEProblem prob;
  prob.name = "bsb";
  prob.dim = p.dim;
  prob.horizon = p.horizon;
  prob.steps = p.steps;
  prob.x0.assign(p.dim, p.x0_value);
  prob.drift = [](double, std::span<const double>, double, std::span<const double>, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
  };
  prob.diffusion = [s = p.sigma](double, std::span<const double> x, double) {
    const auto d = static_cast<std::int64_t>(x.size());
    Tensor m = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < x.size(); ++i) m.at(i, i) = s * x[i];
    return m;
  };
  prob.diffusion_apply = [s = p.sigma](double, std::span<const double> x, double, std::span<const double> v,
                                       std::span<double> out) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = s * x[i] * v[i];
  };
  prob.generator = [r = p.rate](const Tensor&, const Tensor& x, VarRef y, VarRef z) {
    return (y - detail::row_sum(z * y.graph()->constant(x))) * r;
  };
  prob.terminal = [](std::span<const double> x) { return detail::squared_norm(x); };
  prob.exact = [p](double t, std::span<const double> x) { return bsb_exact(p, t, x); };
  prob.decoupled = true;
  return prob;
}

// ---------------------------------------------------------------------------
// Hamilton-Jacobi-Bellman

struct HJBParams {
  std::size_t dim = 100;
  double horizon = 1.0;
  double sigma = std::sqrt(2.0);
  std::size_t steps = 50;
  std::size_t mc_samples = 100000;
  std::uint64_t mc_seed = 2024;

  /// Desk-scale instance with a 10-dimensional state.
  static HJBParams reduced() {
    HJBParams p;
    p.dim = 10;
    return p;
  }
};

inline double hjb_terminal(std::span<const double> x) { return std::log(0.5 * (1.0 + detail::squared_norm(x))); }

struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

/// u(t, x) = -ln E[exp(-g(x + sqrt(2) W_{T-t}))] by plain Monte Carlo. The
/// standard error is propagated through the logarithm by the delta method.
inline McEstimate hjb_exact_mc(double t, std::span<const double> x, std::size_t samples, std::uint64_t seed,
                               double horizon = 1.0) {
  if (t > horizon) throw InvalidArgument("hjb_exact_mc: t exceeds the horizon");
  if (samples < 1) throw InvalidArgument("hjb_exact_mc: need at least one sample");
  if (t == horizon) return {hjb_terminal(x), 0.0, samples};
  const double scale = std::sqrt(2.0 * (horizon - t));
  NormalSampler normal(seed);
  std::vector<double> w(x.size());
  double mean = 0.0, m2 = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t i = 0; i < x.size(); ++i) w[i] = x[i] + scale * normal();
    const double v = std::exp(-hjb_terminal(w));
    // Welford update.
    const double delta = v - mean;
    mean += delta / static_cast<double>(s + 1);
    m2 += delta * (v - mean);
  }
  const double var = samples > 1 ? m2 / static_cast<double>(samples - 1) : 0.0;
  const double se_mean = std::sqrt(var / static_cast<double>(samples));
  return {-std::log(mean), se_mean / mean, samples};
}

/// Memoises hjb_exact_mc; each evaluation draws samples * d normals.
class HjbReferenceCache {
 public:
  static McEstimate get(double t, std::span<const double> x, std::size_t samples, std::uint64_t seed,
                        double horizon) {
    static std::mutex mutex;
    static std::map<Key, McEstimate> cache;
    Key key{t, std::vector<double>(x.begin(), x.end()), samples, seed, horizon};
    {
      std::lock_guard lock(mutex);
      if (auto it = cache.find(key); it != cache.end()) return it->second;
    }
    const McEstimate e = hjb_exact_mc(t, x, samples, seed, horizon);
    std::lock_guard lock(mutex);
    cache.emplace(std::move(key), e);
    return e;
  }

 private:
  using Key = std::tuple<double, std::vector<double>, std::size_t, std::uint64_t, double>;
};

/// dX = sigma dW,  dY = |Z|^2 dt + sigma Z' dW,  Y_T = ln(0.5 (1 + |X_T|^2)).
inline FBSDEProblem hjb_problem(const HJBParams& p = {}) {
  FBSDEProblem prob;
  prob.name = p.dim == 100 ? "hjb" : "hjb" + std::to_string(p.dim);
  prob.dim = p.dim;
  prob.horizon = p.horizon;
  prob.steps = p.steps;
  prob.x0.assign(p.dim, 0.0);
  prob.drift = [](double, std::span<const double>, double, std::span<const double>, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
  };
  prob.diffusion = [s = p.sigma](double, std::span<const double> x, double) {
    const auto d = static_cast<std::int64_t>(x.size());
    Tensor m = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < x.size(); ++i) m.at(i, i) = s;
    return m;
  };
  prob.diffusion_apply = [s = p.sigma](double, std::span<const double>, double, std::span<const double> v,
                                       std::span<double> out) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = s * v[i];
  };
  prob.generator = [](const Tensor&, const Tensor&, VarRef, VarRef z) { return detail::row_sum(square(z)); };
  prob.terminal = [](std::span<const double> x) { return hjb_terminal(x); };
  prob.exact = [p](double t, std::span<const double> x) {
    return HjbReferenceCache::get(t, x, p.mc_samples, p.mc_seed, p.horizon).value;
  };
  prob.decoupled = true;
  return prob;
}

// ---------------------------------------------------------------------------
// Reference solutions as models, used to measure the loss a near-exact
// solution attains. `scale` multiplies u and its gradient.

inline SolutionModel bsb_solution_model(const BSBParams& p, double scale = 1.0) {
  return [p, scale](Graph& g, const Tensor& t, const Tensor& x) {
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    Tensor u = Tensor::zeros({static_cast<std::int64_t>(rows), 1});
    Tensor du = Tensor::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double c = scale * std::exp((p.rate + p.sigma * p.sigma) * (p.horizon - t[r]));
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        s += x[r * d + i] * x[r * d + i];
        du[r * d + i] = 2.0 * c * x[r * d + i];
      }
      u[r] = c * s;
    }
    return NetworkOutput{g.constant(std::move(u)), g.constant(std::move(du))};
  };
}

/// Monte Carlo u and grad u with one shared set of `samples` normal draws
/// for every row (common random numbers keep path increments smooth).
inline SolutionModel hjb_solution_model(const HJBParams& p, std::size_t samples, std::uint64_t seed,
                                        double scale = 1.0) {
  if (samples < 1) throw InvalidArgument("hjb_solution_model: need at least one sample");
  const Tensor xi = randn({static_cast<std::int64_t>(samples), static_cast<std::int64_t>(p.dim)}, 0.0, 1.0, seed);
  return [p, xi, samples, scale](Graph& g, const Tensor& t, const Tensor& x) {
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    if (d != p.dim) throw ShapeError("hjb_solution_model: state width mismatch");
    Tensor u = Tensor::zeros({static_cast<std::int64_t>(rows), 1});
    Tensor du = Tensor::zeros(x.shape());
    std::vector<double> w(d), acc(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double tr = t[r];
      if (tr >= p.horizon) {
        const std::span<const double> xr(&x.data()[r * d], d);
        u[r] = scale * hjb_terminal(xr);
        const double n2 = 1.0 + detail::squared_norm(xr);
        for (std::size_t i = 0; i < d; ++i) du[r * d + i] = scale * 2.0 * xr[i] / n2;
        continue;
      }
      const double sd = p.sigma * std::sqrt(p.horizon - tr);
      double mass = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t k = 0; k < samples; ++k) {
        double n2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          w[i] = x[r * d + i] + sd * xi[k * d + i];
          n2 += w[i] * w[i];
        }
        const double e = 2.0 / (1.0 + n2);  // exp(-g)
        mass += e;
        for (std::size_t i = 0; i < d; ++i) acc[i] += e * 2.0 * w[i] / (1.0 + n2);
      }
      u[r] = -scale * std::log(mass / static_cast<double>(samples));
      for (std::size_t i = 0; i < d; ++i) du[r * d + i] = scale * acc[i] / mass;
    }
    return NetworkOutput{g.constant(std::move(u)), g.constant(std::move(du))};
  };
}

}  // namespace tnpde
