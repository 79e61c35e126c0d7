#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mctn/errors.hpp"
#include "mctn/tensor.hpp"

namespace mctn {

enum class OptKind { sgd, adam };

// First-order optimizer state. Moment buffers are lazily sized to the
// parameter list on the first step and shape-checked afterwards.
struct OptimizerState {
  OptKind kind = OptKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static OptimizerState make(OptKind k, double lr) {
    OptimizerState s;
    s.kind = k;
    s.learning_rate = lr;
    if (lr <= 0.0) throw ValueError("optimizer: learning rate must be positive");
    return s;
  }

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size())
      throw ShapeError(cat("optimizer: ", params.size(), " params vs ", grads.size(), " grads"));
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].shape() != grads[i].shape())
        throw ShapeError(cat("optimizer: param ", i, " shape ", shape_str(params[i].shape()),
                             " vs grad ", shape_str(grads[i].shape())));
    if (kind == OptKind::sgd) {
      for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i].size(); ++j)
          params[i][j] -= learning_rate * grads[i][j];
      ++step_count;
      return;
    }
    if (m.empty()) {
      m.resize(params.size());
      v.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params[i].size(), 0.0);
        v[i].assign(params[i].size(), 0.0);
      }
    }
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (m[i].size() != params[i].size())
        throw ShapeError(cat("optimizer: moment buffer ", i, " does not match parameter"));
      for (std::size_t j = 0; j < params[i].size(); ++j) {
        const double g = grads[i][j];
        m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
        v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
        const double mhat = m[i][j] / bc1;
        const double vhat = v[i][j] / bc2;
        params[i][j] -= learning_rate * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// Scales gradients in place so their global L2 norm is at most max_norm.
// max_norm <= 0 disables clipping.
inline void clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& g : grads)
    for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double s = max_norm / norm;
  for (auto& g : grads)
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
}

}  // namespace mctn
