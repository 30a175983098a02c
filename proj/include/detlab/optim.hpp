#pragma once

// Trainable parameters and AdamW with decoupled weight decay.
//
// Params own their value, gradient accumulator, and Adam moments. Each
// forward pass pushes the current value onto a fresh tape; after backward()
// the tape gradient is pulled back into the accumulator, so several scenes
// (each with its own tape) can contribute to one step.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "detlab/tensor.hpp"

namespace detlab {

struct Param {
  std::string name;
  Tensor value;
  std::vector<double> grad;
  std::vector<double> m;
  std::vector<double> v;
  int last_node = -1;

  Param() = default;
  Param(std::string n, Tensor init)
      : name(std::move(n)),
        value(std::move(init)),
        grad(value.data.size(), 0.0),
        m(value.data.size(), 0.0),
        v(value.data.size(), 0.0) {}

  // Put the current value on a tape; remembers the node for pull_grad.
  Tensor push(Tape& t) {
    Tensor out = t.watch(value);
    last_node = out.node;
    return out;
  }

  void pull_grad(const Tape& t, double scale = 1.0) {
    auto g = t.grad(last_node);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += scale * g[i];
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  int numel() const { return value.numel(); }
};

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  AdamWConfig cfg;
  std::int64_t t = 0;
};

inline void zero_grads(std::vector<Param*>& params) {
  for (Param* p : params) p->zero_grad();
}

inline void pull_grads(std::vector<Param*>& params, const Tape& tape, double scale = 1.0) {
  for (Param* p : params) p->pull_grad(tape, scale);
}

// One AdamW step: decay is applied to the value directly, not via the
// gradient, then the bias-corrected Adam update follows.
inline void adamw_step(std::vector<Param*>& params, AdamWState& st) {
  st.t += 1;
  const AdamWConfig& c = st.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
  for (Param* p : params) {
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      double& w = p->value.data[i];
      const double g = p->grad[i];
      w -= c.lr * c.weight_decay * w;
      p->m[i] = c.beta1 * p->m[i] + (1.0 - c.beta1) * g;
      p->v[i] = c.beta2 * p->v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = p->m[i] / bc1;
      const double vhat = p->v[i] / bc2;
      w -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace detlab
