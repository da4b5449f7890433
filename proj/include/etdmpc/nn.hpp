#pragma once

#include "etdmpc/common.hpp"

#include <cassert>

namespace etdmpc {

struct Linear {
  MatrixXd w;  // out x in
  VectorXd b;  // out
};

// Fully connected stack: tanh after every layer except the last. Used for
// every learned component; gradients are computed analytically via
// mlp_backward with activations captured in an MlpCache.
struct Mlp {
  std::vector<Linear> layers;

  int in_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().w.cols()); }
  int out_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().w.rows()); }

  /// `hidden_layers` hidden layers of width `hidden`, uniform fan-in init.
  static Mlp make(int in, int hidden, int hidden_layers, int out, Rng& rng) {
    Mlp m;
    int prev = in;
    for (int l = 0; l < hidden_layers; ++l) {
      m.layers.push_back(init_layer(prev, hidden, rng));
      prev = hidden;
    }
    m.layers.push_back(init_layer(prev, out, rng));
    return m;
  }

  static Linear init_layer(int in, int out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.w.resize(out, in);
    for (int c = 0; c < in; ++c)
      for (int r = 0; r < out; ++r) l.w(r, c) = rng.uniform(-bound, bound);
    l.b.resize(out);
    for (int r = 0; r < out; ++r) l.b(r) = rng.uniform(-bound, bound);
    return l;
  }
};

inline Mlp zeros_like(const Mlp& m) {
  Mlp z;
  z.layers.reserve(m.layers.size());
  for (const auto& l : m.layers)
    z.layers.push_back({MatrixXd::Zero(l.w.rows(), l.w.cols()), VectorXd::Zero(l.b.size())});
  return z;
}

inline void set_zero(Mlp& m) {
  for (auto& l : m.layers) {
    l.w.setZero();
    l.b.setZero();
  }
}

// Per-layer forward activations; inputs[l] feeds layer l, post is the
// network output after the final layer (no activation there).
struct MlpCache {
  std::vector<MatrixXd> inputs;
  MatrixXd out;
};

inline MatrixXd mlp_forward(const Mlp& m, const MatrixXd& x, MlpCache* cache = nullptr) {
  MatrixXd h = x;
  if (cache) {
    cache->inputs.clear();
    cache->inputs.reserve(m.layers.size());
  }
  const int last = static_cast<int>(m.layers.size()) - 1;
  for (int l = 0; l <= last; ++l) {
    if (cache) cache->inputs.push_back(h);
    h = (m.layers[l].w * h).colwise() + m.layers[l].b;
    if (l != last) h = h.array().tanh();
  }
  if (cache) cache->out = h;
  return h;
}

/// Accumulates parameter gradients into `grad` and returns dL/dx.
inline MatrixXd mlp_backward(const Mlp& m, const MlpCache& cache, const MatrixXd& dout,
                             Mlp& grad) {
  assert(grad.layers.size() == m.layers.size());
  const int last = static_cast<int>(m.layers.size()) - 1;
  MatrixXd delta = dout;  // dL/d(pre-activation of current layer)
  for (int l = last; l >= 0; --l) {
    if (l != last) {
      // delta currently holds dL/d(post-tanh); post values are inputs[l+1]
      const MatrixXd& post = cache.inputs[l + 1];
      delta = delta.array() * (1.0 - post.array().square());
    }
    grad.layers[l].w.noalias() += delta * cache.inputs[l].transpose();
    grad.layers[l].b.noalias() += delta.rowwise().sum();
    if (l > 0)
      delta = (m.layers[l].w.transpose() * delta).eval();
    else
      delta = m.layers[l].w.transpose() * delta;
  }
  return delta;  // dL/dx
}

template <class F>
void visit_arrays(Mlp& m, F&& f) {
  for (auto& l : m.layers) {
    f(l.w);
    f(l.b);
  }
}

template <class F>
void visit_arrays(const Mlp& m, F&& f) {
  for (const auto& l : m.layers) {
    f(l.w);
    f(l.b);
  }
}

template <class F>
void visit_zip(Mlp& a, Mlp& b, F&& f) {
  for (size_t i = 0; i < a.layers.size(); ++i) {
    f(a.layers[i].w, b.layers[i].w);
    f(a.layers[i].b, b.layers[i].b);
  }
}

template <class F>
void visit_zip3(Mlp& a, Mlp& b, Mlp& c, F&& f) {
  for (size_t i = 0; i < a.layers.size(); ++i) {
    f(a.layers[i].w, b.layers[i].w, c.layers[i].w);
    f(a.layers[i].b, b.layers[i].b, c.layers[i].b);
  }
}

inline long param_count(const Mlp& m) {
  long n = 0;
  visit_arrays(m, [&](const auto& a) { n += a.size(); });
  return n;
}

inline double squared_norm(const Mlp& m) {
  double s = 0.0;
  visit_arrays(m, [&](const auto& a) { s += a.squaredNorm(); });
  return s;
}

inline void scale(Mlp& m, double factor) {
  visit_arrays(m, [&](auto& a) { a *= factor; });
}

inline void axpy(Mlp& y, const Mlp& x, double alpha) {
  for (size_t i = 0; i < y.layers.size(); ++i) {
    y.layers[i].w += alpha * x.layers[i].w;
    y.layers[i].b += alpha * x.layers[i].b;
  }
}

// Adam with standard constants; one state per trained Mlp.
struct AdamState {
  Mlp m1, m2;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState make(const Mlp& params) {
    AdamState s;
    s.m1 = zeros_like(params);
    s.m2 = zeros_like(params);
    return s;
  }

  void step(Mlp& params, Mlp& grads, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.layers.size(); ++i) {
      auto upd = [&](auto& p, auto& g, auto& m, auto& v) {
        m = beta1 * m.array() + (1.0 - beta1) * g.array();
        v = beta2 * v.array() + (1.0 - beta2) * g.array().square();
        p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
      };
      upd(params.layers[i].w, grads.layers[i].w, m1.layers[i].w, m2.layers[i].w);
      upd(params.layers[i].b, grads.layers[i].b, m1.layers[i].b, m2.layers[i].b);
    }
  }
};

}  // namespace etdmpc
