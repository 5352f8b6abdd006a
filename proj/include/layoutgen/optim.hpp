#pragma once

#include <cmath>
#include <map>
#include <string>

#include "layoutgen/graph.hpp"
#include "layoutgen/tensor.hpp"

namespace layoutgen {

struct AdamState {
  Tensor m, v;
  long long step = 0;
};

// Named parameter tensors with per-parameter Adam state. Iteration order is
// the key order, so serialization and updates are deterministic.
class ParamStore {
 public:
  void add(const std::string& name, Tensor t) {
    AdamState st;
    st.m = Tensor(t.shape);
    st.v = Tensor(t.shape);
    params_[name] = std::move(t);
    adam_[name] = std::move(st);
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("unknown parameter: " + name);
    return it->second;
  }

  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("unknown parameter: " + name);
    return it->second;
  }

  AdamState& adam(const std::string& name) { return adam_.at(name); }
  const AdamState& adam(const std::string& name) const { return adam_.at(name); }

  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }

  bool all_finite() const {
    for (const auto& [k, t] : params_)
      if (!t.all_finite()) return false;
    return true;
  }

  void merge_from(const ParamStore& o) {
    for (const auto& [k, t] : o.params_) {
      params_[k] = t;
      adam_[k] = o.adam_.at(k);
    }
  }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, AdamState> adam_;
};

// Fetch a store parameter as a named graph leaf (cached per graph).
inline Var param(Graph& g, const ParamStore& store, const std::string& name) {
  return g.leaf(store.at(name), name);
}

// Standard bias-corrected Adam, applied in place. Gradient-map entries whose
// names are not in the store are ignored, so one backward pass can feed
// several stores.
inline void adam_step(ParamStore& store, const std::map<std::string, Tensor>& grads,
                      double lr, double beta1, double beta2, double eps) {
  for (const auto& [name, g] : grads) {
    if (!store.has(name)) continue;
    Tensor& p = store.at(name);
    if (g.shape != p.shape)
      throw ShapeError("adam_step gradient shape mismatch for " + name);
    AdamState& st = store.adam(name);
    st.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (long long i = 0; i < p.size(); ++i) {
      st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g[i];
      st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

struct AdamConfig {
  double lr = 0.00002;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void adam_step(ParamStore& store, const std::map<std::string, Tensor>& grads,
                      const AdamConfig& cfg) {
  adam_step(store, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
}

}  // namespace layoutgen
