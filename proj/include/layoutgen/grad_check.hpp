#pragma once

#include <functional>
#include <map>
#include <string>

#include "layoutgen/common.hpp"
#include "layoutgen/graph.hpp"

namespace layoutgen {

// Finite-difference verification of analytic gradients.
//
// The builder must be a pure function of the supplied parameter tensors: it
// reconstructs the graph from scratch on every call, so central differences
// re-evaluate exactly the same computation with one coordinate nudged.

using ParamMap = std::map<std::string, Tensor>;
using SampleFn = std::function<ParamMap(Rng&)>;
using BuildFn = std::function<Var(Graph&, const ParamMap&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  int tries = 1;          // samples drawn until a kink-free one was found
  long long coords = 0;   // finite-difference evaluations / 2
};

namespace detail {

inline double forward_value(const BuildFn& build, const ParamMap& params) {
  Graph g;
  g.track_kinks = false;
  Var loss = build(g, params);
  return g.value(loss)[0];
}

inline GradCheckReport check_at(const BuildFn& build, const ParamMap& params, double step,
                                double kink_margin) {
  Graph g;
  g.track_kinks = true;
  Var loss = build(g, params);
  if (g.value(loss).size() != 1) throw ShapeError("grad_check loss must be scalar");
  if (g.min_kink_gap() < kink_margin)
    throw DegenerateSample("evaluation point within kink_margin of a kink");
  g.backward(loss);
  const std::map<std::string, Tensor> grads = g.gradients();

  GradCheckReport rep;
  for (const auto& [name, analytic] : grads) {
    ParamMap work = params;
    Tensor& t = work.at(name);
    for (long long i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + step;
      const double fp = forward_value(build, work);
      t[i] = keep - step;
      const double fm = forward_value(build, work);
      t[i] = keep;
      const double fd = (fp - fm) / (2.0 * step);
      const double err = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(fd));
      if (err > rep.max_rel_err) rep.max_rel_err = err;
      ++rep.coords;
    }
  }
  return rep;
}

}  // namespace detail

// Check at one fixed parameter point; throws DegenerateSample when the point
// sits within kink_margin of any kink or max tie.
inline GradCheckReport grad_check(const BuildFn& build, const ParamMap& params, double step,
                                  double kink_margin) {
  if (step <= 0.0) throw Error("grad_check step must be positive");
  return detail::check_at(build, params, step, kink_margin);
}

// Convenience single-tensor form: f maps one parameter tensor to a scalar.
inline GradCheckReport grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& params,
                                  double step, double kink_margin) {
  BuildFn build = [&f](Graph& g, const ParamMap& p) {
    return f(g, g.leaf(p.at("w"), "w"));
  };
  return grad_check(build, ParamMap{{"w", params}}, step, kink_margin);
}

// Resample evaluation points until one clears every kink by kink_margin, then
// verify. Throws DegenerateSample after max_tries failures.
inline GradCheckReport grad_check_sampled(const SampleFn& sample, const BuildFn& build,
                                          double step, double kink_margin, Rng& rng,
                                          int max_tries = 100) {
  if (step <= 0.0) throw Error("grad_check step must be positive");
  for (int t = 1; t <= max_tries; ++t) {
    ParamMap params = sample(rng);
    try {
      GradCheckReport rep = detail::check_at(build, params, step, kink_margin);
      rep.tries = t;
      return rep;
    } catch (const DegenerateSample&) {
      continue;
    }
  }
  throw DegenerateSample("no kink-free sample found after " + std::to_string(max_tries) +
                         " tries");
}

}  // namespace layoutgen
