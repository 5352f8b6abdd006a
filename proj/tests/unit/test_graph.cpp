#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "layoutgen/grad_check.hpp"
#include "layoutgen/graph.hpp"
#include "layoutgen/optim.hpp"

using namespace layoutgen;

namespace {

Tensor t2(std::vector<int> shape, std::vector<double> v) { return Tensor(std::move(shape), std::move(v)); }

}  // namespace

TEST_CASE("linear matches hand arithmetic") {
  Graph g;
  Var x = g.constant(t2({1, 2}, {1, 2}));
  Var w = g.constant(t2({2, 2}, {1, 0, 0, 1}));
  Var b = g.constant(t2({2}, {0, 0}));
  Var y = g.linear(x, w, b);
  CHECK(g.value(y).data == std::vector<double>{1, 2});

  Var x2 = g.constant(t2({1, 2}, {1, 1}));
  Var w2 = g.constant(t2({2, 1}, {2, 3}));
  Var b2 = g.constant(t2({1}, {1}));
  Var y2 = g.linear(x2, w2, b2);
  CHECK(g.value(y2)[0] == 6.0);
}

TEST_CASE("linear rejects shape mismatch") {
  Graph g;
  Var x = g.constant(t2({1, 3}, {1, 2, 3}));
  Var w = g.constant(t2({2, 2}, {1, 0, 0, 1}));
  Var b = g.constant(t2({2}, {0, 0}));
  CHECK_THROWS_AS(g.linear(x, w, b), ShapeError);
}

TEST_CASE("linear gradient vs finite differences") {
  Rng rng(11);
  SampleFn sample = [](Rng& r) {
    ParamMap p;
    Tensor x({3, 4}), w({4, 2}), b({2});
    for (auto& v : x.data) v = r.normal(0, 1);
    for (auto& v : w.data) v = r.normal(0, 1);
    for (auto& v : b.data) v = r.normal(0, 1);
    p["x"] = x;
    p["w"] = w;
    p["b"] = b;
    return p;
  };
  BuildFn build = [](Graph& g, const ParamMap& p) {
    Var y = g.linear(g.leaf(p.at("x"), "x"), g.leaf(p.at("w"), "w"), g.leaf(p.at("b"), "b"));
    return g.sum_all(y);
  };
  auto rep = grad_check_sampled(sample, build, 1e-5, 1e-3, rng);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("conv2d identity and hand counts") {
  Graph g;
  Tensor x({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) x[i] = i + 1;
  Var xv = g.constant(x);
  Var k1 = g.constant(t2({1, 1, 1, 1}, {1}));
  Var y = g.conv2d(xv, k1, 1, 0);
  CHECK(g.value(y).data == x.data);

  Var ones = g.constant(Tensor::full({1, 1, 3, 3}, 1.0));
  Var kv = g.constant(Tensor::full({1, 1, 3, 3}, 1.0));
  Var y2 = g.conv2d(ones, kv, 1, 1);
  CHECK(g.value(y2).shape == std::vector<int>{1, 1, 3, 3});
  CHECK(g.value(y2).data[4] == 9.0);  // center sees the full window
  CHECK(g.value(y2).data[0] == 4.0);  // corner sees a 2x2 window

  Var bad = g.constant(Tensor::full({1, 2, 3, 3}, 1.0));
  CHECK_THROWS_AS(g.conv2d(bad, kv, 1, 1), ShapeError);
}

TEST_CASE("conv2d gradient vs finite differences") {
  Rng rng(12);
  SampleFn sample = [](Rng& r) {
    ParamMap p;
    Tensor x({1, 2, 5, 5}), k({3, 2, 3, 3});
    for (auto& v : x.data) v = r.normal(0, 1);
    for (auto& v : k.data) v = r.normal(0, 1);
    p["x"] = x;
    p["k"] = k;
    return p;
  };
  BuildFn build = [](Graph& g, const ParamMap& p) {
    Var y = g.conv2d(g.leaf(p.at("x"), "x"), g.leaf(p.at("k"), "k"), 2, 1);
    return g.sum_all(y);
  };
  auto rep = grad_check_sampled(sample, build, 1e-5, 1e-3, rng);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("pointwise kernel arithmetic") {
  Graph g;
  Var x = g.constant(t2({3}, {0.5, 1.5, -0.25}));
  Var y = g.tent(x);
  CHECK(g.value(y).data == std::vector<double>{0.5, 0.0, 0.75});

  Var c = g.constant(t2({3}, {-2, 0.3, 7}));
  Var yc = g.clamp01(c);
  CHECK(g.value(yc).data == std::vector<double>{0.0, 0.3, 1.0});

  Var z = g.leaf(Tensor::scalar(0.0), "z");
  Var s = g.sigmoid(z);
  CHECK(g.value(s)[0] == 0.5);
  g.backward(s);
  CHECK(g.grad(z)[0] == 0.25);
}

TEST_CASE("reduce examples and gradients") {
  Graph g;
  Var x = g.leaf(t2({3}, {3, 1, 3}), "x");
  Var m = g.reduce_max(x, 0);
  CHECK(g.value(m)[0] == 3.0);
  g.backward(m);
  CHECK(g.grad(x).data == std::vector<double>{1, 0, 0});  // tie to lowest index

  Graph g2;
  Var y = g2.constant(t2({2}, {2, 4}));
  CHECK(g2.value(g2.reduce_mean(y, 0))[0] == 3.0);

  Graph g3;
  Var z = g3.leaf(t2({4}, {1, 2, 3, 4}), "z");
  Var s = g3.sum_all(z);
  g3.backward(s);
  CHECK(g3.grad(z).data == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("backward chain rule on 1-d sigmoid") {
  Graph g;
  Var w = g.leaf(Tensor::scalar(0.7), "w");
  Var x = g.constant(Tensor::scalar(1.3));
  Var s = g.sigmoid(g.mul(w, x));
  g.backward(s);
  const double sv = 1.0 / (1.0 + std::exp(-0.7 * 1.3));
  CHECK(g.grad(w)[0] == Catch::Approx(sv * (1 - sv) * 1.3).epsilon(1e-12));
}

TEST_CASE("backward of a sum of losses equals sum of backward passes") {
  Tensor xv({5});
  Rng rng(3);
  for (auto& v : xv.data) v = rng.normal(0, 1);
  const Tensor c1 = Tensor::full({5}, 0.37);
  const Tensor c2 = Tensor::full({5}, 1.91);

  Graph ga;
  Var xa = ga.leaf(xv, "x");
  Var la = ga.sum_all(ga.mul(xa, ga.constant(c1)));
  ga.backward(la);

  Graph gb;
  Var xb = gb.leaf(xv, "x");
  Var lb = gb.sum_all(gb.mul(xb, gb.constant(c2)));
  gb.backward(lb);

  Graph gc;
  Var xc = gc.leaf(xv, "x");
  Var l1 = gc.sum_all(gc.mul(xc, gc.constant(c1)));
  Var l2 = gc.sum_all(gc.mul(xc, gc.constant(c2)));
  gc.backward(gc.add(l1, l2));

  for (int i = 0; i < 5; ++i)
    CHECK(gc.grad(xc)[i] == ga.grad(xa)[i] + gb.grad(xb)[i]);
}

TEST_CASE("graph replay is bit-identical") {
  auto run = [] {
    Rng rng(99);
    Graph g;
    Tensor x({4, 4});
    for (auto& v : x.data) v = rng.normal(0, 1);
    Var l = g.mean_all(g.sigmoid(g.matmul(g.constant(x), g.constant(x))));
    return g.value(l)[0];
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check exact for quadratics") {
  auto rep = grad_check([](Graph& g, Var w) { return g.mul(w, w); }, Tensor::scalar(3.0), 1e-4, 1e-3);
  CHECK(rep.max_rel_err < 1e-8);
}

TEST_CASE("grad_check rejects kinked evaluation points") {
  CHECK_THROWS_AS(grad_check([](Graph& g, Var w) { return g.tent(w); }, Tensor::scalar(0.0), 1e-4, 1e-3),
                  DegenerateSample);
}

TEST_CASE("adam first step moves by about lr") {
  ParamStore store;
  store.add("p", Tensor::scalar(1.0));
  std::map<std::string, Tensor> grads{{"p", Tensor::scalar(1.0)}};
  adam_step(store, grads, 2e-5, 0.5, 0.999, 1e-8);
  CHECK(std::fabs((1.0 - store.at("p")[0]) - 2e-5) < 1e-7);
  CHECK(store.adam("p").step == 1);
}

TEST_CASE("adam zero gradient decays moments only") {
  ParamStore store;
  store.add("p", Tensor::scalar(2.0));
  adam_step(store, {{"p", Tensor::scalar(1.0)}}, 1e-3, 0.5, 0.999, 1e-8);
  const double p1 = store.at("p")[0];
  const double m1 = store.adam("p").m[0];
  adam_step(store, {{"p", Tensor::scalar(0.0)}}, 1e-3, 0.5, 0.999, 1e-8);
  // mhat stays positive after one zero-grad step, so the parameter still
  // drifts a little; moments must have decayed exactly.
  CHECK(store.adam("p").m[0] == 0.5 * m1);
  CHECK(store.at("p")[0] < p1);

  ParamStore fresh;
  fresh.add("q", Tensor::scalar(2.0));
  adam_step(fresh, {{"q", Tensor::scalar(0.0)}}, 1e-3, 0.5, 0.999, 1e-8);
  CHECK(fresh.at("q")[0] == 2.0);  // zero gradient from the start: unchanged
}

TEST_CASE("adam two steps reproduce the closed-form recursion") {
  const double g0 = 0.7, lr = 1e-3, b1 = 0.5, b2 = 0.999, eps = 1e-8;
  ParamStore store;
  store.add("p", Tensor::scalar(1.0));
  adam_step(store, {{"p", Tensor::scalar(g0)}}, lr, b1, b2, eps);
  adam_step(store, {{"p", Tensor::scalar(g0)}}, lr, b1, b2, eps);

  // independent hand recursion
  double m = 0, v = 0, p = 1.0;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g0;
    v = b2 * v + (1 - b2) * g0 * g0;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    p -= lr * mh / (std::sqrt(vh) + eps);
  }
  CHECK(store.at("p")[0] == Catch::Approx(p).margin(1e-15));
}

TEST_CASE("adam rejects shape mismatch") {
  ParamStore store;
  store.add("p", Tensor({2}));
  CHECK_THROWS_AS(adam_step(store, {{"p", Tensor({3})}}, 1e-3, 0.5, 0.999, 1e-8), ShapeError);
}

TEST_CASE("backward requires scalar loss") {
  Graph g;
  Var x = g.leaf(t2({2}, {1, 2}), "x");
  CHECK_THROWS_AS(g.backward(x), ShapeError);
}

TEST_CASE("untouched leaves get zero gradients") {
  Graph g;
  Var x = g.leaf(Tensor::scalar(1.0), "x");
  Var y = g.leaf(Tensor::scalar(2.0), "y");
  (void)y;
  g.backward(g.mul(x, x));
  auto grads = g.gradients();
  CHECK(grads.at("y")[0] == 0.0);
  CHECK(grads.at("x")[0] == 2.0);
}

TEST_CASE("pointwise gradient table vs finite differences") {
  Rng rng(21);
  for (Pw kind : {Pw::Relu, Pw::Sigmoid, Pw::Abs, Pw::Clamp01, Pw::Tent, Pw::Softplus}) {
    SampleFn sample = [](Rng& r) {
      Tensor x({8});
      for (auto& v : x.data) v = r.normal(0.4, 0.8);
      return ParamMap{{"x", x}};
    };
    BuildFn build = [kind](Graph& g, const ParamMap& p) {
      return g.sum_all(g.mul(g.pointwise(g.leaf(p.at("x"), "x"), kind),
                             g.constant(Tensor::full({8}, 0.7))));
    };
    auto rep = grad_check_sampled(sample, build, 1e-5, 1e-3, rng);
    CHECK(rep.max_rel_err < 1e-6);
  }
}
