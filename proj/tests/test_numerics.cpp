#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "winmamba/numerics.hpp"

using namespace winmamba;

namespace {

DiffArray random_array(std::mt19937_64& rng, const Shape& s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<size_t>(s.numel()));
  for (double& x : v) x = dist(rng);
  return DiffArray::from(s, std::move(v));
}

// Independent oracle: naive triple-loop product, accumulation order j-major.
std::vector<double> matmul_oracle(const DiffArray& x, const DiffArray& w) {
  std::vector<double> out(static_cast<size_t>(x.rows() * w.cols()), 0.0);
  for (int64_t i = 0; i < x.rows(); ++i) {
    for (int64_t j = 0; j < w.cols(); ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < x.cols(); ++k) acc += x.at(i, k) * w.at(k, j);
      out[static_cast<size_t>(i * w.cols() + j)] = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("linear identity and diagonal cases") {
  DiffArray x = DiffArray::from(Shape(1, 2), {1.0, 2.0});
  DiffArray eye = DiffArray::from(Shape(2, 2), {1.0, 0.0, 0.0, 1.0});
  DiffArray b0 = DiffArray::zeros(Shape(2));
  DiffArray y = linear(x, eye, b0);
  CHECK(y.at(0, 0) == 1.0);
  CHECK(y.at(0, 1) == 2.0);

  DiffArray x2 = DiffArray::from(Shape(2, 2), {1.0, 0.0, 0.0, 1.0});
  DiffArray w2 = DiffArray::from(Shape(2, 2), {2.0, 0.0, 0.0, 3.0});
  DiffArray b1 = DiffArray::from(Shape(2), {1.0, 1.0});
  DiffArray y2 = linear(x2, w2, b1);
  CHECK(y2.at(0, 0) == 3.0);
  CHECK(y2.at(0, 1) == 1.0);
  CHECK(y2.at(1, 0) == 1.0);
  CHECK(y2.at(1, 1) == 4.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  std::mt19937_64 rng(7);
  DiffArray x = random_array(rng, Shape(4, 3));
  DiffArray w = random_array(rng, Shape(3, 5));
  DiffArray y = matmul(x, w);
  std::vector<double> expect = matmul_oracle(x, w);
  for (size_t i = 0; i < expect.size(); ++i) {
    CHECK(std::abs(y.values()[i] - expect[i]) < 1e-12);
  }
}

TEST_CASE("linear rejects shape mismatch") {
  DiffArray x = DiffArray::zeros(Shape(2, 3));
  DiffArray w = DiffArray::zeros(Shape(4, 2));
  DiffArray b = DiffArray::zeros(Shape(2));
  CHECK_THROWS_AS(linear(x, w, b), DimensionError);
}

TEST_CASE("activations") {
  DiffArray x = DiffArray::from(Shape(2), {-1.0, 2.0});
  DiffArray r = activation(x, Act::Relu);
  CHECK(r.at(0) == 0.0);
  CHECK(r.at(1) == 2.0);

  DiffArray z = DiffArray::from(Shape(1), {0.0});
  CHECK(activation(z, Act::Softplus).at(0) == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  // silu(x) == x * sigmoid(x) composed from primitives
  std::mt19937_64 rng(11);
  DiffArray v = random_array(rng, Shape(16), -4.0, 4.0);
  DiffArray silu = activation(v, Act::Silu);
  DiffArray composed = mul(v, activation(v, Act::Sigmoid));
  for (int64_t i = 0; i < 16; ++i) {
    CHECK(std::abs(silu.at(i) - composed.at(i)) < 1e-12);
  }
}

TEST_CASE("softplus is stable at large magnitudes") {
  DiffArray x = DiffArray::from(Shape(2), {700.0, -700.0});
  DiffArray y = activation(x, Act::Softplus);
  CHECK(y.at(0) == doctest::Approx(700.0));
  CHECK(y.at(1) == doctest::Approx(0.0));
}

TEST_CASE("non-finite results are rejected") {
  DiffArray x = DiffArray::from(Shape(1), {1000.0});
  CHECK_THROWS_AS(activation(x, Act::Exp), NumericError);
}

TEST_CASE("batchnorm train-mode statistics") {
  Params params(3);
  PassContext ctx{nullptr, &params, BnMode::Train, {}};

  SUBCASE("constant column maps to zero") {
    DiffArray x = DiffArray::from(Shape(3, 1), {5.0, 5.0, 5.0});
    DiffArray y = batchnorm(ctx, x, "bn");
    for (int64_t i = 0; i < 3; ++i) CHECK(std::abs(y.at(i, 0)) < 1e-9);
  }

  SUBCASE("two symmetric rows normalize to +-1") {
    DiffArray x = DiffArray::from(Shape(2, 1), {0.0, 2.0});
    DiffArray y = batchnorm(ctx, x, "bn2");
    CHECK(y.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y.at(1, 0) == doctest::Approx(1.0).epsilon(1e-4));
  }

  SUBCASE("random batch has zero mean unit variance per column") {
    std::mt19937_64 rng(5);
    DiffArray x = random_array(rng, Shape(16, 4), -3.0, 3.0);
    DiffArray y = batchnorm(ctx, x, "bn3");
    for (int64_t j = 0; j < 4; ++j) {
      double mu = 0.0, var = 0.0;
      for (int64_t i = 0; i < 16; ++i) mu += y.at(i, j);
      mu /= 16.0;
      for (int64_t i = 0; i < 16; ++i) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
      var /= 16.0;
      CHECK(std::abs(mu) < 1e-10);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
  }
}

TEST_CASE("batchnorm eval mode uses running statistics") {
  Params params(3);
  DiffArray x = DiffArray::from(Shape(4, 2), {1.0, -2.0, 3.0, 0.5, -1.0, 2.0, 0.0, 1.5});
  {
    PassContext train{nullptr, &params, BnMode::Train, {}};
    batchnorm(train, x, "bn");
    apply_bn_updates(params, train.bn_updates);
  }
  const auto& rm = params.at("bn.running_mean").values();
  CHECK(rm[0] == doctest::Approx(0.1 * 0.75));  // momentum 0.1 from zero init
  PassContext eval{nullptr, &params, BnMode::Eval, {}};
  DiffArray y1 = batchnorm(eval, x, "bn");
  DiffArray y2 = batchnorm(eval, x, "bn");
  CHECK(y1.values() == y2.values());  // eval mode has no side effects
}

TEST_CASE("backward through linear matches hand derivation") {
  Params params(1);
  params.set("w", DiffArray::from(Shape(2, 2), {1.0, 2.0, 3.0, 4.0}));
  Graph g;
  DiffArray w = g.leaf("w", params.at("w"));
  DiffArray x = DiffArray::from(Shape(3, 2), {1.0, 0.0, 0.0, 1.0, 2.0, 2.0});
  DiffArray root = sum(matmul(x, w));
  GradMap grads = g.backward(root);
  // d(sum(xW))/dW[k][j] = sum_i x[i][k]
  CHECK(grads.at("w").at(0, 0) == doctest::Approx(3.0));
  CHECK(grads.at("w").at(0, 1) == doctest::Approx(3.0));
  CHECK(grads.at("w").at(1, 0) == doctest::Approx(3.0));
  CHECK(grads.at("w").at(1, 1) == doctest::Approx(3.0));
}

TEST_CASE("backward through relu subgradient") {
  Params params(1);
  params.set("x", DiffArray::from(Shape(2), {-1.0, 2.0}));
  Graph g;
  DiffArray x = g.leaf("x", params.at("x"));
  GradMap grads = g.backward(sum(activation(x, Act::Relu)));
  CHECK(grads.at("x").at(0) == 0.0);
  CHECK(grads.at("x").at(1) == 1.0);
}

TEST_CASE("backward requires a scalar attached root") {
  Graph g;
  Params params(1);
  params.set("x", DiffArray::from(Shape(2), {1.0, 2.0}));
  DiffArray x = g.leaf("x", params.at("x"));
  CHECK_THROWS_AS(g.backward(x), ContractError);
  CHECK_THROWS_AS(g.backward(DiffArray::from(Shape(1), {1.0})), ContractError);
}

TEST_CASE("unreached parameters get zero gradients") {
  Params params(1);
  params.set("used", DiffArray::from(Shape(1), {2.0}));
  params.set("unused", DiffArray::from(Shape(3), {1.0, 1.0, 1.0}));
  Graph g;
  DiffArray u = g.leaf("used", params.at("used"));
  g.leaf("unused", params.at("unused"));
  GradMap grads = g.backward(sum(u));
  CHECK(grads.at("used").at(0) == 1.0);
  for (int64_t i = 0; i < 3; ++i) CHECK(grads.at("unused").at(i) == 0.0);
}

TEST_CASE("gather scatter and slicing round trips") {
  std::mt19937_64 rng(21);
  DiffArray x = random_array(rng, Shape(8, 3));
  std::vector<int64_t> perm{3, 1, 7, 0, 2, 6, 4, 5};
  DiffArray gathered = gather_rows(x, perm);
  DiffArray restored = scatter_rows(gathered, perm, 8);
  CHECK(restored.values() == x.values());

  DiffArray joined = concat_rows(slice_rows(x, 0, 5), slice_rows(x, 5, 8));
  CHECK(joined.values() == x.values());

  DiffArray left = slice_cols(x, 0, 2);
  DiffArray right = slice_cols(x, 2, 3);
  CHECK(left.cols() == 2);
  CHECK(right.cols() == 1);
  CHECK(left.at(4, 1) == x.at(4, 1));
  CHECK(right.at(4, 0) == x.at(4, 2));
}

TEST_CASE("segment_mean pools rows") {
  DiffArray x = DiffArray::from(Shape(4, 2), {1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0});
  std::vector<std::vector<int64_t>> groups{{0, 1}, {2}, {3}};
  DiffArray y = segment_mean(x, groups);
  CHECK(y.at(0, 0) == 2.0);
  CHECK(y.at(0, 1) == 3.0);
  CHECK(y.at(1, 0) == 10.0);
  CHECK(y.at(2, 1) == 40.0);
}

TEST_CASE("detached forward equals attached forward bitwise") {
  std::mt19937_64 rng(31);
  Params params(9);
  params.get_or_create("w", Shape(4, 4), init_uniform_fan_in(4));
  params.get_or_create("b", Shape(4), init_constant(0.1));
  DiffArray x = random_array(rng, Shape(6, 4));

  auto run = [&](Graph* g) {
    PassContext ctx{g, &params, BnMode::Train, {}};
    DiffArray w = ctx.param("w");
    DiffArray b = ctx.param("b");
    return activation(linear(x, w, b), Act::Silu);
  };
  Graph g;
  DiffArray attached = run(&g);
  DiffArray detached = run(nullptr);
  CHECK(attached.values() == detached.values());
}

TEST_CASE("grad_check validates composed forwards via finite differences") {
  std::mt19937_64 rng(41);
  DiffArray x = random_array(rng, Shape(5, 3));

  SUBCASE("linear layer") {
    Params params(17);
    params.get_or_create("w", Shape(3, 4), init_uniform_fan_in(3));
    params.get_or_create("b", Shape(4), init_uniform_fan_in(4));
    auto f = [&](PassContext& ctx) {
      return mean(linear(x, ctx.param("w"), ctx.param("b")));
    };
    GradCheckResult r = grad_check(f, params, 1e-6, 1e-8);
    CHECK(r.pass);
    CHECK(r.max_rel_err < 1e-8);
  }

  SUBCASE("nonlinear chain with batchnorm") {
    Params params(18);
    params.get_or_create("w1", Shape(3, 6), init_uniform_fan_in(3));
    params.get_or_create("b1", Shape(6), init_uniform_fan_in(6));
    params.get_or_create("w2", Shape(6, 2), init_uniform_fan_in(6));
    params.get_or_create("b2", Shape(2), init_uniform_fan_in(2));
    auto f = [&](PassContext& ctx) {
      DiffArray h = batchnorm(ctx, linear(x, ctx.param("w1"), ctx.param("b1")), "bn");
      h = activation(h, Act::Silu);
      return mean(linear(h, ctx.param("w2"), ctx.param("b2")));
    };
    GradCheckResult r = grad_check(f, params, 1e-6, 1e-4);
    CHECK(r.pass);
  }

  SUBCASE("zero-parameter closure passes trivially") {
    Params params(19);
    auto f = [&](PassContext&) { return mean(x); };
    GradCheckResult r = grad_check(f, params, 1e-6, 1e-8);
    CHECK(r.pass);
    CHECK(r.entries.empty());
  }
}

TEST_CASE("grad_check across random seeds: gather/scatter/conv/segment chain") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(100 + seed);
    DiffArray x = random_array(rng, Shape(6, 4));
    std::vector<int64_t> perm{5, 2, 0, 4, 1, 3};
    std::vector<std::vector<int64_t>> groups{{0, 3}, {1}, {2, 4, 5}};
    Params params(seed);
    params.get_or_create("w", Shape(4, 4), init_uniform_fan_in(4));
    params.get_or_create("k", Shape(3, 4), init_uniform_fan_in(3));
    params.get_or_create("kb", Shape(4), init_constant(0.05));
    auto f = [&](PassContext& ctx) {
      DiffArray h = matmul(x, ctx.param("w"));
      h = causal_conv1d(h, ctx.param("k"), ctx.param("kb"));
      h = gather_rows(h, perm);
      h = activation(h, Act::Softplus);
      h = scatter_rows(h, perm, 6);
      h = segment_mean(h, groups);
      return mean(mul(h, h));
    };
    GradCheckResult r = grad_check(f, params, 1e-6, 1e-4);
    CAPTURE(seed);
    CHECK(r.pass);
  }
}

TEST_CASE("forward determinism") {
  Params params(55);
  params.get_or_create("w", Shape(8, 8), init_uniform_fan_in(8));
  std::mt19937_64 rng(3);
  DiffArray x = random_array(rng, Shape(4, 8));
  DiffArray y1 = activation(matmul(x, params.at("w")), Act::Silu);
  DiffArray y2 = activation(matmul(x, params.at("w")), Act::Silu);
  CHECK(y1.values() == y2.values());
}

TEST_CASE("parameter init depends only on seed and name") {
  Params a(77);
  Params b(77);
  // created in different orders
  a.get_or_create("p.first", Shape(4, 4), init_uniform_fan_in(4));
  a.get_or_create("p.second", Shape(4), init_uniform_fan_in(4));
  b.get_or_create("p.second", Shape(4), init_uniform_fan_in(4));
  b.get_or_create("p.first", Shape(4, 4), init_uniform_fan_in(4));
  CHECK(a.at("p.first").values() == b.at("p.first").values());
  CHECK(a.at("p.second").values() == b.at("p.second").values());
  Params c(78);
  c.get_or_create("p.first", Shape(4, 4), init_uniform_fan_in(4));
  CHECK(a.at("p.first").values() != c.at("p.first").values());
}

TEST_CASE("adam") {
  AdamConfig cfg;
  cfg.lr = 0.1;

  SUBCASE("zero gradient leaves parameters unchanged") {
    Params params(1);
    params.set("p", DiffArray::from(Shape(2), {1.0, -2.0}));
    GradMap grads;
    grads["p"] = DiffArray::zeros(Shape(2));
    AdamState state;
    adam_step(params, grads, cfg, 1, state);
    CHECK(params.at("p").at(0) == 1.0);
    CHECK(params.at("p").at(1) == -2.0);
  }

  SUBCASE("constant positive gradient decreases the parameter monotonically") {
    Params params(1);
    params.set("p", DiffArray::from(Shape(1), {1.0}));
    GradMap grads;
    grads["p"] = DiffArray::from(Shape(1), {1.0});
    Adam opt(cfg);
    double prev = 1.0;
    for (int step = 0; step < 5; ++step) {
      opt.step(params, grads);
      CHECK(params.at("p").at(0) < prev);
      prev = params.at("p").at(0);
    }
  }

  SUBCASE("three-step trace matches the hand recurrence") {
    Params params(1);
    params.set("p", DiffArray::from(Shape(1), {1.0}));
    GradMap grads;
    grads["p"] = DiffArray::from(Shape(1), {1.0});
    AdamState state;
    // Hand-computed recurrence, written out independently of adam_step.
    double theta = 1.0, m = 0.0, v = 0.0;
    for (int64_t t = 1; t <= 3; ++t) {
      adam_step(params, grads, cfg, t, state);
      m = 0.9 * m + 0.1 * 1.0;
      v = 0.999 * v + 0.001 * 1.0;
      const double mhat = m / (1.0 - std::pow(0.9, static_cast<double>(t)));
      const double vhat = v / (1.0 - std::pow(0.999, static_cast<double>(t)));
      theta -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
      CHECK(params.at("p").at(0) == doctest::Approx(theta).epsilon(1e-12));
    }
  }

  SUBCASE("missing gradient key is a contract error") {
    Params params(1);
    params.set("p", DiffArray::from(Shape(1), {1.0}));
    GradMap grads;
    AdamState state;
    CHECK_THROWS_AS(adam_step(params, grads, cfg, 1, state), ContractError);
  }
}
