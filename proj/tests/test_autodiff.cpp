#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "sarg/optim.hpp"
#include "sarg/prng.hpp"
#include "sarg/tensor.hpp"

using namespace sarg;

namespace {

void fill(Parameter& p, SplitMix64& rng, double lo = -2.0, double hi = 2.0) {
  for (auto& v : p.value) v = rng.uniform(hi - lo) + lo;
}

// positive entries, handy under logs
void fill_pos(Parameter& p, SplitMix64& rng) {
  for (auto& v : p.value) v = 0.1 + rng.uniform(2.0);
}

}  // namespace

TEST_SUITE("tape") {
  TEST_CASE("alloc, constants, scalars") {
    ad::Tape t;
    ad::Tensor z = t.zeros({2, 3});
    CHECK(z.size() == 6);
    CHECK(z.val() == std::vector<double>(6, 0.0));
    CHECK_FALSE(z.needs_grad());

    ad::Tensor c = t.constant({2}, {1.5, -2.5});
    CHECK(c.val()[1] == -2.5);
    CHECK(t.scalar_const(3.0).scalar() == 3.0);
    CHECK_THROWS_AS(t.constant({3}, {1.0}), ShapeMismatch);
    CHECK_THROWS_AS(c.scalar(), ShapeMismatch);
  }

  TEST_CASE("backward requires a scalar and tolerates constant graphs") {
    ad::Tape t;
    ad::Tensor v = t.constant({2}, {1.0, 2.0});
    CHECK_THROWS_AS(t.backward(v), ShapeMismatch);
    ad::Tensor s = ad::sum(v);
    CHECK_NOTHROW(t.backward(s));  // nothing trainable, quietly a no-op
  }

  TEST_CASE("a value used twice accumulates both paths") {
    ParamRegistry reg;
    Parameter& x = reg.create("x", {1});
    x.value = {3.0};
    ad::Tape t;
    ad::Tensor xt = leaf(t, x);
    ad::Tensor f = ad::add(ad::mul(xt, xt), xt);  // x^2 + x
    CHECK(f.scalar() == 12.0);
    t.backward(f);
    CHECK(x.grad[0] == 7.0);  // 2x + 1
  }

  TEST_CASE("two leaves of one parameter both flush into its grad") {
    ParamRegistry reg;
    Parameter& x = reg.create("x", {1});
    x.value = {2.0};
    ad::Tape t;
    ad::Tensor a = leaf(t, x);
    ad::Tensor b = leaf(t, x);
    ad::Tensor f = ad::mul(a, b);
    t.backward(f);
    CHECK(x.grad[0] == 4.0);  // d(x*x)/dx
  }
}

TEST_SUITE("op gradients") {
  TEST_CASE("elementwise and broadcast ops match finite differences") {
    SplitMix64 rng(1001);
    ParamRegistry reg;
    fill(reg.create("a", {3, 4}), rng);
    fill(reg.create("b", {3, 4}), rng);
    fill(reg.create("v", {4}), rng);
    fill(reg.create("s", {1}), rng, 0.5, 1.5);

    auto rep = grad_check(
        [&](ad::Tape& t) {
          ad::Tensor a = leaf(t, reg.get("a"));
          ad::Tensor b = leaf(t, reg.get("b"));
          ad::Tensor v = leaf(t, reg.get("v"));
          ad::Tensor s = leaf(t, reg.get("s"));
          ad::Tensor x = ad::add(ad::mul(a, b), ad::affine(a, 0.5, -1.0));
          x = ad::add_rowvec(x, v);
          x = ad::mul_scalar(x, s);
          return ad::sum(x);
        },
        reg);
    CHECK(rep.max_rel_err < 1e-6);
  }

  TEST_CASE("matrix products match finite differences") {
    SplitMix64 rng(1002);
    ParamRegistry reg;
    fill(reg.create("A", {3, 4}), rng);
    fill(reg.create("B", {4, 2}), rng);
    fill(reg.create("C", {5, 4}), rng);
    fill(reg.create("x", {4}), rng);
    fill(reg.create("y", {3}), rng);

    auto rep = grad_check(
        [&](ad::Tape& t) {
          ad::Tensor A = leaf(t, reg.get("A"));
          ad::Tensor B = leaf(t, reg.get("B"));
          ad::Tensor C = leaf(t, reg.get("C"));
          ad::Tensor x = leaf(t, reg.get("x"));
          ad::Tensor y = leaf(t, reg.get("y"));
          ad::Tensor mm = ad::matmul(A, B);          // 3x2
          ad::Tensor nt = ad::matmul_nt(A, C);       // 3x5
          ad::Tensor mv = ad::matvec(A, x);          // 3
          ad::Tensor vm = ad::vecmat(y, A);          // 4
          ad::Tensor ot = ad::outer(y, x);           // 3x4
          ad::Tensor parts = ad::add(ad::sum(mm), ad::sum(nt));
          parts = ad::add(parts, ad::sum(mv));
          parts = ad::add(parts, ad::sum(vm));
          parts = ad::add(parts, ad::dot(x, x));
          parts = ad::add(parts, ad::sum(ad::mul(ot, ot)));
          return parts;
        },
        reg);
    CHECK(rep.max_rel_err < 1e-6);
  }

  TEST_CASE("matmul value against a hand-multiplied pair") {
    ad::Tape t;
    ad::Tensor a = t.constant({2, 3}, {1, 2, 3, 4, 5, 6});
    ad::Tensor b = t.constant({3, 2}, {7, 8, 9, 10, 11, 12});
    ad::Tensor c = ad::matmul(a, b);
    CHECK(c.val() == std::vector<double>{58, 64, 139, 154});
    CHECK_THROWS_AS(ad::matmul(a, a), ShapeMismatch);
  }

  TEST_CASE("gather, slices, concat and scatter match finite differences") {
    SplitMix64 rng(1003);
    ParamRegistry reg;
    fill(reg.create("table", {6, 3}), rng);
    fill(reg.create("M", {4, 5}), rng);
    fill(reg.create("w", {4}), rng);

    auto rep = grad_check(
        [&](ad::Tape& t) {
          ad::Tensor table = leaf(t, reg.get("table"));
          ad::Tensor M = leaf(t, reg.get("M"));
          ad::Tensor w = leaf(t, reg.get("w"));
          ad::Tensor g = ad::gather_rows(table, {0, 2, 2, 5}, "test table");  // repeats
          ad::Tensor r = ad::row(M, 1);
          ad::Tensor sr = ad::slice_rows(M, 1, 3);
          ad::Tensor sc = ad::slice_cols(M, 2, 5);
          ad::Tensor sv = ad::slice_vec(w, 1, 3);
          ad::Tensor cc = ad::concat_cols({sr, ad::slice_rows(M, 0, 2)});
          ad::Tensor sg = ad::scatter_sum(w, {0, 1, 1, 3}, 5);  // repeated target id
          ad::Tensor acc = ad::add(ad::sum(ad::mul(g, g)), ad::sum(ad::mul(sr, sr)));
          acc = ad::add(acc, ad::sum(ad::mul(sc, sc)));
          acc = ad::add(acc, ad::dot(r, r));
          acc = ad::add(acc, ad::dot(sv, sv));
          acc = ad::add(acc, ad::sum(ad::mul(cc, cc)));
          acc = ad::add(acc, ad::dot(sg, sg));
          return acc;
        },
        reg);
    CHECK(rep.max_rel_err < 1e-6);
  }

  TEST_CASE("nonlinearities match finite differences") {
    SplitMix64 rng(1004);
    ParamRegistry reg;
    fill(reg.create("x", {2, 6}), rng);

    auto rep = grad_check(
        [&](ad::Tape& t) {
          ad::Tensor x = leaf(t, reg.get("x"));
          ad::Tensor acc = ad::sum(ad::mul(ad::tanh(x), ad::sigmoid(x)));
          acc = ad::add(acc, ad::sum(ad::gelu(x)));
          return acc;
        },
        reg);
    CHECK(rep.max_rel_err < 1e-6);
  }

  TEST_CASE("softmax, masking and nll match finite differences") {
    SplitMix64 rng(1005);
    ParamRegistry reg;
    fill(reg.create("logits", {3, 5}), rng);
    fill(reg.create("e", {6}), rng);

    auto rep = grad_check(
        [&](ad::Tape& t) {
          ad::Tensor logits = leaf(t, reg.get("logits"));
          ad::Tensor probs = ad::softmax(logits);
          ad::Tensor l1 = ad::nll_rows(probs, {1, 4, 0}, {1, 0, 1});
          ad::Tensor e = leaf(t, reg.get("e"));
          ad::Tensor masked = ad::softmax(ad::masked_fill(e, {1, 1, 0, 1, 0, 1}, -1e30));
          ad::Tensor l2 = ad::nll(masked, 3);
          return ad::add(l1, l2);
        },
        reg);
    CHECK(rep.max_rel_err < 1e-6);
  }

  TEST_CASE("layer norm matches finite differences, gain and bias included") {
    SplitMix64 rng(1006);
    ParamRegistry reg;
    fill(reg.create("x", {3, 4}), rng);
    fill(reg.create("g", {4}), rng, 0.5, 1.5);
    fill(reg.create("b", {4}), rng);

    auto rep = grad_check(
        [&](ad::Tape& t) {
          ad::Tensor y = ad::layer_norm(leaf(t, reg.get("x")), leaf(t, reg.get("g")),
                                        leaf(t, reg.get("b")));
          return ad::sum(ad::mul(y, y));
        },
        reg);
    CHECK(rep.max_rel_err < 1e-6);
  }

  TEST_CASE("min_elem gradient and tie-break") {
    ad::Tape t;
    ParamRegistry reg;
    Parameter& a = reg.create("a", {3});
    Parameter& b = reg.create("b", {3});
    a.value = {1.0, 5.0, 2.0};
    b.value = {4.0, 2.0, 2.0};  // last pair ties
    ad::Tensor at = leaf(t, a);
    ad::Tensor bt = leaf(t, b);
    ad::Tensor m = ad::min_elem(at, bt);
    CHECK(m.val() == std::vector<double>{1.0, 2.0, 2.0});
    t.backward(ad::sum(m));
    CHECK(a.grad == std::vector<double>{1.0, 0.0, 1.0});  // tie goes to the first operand
    CHECK(b.grad == std::vector<double>{0.0, 1.0, 0.0});
  }
}

TEST_SUITE("op values") {
  TEST_CASE("softmax rows are normalized and shift invariant") {
    SplitMix64 rng(2001);
    ad::Tape t;
    std::vector<double> logits(24);
    for (auto& v : logits) v = rng.uniform(8.0) - 4.0;
    ad::Tensor p = ad::softmax(t.constant({4, 6}, logits));
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int i = 0; i < 6; ++i) s += p.val()[static_cast<size_t>(r * 6 + i)];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    ad::Tensor uniform = ad::softmax(t.constant({3}, {7.0, 7.0, 7.0}));
    for (double v : uniform.val()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
  }

  TEST_CASE("sigmoid saturates exactly at extreme inputs") {
    ad::Tape t;
    ad::Tensor y = ad::sigmoid(t.constant({3}, {0.0, 1e9, -1e9}));
    CHECK(y.val()[0] == 0.5);
    CHECK(y.val()[1] == 1.0);
    CHECK(y.val()[2] == 0.0);
  }

  TEST_CASE("masked softmax gives exactly zero mass to masked lanes") {
    ad::Tape t;
    ad::Tensor e = t.constant({4}, {2.0, -1.0, 0.5, 3.0});
    ad::Tensor p = ad::softmax(ad::masked_fill(e, {1, 0, 1, 0}, -1e30));
    CHECK(p.val()[1] == 0.0);
    CHECK(p.val()[3] == 0.0);
    CHECK(p.val()[0] + p.val()[2] == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("layer norm zero-variance row collapses to the bias") {
    ad::Tape t;
    ad::Tensor x = t.constant({1, 4}, {5.0, 5.0, 5.0, 5.0});
    ad::Tensor g = t.constant({4}, {2.0, 2.0, 2.0, 2.0});
    ad::Tensor b = t.constant({4}, {0.25, 0.25, 0.25, 0.25});
    ad::Tensor y = ad::layer_norm(x, g, b);
    for (double v : y.val()) CHECK(v == 0.25);
  }

  TEST_CASE("layer norm standardizes a generic row") {
    ad::Tape t;
    ad::Tensor x = t.constant({1, 4}, {1.0, 2.0, 3.0, 4.0});
    ad::Tensor g = t.constant({4}, {1.0, 1.0, 1.0, 1.0});
    ad::Tensor b = t.constant({4}, {0.0, 0.0, 0.0, 0.0});
    ad::Tensor y = ad::layer_norm(x, g, b);
    double mean = 0.0, var = 0.0;
    for (double v : y.val()) mean += v;
    mean /= 4;
    for (double v : y.val()) var += (v - mean) * (v - mean);
    var /= 4;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps inside the sqrt shrinks it slightly
  }

  TEST_CASE("scatter accumulates repeated ids") {
    ad::Tape t;
    ad::Tensor w = t.constant({4}, {0.1, 0.2, 0.3, 0.4});
    ad::Tensor out = ad::scatter_sum(w, {2, 0, 2, 1}, 5);
    CHECK(out.val() == std::vector<double>{0.2, 0.4, 0.4, 0.0, 0.0});
    CHECK_THROWS_AS(ad::scatter_sum(w, {0, 1, 2, 9}, 5), IndexOutOfBounds);
  }

  TEST_CASE("index guards throw") {
    ad::Tape t;
    ad::Tensor m = t.constant({2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_AS(ad::gather_rows(m, {0, 2}, "table"), IndexOutOfBounds);
    CHECK_THROWS_AS(ad::row(m, 5), IndexOutOfBounds);
    CHECK_THROWS_AS(ad::nll(ad::row(m, 0), 7), IndexOutOfBounds);
    CHECK_THROWS_AS(ad::slice_rows(m, 1, 1), IndexOutOfBounds);
  }
}

TEST_SUITE("optimizer") {
  TEST_CASE("first step moves by about lr regardless of gradient scale") {
    ParamRegistry reg;
    Parameter& p = reg.create("p", {2});
    p.value = {0.0, 0.0};
    p.grad = {1.0, 100.0};
    Adam opt(AdamConfig{0.1});
    opt.step(reg);
    CHECK(p.value[0] == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(p.value[1] == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(opt.step_count() == 1);
    CHECK(p.grad == std::vector<double>{0.0, 0.0});
  }

  TEST_CASE("two steps match a scalar reference computation") {
    ParamRegistry reg;
    Parameter& p = reg.create("p", {1});
    p.value = {0.5};
    AdamConfig cfg;
    cfg.lr = 0.01;
    Adam opt(cfg);

    double m = 0.0, v = 0.0, x = 0.5;
    const std::vector<double> grads = {0.3, -0.7};
    for (int t = 1; t <= 2; ++t) {
      const double g = grads[static_cast<size_t>(t - 1)];
      m = cfg.beta1 * m + (1 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
      const double mhat = m / (1 - std::pow(cfg.beta1, t));
      const double vhat = v / (1 - std::pow(cfg.beta2, t));
      x -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);

      p.grad[0] = g;
      opt.step(reg);
      CHECK(p.value[0] == doctest::Approx(x).epsilon(1e-15));
    }
  }

  TEST_CASE("zero learning rate leaves values untouched") {
    ParamRegistry reg;
    Parameter& p = reg.create("p", {3});
    p.value = {1.0, 2.0, 3.0};
    p.grad = {9.0, 9.0, 9.0};
    Adam opt(AdamConfig{0.0});
    opt.step(reg);
    CHECK(p.value == std::vector<double>{1.0, 2.0, 3.0});
    CHECK(opt.step_count() == 1);
  }

  TEST_CASE("non-trainable parameters are skipped") {
    ParamRegistry reg;
    Parameter& p = reg.create("frozen", {1}, false);
    p.value = {1.0};
    Adam opt(AdamConfig{1.0});
    opt.step(reg);
    CHECK(p.value[0] == 1.0);
  }
}

TEST_SUITE("registry") {
  TEST_CASE("create, lookup, duplicates") {
    ParamRegistry reg;
    reg.create("w", {2, 2});
    CHECK(reg.has("w"));
    CHECK_FALSE(reg.has("nope"));
    CHECK(reg.get("w").size() == 4);
    CHECK_THROWS_AS(reg.create("w", {1}), InvalidConfig);
    CHECK_THROWS_AS(reg.get("nope"), InvalidConfig);
    reg.create("b", {3});
    CHECK(reg.value_count() == 7);
  }

  TEST_CASE("zero_grads clears accumulation") {
    ParamRegistry reg;
    Parameter& p = reg.create("p", {2});
    p.grad = {1.0, 2.0};
    reg.zero_grads();
    CHECK(p.grad == std::vector<double>{0.0, 0.0});
  }

  TEST_CASE("uniform init stays inside the fan bound") {
    ParamRegistry reg;
    Parameter& p = reg.create("p", {50});
    SplitMix64 rng(3);
    init_uniform(p, rng, 10, 15);
    const double bound = std::sqrt(6.0 / 25.0);
    double spread = 0.0;
    for (double v : p.value) {
      CHECK(std::fabs(v) <= bound);
      spread = std::max(spread, std::fabs(v));
    }
    CHECK(spread > bound * 0.5);  // not degenerate
  }
}

TEST_SUITE("grad check harness") {
  TEST_CASE("quadratic passes cleanly") {
    ParamRegistry reg;
    Parameter& x = reg.create("x", {4});
    x.value = {0.5, -1.0, 2.0, 0.1};
    auto rep = grad_check(
        [&](ad::Tape& t) {
          ad::Tensor xt = leaf(t, reg.get("x"));
          return ad::dot(xt, xt);
        },
        reg);
    CHECK(rep.max_rel_err < 1e-7);
  }

  TEST_CASE("non-finite forward is reported, not silently compared") {
    ParamRegistry reg;
    Parameter& x = reg.create("x", {1});
    x.value = {-1.0};
    CHECK_THROWS_AS(grad_check(
                        [&](ad::Tape& t) {
                          ad::Tensor xt = leaf(t, reg.get("x"));
                          return ad::nll(xt, 0);  // log of a negative number
                        },
                        reg),
                    NonFiniteValue);
  }

  TEST_CASE("bad eps is rejected") {
    ParamRegistry reg;
    CHECK_THROWS_AS(grad_check([](ad::Tape& t) { return t.scalar_const(0.0); }, reg, 0.0),
                    InvalidConfig);
  }
}
