#include <cmath>
#include <functional>
#include <string>

#include "doctest.h"
#include "secousti/autodiff.hpp"
#include "secousti/grad_check.hpp"
#include "secousti/rng.hpp"
#include "support.hpp"

using namespace secousti;
using secousti::testing::random_matrix;

namespace {

using Store = ParameterStore<double>;
using OpFn = std::function<Var<double>(Tape<double>&, Store&)>;

// Projects the op output onto a fixed random direction so the whole Jacobian is exercised.
GradCheckReport check_op(Store& store, std::uint64_t seed, const OpFn& op) {
  auto loss = [&](Tape<double>& t) {
    Var<double> y = op(t, store);
    Rng r(seed * 7919 + 3);
    Tensor<double> dir(y.shape());
    for (auto& v : dir.storage()) v = r.normal();
    return ad::sum(ad::mul(y, t.constant(dir)));
  };
  GradCheckOptions opts;
  opts.eps = 1e-6;
  opts.abs_floor = 1e-8;
  return grad_check(store, store.names(), loss, opts);
}

void property(const char* name, const std::function<void(Store&, Rng&)>& setup, const OpFn& op, int seeds = 100) {
  double worst = 0;
  int failures = 0;
  for (int s = 0; s < seeds; ++s) {
    Store store;
    Rng rng(mix_seed(0xad, static_cast<std::uint64_t>(s)));
    setup(store, rng);
    const GradCheckReport rep = check_op(store, static_cast<std::uint64_t>(s), op);
    worst = std::max(worst, rep.max_rel_error);
    if (!rep.ok()) ++failures;
  }
  INFO(std::string(name) << " worst relative error " << worst);
  CHECK(failures == 0);
  CHECK(worst < 1e-4);
}

Var<double> P(Tape<double>& t, Store& s, const char* n) { return t.param(s, n); }

}  // namespace

TEST_CASE("forward_backward closed-form examples") {
  Store s;
  s.add("w", Tensor<double>::vector({1, 2}));
  auto r = forward_backward<double>(s, [&](Tape<double>& t) {
    return ad::sum(ad::mul(t.param(s, "w"), t.constant(Tensor<double>::vector({3, 4}))));
  });
  REQUIRE(r.grads.size() == 1);
  CHECK(r.grads[0].second[0] == 3.0);
  CHECK(r.grads[0].second[1] == 4.0);

  Store q;
  q.add("x", Tensor<double>::vector({0.5, -1.5}));
  auto m = forward_backward<double>(q, [&](Tape<double>& t) {
    return ad::mse(t.param(q, "x"), t.constant(Tensor<double>::vector({0.5, -1.5})));
  });
  CHECK(m.loss == 0.0);
  CHECK(m.grads[0].second[0] == 0.0);
  CHECK(m.grads[0].second[1] == 0.0);

  Store h;
  h.add("w", Tensor<double>::scalar(0.0));
  auto tg = forward_backward<double>(h, [&](Tape<double>& t) {
    return ad::scale(ad::tanh(t.param(h, "w")), 2.0);
  });
  CHECK(tg.grads[0].second.item() == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("backward rejects a non-scalar loss and shape errors name both operands") {
  Tape<double> t;
  Var<double> a = t.leaf(Tensor<double>::matrix(2, 3), "alpha");
  Var<double> b = t.leaf(Tensor<double>::matrix(3, 2), "beta");
  CHECK_THROWS(t.backward(a));
  try {
    ad::add(a, b);
    FAIL("expected a shape error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("alpha") != std::string::npos);
    CHECK(msg.find("beta") != std::string::npos);
  }
}

TEST_CASE("grad_check: quadratic is exact, hard round is flagged") {
  Store s;
  Rng rng(5);
  s.add("x", random_matrix<double>(3, 4, rng));
  auto quad = [&](Tape<double>& t) { return ad::sum(ad::square(t.param(s, "x"))); };
  GradCheckOptions o;
  o.eps = 1e-5;
  const auto rep = grad_check(s, {"x"}, quad, o);
  CHECK(rep.max_rel_error < 1e-7);

  Store r;
  r.add("x", Tensor<double>::vector({0.5 - 1e-7, 1.2, -0.3}));
  auto rounded = [&](Tape<double>& t) { return ad::sum(ad::round_hard(t.param(r, "x"))); };
  o.eps = 1e-6;
  const auto bad = grad_check(r, {"x"}, rounded, o);
  CHECK_FALSE(bad.ok());
  CHECK(bad["x"].discontinuity);

  Store n;
  n.add("x", Tensor<double>::vector({1e-7}));
  auto logloss = [&](Tape<double>& t) { return ad::sum(ad::log(t.param(n, "x"))); };
  o.eps = 1e-6;
  const auto nf = grad_check(n, {"x"}, logloss, o);
  CHECK(nf["x"].non_finite);
  CHECK(nf["x"].flagged);
}

TEST_CASE("elementwise ops match finite differences over 100 seeds") {
  auto two = [](Store& s, Rng& r) {
    s.add("a", random_matrix<double>(3, 4, r));
    s.add("b", random_matrix<double>(3, 4, r));
  };
  property("add", two, [](Tape<double>& t, Store& s) { return ad::add(P(t, s, "a"), P(t, s, "b")); });
  property("sub", two, [](Tape<double>& t, Store& s) { return ad::sub(P(t, s, "a"), P(t, s, "b")); });
  property("mul", two, [](Tape<double>& t, Store& s) { return ad::mul(P(t, s, "a"), P(t, s, "b")); });
  property("mse", two, [](Tape<double>& t, Store& s) { return ad::mse(P(t, s, "a"), P(t, s, "b")); });
  auto one = [](Store& s, Rng& r) { s.add("a", random_matrix<double>(3, 4, r)); };
  property("scale", one, [](Tape<double>& t, Store& s) { return ad::scale(P(t, s, "a"), -1.7); });
  property("add_scalar", one, [](Tape<double>& t, Store& s) { return ad::add_scalar(P(t, s, "a"), 0.3); });
  property("elu", one, [](Tape<double>& t, Store& s) { return ad::elu(P(t, s, "a")); });
  property("relu", one, [](Tape<double>& t, Store& s) { return ad::relu(P(t, s, "a")); });
  property("tanh", one, [](Tape<double>& t, Store& s) { return ad::tanh(P(t, s, "a")); });
  property("sigmoid", one, [](Tape<double>& t, Store& s) { return ad::sigmoid(P(t, s, "a")); });
  property("exp", one, [](Tape<double>& t, Store& s) { return ad::exp(P(t, s, "a")); });
  property("square", one, [](Tape<double>& t, Store& s) { return ad::square(P(t, s, "a")); });
  property("clamp", one, [](Tape<double>& t, Store& s) { return ad::clamp(P(t, s, "a"), -0.5, 0.7); });
  property("sum", one, [](Tape<double>& t, Store& s) { return ad::sum(P(t, s, "a")); });
  property("mean", one, [](Tape<double>& t, Store& s) { return ad::mean(P(t, s, "a")); });
  property("mean_rows", one, [](Tape<double>& t, Store& s) { return ad::mean_rows(P(t, s, "a")); });
  property("log", [](Store& s, Rng& r) {
    Tensor<double> a = random_matrix<double>(3, 4, r);
    for (auto& v : a.storage()) v = 0.2 + std::abs(v);
    s.add("a", a);
  }, [](Tape<double>& t, Store& s) { return ad::log(P(t, s, "a")); });
  property("hinge", [](Store& s, Rng& r) { s.add("a", Tensor<double>::scalar(r.uniform(-2, 2))); },
           [](Tape<double>& t, Store& s) { return ad::hinge(P(t, s, "a"), 0.25); });
  property("scale_by", [](Store& s, Rng& r) {
    s.add("a", random_matrix<double>(3, 4, r));
    s.add("c", Tensor<double>::scalar(r.normal()));
  }, [](Tape<double>& t, Store& s) { return ad::scale_by(P(t, s, "a"), P(t, s, "c")); });
}

TEST_CASE("structural ops match finite differences over 100 seeds") {
  auto row = [](Store& s, Rng& r) {
    s.add("x", random_matrix<double>(4, 5, r));
    s.add("r", Tensor<double>(Shape{5}, random_matrix<double>(1, 5, r).storage()));
  };
  property("add_row", row, [](Tape<double>& t, Store& s) { return ad::add_row(P(t, s, "x"), P(t, s, "r")); });
  property("mul_row", row, [](Tape<double>& t, Store& s) { return ad::mul_row(P(t, s, "x"), P(t, s, "r")); });
  property("affine", [](Store& s, Rng& r) {
    s.add("x", random_matrix<double>(4, 3, r));
    s.add("w", random_matrix<double>(3, 5, r));
    s.add("b", Tensor<double>(Shape{5}, random_matrix<double>(1, 5, r).storage()));
  }, [](Tape<double>& t, Store& s) { return ad::affine(P(t, s, "x"), P(t, s, "w"), P(t, s, "b")); });
  property("conv_causal", [](Store& s, Rng& r) {
    s.add("x", random_matrix<double>(8, 3, r));
    s.add("w", Tensor<double>(Shape{3, 3, 2}, random_matrix<double>(1, 18, r).storage()));
    s.add("b", Tensor<double>(Shape{2}, random_matrix<double>(1, 2, r).storage()));
  }, [](Tape<double>& t, Store& s) { return ad::conv_causal(P(t, s, "x"), P(t, s, "w"), P(t, s, "b"), 2, 2); });
  property("conv_transpose_causal", [](Store& s, Rng& r) {
    s.add("x", random_matrix<double>(4, 3, r));
    s.add("w", Tensor<double>(Shape{4, 3, 2}, random_matrix<double>(1, 24, r).storage()));
    s.add("b", Tensor<double>(Shape{2}, random_matrix<double>(1, 2, r).storage()));
  }, [](Tape<double>& t, Store& s) {
    return ad::conv_transpose_causal(P(t, s, "x"), P(t, s, "w"), P(t, s, "b"), 2);
  });
  property("layer_norm", [](Store& s, Rng& r) {
    s.add("x", random_matrix<double>(3, 6, r));
    s.add("g", Tensor<double>(Shape{6}, random_matrix<double>(1, 6, r, 1.0, 0.2).storage()));
    s.add("b", Tensor<double>(Shape{6}, random_matrix<double>(1, 6, r).storage()));
  }, [](Tape<double>& t, Store& s) { return ad::layer_norm(P(t, s, "x"), P(t, s, "g"), P(t, s, "b")); });
  auto seq = [](Store& s, Rng& r) { s.add("x", random_matrix<double>(5, 8, r)); };
  property("rope", seq, [](Tape<double>& t, Store& s) { return ad::rope(P(t, s, "x"), 2, 10000.0, 3); });
  property("repeat_rows", seq, [](Tape<double>& t, Store& s) { return ad::repeat_rows(P(t, s, "x"), 3); });
  property("slice_rows", seq, [](Tape<double>& t, Store& s) { return ad::slice_rows(P(t, s, "x"), 1, 4); });
  property("concat_rows", seq, [](Tape<double>& t, Store& s) {
    Var<double> x = P(t, s, "x");
    return ad::concat_rows<double>({x, ad::square(x)});
  });
  property("l2_normalize_rows", seq, [](Tape<double>& t, Store& s) { return ad::l2_normalize_rows(P(t, s, "x")); });
  property("embedding", [](Store& s, Rng& r) { s.add("e", random_matrix<double>(4, 3, r)); },
           [](Tape<double>& t, Store& s) { return ad::embedding(P(t, s, "e"), {2, 0, 2, 3, 1}); });
  property("matmul_nt", [](Store& s, Rng& r) {
    s.add("a", random_matrix<double>(4, 3, r));
    s.add("b", random_matrix<double>(5, 3, r));
  }, [](Tape<double>& t, Store& s) { return ad::matmul_nt(P(t, s, "a"), P(t, s, "b")); });
  property("symmetric_cross_entropy", [](Store& s, Rng& r) { s.add("c", random_matrix<double>(4, 4, r)); },
           [](Tape<double>& t, Store& s) { return ad::symmetric_cross_entropy(P(t, s, "c")); });
  property("windowed_attention", [](Store& s, Rng& r) {
    s.add("q", random_matrix<double>(6, 4, r));
    s.add("k", random_matrix<double>(6, 4, r));
    s.add("v", random_matrix<double>(6, 4, r));
  }, [](Tape<double>& t, Store& s) {
    return ad::windowed_attention(P(t, s, "q"), P(t, s, "k"), P(t, s, "v"), 2, 3);
  });
}

TEST_CASE("windowed attention is causal and ignores frames older than the window") {
  Rng rng(11);
  const std::size_t T = 12, C = 4, W = 4;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> q = random_matrix<double>(T, C, rng), k = random_matrix<double>(T, C, rng),
                   v = random_matrix<double>(T, C, rng);
    auto run = [&](const Tensor<double>& kk, const Tensor<double>& vv) {
      Tape<double> t;
      return ad::windowed_attention(t.constant(q), t.constant(kk), t.constant(vv), 2, W).value();
    };
    const Tensor<double> base = run(k, v);
    const std::size_t t0 = rng.below(T);
    Tensor<double> k2 = k, v2 = v;
    for (std::size_t t = t0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) k2.at(t, c) += 1.0, v2.at(t, c) -= 2.0;
    const Tensor<double> future = run(k2, v2);
    CHECK(secousti::testing::rows_identical(base, future, t0));
    // Modify everything older than the window of the last frame.
    Tensor<double> k3 = k, v3 = v;
    for (std::size_t t = 0; t + W < T; ++t)
      for (std::size_t c = 0; c < C; ++c) k3.at(t, c) = 9.0, v3.at(t, c) = -9.0;
    const Tensor<double> old = run(k3, v3);
    for (std::size_t c = 0; c < C; ++c) CHECK(old.at(T - 1, c) == base.at(T - 1, c));
  }
}

TEST_CASE("detach blocks the gradient") {
  Store s;
  s.add("x", Tensor<double>::vector({1.5, -2.0}));
  auto r = forward_backward<double>(s, [&](Tape<double>& t) {
    Var<double> x = t.param(s, "x");
    return ad::sum(ad::add(ad::square(ad::detach(x)), x));
  });
  CHECK(r.grads[0].second[0] == 1.0);
  CHECK(r.grads[0].second[1] == 1.0);
}

TEST_CASE("round_ste rounds forward and passes the gradient unchanged") {
  Store s;
  s.add("x", Tensor<double>::vector({0.4, 1.6, -2.5, 2.5}));
  auto r = forward_backward<double>(s, [&](Tape<double>& t) {
    Var<double> y = ad::round_ste(t.param(s, "x"));
    CHECK(y.value()[0] == 0.0);
    CHECK(y.value()[1] == 2.0);
    CHECK(y.value()[2] == -3.0);
    CHECK(y.value()[3] == 3.0);
    return ad::sum(ad::scale(y, 3.0));
  });
  for (double g : r.grads[0].second.storage()) CHECK(g == 3.0);
}

TEST_CASE("identical seeds and inputs give bit-identical losses and gradients") {
  auto run = [] {
    Store s;
    Rng rng(99);
    s.add("q", random_matrix<double>(6, 4, rng));
    s.add("w", random_matrix<double>(4, 4, rng));
    return forward_backward<double>(s, [&](Tape<double>& t) {
      Var<double> x = ad::affine(t.param(s, "q"), t.param(s, "w"), t.constant(Tensor<double>(Shape{4})));
      return ad::mean(ad::square(ad::windowed_attention(x, x, x, 2, 3)));
    });
  };
  const auto a = run(), b = run();
  CHECK(a.loss == b.loss);
  for (std::size_t i = 0; i < a.grads.size(); ++i) {
    CHECK(secousti::testing::bit_identical(a.grads[i].second, b.grads[i].second));
  }
}
