// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <sstream>

#include "mmnas/grad_check.hpp"
#include "mmnas/serialize.hpp"
#include "mmnas/tensor.hpp"
#include "test_support.hpp"

using namespace mmnas;

TEST_CASE("matmul basics") {
  Tensor<double> I2({2, 2}, {1, 0, 0, 1});
  Tensor<double> B({2, 2}, {5, 6, 7, 8});
  auto y = matmul(I2, B);
  CHECK(y.at({0, 0}) == doctest::Approx(5));
  CHECK(y.at({0, 1}) == doctest::Approx(6));
  CHECK(y.at({1, 0}) == doctest::Approx(7));
  CHECK(y.at({1, 1}) == doctest::Approx(8));

  Tensor<double> A({2, 2}, {1, 2, 3, 4});
  auto z = matmul(A, B);
  CHECK(z.at({0, 0}) == doctest::Approx(19));
  CHECK(z.at({0, 1}) == doctest::Approx(22));
  CHECK(z.at({1, 0}) == doctest::Approx(43));
  CHECK(z.at({1, 1}) == doctest::Approx(50));

  CHECK_THROWS_WITH_AS(matmul(Tensor<double>({2, 3}), Tensor<double>({4, 5})),
                       doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("matmul gradient matches finite differences") {
  RngStream rng(11);
  Tensor<double> a = Tensor<double>::randn({3, 4}, rng);
  Tensor<double> b = Tensor<double>::randn({4, 2}, rng);
  auto report = grad_check([&] { return sum(matmul(a, b)); },
                           {{"a", a}, {"b", b}}, 1e-4);
  INFO(report.summary());
  CHECK(report.passed);
}

TEST_CASE("conv2d identity and constant kernels") {
  RngStream rng(3);
  Tensor<double> x = Tensor<double>::randn({1, 1, 5, 5}, rng);
  Tensor<double> w1({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, w1);
  CHECK(testsup::max_abs_diff(y, x) == doctest::Approx(0.0));

  Tensor<double> c = Tensor<double>::full({1, 1, 6, 6}, 2.5);
  Tensor<double> ones = Tensor<double>::ones({1, 1, 3, 3});
  auto z = conv2d(c, ones);
  for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(z.data()[i] == doctest::Approx(9 * 2.5));
}

TEST_CASE("separable conv matches nested-loop depthwise-then-pointwise reference") {
  RngStream rng(17);
  Tensor<double> x = Tensor<double>::uniform({2, 3, 8, 8}, rng, -1.0, 1.0);
  Tensor<double> dw = Tensor<double>::uniform({3, 1, 3, 3}, rng, -1.0, 1.0);
  Tensor<double> pw = Tensor<double>::uniform({5, 3, 1, 1}, rng, -1.0, 1.0);

  Conv2dOpts depthwise{.stride = 1, .padding = 1, .dilation = 1, .groups = 3};
  auto mid = conv2d(x, dw, depthwise);
  auto out = conv2d(mid, pw);

  auto mid_ref = testsup::conv2d_reference(x, dw, depthwise);
  auto out_ref = testsup::conv2d_reference(mid_ref, pw, {});
  CHECK(testsup::max_abs_diff(out, out_ref) < 1e-9);
}

TEST_CASE("conv2d oracle equivalence over strides, dilations, groups") {
  RngStream rng(23);
  struct Case {
    Shape xs, ws;
    Conv2dOpts o;
  };
  const std::vector<Case> cases = {
      {{1, 2, 7, 7}, {4, 2, 3, 3}, {.stride = 2, .padding = 1}},
      {{2, 4, 9, 9}, {4, 1, 3, 3}, {.stride = 1, .padding = 2, .dilation = 2, .groups = 4}},
      {{1, 6, 8, 8}, {6, 3, 5, 5}, {.stride = 2, .padding = 2, .dilation = 1, .groups = 2}},
      {{1, 1, 6, 6}, {1, 1, 5, 5}, {.stride = 1, .padding = 4, .dilation = 2}},
  };
  for (const auto& c : cases) {
    Tensor<double> x = Tensor<double>::uniform(c.xs, rng, -1.0, 1.0);
    Tensor<double> w = Tensor<double>::uniform(c.ws, rng, -1.0, 1.0);
    CHECK(testsup::max_abs_diff(conv2d(x, w, c.o), testsup::conv2d_reference(x, w, c.o)) < 1e-9);
  }
}

TEST_CASE("conv2d error paths") {
  Tensor<double> x({1, 3, 4, 4});
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({2, 3, 3, 3}), {.groups = 2}), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({2, 3, 7, 7})), std::invalid_argument);
}

TEST_CASE("pool2d constants") {
  Tensor<double> c = Tensor<double>::full({1, 2, 6, 6}, 3.25);
  auto mx = pool2d(c, PoolKind::Max, 3, 1, 1);
  for (std::int64_t i = 0; i < mx.numel(); ++i) CHECK(mx.data()[i] == doctest::Approx(3.25));

  auto av = pool2d(c, PoolKind::Avg, 3, 1, 1);
  // interior windows see no padding
  for (int i = 1; i < 5; ++i)
    for (int j = 1; j < 5; ++j) CHECK(av.at({0, 0, i, j}) == doctest::Approx(3.25));
  // corner window averages over the full 3x3 area with padded zeros
  CHECK(av.at({0, 0, 0, 0}) == doctest::Approx(3.25 * 4.0 / 9.0));
}

TEST_CASE("pool2d matches window-scan oracle") {
  RngStream rng(31);
  Tensor<double> x = Tensor<double>::uniform({1, 1, 6, 6}, rng, -1.0, 1.0);
  for (auto kind : {PoolKind::Max, PoolKind::Avg}) {
    for (int stride : {1, 2}) {
      auto got = pool2d(x, kind, 3, stride, 1);
      auto ref = testsup::pool2d_reference(x, kind, 3, stride, 1);
      if (kind == PoolKind::Avg) {
        // oracle divides by full area as the implementation must
        CHECK(testsup::max_abs_diff(got, ref) < 1e-12);
      } else {
        CHECK(testsup::max_abs_diff(got, ref) < 1e-12);
      }
    }
  }
  CHECK_THROWS_AS(pool2d(x, PoolKind::Max, 9, 1, 0), std::invalid_argument);
}

TEST_CASE("max pool ties route gradient to first occurrence") {
  Tensor<double> x = Tensor<double>::full({1, 1, 3, 3}, 1.0, true);
  GradTape<double> tape;
  auto y = pool2d(x, PoolKind::Max, 3, 1, 0);
  tape.backward(sum(y));
  CHECK(x.grad()[0] == doctest::Approx(1.0));
  for (int i = 1; i < 9; ++i) CHECK(x.grad()[static_cast<std::size_t>(i)] == doctest::Approx(0.0));
}

TEST_CASE("softmax") {
  Tensor<double> z = Tensor<double>::full({1, 8}, 0.7);
  auto p = softmax(z, 1);
  for (int k = 0; k < 8; ++k) CHECK(p.at({0, k}) == doctest::Approx(1.0 / 8));

  RngStream rng(7);
  Tensor<double> a = Tensor<double>::randn({2, 5}, rng);
  Tensor<double> shifted(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) shifted.data()[i] = a.data()[i] + 11.5;
  CHECK(testsup::max_abs_diff(softmax(a, 1), softmax(shifted, 1)) < 1e-12);

  SUBCASE("outputs positive and sum to one") {
    Tensor<double> big = Tensor<double>::randn({4, 9}, rng, 30.0);
    auto q = softmax(big, 1);
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int k = 0; k < 9; ++k) {
        CHECK(q.at({r, k}) > 0.0);
        s += q.at({r, k});
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }

  SUBCASE("jacobian-vector product vs finite differences") {
    Tensor<double> x = Tensor<double>::randn({3, 6}, rng);
    Tensor<double> r = Tensor<double>::randn({3, 6}, rng);
    r.set_requires_grad(false);
    auto report = grad_check([&] { return sum(mul(softmax(x, 1), r)); }, {{"x", x}}, 1e-4);
    INFO(report.summary());
    CHECK(report.passed);
  }
}

TEST_CASE("elementwise kinds") {
  Tensor<double> v({3}, {-1.0, 0.0, 2.0});
  auto r = relu(v);
  CHECK(r.at({0}) == 0.0);
  CHECK(r.at({1}) == 0.0);
  CHECK(r.at({2}) == 2.0);

  Tensor<double> s({2}, {4.0, -9.0});
  auto q = signed_sqrt(s);
  CHECK(q.at({0}) == doctest::Approx(2.0));
  CHECK(q.at({1}) == doctest::Approx(-3.0));

  RngStream rng(5);
  Tensor<double> x = Tensor<double>::randn({6}, rng);
  auto n = l2_normalize(x);
  double nn = 0.0;
  for (int i = 0; i < 6; ++i) nn += n.at({i}) * n.at({i});
  CHECK(std::abs(std::sqrt(nn) - 1.0) < 1e-9);

  CHECK_THROWS_AS(add(Tensor<double>({2}), Tensor<double>({3})), std::invalid_argument);
  CHECK_THROWS_AS(mul(Tensor<double>({2}), Tensor<double>({3})), std::invalid_argument);
}

TEST_CASE("backward basics") {
  RngStream rng(13);
  SUBCASE("sum gives ones") {
    Tensor<double> x = Tensor<double>::randn({3, 4}, rng, 1.0, true);
    GradTape<double> tape;
    tape.backward(sum(x));
    for (auto g : x.grad()) CHECK(g == doctest::Approx(1.0));
  }
  SUBCASE("sum of squares gives 2x") {
    Tensor<double> x = Tensor<double>::randn({5}, rng, 1.0, true);
    GradTape<double> tape;
    tape.backward(sum(mul(x, x)));
    for (int i = 0; i < 5; ++i) CHECK(x.grad()[static_cast<std::size_t>(i)] == doctest::Approx(2 * x.at({i})));
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor<double> x = Tensor<double>::randn({2, 2}, rng, 1.0, true);
    GradTape<double> tape;
    auto y = relu(x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
  SUBCASE("second backward on the same tape rejected") {
    Tensor<double> x = Tensor<double>::randn({4}, rng, 1.0, true);
    GradTape<double> tape;
    auto loss = sum(x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);
  }
}

TEST_CASE("composite graph gradient: conv -> pool -> matmul -> softmax -> cross-entropy") {
  RngStream rng(41);
  Tensor<double> x = Tensor<double>::uniform({2, 2, 6, 6}, rng, -1.0, 1.0);
  Tensor<double> w = Tensor<double>::uniform({3, 2, 3, 3}, rng, -0.5, 0.5);
  Tensor<double> proj = Tensor<double>::uniform({3, 2}, rng, -0.5, 0.5);
  auto build = [&] {
    auto c = conv2d(x, w, {.stride = 1, .padding = 1});
    auto p = pool2d(c, PoolKind::Avg, 3, 2, 1);
    auto g = gap2d(p);
    auto logits = matmul(g, proj);
    return cross_entropy_with_logits(logits, {0, 1});
  };
  auto report = grad_check(build, {{"x", x}, {"w", w}, {"proj", proj}}, 1e-4);
  INFO(report.summary());
  CHECK(report.passed);
}

TEST_CASE("grad_check harness") {
  SUBCASE("identity has zero error") {
    Tensor<double> x = Tensor<double>::scalar(1.25);
    auto report = grad_check([&] { return scale(x, 1.0); }, {{"x", x}});
    CHECK(report.passed);
    CHECK(report.max_rel_err == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("matmul chain passes at rtol 1e-4") {
    RngStream rng(2);
    Tensor<double> a = Tensor<double>::randn({2, 3}, rng);
    Tensor<double> b = Tensor<double>::randn({3, 3}, rng);
    Tensor<double> c = Tensor<double>::randn({3, 2}, rng);
    auto report = grad_check([&] { return sum(matmul(matmul(a, b), c)); },
                             {{"a", a}, {"b", b}, {"c", c}}, 1e-4);
    CHECK(report.passed);
  }
  SUBCASE("deliberately corrupted gradient rule is reported") {
    // custom op: forward y = 2x, backward wrongly claims dy/dx = 3
    Tensor<double> x({4}, {0.3, -0.2, 0.9, 0.1});
    auto corrupted_double_op = [](const Tensor<double>& in) {
      Tensor<double> out(in.shape());
      for (std::int64_t i = 0; i < in.numel(); ++i) out.data()[i] = 2.0 * in.data()[i];
      auto* tape = GradTape<double>::active();
      if (tape) {
        typename GradTape<double>::Entry e;
        e.kind = OpKind::Scale;
        e.inputs = {tape->adopt(in)};
        e.output = tape->adopt(out);
        e.backprop = [id = in.ptr(), od = out.ptr()] {
          if (od->grad.empty()) return;
          double* gx = ensure_grad_buffer(*id);
          for (std::size_t i = 0; i < od->grad.size(); ++i) gx[i] += 3.0 * od->grad[i];
        };
        tape->push_entry(std::move(e));
      }
      return out;
    };
    auto report = grad_check([&] { return sum(corrupted_double_op(x)); }, {{"x", x}}, 1e-4);
    CHECK_FALSE(report.passed);
    CHECK(report.leaves[0].max_rel_err > 0.1);
  }
}

TEST_CASE("every primitive gradient matches finite differences over random seeds") {
  // 20 seeds spread across the primitive set
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngStream rng(seed);
    CAPTURE(seed);
    Tensor<double> a = Tensor<double>::uniform({2, 6}, rng, -1.0, 1.0);
    Tensor<double> b = Tensor<double>::uniform({2, 6}, rng, -1.0, 1.0);
    Tensor<double> img = Tensor<double>::uniform({1, 2, 5, 5}, rng, -1.0, 1.0);
    Tensor<double> ker = Tensor<double>::uniform({2, 1, 3, 3}, rng, -1.0, 1.0);
    Tensor<double> wlin = Tensor<double>::uniform({3, 6}, rng, -1.0, 1.0);
    Tensor<double> blin = Tensor<double>::uniform({3}, rng, -0.5, 0.5);
    Tensor<double> gamma = Tensor<double>::uniform({2}, rng, 0.5, 1.5);
    Tensor<double> beta = Tensor<double>::uniform({2}, rng, -0.5, 0.5);

    auto build = [&] {
      auto e1 = mul(add(a, b), sub(a, b));
      auto e2 = tanh_op(scale(e1, 0.5));
      auto e3 = l2_normalize(signed_sqrt(relu(e2)), 1e-12);
      auto lin = linear(e3, wlin, blin);
      auto sm = softmax(lin, 1);

      std::vector<double> rm(2, 0.0), rv(2, 1.0);
      auto bn = batch_norm2d(img, gamma, beta, rm, rv, true);
      auto cv = conv2d(bn, ker, {.stride = 1, .padding = 1, .dilation = 1, .groups = 2});
      auto pl = pool2d(cv, PoolKind::Max, 3, 2, 1);
      auto gp = gap2d(pl);
      auto outer = rowwise_outer(gp, gp);
      auto pooled = sum_pool1d(outer, 2);
      auto joined = concat<double>({sm, pooled}, 1);
      auto se = scale_element(joined, a, 1);
      return add(mean(se), mean(slice2d(cv, 1, 1)));
    };
    auto report = grad_check(build,
                             {{"a", a},
                              {"b", b},
                              {"img", img},
                              {"ker", ker},
                              {"wlin", wlin},
                              {"blin", blin},
                              {"gamma", gamma},
                              {"beta", beta}},
                             1e-4, 1e-5, 24, seed * 77);
    INFO("seed ", seed, "\n", report.summary());
    CHECK(report.passed);
  }
}

TEST_CASE("embedding_bag_mean gradient and mask handling") {
  RngStream rng(6);
  Tensor<double> table = Tensor<double>::uniform({7, 3}, rng, -1.0, 1.0);
  auto report = grad_check(
      [&] { return sum(embedding_bag_mean(table, {1, 2, 2, 5, 6, 0}, {1, 1, 0, 1, 1, 1}, 2, 3)); },
      {{"table", table}}, 1e-4);
  CHECK(report.passed);
  CHECK_THROWS_AS(embedding_bag_mean(table, {1, 2}, {0, 0}, 1, 2), std::invalid_argument);
}

TEST_CASE("deterministic replay is bitwise identical") {
  auto run = [] {
    RngStream rng(99);
    Tensor<float> x = Tensor<float>::randn({2, 3, 6, 6}, rng, 1.0, true);
    Tensor<float> w = Tensor<float>::randn({4, 3, 3, 3}, rng, 0.5, true);
    GradTape<float> tape;
    auto y = conv2d(x, w, {.stride = 1, .padding = 1});
    auto loss = mean(mul(y, y));
    tape.backward(loss);
    std::vector<float> out = y.values();
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.push_back(loss.item());
    return out;
  };
  auto r1 = run();
  auto r2 = run();
  REQUIRE(r1.size() == r2.size());
  CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(float)) == 0);
}

TEST_CASE("no NaN or Inf after documented ops on finite inputs") {
  RngStream rng(55);
  Tensor<double> x = Tensor<double>::uniform({2, 3, 6, 6}, rng, -1.0, 1.0);
  Tensor<double> w = Tensor<double>::uniform({3, 1, 3, 3}, rng, -1.0, 1.0);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  GradTape<double> tape;
  auto c = conv2d(x, w, {.padding = 1, .groups = 3});
  auto p = pool2d(c, PoolKind::Avg, 3, 1, 1);
  auto z = l2_normalize(signed_sqrt(gap2d(p)));
  auto loss = mean(mul(z, z));
  tape.backward(loss);
  auto all_finite = [](const std::vector<double>& v) {
    for (double e : v)
      if (!std::isfinite(e)) return false;
    return true;
  };
  CHECK(all_finite(z.values()));
  CHECK(all_finite(x.grad()));
  CHECK(all_finite(w.grad()));
}

TEST_CASE("tensor serialization round-trip (DFTN)") {
  RngStream rng(8);
  Tensor<float> t = Tensor<float>::randn({3, 4, 2}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "DFTN");
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);  // rank
  std::stringstream in(bytes);
  auto back = read_tensor<float>(in);
  CHECK(back.shape() == t.shape());
  CHECK(testsup::max_abs_diff(back, t) == 0.0);
}

TEST_CASE("gradtape invariant: entries form a DAG in topological order") {
  Tensor<double> x({3}, {0.1, 0.2, 0.3}, true);
  GradTape<double> tape;
  auto a = relu(x);
  auto b = mul(a, a);
  auto c = sum(add(b, a));
  tape.backward(c);
  // every entry's output id must be greater than its tracked input ids
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const auto& e = tape.entry(i);
    for (int in : e.inputs) {
      if (in >= 0) CHECK(in < e.output);
    }
  }
}
