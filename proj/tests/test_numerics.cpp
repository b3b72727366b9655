#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "facet/gradcheck.hpp"
#include "facet/ops.hpp"
#include "facet/rng.hpp"
#include "facet/tensor.hpp"

using namespace facet;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scl = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = scl * rng.next_gaussian();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Probe loss: fixed random weighting of the output elements, so every
// element's gradient is exercised.
Tensor weighted_probe(const Tensor& out, Rng& rng) {
  std::vector<double> w(out.numel());
  for (double& x : w) x = rng.uniform(0.5, 1.5);
  return sum(mul(out, Tensor(out.shape(), std::move(w))));
}

}  // namespace

TEST_CASE("tensor construction enforces invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({1}, {std::numeric_limits<double>::infinity()}), std::invalid_argument);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(0) == 2);
  CHECK_FALSE(t.requires_grad());
}

TEST_CASE("attention: single key passes value through") {
  Tensor q({1, 2}, {1, 0});
  Tensor out = scaled_dot_attention(q, q, q, 1);
  CHECK(out.values()[0] == Catch::Approx(1.0).margin(1e-12));
  CHECK(out.values()[1] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("attention: equal scores average the values") {
  Tensor q({2, 2}, {1, 1, 1, 1});
  Tensor k({2, 2}, {1, 1, 1, 1});
  Tensor v({2, 2}, {2, 0, 0, 2});
  Tensor out = scaled_dot_attention(q, k, v, 1);
  for (double x : out.values()) CHECK(x == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("attention: softmax weights match scalar arithmetic") {
  Tensor q({1, 2}, {1, 0});
  Tensor k({2, 2}, {1, 0, 0, 1});
  Tensor v({2, 2}, {1, 0, 0, 1});
  Tensor out = scaled_dot_attention(q, k, v, 1);
  // Oracle: scores are (1/sqrt(2), 0), so w1 = e^s / (e^s + 1).
  const double s = 1.0 / std::sqrt(2.0);
  const double w1 = std::exp(s) / (std::exp(s) + 1.0);
  CHECK(out.values()[0] == Catch::Approx(w1).epsilon(1e-12));
  CHECK(out.values()[1] == Catch::Approx(1.0 - w1).epsilon(1e-12));
  CHECK(out.values()[0] == Catch::Approx(0.670).margin(5e-4));
  CHECK(out.values()[1] == Catch::Approx(0.330).margin(5e-4));
}

TEST_CASE("attention: rows of the weight matrix sum to 1 and mix convexly") {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t L = 1 + rng.next_below(5);
    const std::size_t heads = 1 + rng.next_below(2);
    const std::size_t d = heads * (1 + rng.next_below(4));
    Tensor q = random_tensor({L, d}, rng, false);
    Tensor k = random_tensor({L, d}, rng, false);
    Tensor v = random_tensor({L, d}, rng, false);
    std::vector<double> w;
    scaled_dot_attention(q, k, v, heads, &w);
    REQUIRE(w.size() == L * L);
    for (std::size_t i = 0; i < L; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        CHECK(w[i * L + j] >= 0.0);
        s += w[i * L + j];
      }
      CHECK(s == Catch::Approx(1.0).margin(1e-9));
    }
  }
}

TEST_CASE("attention: precondition failures") {
  Tensor q({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(scaled_dot_attention(q, q, q, 2), std::invalid_argument);  // 2 does not divide 3
  Tensor k({3, 3}, std::vector<double>(9, 0.0));
  CHECK_THROWS_AS(scaled_dot_attention(q, k, q, 1), std::invalid_argument);  // shape mismatch
}

TEST_CASE("layer_norm matches hand evaluation") {
  Tensor g1({4}, {1, 1, 1, 1});
  Tensor b0({4}, {0, 0, 0, 0});
  Tensor x({4}, {1, 1, 1, 1});
  Tensor out = layer_norm(x, g1, b0);
  for (double v : out.values()) CHECK(v == Catch::Approx(0.0).margin(1e-12));

  Tensor x2({2}, {0, 2});
  Tensor out2 = layer_norm(x2, Tensor({2}, {1, 1}), Tensor({2}, {0, 0}));
  CHECK(out2.values()[0] == Catch::Approx(-1.0).margin(1e-5));
  CHECK(out2.values()[1] == Catch::Approx(1.0).margin(1e-5));

  // Oracle: mu = 2, population var = 1, sigma = sqrt(1 + 1e-5).
  Tensor x3({2}, {1, 3});
  Tensor out3 = layer_norm(x3, Tensor({2}, {2, 2}), Tensor({2}, {1, 1}));
  const double sigma = std::sqrt(1.0 + 1e-5);
  CHECK(out3.values()[0] == Catch::Approx(-1.0 / sigma * 2.0 + 1.0).epsilon(1e-12));
  CHECK(out3.values()[1] == Catch::Approx(1.0 / sigma * 2.0 + 1.0).epsilon(1e-12));
  CHECK(out3.values()[0] == Catch::Approx(-1.0).margin(2e-5));
  CHECK(out3.values()[1] == Catch::Approx(3.0).margin(2e-5));

  CHECK_THROWS_AS(layer_norm(x3, g1, b0), std::invalid_argument);
}

TEST_CASE("l2_normalize") {
  Tensor v({2}, {3, 4});
  Tensor out = l2_normalize(v);
  CHECK(out.values()[0] == Catch::Approx(0.6));
  CHECK(out.values()[1] == Catch::Approx(0.8));

  Tensor e2({2}, {0, 1});
  Tensor out2 = l2_normalize(e2);
  CHECK(out2.values()[0] == 0.0);
  CHECK(out2.values()[1] == 1.0);

  CHECK_THROWS_AS(l2_normalize(Tensor({2}, {0, 0})), std::domain_error);

  Rng rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor r = random_tensor({8}, rng, false);
    double n = 0.0;
    for (double x : l2_normalize(r).values()) n += x * x;
    CHECK(std::sqrt(n) == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("gradcheck: quadratic loss is exact") {
  Tensor theta({2}, {1, 2}, true);
  auto loss = [&] { return dot(theta, theta); };
  GradReport rep = finite_diff_gradcheck(loss, {{"theta", theta}}, 1e-5, 1e-4);
  REQUIRE(rep.entries.size() == 1);
  CHECK(rep.pass);
  CHECK(rep.entries[0].max_rel_err < 1e-8);
  // analytic gradient is [2, 4]
  CHECK(rep.entries[0].analytic_norm == Catch::Approx(std::sqrt(4.0 + 16.0)));
}

TEST_CASE("gradcheck: epsilon outside [1e-7, 1e-3] is rejected") {
  Tensor theta({1}, {1.0}, true);
  auto loss = [&] { return dot(theta, theta); };
  CHECK_THROWS_AS(finite_diff_gradcheck(loss, {{"theta", theta}}, 1e-2), std::invalid_argument);
  CHECK_THROWS_AS(finite_diff_gradcheck(loss, {{"theta", theta}}, 1e-8), std::invalid_argument);
}

TEST_CASE("gradcheck: hinge kink is flagged and excluded") {
  // f(t) = max(0, t) evaluated exactly at the kink.
  Tensor theta({1}, {0.0}, true);
  auto loss = [&] { return sum(relu(theta)); };
  GradReport rep = finite_diff_gradcheck(loss, {{"theta", theta}}, 1e-5, 1e-4);
  REQUIRE(rep.entries.size() == 1);
  CHECK(rep.entries[0].kink_count == 1);
  CHECK(rep.pass);  // excluded element cannot fail the check
}

TEST_CASE("gradcheck: frozen parameters are absent from the report") {
  Tensor a({2}, {1, 2}, true);
  Tensor b({2}, {3, 4}, false);
  auto loss = [&] { return add(dot(a, a), dot(b, b)); };
  GradReport rep = finite_diff_gradcheck(loss, {{"a", a}, {"b", b}});
  REQUIRE(rep.entries.size() == 1);
  CHECK(rep.entries[0].name == "a");
}

TEST_CASE("every exported op passes finite differences at 1e-4") {
  Rng rng(42);
  auto check_op = [&](const char* name, auto&& build, std::vector<std::pair<std::string, Tensor>> params) {
    auto loss = [&] { return build(); };
    GradReport rep = finite_diff_gradcheck(loss, params, 1e-5, 1e-4);
    INFO(name);
    CHECK(rep.pass);
  };

  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  Rng pr(100);
  check_op("add", [&] { return weighted_probe(add(a, b), pr); }, {{"a", a}, {"b", b}});
  check_op("sub", [&] { return weighted_probe(sub(a, b), pr); }, {{"a", a}, {"b", b}});
  check_op("mul", [&] { return weighted_probe(mul(a, b), pr); }, {{"a", a}, {"b", b}});
  check_op("scale", [&] { return weighted_probe(scale(a, 1.7), pr); }, {{"a", a}});

  Tensor m1 = random_tensor({3, 4}, rng);
  Tensor m2 = random_tensor({4, 2}, rng);
  check_op("matmul", [&] { return weighted_probe(matmul(m1, m2), pr); }, {{"m1", m1}, {"m2", m2}});

  Tensor vx = random_tensor({4}, rng);
  check_op("vecmat", [&] { return weighted_probe(vecmat(vx, m2), pr); }, {{"v", vx}, {"m", m2}});
  check_op("transpose", [&] { return weighted_probe(transpose(m1), pr); }, {{"m1", m1}});
  check_op("row", [&] { return weighted_probe(row(m1, 1), pr); }, {{"m1", m1}});
  check_op("col_slice", [&] { return weighted_probe(col_slice(m1, 1, 3), pr); }, {{"m1", m1}});

  Tensor r1 = random_tensor({4}, rng);
  Tensor r2 = random_tensor({4}, rng);
  check_op("stack_rows", [&] { return weighted_probe(stack_rows({r1, r2}), pr); }, {{"r1", r1}, {"r2", r2}});
  check_op("concat_rows", [&] { return weighted_probe(concat_rows(m1, b), pr); }, {{"m1", m1}, {"b", b}});
  check_op("concat_cols", [&] { return weighted_probe(concat_cols({m1, b}), pr); }, {{"m1", m1}, {"b", b}});

  check_op("softmax", [&] { return weighted_probe(softmax(m1), pr); }, {{"m1", m1}});
  check_op("gelu", [&] { return weighted_probe(gelu(m1), pr); }, {{"m1", m1}});

  Tensor gain = random_tensor({4}, rng);
  Tensor bias = random_tensor({4}, rng);
  check_op("layer_norm", [&] { return weighted_probe(layer_norm(m1, gain, bias), pr); },
           {{"x", m1}, {"gain", gain}, {"bias", bias}});

  Tensor pos({2, 2}, {0.5, 1.5, 2.5, 0.25}, true);
  check_op("log", [&] { return weighted_probe(log_t(pos), pr); }, {{"pos", pos}});
  check_op("sum", [&] { return sum(a); }, {{"a", a}});
  check_op("mean", [&] { return mean(a); }, {{"a", a}});
  check_op("dot", [&] { return dot(r1, r2); }, {{"r1", r1}, {"r2", r2}});
  check_op("pick", [&] { return pick(r1, 2); }, {{"r1", r1}});

  Tensor u = random_tensor({5}, rng);
  check_op("l2_normalize", [&] { return weighted_probe(l2_normalize(u), pr); }, {{"u", u}});
  check_op("euclidean_distance", [&] { return euclidean_distance(r1, r2); }, {{"r1", r1}, {"r2", r2}});

  Tensor q = random_tensor({3, 4}, rng, true, 0.5);
  Tensor k = random_tensor({3, 4}, rng, true, 0.5);
  Tensor v = random_tensor({3, 4}, rng, true, 0.5);
  check_op("attention_1h", [&] { return weighted_probe(scaled_dot_attention(q, k, v, 1), pr); },
           {{"q", q}, {"k", k}, {"v", v}});
  check_op("attention_2h", [&] { return weighted_probe(scaled_dot_attention(q, k, v, 2), pr); },
           {{"q", q}, {"k", k}, {"v", v}});

  // clamp away from its boundaries
  Tensor c = random_tensor({6}, rng, true, 0.2);
  check_op("clamp", [&] { return weighted_probe(clamp(c, -5.0, 5.0), pr); }, {{"c", c}});
}

TEST_CASE("ops are deterministic: identical inputs give bit-identical outputs") {
  Rng rng(11);
  Tensor q = random_tensor({4, 8}, rng, false);
  Tensor k = random_tensor({4, 8}, rng, false);
  Tensor v = random_tensor({4, 8}, rng, false);
  Tensor o1 = scaled_dot_attention(q, k, v, 4);
  Tensor o2 = scaled_dot_attention(q, k, v, 4);
  REQUIRE(o1.numel() == o2.numel());
  CHECK(std::memcmp(o1.values().data(), o2.values().data(), o1.numel() * sizeof(double)) == 0);

  Tensor g = random_tensor({8}, rng, false);
  Tensor b = random_tensor({8}, rng, false);
  Tensor l1 = layer_norm(q, g, b);
  Tensor l2 = layer_norm(q, g, b);
  CHECK(std::memcmp(l1.values().data(), l2.values().data(), l1.numel() * sizeof(double)) == 0);
}

TEST_CASE("no-grad mode builds plain tensors") {
  Tensor a({2}, {1, 2}, true);
  NoGradGuard guard;
  Tensor out = scale(a, 2.0);
  CHECK_FALSE(out.requires_grad());
}

TEST_CASE("rng is counter-based and forkable") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c = a.fork(1), d = a.fork(2);
  CHECK(c.next_u64() != d.next_u64());
  // uniform ints stay in range
  Rng e(5);
  for (int i = 0; i < 1000; ++i) CHECK(e.next_below(7) < 7);
}
