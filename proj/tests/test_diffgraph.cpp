#include <doctest.h>

#include <random>

#include "cdua/diffgraph/checkpoint.hpp"
#include "cdua/diffgraph/encoding.hpp"
#include "cdua/diffgraph/gradcheck.hpp"
#include "cdua/diffgraph/layers.hpp"
#include "cdua/diffgraph/optim.hpp"
#include "test_util.hpp"

using namespace cdua;
using namespace cdua::dg;

namespace {

// Store with one random parameter per shape, named p0, p1, ...
ParamStore<double> random_store(const std::vector<Shape>& shapes, std::uint64_t seed, double spread = 1.0) {
  ParamStore<double> store;
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, spread);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Vec<double> v(numel(shapes[i]));
    for (Index k = 0; k < v.size(); ++k) v[k] = n(rng);
    store.add("p" + std::to_string(i), shapes[i], v);
  }
  return store;
}

std::vector<Var> bind(Tape<double>& t, ParamStore<double>& s) {
  std::vector<Var> out;
  for (std::size_t i = 0; i < s.size(); ++i) out.push_back(t.param(s.at(i)));
  return out;
}

template <typename F>
double check(const std::vector<Shape>& shapes, std::uint64_t seed, F&& body) {
  auto store = random_store(shapes, seed);
  const auto r = finite_diff_check(store, [&](Tape<double>& t) { return body(t, bind(t, store)); });
  return r.max_rel_error;
}

// Kernel with a deliberately wrong backward pass.
Var broken_scale(Tape<double>& tape, Var x) {
  return tape.push(tape.shape(x), tape.value(x) * 2.0, {x},
                   [x](Tape<double>& t, Var self) { t.grad(x) += t.grad(self) * 2.1; });
}

}  // namespace

TEST_CASE("linear kernels match finite differences to 1e-9") {
  for (std::uint64_t c = 0; c < 20; ++c) {
    const Index b = 1 + c % 3, m = 2 + c % 4, n = 1 + c % 5;
    CHECK(check({{b, m, n}, {b, m, n}}, c, [](auto& t, auto v) { return add(t, v[0], v[1]); }) < 1e-9);
    CHECK(check({{b, m, n}, {1, m, 1}}, c, [](auto& t, auto v) { return add(t, v[0], v[1]); }) < 1e-9);
    CHECK(check({{b, m, n}, {b, 1, n}}, c, [](auto& t, auto v) { return add(t, v[0], v[1]); }) < 1e-9);
    CHECK(check({{b, m, n}}, c, [](auto& t, auto v) { return scale(t, v[0], -1.7); }) < 1e-9);
    CHECK(check({{b, m, n}}, c, [&](auto& t, auto v) { return reshape(t, v[0], Shape{b * m, n}); }) < 1e-9);
    CHECK(check({{b, m, n}}, c, [](auto& t, auto v) { return transpose12(t, v[0]); }) < 1e-9);
    CHECK(check({{b, m, n}, {b, 3, n}}, c, [](auto& t, auto v) { return concat1(t, v[0], v[1]); }) < 1e-9);
    CHECK(check({{b, m, n}}, c, [](auto& t, auto v) { return mean1(t, v[0]); }) < 1e-9);
    CHECK(check({{b, m, n}, {4, n}, {4}}, c, [](auto& t, auto v) { return dense(t, v[0], v[1], v[2]); }) < 1e-9);
    CHECK(check({{b, m, n}}, c, [](auto& t, auto v) { return upsample_linear2x(t, v[0]); }) < 1e-9);
    const Index k = 1 + 2 * (c % 3);
    for (Index stride : {1, 2}) {
      CHECK(check({{b, m, n + 3}, {3, m, k}, {3}}, c, [stride](auto& t, auto v) {
              return conv1d(t, v[0], v[1], v[2], stride);
            }) < 1e-9);
    }
    CHECK(check({{b, m, n}, {2, 3, m}, {3}}, c,
                [](auto& t, auto v) { return conv_transpose2x(t, v[0], v[1], v[2]); }) < 1e-9);
  }
}

TEST_CASE("nonlinear kernels match finite differences to 1e-4") {
  for (std::uint64_t c = 0; c < 20; ++c) {
    const Index b = 1 + c % 2, l = 2 + c % 5;
    CHECK(check({{b, 3, l}}, c, [](auto& t, auto v) { return gelu(t, v[0]); }) < 1e-4);
    const Index groups = 1 + c % 3;
    const Index ch = groups * (1 + c % 2);
    CHECK(check({{b, ch, l}, {ch}, {ch}}, c, [groups](auto& t, auto v) {
            return group_norm(t, v[0], v[1], v[2], groups);
          }) < 1e-4);
    const Index heads = 1 + c % 2, d = 2 * heads * (1 + c % 2);
    CHECK(check({{b, l, d}, {b, 3, d}, {b, 3, d}}, c, [heads](auto& t, auto v) {
            return attention(t, v[0], v[1], v[2], heads);
          }) < 1e-4);
    Vec<double> target = Vec<double>::LinSpaced(b * l, -1.0, 1.0);
    Vec<double> mask = Vec<double>::Ones(b * l);
    mask[0] = 0.0;
    target[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK(check({{b, l}}, c, [&](auto& t, auto v) { return masked_mse(t, v[0], target, mask); }) < 1e-4);
  }
}

TEST_CASE("layers match finite differences") {
  for (std::uint64_t c = 0; c < 3; ++c) {
    ParamStore<double> store;
    Rng rng(c);
    auto block = ResidualBlock<double>::make(store, "res", 4, 8, 2, rng, false);
    auto attn = SelfAttentionBlock<double>::make(store, "attn", 8, 2, 2, rng);
    auto up = ConvTranspose2xLayer<double>::make(store, "up", 8, 4, rng);
    std::normal_distribution<double> n(0.0, 1.0);
    Vec<double> x(2 * 4 * 5);
    for (auto& e : x) e = n(rng);
    const auto r = finite_diff_check(store, [&](Tape<double>& t) {
      const Var h = attn(t, block(t, t.constant({2, 4, 5}, x)));
      return up(t, h);
    });
    CHECK(r.max_rel_error < 1e-4);
    CHECK(r.checked == store.scalar_count());
  }
}

TEST_CASE("input gradients flow through the tape") {
  Tape<double> t;
  Vec<double> xv(3);
  xv << 1, 2, 3;
  const Var x = t.input({1, 1, 3}, xv);
  const Var y = add(t, x, scale(t, x, 2.0));
  t.backward(y);
  CHECK(t.grad(x).isApprox(Vec<double>::Constant(3, 3.0)));
}

TEST_CASE("fault injection is detected") {
  const double err = check({{2, 3, 4}}, 1, [](auto& t, auto v) { return broken_scale(t, v[0]); });
  CHECK(err > 1e-2);
}

TEST_CASE("shape errors") {
  Tape<double> t;
  const Var a = t.constant({1, 2, 3}, Vec<double>::Zero(6));
  const Var b = t.constant({1, 3, 3}, Vec<double>::Zero(9));
  CHECK_THROWS_AS(add(t, a, b), Error);
  const Var w = t.constant({4, 5}, Vec<double>::Zero(20));
  const Var bias = t.constant({4}, Vec<double>::Zero(4));
  CHECK_THROWS_AS(dense(t, a, w, bias), Error);
  CHECK_THROWS_AS(attention(t, b, b, b, 2), Error);
  CHECK_THROWS_AS(reshape(t, a, Shape{7}), Error);
}

TEST_CASE("attention weights are a distribution and permutation equivariant") {
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 3.0);
  Vec<double> q(5 * 4), k(6 * 4), v(6 * 4);
  for (auto& e : q) e = n(rng);
  for (auto& e : k) e = n(rng);
  for (auto& e : v) e = 1.0;
  Tape<double> t(false);
  // Constant values: every output equals 1 exactly when each row of weights sums to 1.
  const Var out = attention(t, t.constant({1, 5, 4}, q), t.constant({1, 6, 4}, k), t.constant({1, 6, 4}, v), 2);
  CHECK((t.value(out).array() - 1.0).abs().maxCoeff() < 1e-12);

  for (auto& e : v) e = n(rng);
  const Var base = attention(t, t.constant({1, 5, 4}, q), t.constant({1, 6, 4}, k), t.constant({1, 6, 4}, v), 2);
  std::vector<Index> perm = {3, 0, 5, 1, 4, 2};
  Vec<double> kp(k.size()), vp(v.size());
  for (Index i = 0; i < 6; ++i) {
    kp.segment(i * 4, 4) = k.segment(perm[static_cast<std::size_t>(i)] * 4, 4);
    vp.segment(i * 4, 4) = v.segment(perm[static_cast<std::size_t>(i)] * 4, 4);
  }
  const Var permuted =
      attention(t, t.constant({1, 5, 4}, q), t.constant({1, 6, 4}, kp), t.constant({1, 6, 4}, vp), 2);
  CHECK((t.value(base) - t.value(permuted)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("convolution and upsampling shapes") {
  Tape<double> t(false);
  for (Index len : {1, 2, 7, 8, 13}) {
    const Var x = t.constant({1, 2, len}, Vec<double>::Ones(2 * len));
    const Var w = t.constant({3, 2, 3}, Vec<double>::Ones(18));
    const Var b = t.constant({3}, Vec<double>::Zero(3));
    CHECK(t.shape(conv1d(t, x, w, b, 2))[2] == (len + 1) / 2);
    CHECK(t.shape(conv1d(t, x, w, b, 1))[2] == len);
    const Var up = upsample_linear2x(t, x);
    CHECK(t.shape(up)[2] == 2 * len);
    CHECK((t.value(up).array() - 1.0).abs().maxCoeff() < 1e-15);
  }
  const Var even = t.constant({1, 1, 4}, Vec<double>::Ones(4));
  const Var w = t.constant({1, 1, 4}, Vec<double>::Ones(4));
  const Var b = t.constant({1}, Vec<double>::Zero(1));
  CHECK_THROWS_AS(conv1d(t, even, w, b, 1), Error);
}

TEST_CASE("group norm output statistics") {
  Tape<double> t(false);
  Rng rng(5);
  std::normal_distribution<double> n(3.0, 2.0);
  Vec<double> x(2 * 8 * 6);
  for (auto& e : x) e = n(rng);
  const Var y = group_norm(t, t.constant({2, 8, 6}, x), t.constant({8}, Vec<double>::Ones(8)),
                           t.constant({8}, Vec<double>::Zero(8)), 4);
  const auto& v = t.value(y);
  for (Index block = 0; block < 8; ++block) {
    const auto seg = v.segment(block * 12, 12);
    CHECK(std::abs(seg.mean()) < 1e-12);
    CHECK(std::abs((seg.array() - seg.mean()).square().mean() - 1.0) < 1e-3);
  }
}

TEST_CASE("residual block is the identity at init") {
  ParamStore<double> store;
  Rng rng(1);
  auto block = ResidualBlock<double>::make(store, "r", 8, 8, 8, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  Vec<double> x(2 * 8 * 5);
  for (auto& e : x) e = n(rng);
  Tape<double> t(false);
  const Var y = block(t, t.constant({2, 8, 5}, x));
  CHECK((t.value(y) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sinusoidal encoding") {
  const auto e0 = sinusoidal_encoding<double>(0.0, 8);
  for (Index i = 0; i < 4; ++i) {
    CHECK(e0[2 * i] == 0.0);
    CHECK(e0[2 * i + 1] == 1.0);
  }
  const auto e1 = sinusoidal_encoding<double>(1.0, 4);
  CHECK(e1[0] == doctest::Approx(std::sin(1.0)));
  CHECK(e1[2] == doctest::Approx(std::sin(0.01)));
  CHECK(e1[3] == doctest::Approx(std::cos(0.01)));
  CHECK_THROWS_AS(sinusoidal_encoding<double>(1.0, 5), Error);

  const auto table = sinusoidal_table<double>(701, 64);
  double closest = 1e9;
  for (Index a = 0; a < 701; ++a) {
    const auto ea = table.segment(a * 64, 64);
    CHECK(std::abs(ea.norm() - std::sqrt(32.0)) < 1e-9);
    for (Index b = a + 1; b < 701; ++b) closest = std::min(closest, (ea - table.segment(b * 64, 64)).norm());
  }
  CHECK(closest > 1e-3);
}

TEST_CASE("adam steps") {
  ParamStore<double> store;
  store.add("w", {2}, Vec<double>::Zero(2));
  store.at(0).value.grad << 1.0, -3.0;
  const AdamConfig cfg{0.1, 0.9, 0.999, 1e-8};
  adam_step(store, cfg);
  CHECK(store.at(0).value.data[0] == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(store.at(0).value.data[1] == doctest::Approx(0.1).epsilon(1e-6));

  // Second step with the same gradient keeps the step size at the learning rate.
  adam_step(store, cfg);
  CHECK(store.at(0).value.data[0] == doctest::Approx(-0.2).epsilon(1e-6));

  // A constant gradient g moves by lr at every step for any scale of g.
  ParamStore<double> s2;
  s2.add("w", {1}, Vec<double>::Zero(1));
  for (int k = 0; k < 5; ++k) {
    s2.at(0).value.grad[0] = 1e-3;
    adam_step(s2, cfg);
  }
  CHECK(s2.at(0).value.data[0] == doctest::Approx(-0.5).epsilon(1e-4));

  store.at(0).value.grad << std::numeric_limits<double>::quiet_NaN(), 1.0;
  const Vec<double> before = store.at(0).value.data;
  CHECK_THROWS_AS(adam_step(store, cfg), Error);
  CHECK(store.at(0).value.data == before);
  CHECK(store.step == 2);
}

TEST_CASE("adam minimizes a quadratic") {
  ParamStore<double> store;
  store.add("x", {3}, Vec<double>::Constant(3, 5.0));
  Vec<double> target(3);
  target << 1.0, -2.0, 0.5;
  for (int step = 0; step < 2000; ++step) {
    store.zero_grad();
    Tape<double> t;
    const Var loss = masked_mse(t, t.param(store.at(0)), target, Vec<double>(Vec<double>::Ones(3)));
    t.backward(loss);
    adam_step(store, {0.05, 0.9, 0.999, 1e-8});
  }
  CHECK((store.at(0).value.data - target).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("checkpoint round trip and corruption") {
  testutil::TempDir dir("ckpt");
  auto store = random_store({{3, 4}, {5}, {2, 2, 2}}, 11);
  round_to_storage(store);
  save_params(store, dir.str());
  auto other = random_store({{3, 4}, {5}, {2, 2, 2}}, 12);
  load_params(other, dir.str());
  for (std::size_t i = 0; i < store.size(); ++i) CHECK(other.at(i).value.data == store.at(i).value.data);

  auto wrong_shape = random_store({{4, 3}, {5}, {2, 2, 2}}, 12);
  CHECK_THROWS_AS(load_params(wrong_shape, dir.str()), Error);

  std::string blob = testutil::read_text(dir.file("weights.bin"));
  blob[5] = static_cast<char>(blob[5] ^ 0x40);
  {
    std::ofstream out(dir.file("weights.bin"), std::ios::binary);
    out << blob;
  }
  try {
    load_params(other, dir.str());
    FAIL("corrupted blob accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::schema);
  }
  testutil::TempDir empty("ckpt_empty");
  try {
    load_params(other, empty.str());
    FAIL("missing manifest accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
  }
}
