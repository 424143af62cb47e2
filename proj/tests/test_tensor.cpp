#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "cafe/tape.hpp"
#include "cafe/tensor.hpp"
#include "oracles.hpp"

using cafe::NodeId;
using cafe::Rng;
using cafe::Tape;
using cafe::Tensor;

TEST_CASE("matmul identity and zero") {
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  Rng rng(7);
  Tensor<double> b = oracle::random_tensor({3, 5}, rng);
  Tensor<double> c = cafe::matmul(eye, b);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(c[i] == b[i]);

  Tensor<double> zero({5, 4});
  Tensor<double> az = cafe::matmul(b.reshaped({3, 5}), zero);
  for (std::size_t i = 0; i < az.size(); ++i) CHECK(az[i] == 0.0);
}

TEST_CASE("matmul matches naive triple-loop oracle to the bit") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> a = oracle::random_tensor({3, 3}, rng);
    Tensor<double> b = oracle::random_tensor({3, 3}, rng);
    Tensor<double> got = cafe::matmul(a, b);
    Tensor<double> want = oracle::naive_matmul(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);  // 0 ULP
  }
}

TEST_CASE("matmul rejects shape mismatch") {
  Tensor<double> a({2, 3}), b({4, 2});
  CHECK_THROWS_AS(cafe::matmul(a, b), cafe::usage_error);
}

TEST_CASE("softmax constant row and saturation") {
  Tensor<double> x({1, 3}, {2.5, 2.5, 2.5});
  Tensor<double> p = cafe::softmax_rows(x);
  for (int j = 0; j < 3; ++j) CHECK(p(0, j) == Catch::Approx(1.0 / 3).epsilon(1e-15));

  Tensor<double> hot({1, 2}, {0.0, 100.0});
  Tensor<double> ph = cafe::softmax_rows(hot);
  CHECK(ph(0, 0) < 1e-40);
  CHECK(ph(0, 1) == Catch::Approx(1.0).epsilon(1e-15));
  CHECK(ph(0, 0) + ph(0, 1) == Catch::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("softmax matches high-precision oracle") {
  Rng rng(3);
  Tensor<double> x = oracle::random_tensor({2, 4}, rng, 3.0);
  Tensor<double> got = cafe::softmax_rows(x);
  Tensor<double> want = oracle::highprec_softmax_rows(x);
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(std::abs(got[i] - want[i]) < 1e-12);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> x = oracle::random_tensor({5, 9}, rng, 4.0);
    Tensor<double> p = cafe::softmax_rows(x);
    for (int i = 0; i < 5; ++i) {
      double s = 0;
      for (int j = 0; j < 9; ++j) s += p(i, j);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    Tensor<float> xf({5, 9});
    for (std::size_t e = 0; e < x.size(); ++e) xf[e] = static_cast<float>(x[e]);
    Tensor<float> pf = cafe::softmax_rows(xf);
    for (int i = 0; i < 5; ++i) {
      float s = 0;
      for (int j = 0; j < 9; ++j) s += pf(i, j);
      CHECK(std::abs(s - 1.0f) < 1e-6f);
    }
  }
}

TEST_CASE("layer_norm limits and oracle") {
  Tensor<double> gamma = Tensor<double>::full({4}, 1.0);
  Tensor<double> beta({4});

  Tensor<double> constant = Tensor<double>::full({1, 4}, 3.7);
  Tensor<double> y = cafe::layer_norm(constant, gamma, beta, 1e-5);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);

  // already standardized input is a fixed point as eps -> 0
  Rng rng(5);
  Tensor<double> x({1, 4});
  {
    Tensor<double> raw = oracle::random_tensor({1, 4}, rng);
    double mean = 0;
    for (int j = 0; j < 4; ++j) mean += raw(0, j);
    mean /= 4;
    double var = 0;
    for (int j = 0; j < 4; ++j) var += (raw(0, j) - mean) * (raw(0, j) - mean);
    var /= 4;
    for (int j = 0; j < 4; ++j) x(0, j) = (raw(0, j) - mean) / std::sqrt(var);
  }
  Tensor<double> fixed = cafe::layer_norm(x, gamma, beta, 1e-14);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(fixed[i] - x[i]) < 1e-9);

  Tensor<double> g8 = oracle::random_tensor({8}, rng);
  Tensor<double> b8 = oracle::random_tensor({8}, rng);
  Tensor<double> x8 = oracle::random_tensor({3, 8}, rng, 2.0);
  Tensor<double> got = cafe::layer_norm(x8, g8, b8, 1e-5);
  Tensor<double> want = oracle::twopass_layer_norm(x8, g8, b8, 1e-5);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);

  // normalized output has near-zero mean with gamma=1, beta=0
  Tensor<double> norm = cafe::layer_norm(x8, Tensor<double>::full({8}, 1.0),
                                         Tensor<double>({8}), 1e-5);
  for (int i = 0; i < 3; ++i) {
    double mean = 0;
    for (int j = 0; j < 8; ++j) mean += norm(i, j);
    CHECK(std::abs(mean / 8) < 1e-10);
  }
}

TEST_CASE("gelu point values") {
  CHECK(cafe::gelu_scalar(0.0) == 0.0);
  CHECK(std::abs(cafe::gelu_scalar(10.0) - 10.0) < 1e-6);
  CHECK(std::abs(cafe::gelu_scalar(1.0) - oracle::gelu_scalar_highprec(1.0)) < 1e-15);
}

TEST_CASE("deterministic kernels: identical inputs give identical bits") {
  Rng rng(9);
  Tensor<double> a = oracle::random_tensor({7, 13}, rng);
  Tensor<double> b = oracle::random_tensor({13, 5}, rng);
  Tensor<double> c1 = cafe::matmul(a, b);
  Tensor<double> c2 = cafe::matmul(a, b);
  CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(double)) == 0);
  Tensor<double> s1 = cafe::softmax_rows(a);
  Tensor<double> s2 = cafe::softmax_rows(a);
  CHECK(std::memcmp(s1.data(), s2.data(), s1.size() * sizeof(double)) == 0);
}

TEST_CASE("tensor construction validates") {
  CHECK_THROWS_AS(Tensor<double>({2, 2}, {1.0, 2.0}), cafe::usage_error);
  CHECK_THROWS_AS(
      Tensor<double>::external({1, 2}, {1.0, std::nan("")}, "test input"),
      cafe::data_error);
}

// --------------------------------------------------------------------------
// Backward pass.

TEST_CASE("backward: single matmul against finite differences") {
  Rng rng(21);
  const double err = oracle::fd_max_rel_error(
      [](Tape<double>& tp, const std::vector<NodeId>& in) {
        return tp.matmul(in[0], in[1]);
      },
      {oracle::random_tensor({3, 4}, rng), oracle::random_tensor({4, 2}, rng)},
      oracle::random_tensor({3, 2}, rng));
  CHECK(err < 1e-6);
}

TEST_CASE("backward: zero seed gives zero gradients") {
  Rng rng(22);
  Tape<double> tp;
  NodeId a = tp.input(oracle::random_tensor({3, 3}, rng));
  NodeId b = tp.input(oracle::random_tensor({3, 3}, rng));
  NodeId c = tp.gelu(tp.matmul(a, b));
  auto grads = tp.backward(c, Tensor<double>::zeros({3, 3}), {a, b});
  for (const auto& g : grads)
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("backward: gelu(layer_norm(matmul)) composition vs finite differences") {
  Rng rng(23);
  const double err = oracle::fd_max_rel_error(
      [](Tape<double>& tp, const std::vector<NodeId>& in) {
        NodeId mm = tp.matmul(in[0], in[1]);
        NodeId ln = tp.layer_norm(mm, in[2], in[3], 1e-5);
        return tp.gelu(ln);
      },
      {oracle::random_tensor({2, 3}, rng), oracle::random_tensor({3, 4}, rng),
       oracle::random_tensor({4}, rng), oracle::random_tensor({4}, rng)},
      oracle::random_tensor({2, 4}, rng));
  CHECK(err < 1e-5);
}

TEST_CASE("backward: empty tape is a usage error") {
  Tape<double> tp;
  CHECK_THROWS_AS(tp.backward(0, Tensor<double>::scalar(1.0), {}),
                  cafe::usage_error);
}

TEST_CASE("backward: VJP rules for every primitive vs finite differences") {
  Rng rng(31);
  auto check = [&](const oracle::TapeBuilder& build,
                   std::vector<Tensor<double>> inputs, cafe::Shape out_shape) {
    Tensor<double> seed = oracle::random_tensor(std::move(out_shape), rng);
    CHECK(oracle::fd_max_rel_error(build, std::move(inputs), seed) < 1e-6);
  };

  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.add(in[0], in[1]); },
        {oracle::random_tensor({2, 3}, rng), oracle::random_tensor({2, 3}, rng)}, {2, 3});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.sub(in[0], in[1]); },
        {oracle::random_tensor({2, 3}, rng), oracle::random_tensor({2, 3}, rng)}, {2, 3});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.scale(in[0], -1.7); },
        {oracle::random_tensor({2, 3}, rng)}, {2, 3});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.add_row(in[0], in[1]); },
        {oracle::random_tensor({2, 3}, rng), oracle::random_tensor({3}, rng)}, {2, 3});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.sub_row(in[0], in[1]); },
        {oracle::random_tensor({2, 3}, rng), oracle::random_tensor({3}, rng)}, {2, 3});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.transpose(in[0]); },
        {oracle::random_tensor({2, 3}, rng)}, {3, 2});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.gelu(in[0]); },
        {oracle::random_tensor({2, 3}, rng)}, {2, 3});
  // ReLU away from the kink (|x| > step)
  {
    Tensor<double> x = oracle::random_tensor({2, 3}, rng);
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] += x[i] >= 0 ? 0.5 : -0.5;
    check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.relu(in[0]); },
          {x}, {2, 3});
  }
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.softmax_rows(in[0]); },
        {oracle::random_tensor({2, 4}, rng)}, {2, 4});
  check(
      [](Tape<double>& t, const std::vector<NodeId>& in) {
        return t.layer_norm(in[0], in[1], in[2], 1e-5);
      },
      {oracle::random_tensor({2, 4}, rng), oracle::random_tensor({4}, rng),
       oracle::random_tensor({4}, rng)},
      {2, 4});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.slice_rows(in[0], 1, 3); },
        {oracle::random_tensor({4, 3}, rng)}, {2, 3});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.slice_cols(in[0], 0, 2); },
        {oracle::random_tensor({3, 4}, rng)}, {3, 2});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.concat_rows(in[0], in[1]); },
        {oracle::random_tensor({2, 3}, rng), oracle::random_tensor({1, 3}, rng)}, {3, 3});
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.concat_cols(in[0], in[1]); },
        {oracle::random_tensor({2, 3}, rng), oracle::random_tensor({2, 2}, rng)}, {2, 5});
  {
    auto idx = std::make_shared<std::vector<int>>(std::vector<int>{5, 0, 3, 3});
    check(
        [idx](Tape<double>& t, const std::vector<NodeId>& in) {
          return t.gather(in[0], idx, {2, 2});
        },
        {oracle::random_tensor({2, 3}, rng)}, {2, 2});
  }
  check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.sum_squares(in[0]); },
        {oracle::random_tensor({2, 3}, rng)}, {1, 1});
  {
    Tensor<double> x = oracle::random_tensor({2, 3}, rng);
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] += x[i] >= 0 ? 0.5 : -0.5;  // keep |x| away from the abs kink
    check([](Tape<double>& t, const std::vector<NodeId>& in) { return t.sum_abs(in[0]); },
          {x}, {1, 1});
  }
}

TEST_CASE("backward: repeated sweeps over one tape are identical") {
  Rng rng(41);
  Tape<double> tp;
  NodeId a = tp.input(oracle::random_tensor({3, 4}, rng));
  NodeId b = tp.input(oracle::random_tensor({4, 4}, rng));
  NodeId out = tp.softmax_rows(tp.matmul(tp.gelu(tp.matmul(a, b)), b));
  Tensor<double> seed = oracle::random_tensor({3, 4}, rng);
  auto g1 = tp.backward(out, seed, {a});
  auto g2 = tp.backward(out, seed, {a});
  CHECK(std::memcmp(g1[0].data(), g2[0].data(), g1[0].size() * sizeof(double)) == 0);
}
