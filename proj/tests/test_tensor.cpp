#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "leuq/adam.hpp"
#include "leuq/checkpoint.hpp"
#include "leuq/tensor.hpp"
#include "oracles.hpp"

using namespace leuq;

namespace {

// Analytic grads of a scalar-valued graph vs central differences on a leaf.
double fd_check(Tensor& leaf, const std::function<Tensor()>& forward) {
  leaf.zero_grad();
  Tensor loss = forward();
  loss.backward();
  std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
  std::vector<double> x(leaf.mutable_data().begin(), leaf.mutable_data().end());
  auto eval = [&]() {
    leaf.set_data(x);
    NoGradGuard ng;
    return forward().item();
  };
  auto fd = oracle::finite_difference(eval, x);
  leaf.set_data(x);
  return oracle::max_rel_err(analytic, fd);
}

}  // namespace

TEST_CASE("matmul basics") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, a);
  for (std::size_t i = 0; i < 4; ++i) REQUIRE(r.at(i) == a.at(i));

  Tensor b = Tensor::from_data({2, 1}, {5, 6});
  Tensor p = matmul(a, b);
  REQUIRE(p.at(0) == 17.0);
  REQUIRE(p.at(1) == 39.0);

  REQUIRE_THROWS_AS(matmul(a, Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6})), ShapeError);
  try {
    matmul(a, Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6}));
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("[2x2]") != std::string::npos);
    REQUIRE(msg.find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum equals ones * b^T and matches finite differences") {
  Rng rng(11);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
  Tensor loss = sum_all(matmul(a, b));
  loss.backward();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double expect = 0.0;
      for (std::size_t k = 0; k < 2; ++k) expect += b.at(j * 2 + k);
      REQUIRE_THAT(a.grad()[i * 4 + j], Catch::Matchers::WithinAbs(expect, 1e-12));
    }

  const double err = fd_check(a, [&]() { return sum_all(matmul(a, b)); });
  REQUIRE(err < 1e-4);
}

TEST_CASE("elu values and gradient") {
  Tensor x = Tensor::from_data({3}, {0.0, 1.0, -1.0});
  Tensor y = elu(x);
  REQUIRE(y.at(0) == 0.0);
  REQUIRE(y.at(1) == 1.0);
  REQUIRE_THAT(y.at(2), Catch::Matchers::WithinAbs(-0.63212, 1e-5));

  Rng rng(5);
  Tensor v = Tensor::randn({17}, rng, 1.0, true);
  REQUIRE(fd_check(v, [&]() { return sum_all(elu(v)); }) < 1e-4);
}

TEST_CASE("softplus values, overflow safety, gradient") {
  Tensor x = Tensor::from_data({3}, {0.0, 100.0, -20.0});
  Tensor y = softplus(x);
  REQUIRE_THAT(y.at(0), Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
  REQUIRE(y.at(1) == 100.0);
  REQUIRE_THAT(y.at(2), Catch::Matchers::WithinRel(2.061e-9, 1e-3));
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(y.at(i) >= 0.0);

  Rng rng(6);
  Tensor v = Tensor::randn({13}, rng, 2.0, true);
  REQUIRE(fd_check(v, [&]() { return sum_all(softplus(v)); }) < 1e-4);
}

TEST_CASE("conv2d scaled identity and counting cases") {
  Rng rng(7);
  Tensor x = Tensor::randn({1, 1, 5, 5}, rng);
  Tensor w = Tensor::from_data({1, 1, 1, 1}, {2.0});
  Tensor y = conv2d(x, w, 1, 0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    REQUIRE_THAT(y.at(i), Catch::Matchers::WithinAbs(2.0 * x.at(i), 1e-14));
  }

  const double c = 0.7;
  Tensor xc = Tensor(Shape{1, 1, 5, 5}, c);
  Tensor ones = Tensor(Shape{1, 1, 3, 3}, 1.0);
  Tensor yc = conv2d(xc, ones, 1, 1);
  // interior positions see the full 3x3 support
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 1; j < 4; ++j) {
      REQUIRE_THAT(yc.at(i * 5 + j), Catch::Matchers::WithinAbs(9.0 * c, 1e-12));
    }

  REQUIRE_THROWS_AS(conv2d(x, Tensor(Shape{1, 1, 4, 4}, 0.0), 2, 0), ConfigError);
}

TEST_CASE("conv2d matches the quadruple-loop reference") {
  Rng rng(8);
  Tensor x = Tensor::randn({1, 2, 6, 6}, rng);
  Tensor w = Tensor::randn({3, 2, 4, 4}, rng);
  Tensor b = Tensor::randn({3}, rng);
  Tensor y = conv2d(x, w, b, 2, 1);
  std::vector<double> bias(b.data().begin(), b.data().end());
  auto ref = oracle::conv2d_ref(std::vector<double>(x.data().begin(), x.data().end()), 1, 2, 6, 6,
                                std::vector<double>(w.data().begin(), w.data().end()), 3, 4, 2, 1,
                                &bias);
  REQUIRE(y.numel() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    REQUIRE_THAT(y.at(i), Catch::Matchers::WithinAbs(ref[i], 1e-12));
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(9);
  Tensor x = Tensor::randn({2, 2, 5, 5}, rng, 1.0, true);
  Tensor w = Tensor::randn({3, 2, 3, 3}, rng, 0.5, true);
  Tensor b = Tensor::randn({3}, rng, 0.5, true);
  auto forward = [&]() { return mean_all(square(conv2d(x, w, b, 2, 1))); };
  REQUIRE(fd_check(x, forward) < 1e-4);
  REQUIRE(fd_check(w, forward) < 1e-4);
  REQUIRE(fd_check(b, forward) < 1e-4);
}

TEST_CASE("conv_transpose2d is the exact adjoint of conv2d") {
  Rng rng(10);
  Tensor x = Tensor::randn({2, 3, 6, 6}, rng);
  Tensor w = Tensor::randn({4, 3, 4, 4}, rng);
  Tensor cx = conv2d(x, w, 2, 1);
  Tensor u = Tensor::randn(cx.shape(), rng);
  Tensor tu = conv_transpose2d(u, w, 2, 1);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx.at(i) * u.at(i);
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x.at(i) * tu.at(i);
  REQUIRE_THAT(lhs, Catch::Matchers::WithinRel(rhs, 1e-10));
}

TEST_CASE("conv_transpose2d extent, reference, gradient") {
  Rng rng(12);
  Tensor x8 = Tensor::randn({1, 2, 8, 8}, rng);
  Tensor w = Tensor::randn({2, 3, 4, 4}, rng);
  Tensor up = conv_transpose2d(x8, w, 2, 1);
  REQUIRE(up.dim(2) == 16);
  REQUIRE(up.dim(3) == 16);

  auto ref = oracle::conv_transpose2d_ref(
      std::vector<double>(x8.data().begin(), x8.data().end()), 1, 2, 8, 8,
      std::vector<double>(w.data().begin(), w.data().end()), 3, 4, 2, 1);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    REQUIRE_THAT(up.at(i), Catch::Matchers::WithinAbs(ref[i], 1e-12));
  }

  Tensor xg = Tensor::randn({1, 2, 4, 4}, rng, 1.0, true);
  Tensor wg = Tensor::randn({2, 2, 4, 4}, rng, 0.5, true);
  auto forward = [&]() { return mean_all(square(conv_transpose2d(xg, wg, 2, 1))); };
  REQUIRE(fd_check(xg, forward) < 1e-4);
  REQUIRE(fd_check(wg, forward) < 1e-4);
}

TEST_CASE("group_norm normalization identities") {
  Tensor gamma = Tensor(Shape{4}, 1.0);
  Tensor beta = Tensor::zeros({4});

  Tensor xc = Tensor(Shape{2, 4, 3, 3}, 3.25);
  Tensor yc = group_norm(xc, 2, gamma, beta);
  for (std::size_t i = 0; i < yc.numel(); ++i) {
    REQUIRE_THAT(yc.at(i), Catch::Matchers::WithinAbs(0.0, 1e-12));
  }

  Rng rng(13);
  Tensor x = Tensor::randn({2, 4, 3, 3}, rng);
  Tensor y = group_norm(x, 2, gamma, beta);
  const double eps = 1e-5;
  const std::size_t gsize = 2 * 9;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t g = 0; g < 2; ++g) {
      double mean = 0.0, var = 0.0;
      for (std::size_t c = g * 2; c < g * 2 + 2; ++c)
        for (std::size_t i = 0; i < 9; ++i) mean += y.at((b * 4 + c) * 9 + i);
      mean /= gsize;
      for (std::size_t c = g * 2; c < g * 2 + 2; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
          const double d = y.at((b * 4 + c) * 9 + i) - mean;
          var += d * d;
        }
      var /= gsize;
      REQUIRE(std::fabs(mean) < 1e-10);
      REQUIRE(var <= 1.0 + 1e-12);
      REQUIRE(var >= 1.0 - 10.0 * eps);
    }

  REQUIRE_THROWS_AS(group_norm(Tensor(Shape{1, 3, 2, 2}, 1.0), 2, Tensor(Shape{3}, 1.0),
                               Tensor::zeros({3})),
                    ConfigError);
}

TEST_CASE("group_norm matches the scalar reference and finite differences") {
  Tensor x = Tensor::from_data({1, 4, 2, 2}, {0.5,  -1.0, 2.0, 0.25, 1.5,  -0.5, 0.75, 1.25,
                                              -2.0, 0.0,  1.0, 3.0,  -1.5, 2.5,  0.5,  -0.25});
  Tensor gamma = Tensor::from_data({4}, {1.0, 0.5, 2.0, 1.5});
  Tensor beta = Tensor::from_data({4}, {0.1, -0.2, 0.0, 0.3});
  Tensor y = group_norm(x, 2, gamma, beta);
  auto ref = oracle::group_norm_ref(std::vector<double>(x.data().begin(), x.data().end()), 1, 4, 2,
                                    2, 2, std::vector<double>(gamma.data().begin(), gamma.data().end()),
                                    std::vector<double>(beta.data().begin(), beta.data().end()),
                                    1e-5);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    REQUIRE_THAT(y.at(i), Catch::Matchers::WithinAbs(ref[i], 1e-12));
  }

  Rng rng(14);
  Tensor xg = Tensor::randn({2, 4, 3, 3}, rng, 1.0, true);
  Tensor gg = Tensor::randn({4}, rng, 0.3, true);
  Tensor bg = Tensor::randn({4}, rng, 0.3, true);
  auto forward = [&]() { return mean_all(elu(group_norm(xg, 2, gg, bg))); };
  REQUIRE(fd_check(xg, forward) < 1e-4);
  REQUIRE(fd_check(gg, forward) < 1e-4);
  REQUIRE(fd_check(bg, forward) < 1e-4);
}

TEST_CASE("backward contracts") {
  Tensor x = Tensor::from_data({}, {3.0}, true);
  Tensor loss = square(x);
  loss.backward();
  REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(6.0, 1e-12));

  Rng rng(15);
  Tensor a = Tensor::randn({4, 3}, rng, 1.0, true);
  Tensor v = Tensor::randn({3, 2}, rng, 1.0, true);
  REQUIRE(fd_check(v, [&]() { return sum_all(elu(matmul(a, v))); }) < 1e-4);

  // a detached branch contributes zero gradient
  Tensor b = Tensor::randn({4}, rng, 1.0, true);
  Tensor detached = square(b).detach();
  Tensor c = Tensor::randn({4}, rng, 1.0, true);
  Tensor l2 = sum_all(mul(detached, c));
  l2.backward();
  for (double g : b.grad()) REQUIRE(g == 0.0);

  // non-scalar backward is rejected
  REQUIRE_THROWS_AS(elu(b).backward(), ContractError);

  // a leaf the loss never touches reads zero gradient
  Tensor unused = Tensor::randn({3}, rng, 1.0, true);
  Tensor l3 = sum_all(square(c));
  l3.backward();
  for (double g : unused.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("forward evaluation is deterministic") {
  Rng rng(16);
  Tensor a = Tensor::randn({3, 3}, rng, 1.0, true);
  Tensor x = Tensor::randn({3, 3}, rng);
  Tensor r1 = elu(matmul(a, x));
  Tensor r2 = elu(matmul(a, x));
  for (std::size_t i = 0; i < r1.numel(); ++i) REQUIRE(r1.at(i) == r2.at(i));
}

TEST_CASE("randomized finite-difference sweep across primitives") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 2 + rng.next_u64() % 3;
    const std::size_t k = 2 + rng.next_u64() % 3;
    const std::size_t n = 2 + rng.next_u64() % 3;
    Tensor a = Tensor::randn({m, k}, rng, 1.0, true);
    Tensor b = Tensor::randn({k, n}, rng, 1.0, true);
    auto forward = [&]() {
      Tensor h = matmul(a, b);
      return add(mean_all(square(elu(h))), mean_all(softplus(h)));
    };
    REQUIRE(fd_check(a, forward) < 1e-4);
    REQUIRE(fd_check(b, forward) < 1e-4);
  }
}

TEST_CASE("adam closed forms") {
  // zero gradient: parameters unchanged, step counter advances
  std::vector<Tensor> params{Tensor::from_data({3}, {1.0, -2.0, 0.5}, true)};
  AdamState st;
  adam_step(params, st);
  REQUIRE(st.step == 1);
  REQUIRE(params[0].at(0) == 1.0);
  REQUIRE(params[0].at(1) == -2.0);

  // first step with constant positive gradient moves by ~ -lr
  Tensor p = Tensor::from_data({1}, {0.0}, true);
  {
    Tensor loss = mul_scalar(p, 2.5);  // d loss / d p = 2.5
    loss.backward();
  }
  std::vector<Tensor> ps{p};
  AdamState st2;
  adam_step(ps, st2);
  REQUIRE_THAT(p.at(0), Catch::Matchers::WithinAbs(-st2.cfg.lr, 1e-6 * st2.cfg.lr + 1e-12));

  // two identical-gradient steps reproduce the scalar recurrence
  const double g = 0.37, lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto [t1, t2] = oracle::adam_two_steps(5.0, g, lr, b1, b2, eps);
  Tensor q = Tensor::from_data({1}, {5.0}, true);
  std::vector<Tensor> qs{q};
  AdamState st3;
  for (int step = 0; step < 2; ++step) {
    q.zero_grad();
    Tensor loss = mul_scalar(q, g);
    loss.backward();
    adam_step(qs, st3);
    const double expect = step == 0 ? t1 : t2;
    REQUIRE_THAT(q.at(0), Catch::Matchers::WithinAbs(expect, 1e-12));
  }
}

TEST_CASE("checkpoint container round trip is bit-exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "leuq_tensor_test";
  fs::create_directories(dir);
  Rng rng(18);
  Tensor w = Tensor::randn({7, 3}, rng);
  Tensor b = Tensor::randn({3}, rng);
  nlohmann::json meta{{"kind", "unit-test"}};
  save_checkpoint(dir / "ck.bin", {{"w", w}, {"b", b}}, meta);
  Checkpoint ck = load_checkpoint(dir / "ck.bin");
  REQUIRE(ck.meta["kind"] == "unit-test");
  REQUIRE(ck.find("w").shape() == w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) REQUIRE(ck.find("w").at(i) == w.at(i));
  for (std::size_t i = 0; i < b.numel(); ++i) REQUIRE(ck.find("b").at(i) == b.at(i));

  // unknown magic is rejected
  {
    std::ofstream os(dir / "junk.bin", std::ios::binary);
    os << "NOTLEUQ0datadata";
  }
  REQUIRE_THROWS_AS(load_checkpoint(dir / "junk.bin"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("non-finite results are surfaced as numeric errors") {
  Tensor x = Tensor::from_data({2}, {1.0, 0.0});
  REQUIRE_THROWS_AS(div(Tensor::from_data({2}, {1.0, 1.0}), x), NumericError);
  REQUIRE_THROWS_AS(log(Tensor::from_data({1}, {-1.0})), NumericError);
}
