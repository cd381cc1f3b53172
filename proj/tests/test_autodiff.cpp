// Copyright 2026 The SoSN Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "sosn/autodiff.hpp"
#include "sosn/params.hpp"
#include "test_util.hpp"

using namespace sosn;
using sosn::testutil::random_extent;
using sosn::testutil::random_tensor;

namespace {

using Fn = std::function<ad::Var(const std::vector<ad::Var>&)>;

void expect_gradcheck(const Fn& fn, const std::vector<Tensor>& inputs) {
  const auto r = ad::gradcheck(fn, inputs);
  INFO("max relative error " << r.max_relative_error << " at input " << r.worst_input);
  CHECK(r.passed);
}

}  // namespace

TEST_CASE("concat_mode(3) stacks two matrices as slices") {
  auto a = ad::constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  auto b = ad::constant(Tensor::matrix(2, 2, {2, 0, 0, 2}));
  auto c = ad::concat_mode(a, b, 3);
  REQUIRE(c->value.shape() == Shape{2, 2, 2});
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(c->value.at(i, j, 0) == (i == j ? 1.0 : 0.0));
      CHECK(c->value.at(i, j, 1) == (i == j ? 2.0 : 0.0));
    }
  }
}

TEST_CASE("concat_mode along existing modes") {
  auto a = ad::constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  auto b = ad::constant(Tensor::matrix(2, 3, {7, 8, 9, 10, 11, 12}));
  auto rows = ad::concat_mode(a, b, 1);
  CHECK(rows->value.shape() == Shape{4, 3});
  CHECK(rows->value.at(2, 0) == 7.0);
  auto cols = ad::concat_mode(a, b, 2);
  CHECK(cols->value.shape() == Shape{2, 6});
  CHECK(cols->value.at(1, 3) == 10.0);
  CHECK_THROWS_AS(ad::concat_mode(a, ad::constant(Tensor({3, 3})), 2), ShapeError);
}

TEST_CASE("trace and its gradient") {
  auto x = ad::variable(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  auto t = ad::trace(x);
  CHECK(t->value.item() == 5.0);
  ad::backward(t);
  CHECK(x->grad.storage() == std::vector<double>{1, 0, 0, 1});
}

TEST_CASE("mean(relu(Wx)) matches finite differences") {
  std::mt19937_64 rng(11);
  const Tensor w = random_tensor({5, 4}, rng);
  const Tensor x = random_tensor({4, 3}, rng);
  expect_gradcheck(
      [](const std::vector<ad::Var>& v) { return ad::mean(ad::relu(ad::matmul(v[0], v[1]))); },
      {w, x});
}

TEST_CASE("backward of sum of parameters gives unit gradients") {
  auto x = ad::variable(Tensor({3, 2}, 0.7));
  ad::backward(ad::sum(x));
  for (double g : x->grad.storage()) CHECK(g == 1.0);
}

TEST_CASE("backward of zero times x gives zero gradients") {
  auto x = ad::variable(Tensor({4}, 3.0));
  ad::backward(ad::sum(ad::scale(x, 0.0)));
  for (double g : x->grad.storage()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar roots") {
  auto x = ad::variable(Tensor({2, 2}, 1.0));
  CHECK_THROWS_AS(ad::backward(ad::relu(x)), ShapeError);
}

TEST_CASE("random three-layer composition matches finite differences") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({6, 5}, rng);
  const Tensor w1 = random_tensor({7, 6}, rng);
  const Tensor w2 = random_tensor({4, 7}, rng);
  const Tensor w3 = random_tensor({1, 4}, rng);
  expect_gradcheck(
      [](const std::vector<ad::Var>& v) {
        auto h1 = ad::tanh(ad::matmul(v[1], v[0]));
        auto h2 = ad::sigmoid(ad::matmul(v[2], h1));
        return ad::mean(ad::exp(ad::matmul(v[3], h2)));
      },
      {x, w1, w2, w3});
}

TEST_CASE("repeated backward with zeroed grads is identical") {
  std::mt19937_64 rng(5);
  auto w = ad::variable(random_tensor({3, 3}, rng));
  auto root = ad::sum(ad::tanh(ad::matmul(w, w)));
  ad::backward(root);
  const Tensor first = w->grad;
  ad::zero_grad(root);
  ad::backward(root);
  CHECK(w->grad.storage() == first.storage());
}

TEST_CASE("shape errors name the primitive and both shapes") {
  auto a = ad::constant(Tensor({2, 3}));
  auto b = ad::constant(Tensor({2, 3}));
  try {
    ad::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("non-finite intermediates raise with node identity") {
  auto x = ad::variable(Tensor({2}, 1000.0));
  try {
    ad::exp(x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("exp") != std::string::npos);
    CHECK(msg.find("node #") != std::string::npos);
  }
}

TEST_CASE("every primitive passes gradcheck on randomized shapes") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t m = random_extent(rng, 2, 5), n = random_extent(rng, 2, 5),
                      k = random_extent(rng, 2, 5);
    CAPTURE(trial);
    expect_gradcheck([](const auto& v) { return ad::matmul(v[0], v[1]); },
                     {random_tensor({m, k}, rng), random_tensor({k, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::transpose(v[0]); },
                     {random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::trace(v[0]); },
                     {random_tensor({m, m}, rng)});
    expect_gradcheck([](const auto& v) { return ad::linear(v[0], v[1], v[2]); },
                     {random_tensor({m, k}, rng), random_tensor({n, k}, rng),
                      random_tensor({n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::relu(v[0]); },
                     {random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::sigmoid(v[0]); },
                     {random_tensor({m, n}, rng, -4, 4)});
    expect_gradcheck([](const auto& v) { return ad::tanh(v[0]); },
                     {random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::exp(v[0]); },
                     {random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::log(v[0]); },
                     {random_tensor({m, n}, rng, 0.5, 2.0)});
    expect_gradcheck([](const auto& v) { return ad::sqrt(v[0]); },
                     {random_tensor({m, n}, rng, 0.5, 2.0)});
    expect_gradcheck([](const auto& v) { return ad::power(v[0], 2.5); },
                     {random_tensor({m, n}, rng, 0.5, 2.0)});
    expect_gradcheck([](const auto& v) { return ad::scale(v[0], -1.7); },
                     {random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::add(v[0], v[1]); },
                     {random_tensor({m, n}, rng), random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::sub(v[0], v[1]); },
                     {random_tensor({m, n}, rng), random_tensor({1}, rng)});
    expect_gradcheck([](const auto& v) { return ad::mul(v[0], v[1]); },
                     {random_tensor({m, n}, rng), random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::div(v[0], v[1]); },
                     {random_tensor({m, n}, rng), random_tensor({1}, rng, 1.0, 2.0)});
    expect_gradcheck([](const auto& v) { return ad::mean(v[0]); },
                     {random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::concat_mode(v[0], v[1], 3); },
                     {random_tensor({m, n}, rng), random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::concat_mode(v[0], v[1], 1); },
                     {random_tensor({m, n}, rng), random_tensor({k, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::concat_mode(v[0], v[1], 2); },
                     {random_tensor({m, n}, rng), random_tensor({m, k}, rng)});
    expect_gradcheck([](const auto& v) { return ad::vectorize(v[0]); },
                     {random_tensor({m, n, k}, rng)});
    expect_gradcheck([](const auto& v) { return ad::stack({v[0], v[1]}); },
                     {random_tensor({m, n}, rng), random_tensor({m, n}, rng)});
    expect_gradcheck([](const auto& v) { return ad::slice0(v[0], 1, 2); },
                     {random_tensor({m, n}, rng)});
    for (int turns = 1; turns < 4; ++turns) {
      expect_gradcheck([turns](const auto& v) { return ad::rotate90(v[0], turns); },
                       {random_tensor({2, m, n}, rng)});
    }
    expect_gradcheck(
        [](const auto& v) { return ad::conv2d(v[0], v[1], v[2], 1); },
        {random_tensor({2, 2, m + 2, n + 2}, rng), random_tensor({3, 2, 3, 3}, rng),
         random_tensor({3}, rng)});
    expect_gradcheck([](const auto& v) { return ad::conv2d(v[0], v[1], nullptr, 0); },
                     {random_tensor({2, 2, 5, 4}, rng), random_tensor({2, 2, 3, 3}, rng)});
    expect_gradcheck([](const auto& v) { return ad::maxpool2x2(v[0]); },
                     {random_tensor({2, 3, 2 * m + 1, 2 * n}, rng)});
    expect_gradcheck(
        [](const auto& v) {
          return ad::batchnorm(v[0], v[1], v[2], ad::BatchNormMode::kTraining);
        },
        {random_tensor({3, 2, m, n}, rng), random_tensor({2}, rng, 0.5, 1.5),
         random_tensor({2}, rng)});
    expect_gradcheck(
        [](const auto& v) {
          return ad::batchnorm(v[0], v[1], v[2], ad::BatchNormMode::kTraining);
        },
        {random_tensor({4, 3}, rng), random_tensor({3}, rng, 0.5, 1.5),
         random_tensor({3}, rng)});
  }
}

TEST_CASE("conv2d matches a direct loop") {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({2, 3, 5, 4}, rng);
  const Tensor w = random_tensor({2, 3, 3, 3}, rng);
  const Tensor b = random_tensor({2}, rng);
  auto y = ad::conv2d(ad::constant(x), ad::constant(w), ad::constant(b), 1);
  REQUIRE(y->value.shape() == Shape{2, 2, 5, 4});
  double worst = 0.0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 2; ++o)
      for (long i = 0; i < 5; ++i)
        for (long j = 0; j < 4; ++j) {
          double acc = b[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (long dy = 0; dy < 3; ++dy)
              for (long dx = 0; dx < 3; ++dx) {
                const long yy = i + dy - 1, xx = j + dx - 1;
                if (yy < 0 || yy >= 5 || xx < 0 || xx >= 4) continue;
                acc += w[((o * 3 + c) * 3 + dy) * 3 + dx] * x[((n * 3 + c) * 5 + yy) * 4 + xx];
              }
          worst = std::max(worst, std::abs(acc - y->value[((n * 2 + o) * 5 + i) * 4 + j]));
        }
  CHECK(worst < 1e-12);
}

TEST_CASE("batchnorm modes and running statistics") {
  Tensor rm({1}, 0.0), rv({1}, 1.0);
  auto x = ad::constant(Tensor({2, 1, 1, 2}, {1.0, 3.0, 5.0, 7.0}));
  auto gamma = ad::constant(Tensor({1}, 1.0));
  auto beta = ad::constant(Tensor({1}, 0.0));
  auto y = ad::batchnorm(x, gamma, beta, ad::BatchNormMode::kTraining, {&rm, &rv});
  CHECK(rm[0] == doctest::Approx(0.1 * 4.0));
  // Unbiased batch variance of {1,3,5,7} is 20/3.
  CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 20.0 / 3.0));
  double s = 0.0;
  for (double v : y->value.storage()) s += v;
  CHECK(s == doctest::Approx(0.0).epsilon(1e-12));

  auto single = ad::constant(Tensor({1, 1, 2, 2}, 1.0));
  CHECK_THROWS_AS(ad::batchnorm(single, gamma, beta, ad::BatchNormMode::kTraining),
                  ShapeError);
  auto eval = ad::batchnorm(single, gamma, beta, ad::BatchNormMode::kEvaluation, {&rm, &rv});
  CHECK(eval->value[0] == doctest::Approx((1.0 - rm[0]) / std::sqrt(rv[0] + 1e-5)));
}

TEST_CASE("zero image through batchnorm stays finite") {
  auto x = ad::constant(Tensor({2, 1, 3, 3}, 0.0));
  auto y = ad::batchnorm(x, ad::constant(Tensor({1}, 1.0)), ad::constant(Tensor({1}, 0.0)),
                         ad::BatchNormMode::kTraining);
  CHECK(y->value.all_finite());
}

TEST_CASE("structural identities") {
  std::mt19937_64 rng(17);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({2, 4}, rng);
  auto c = ad::concat_mode(ad::constant(a), ad::constant(b), 1);
  CHECK(ad::slice0(c, 0, 3)->value.storage() == a.storage());
  CHECK(ad::slice0(c, 3, 5)->value.storage() == b.storage());

  auto v = ad::vectorize(ad::constant(a));
  CHECK(v->value.rank() == 1);
  auto sorted_in = a.storage();
  auto sorted_out = v->value.storage();
  std::sort(sorted_in.begin(), sorted_in.end());
  std::sort(sorted_out.begin(), sorted_out.end());
  CHECK(sorted_in == sorted_out);

  const Tensor img = random_tensor({2, 3, 5}, rng);
  Tensor r = img;
  for (int i = 0; i < 4; ++i) r = ad::rotate90(r, 1);
  CHECK(r.storage() == img.storage());
  CHECK(ad::rotate90(img, 1).shape() == Shape{2, 5, 3});
}

TEST_CASE("rotate90 turns counter-clockwise") {
  const Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK(ad::rotate90(m, 1).storage() == std::vector<double>{2, 4, 1, 3});
  CHECK(ad::rotate90(m, 2).storage() == std::vector<double>{4, 3, 2, 1});
  CHECK(ad::rotate90(m, -1).storage() == ad::rotate90(m, 3).storage());
}

TEST_CASE("backward is linear in the root") {
  std::mt19937_64 rng(23);
  const Tensor x0 = random_tensor({3, 3}, rng);
  auto f = [](const ad::Var& x) { return ad::sum(ad::tanh(ad::matmul(x, x))); };
  auto g = [](const ad::Var& x) { return ad::mean(ad::exp(x)); };
  auto grad = [&](auto fn) {
    auto x = ad::variable(x0);
    ad::backward(fn(x));
    return x->grad;
  };
  const double a = 1.5, b = -0.25;
  const Tensor gf = grad(f), gg = grad(g);
  const Tensor combined = grad([&](const ad::Var& x) {
    return ad::add(ad::scale(f(x), a), ad::scale(g(x), b));
  });
  for (std::size_t i = 0; i < combined.size(); ++i) {
    CHECK(combined[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
  }
}

TEST_CASE("adam with zero gradient leaves parameters and decays moments") {
  ParamStore store;
  store.add_parameter("w", Tensor({2}, 0.5));
  store.adam("w").first_moment = Tensor({2}, 1.0);
  store.adam("w").second_moment = Tensor({2}, 1.0);
  store.adam("w").step = 0;
  // Non-zero moments with a zero gradient still move the parameter; reset
  // them to check the pure zero-gradient case separately.
  adam_step(store, {{"w", Tensor({2}, 0.0)}}, {});
  CHECK(store.adam("w").first_moment[0] == doctest::Approx(0.9));
  CHECK(store.adam("w").second_moment[0] == doctest::Approx(0.999));
  CHECK(store.adam("w").step == 1);

  ParamStore fresh;
  fresh.add_parameter("w", Tensor({2}, 0.5));
  adam_step(fresh, {{"w", Tensor({2}, 0.0)}}, {});
  CHECK(fresh.value("w")[0] == 0.5);
  CHECK(fresh.value("w")[1] == 0.5);
}

TEST_CASE("adam moves against a constant gradient") {
  ParamStore store;
  store.add_parameter("w", Tensor({1}, 0.0));
  double prev = 0.0;
  for (int i = 0; i < 50; ++i) {
    adam_step(store, {{"w", Tensor({1}, 2.0)}}, {});
    CHECK(store.value("w")[0] < prev);
    prev = store.value("w")[0];
  }
}

TEST_CASE("first adam step from zero moments has magnitude lr") {
  ParamStore store;
  store.add_parameter("w", Tensor({1}, 0.0));
  AdamConfig cfg;
  cfg.learning_rate = 1e-3;
  adam_step(store, {{"w", Tensor({1}, 1.0)}}, cfg);
  // m_hat = 1, v_hat = 1 after bias correction.
  CHECK(store.value("w")[0] == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("adam rejects missing or mis-shaped gradients") {
  ParamStore store;
  store.add_parameter("a", Tensor({2}, 0.0));
  store.add_parameter("b", Tensor({2}, 0.0));
  CHECK_THROWS_AS(adam_step(store, {{"a", Tensor({2})}}, {}), ConfigError);
  CHECK_THROWS_AS(adam_step(store, {{"a", Tensor({2})}, {"b", Tensor({3})}}, {}),
                  ShapeError);
}

TEST_CASE("binding collects gradients by name") {
  ParamStore store;
  store.add_parameter("w", Tensor({2}, 3.0));
  store.add_buffer("running", Tensor({2}, 1.0));
  Binding bind(store);
  auto loss = ad::sum(ad::mul(bind("w"), bind("running")));
  ad::backward(loss);
  const GradMap grads = bind.gradients();
  CHECK(grads.size() == 1);
  CHECK(grads.at("w").storage() == std::vector<double>{1.0, 1.0});
}

TEST_CASE("tensor archive round trip is lossless") {
  std::mt19937_64 rng(1);
  ParamStore store;
  store.add_parameter("enc.w", random_tensor({2, 3}, rng));
  store.add_buffer("enc.rm", random_tensor({3}, rng));
  adam_step(store, {{"enc.w", random_tensor({2, 3}, rng)}}, {});
  TensorArchive archive;
  archive.header_json = R"({"hello":1})";
  store_to_archive(store, archive);
  std::stringstream ss;
  write_archive(ss, archive);
  const TensorArchive back = read_archive(ss);
  CHECK(back.header_json == archive.header_json);
  ParamStore other;
  other.add_parameter("enc.w", Tensor({2, 3}));
  other.add_buffer("enc.rm", Tensor({3}));
  store_from_archive(other, back);
  CHECK(other.value("enc.w").storage() == store.value("enc.w").storage());
  CHECK(other.value("enc.rm").storage() == store.value("enc.rm").storage());
  CHECK(other.adam("enc.w").step == 1);
  CHECK(other.adam("enc.w").second_moment.storage() ==
        store.adam("enc.w").second_moment.storage());

  ParamStore mismatched;
  mismatched.add_parameter("enc.w", Tensor({3, 2}));
  CHECK_THROWS_AS(store_from_archive(mismatched, back), ConfigError);

  std::stringstream bad("NOTACKPT");
  CHECK_THROWS_AS(read_archive(bad), DataError);
}
