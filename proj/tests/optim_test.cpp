#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "icft/optim/optimizers.hpp"
#include "support.hpp"

namespace {

using namespace icft;
using numerics::Tensor;
using optim::OptimizerError;
using test_support::values;

model::Parameters two_params() {
  model::Parameters p;
  p.tensors.emplace("w", Tensor({3, 4}, 0.5, true));
  p.tensors.emplace("b", Tensor({4}, -0.25, true));
  return p;
}

model::Gradients grads_for(const model::Parameters& p, std::uint64_t seed) {
  Rng rng = make_rng(seed, {});
  model::Gradients g;
  for (const auto& [name, t] : p.tensors) g.emplace(name, test_support::random_tensor(t.shape(), rng, 1.0, false));
  return g;
}

TEST(Adafactor, ZeroGradientLeavesParamsButAdvancesStep) {
  auto p = two_params();
  const auto before = p;
  model::Gradients g{{"w", Tensor({3, 4})}, {"b", Tensor({4})}};
  optim::AdafactorState st;
  optim::adafactor_step(p, g, 1e-2, st);
  optim::adafactor_step(p, g, 1e-2, st);
  EXPECT_EQ(st.step, 2);
  for (const auto& [name, t] : p.tensors) EXPECT_EQ(values(t), values(before.at(name))) << name;
}

TEST(Adafactor, ScalarMatchesHandRecursion) {
  model::Parameters p;
  p.tensors.emplace("s", Tensor({1}, 2.0, true));
  optim::AdafactorState st;
  const double g = 0.3, lr = 0.05;
  double theta = 2.0, v = 0.0;
  // Oracle: varying grads too, to exercise the decay term.
  for (int t = 1; t <= 25; ++t) {
    const double gt = g * (1.0 + 0.1 * std::sin(t));
    optim::adafactor_step(p, {{"s", Tensor({1}, gt)}}, lr, st);
    const double beta = 1.0 - std::pow(double(t), -0.8);
    v = beta * v + (1.0 - beta) * (gt * gt + 1e-30);
    double u = gt / std::sqrt(v);
    u /= std::max(1.0, std::abs(u));
    theta -= lr * u;
    EXPECT_NEAR(p.at("s")[0], theta, 1e-14) << "step " << t;
  }
}

TEST(Adafactor, FactoredMomentIsExactForRankOneSquares) {
  Rng rng = make_rng(3, {});
  const auto a = test_support::random_tensor({5}, rng, 1.0, false);
  const auto b = test_support::random_tensor({7}, rng, 1.0, false);
  Tensor g({5, 7});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 7; ++j) g.at(i, j) = a[i] * b[j];
  model::Parameters p;
  p.tensors.emplace("m", Tensor({5, 7}, 0.0, true));
  optim::AdafactorState st;
  optim::adafactor_step(p, {{"m", g}}, 1e-3, st);
  const auto v = optim::factored_second_moment(st.row.at("m"), st.col.at("m"));
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(v[i], g[i] * g[i], 1e-12 * (g[i] * g[i] + 1e-12));
}

TEST(Adafactor, UpdateRmsIsClipped) {
  model::Parameters p;
  p.tensors.emplace("w", Tensor({2, 3}, 0.0, true));
  optim::AdafactorState st;
  // At step 1 v equals the squared gradient (factored exactly for rank 1), so |u| = 1 everywhere.
  optim::adafactor_step(p, {{"w", Tensor({2, 3}, 4.0)}}, 0.1, st);
  for (double x : p.at("w").data()) EXPECT_NEAR(x, -0.1, 1e-12);
}

TEST(Adafactor, NonFiniteGradientAbortsWithNameAndStep) {
  auto p = two_params();
  const auto before = p;
  optim::AdafactorState st;
  auto g = grads_for(p, 1);
  g.at("b")[2] = std::numeric_limits<double>::quiet_NaN();
  try {
    optim::adafactor_step(p, g, 1e-2, st);
    FAIL() << "expected OptimizerError";
  } catch (const OptimizerError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'b'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
  }
  EXPECT_EQ(st.step, 0);
  for (const auto& [name, t] : p.tensors) EXPECT_EQ(values(t), values(before.at(name)));
}

TEST(Adafactor, RejectsBadLearningRateAndFrozenTensors) {
  auto p = two_params();
  optim::AdafactorState st;
  EXPECT_THROW(optim::adafactor_step(p, grads_for(p, 1), 0.0, st), OptimizerError);
  EXPECT_THROW(optim::adafactor_step(p, grads_for(p, 1), -1.0, st), OptimizerError);
  p.at("b").set_requires_grad(false);
  EXPECT_THROW(optim::adafactor_step(p, grads_for(p, 1), 1e-3, st), OptimizerError);
}

TEST(Adafactor, UpdatesStayFiniteForHugeGradients) {
  auto p = two_params();
  optim::AdafactorState st;
  for (int t = 0; t < 5; ++t) {
    auto g = grads_for(p, t);
    for (auto& [n, x] : g)
      for (auto& v : x.data()) v *= 1e150;
    optim::adafactor_step(p, g, 1e-2, st);
  }
  for (const auto& [name, t] : p.tensors)
    for (double v : t.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Adam, FirstStepMatchesClosedForm) {
  auto p = two_params();
  const auto before = p;
  const auto g = grads_for(p, 5);
  optim::AdamState st;
  const double lr = 3e-3;
  optim::adam_step(p, g, lr, st);
  for (const auto& [name, t] : p.tensors)
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double gi = g.at(name)[i];
      EXPECT_NEAR(t[i], before.at(name)[i] - lr * gi / (std::abs(gi) + 1e-8), 1e-15);
    }
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto p = two_params();
  const auto before = p;
  optim::AdamState st;
  optim::adam_step(p, {{"w", Tensor({3, 4})}, {"b", Tensor({4})}}, 1e-2, st);
  for (const auto& [name, t] : p.tensors) EXPECT_EQ(values(t), values(before.at(name)));
}

TEST(Adam, EqualGradientsGiveEqualUpdates) {
  model::Parameters p;
  p.tensors.emplace("x", Tensor({2}, std::vector<double>{1.0, 1.0}, true));
  optim::AdamState st;
  for (int t = 0; t < 10; ++t) {
    const double g = std::cos(t);
    optim::adam_step(p, {{"x", Tensor({2}, std::vector<double>{g, g})}}, 1e-2, st);
    EXPECT_EQ(p.at("x")[0], p.at("x")[1]);
  }
}

TEST(Adam, NonFiniteGradientAborts) {
  auto p = two_params();
  optim::AdamState st;
  auto g = grads_for(p, 2);
  g.at("w")[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(optim::adam_step(p, g, 1e-3, st), OptimizerError);
  EXPECT_EQ(st.step, 0);
}

class OptimizerKinds : public ::testing::TestWithParam<optim::OptimizerKind> {};

TEST_P(OptimizerKinds, StepsAreDeterministic) {
  auto p1 = two_params(), p2 = two_params();
  optim::Optimizer o1(GetParam()), o2(GetParam());
  for (int t = 0; t < 6; ++t) {
    const auto g = grads_for(p1, t);
    o1.step(p1, g, 1e-2);
    o2.step(p2, g, 1e-2);
  }
  for (const auto& [name, t] : p1.tensors) EXPECT_EQ(values(t), values(p2.at(name)));
}

TEST_P(OptimizerKinds, SaveLoadResumesBitIdentically) {
  const auto dir = std::filesystem::temp_directory_path() / "icft_optim_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / (std::string(optim::to_string(GetParam())) + ".state");
  auto straight = two_params();
  optim::Optimizer o(GetParam());
  for (int t = 0; t < 8; ++t) o.step(straight, grads_for(straight, t), 1e-2);

  auto resumed = two_params();
  optim::Optimizer first(GetParam());
  for (int t = 0; t < 4; ++t) first.step(resumed, grads_for(resumed, t), 1e-2);
  first.save(path);
  auto second = optim::Optimizer::load(path);
  EXPECT_EQ(second.kind(), GetParam());
  EXPECT_EQ(second.steps(), 4);
  for (int t = 4; t < 8; ++t) second.step(resumed, grads_for(resumed, t), 1e-2);
  for (const auto& [name, t] : straight.tensors) EXPECT_EQ(values(t), values(resumed.at(name))) << name;
  std::filesystem::remove_all(dir);
}

TEST_P(OptimizerKinds, OnlyTensorsWithGradientsMove) {
  auto p = two_params();
  p.tensors.emplace("frozen", Tensor({2}, 1.0, false));
  optim::Optimizer o(GetParam());
  o.step(p, grads_for(two_params(), 9), 1e-2);
  EXPECT_EQ(values(p.at("frozen")), std::vector<double>({1.0, 1.0}));
  EXPECT_NE(values(p.at("w")), values(two_params().at("w")));
}

INSTANTIATE_TEST_SUITE_P(All, OptimizerKinds,
                         ::testing::Values(optim::OptimizerKind::adafactor, optim::OptimizerKind::adam),
                         [](const auto& info) { return std::string(optim::to_string(info.param)); });

}  // namespace
