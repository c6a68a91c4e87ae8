/*
 * Copyright 2026 The Matryoshka Reranker Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "matryoshka/tensor.h"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <thread>

#include "gradient_check.h"
#include "matryoshka/serialization.h"
#include "random_graphs.h"

namespace matryoshka {
namespace {

Tensor M(Shape shape, std::vector<double> data) {
  return Tensor::FromData(std::move(shape), std::move(data));
}

void ExpectValues(const Tensor& t, const std::vector<double>& expected,
                  double tol = 0.0) {
  ASSERT_EQ(t.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_NEAR(t.at(i), expected[i], tol) << "at " << i;
  }
}

TEST(TensorTest, ShapeInvariant) {
  EXPECT_THROW(M({2, 3}, {1, 2, 3}), DimensionError);
  Tensor s = Tensor::Scalar(4.0);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.item(), 4.0);
}

TEST(MatMulTest, IdentityLeavesMatrixUnchanged) {
  Tensor b = M({2, 2}, {1, 2, 3, 4});
  ExpectValues(MatMul(Tensor::Identity(2), b), {1, 2, 3, 4});
}

TEST(MatMulTest, HandComputedColumn) {
  ExpectValues(MatMul(M({2, 2}, {1, 2, 3, 4}), M({2, 1}, {0, 1})), {2, 4});
}

TEST(MatMulTest, ZerosAnnihilate) {
  Tensor c = MatMul(Tensor::Zeros({2, 3}), Tensor::Ones({3, 2}));
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  ExpectValues(c, {0, 0, 0, 0});
}

TEST(MatMulTest, MismatchNamesBothShapes) {
  try {
    MatMul(Tensor::Zeros({2, 3}), Tensor::Zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("and [2x3]"), std::string::npos) << msg;
  }
}

TEST(MatMulTest, BackwardMatchesTransposeFormulas) {
  Tensor a = Tensor::Parameter({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::Parameter({2, 1}, {5, 6});
  Backward(Sum(MatMul(a, b)));
  // dA = 1 * B^T per row, dB = A^T * 1.
  ExpectValues(Tensor::FromData({4}, {a.grad().begin(), a.grad().end()}),
               {5, 6, 5, 6});
  ExpectValues(Tensor::FromData({2}, {b.grad().begin(), b.grad().end()}),
               {4, 6});
}

TEST(SoftmaxTest, UniformInput) {
  ExpectValues(Softmax(M({3}, {0, 0, 0}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3},
               1e-15);
}

TEST(SoftmaxTest, ClosedFormWithLogTwo) {
  ExpectValues(Softmax(M({2}, {0, std::log(2.0)}), 0), {1.0 / 3, 2.0 / 3},
               1e-15);
}

TEST(SoftmaxTest, ShiftInvariance) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(6);
    for (double& v : x) v = u(rng);
    const double c = u(rng) * 100;
    std::vector<double> shifted = x;
    for (double& v : shifted) v += c;
    Tensor a = Softmax(M({2, 3}, x), 1);
    Tensor b = Softmax(M({2, 3}, shifted), 1);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
  }
}

TEST(SoftmaxTest, RowsAreDistributionsOnEitherAxis) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-30, 30);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(12);
    for (double& v : x) v = u(rng);
    for (std::size_t axis : {0u, 1u}) {
      Tensor y = Softmax(M({3, 4}, x), axis);
      const std::size_t slices = axis == 1 ? 3 : 4;
      for (std::size_t s = 0; s < slices; ++s) {
        double total = 0;
        for (std::size_t j = 0; j < (axis == 1 ? 4u : 3u); ++j) {
          const double v = axis == 1 ? y.at(s, j) : y.at(j, s);
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
          total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
      }
    }
  }
}

TEST(SoftmaxTest, LargeInputsStayFinite) {
  Tensor y = Softmax(M({2}, {1000, 1001}), 0);
  EXPECT_TRUE(std::isfinite(y.at(0)));
  EXPECT_NEAR(y.at(0) + y.at(1), 1.0, 1e-15);
}

TEST(SoftmaxTest, EmptyAxisRejected) {
  EXPECT_THROW(Softmax(Tensor::Zeros({0}), 0), DimensionError);
  EXPECT_THROW(Softmax(Tensor::Zeros({2, 2}), 2), DimensionError);
}

TEST(BackwardTest, SumGivesOnes) {
  Tensor x = Tensor::Parameter({2, 3}, {1, -2, 3, 0.5, 7, 9});
  Backward(Sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(BackwardTest, DetachedTensorReceivesNoGradient) {
  Tensor x = Tensor::Parameter({3}, {1, 2, 3});
  Tensor frozen = x.Detach();
  Tensor y = Tensor::Parameter({3}, {1, 1, 1});
  Backward(Sum(Mul(frozen, y)));
  EXPECT_FALSE(x.has_grad());
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_TRUE(y.has_grad());
}

TEST(BackwardTest, NonScalarLossRejected) {
  Tensor x = Tensor::Parameter({2}, {1, 2});
  EXPECT_THROW(Backward(Scale(x, 2.0)), DimensionError);
}

TEST(BackwardTest, NoGradGuardBuildsNoGraph) {
  Tensor x = Tensor::Parameter({2}, {1, 2});
  Tensor y;
  {
    NoGradGuard guard;
    y = Sum(x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
  EXPECT_THROW(Backward(y), std::invalid_argument);
}

TEST(BackwardTest, ThreeOpGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-2, 2);
  auto rand = [&](Shape s) {
    std::vector<double> v(NumElements(s));
    for (double& x : v) x = u(rng);
    return Tensor::Parameter(std::move(s), std::move(v));
  };
  Tensor a = rand({3, 4}), b = rand({4, 2}), g = rand({2});
  auto loss = [&] { return Sum(SiLU(RmsNorm(MatMul(a, b), g))); };
  Backward(loss());
  auto result = testing::CheckGradients([&] { return loss().item(); },
                                        {{"a", a}, {"b", b}, {"g", g}});
  EXPECT_TRUE(result.ok()) << result.mismatches.front().where;
  EXPECT_EQ(result.checked, 12 + 8 + 2);
}

TEST(BackwardTest, RandomGraphsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    testing::RandomGraph graph(seed);
    Backward(graph.Loss());
    auto result = testing::CheckGradients(
        [&] { return graph.Loss().item(); }, graph.leaves());
    ASSERT_TRUE(result.ok())
        << "seed " << seed << ": " << result.mismatches.front().where
        << " autodiff=" << result.mismatches.front().autodiff
        << " numeric=" << result.mismatches.front().numeric;
  }
}

TEST(BackwardTest, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::Parameter({1}, {3.0});
  Tensor y = Mul(x, x);  // dy/dx = 2x
  Backward(Sum(Add(y, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(GradTapeTest, ReplayVisitsEachNodeOnce) {
  Tensor x = Tensor::Parameter({2, 2}, {1, 2, 3, 4});
  Tensor h = MatMul(x, x);
  Tensor loss = Sum(Add(h, Mul(h, x)));
  GradTape tape = GradTape::Record(loss);
  // matmul, mul, add, sum: h is shared but recorded once.
  EXPECT_EQ(tape.nodes().size(), 4u);
  EXPECT_EQ(tape.nodes().front().get(), loss.impl().get());
  for (std::size_t i = 1; i < tape.nodes().size(); ++i) {
    EXPECT_GT(tape.nodes()[i - 1]->node->sequence,
              tape.nodes()[i]->node->sequence);
  }
}

TEST(OpsTest, CrossEntropyOfUniformPair) {
  EXPECT_NEAR(CrossEntropy(M({2}, {1, 1}), 0).item(), std::log(2.0), 1e-15);
  EXPECT_THROW(CrossEntropy(M({2}, {1, 1}), 2), std::out_of_range);
}

TEST(OpsTest, CausalMaskZeroesFutureAttention) {
  Tensor p = Softmax(CausalMask(Tensor::Zeros({3, 3})), 1);
  ExpectValues(p, {1, 0, 0, 0.5, 0.5, 0, 1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
}

TEST(OpsTest, RotaryAtPositionZeroIsIdentity) {
  Tensor x = M({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor y = Rotary(x, 2, 10000.0);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(0, c), x.at(0, c));
  // Rotation preserves the norm of each pair.
  EXPECT_NEAR(std::hypot(y.at(1, 0), y.at(1, 1)), std::hypot(5.0, 6.0), 1e-12);
}

TEST(OpsTest, EmbeddingRejectsOutOfVocabulary) {
  Tensor table = Tensor::Zeros({4, 2});
  const int ids[] = {1, 4};
  EXPECT_THROW(Embedding(table, ids), std::out_of_range);
}

TEST(OpsTest, EmbeddingGradientScattersIntoRows) {
  Tensor table = Tensor::Parameter({3, 2}, {1, 2, 3, 4, 5, 6});
  const int ids[] = {2, 0, 2};
  Backward(Sum(Embedding(table, ids)));
  ExpectValues(Tensor::FromData({6}, {table.grad().begin(), table.grad().end()}),
               {1, 1, 0, 0, 2, 2});
}

TEST(OpsTest, PoolRowsSingletonCopiesBits) {
  Tensor x = M({2, 2}, {-0.0, 1e-300, 3, 4});
  Tensor y = PoolRows(x, {{0}, {1}}, {{1.0}, {1.0}});
  EXPECT_TRUE(std::signbit(y.at(0)));
  EXPECT_EQ(y.at(1), 1e-300);
}

TEST(OpsTest, PoolRowsWeightGradientsMatchFiniteDifferences) {
  Tensor x = Tensor::Parameter({4, 3}, {1, -2, 0.5, 3, 1, -1, 0.2, 0.7, 2, -1, 4, 1});
  Tensor raw = Tensor::Parameter({1, 3}, {0.1, 0.4, -0.3});
  auto loss = [&] {
    Tensor w = Reshape(ConcatCols(std::vector<Tensor>{
                           Softmax(raw, 1), Tensor::Ones({1, 1})}),
                       {4});
    Tensor y = PoolRows(x, {{0, 1, 2}, {3}}, w);
    return Sum(Mul(y, y));
  };
  Backward(loss());
  const auto result = testing::CheckGradients([&] { return loss().item(); },
                                              {{"x", x}, {"raw", raw}});
  EXPECT_EQ(result.checked, 15);
  EXPECT_TRUE(result.ok());
}

TEST(DeterminismTest, IdenticalInputsGiveIdenticalBits) {
  auto run = [] {
    testing::RandomGraph graph(123);
    Tensor loss = graph.Loss();
    Backward(loss);
    std::vector<double> out = {loss.item()};
    for (const auto& [name, leaf] : graph.leaves()) {
      out.insert(out.end(), leaf.grad().begin(), leaf.grad().end());
    }
    return out;
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(double)));
}

TEST(ConcurrencyTest, IndependentGraphsOnThreads) {
  std::vector<double> losses(4);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      testing::RandomGraph graph(static_cast<std::uint64_t>(t));
      Tensor loss = graph.Loss();
      Backward(loss);
      losses[static_cast<std::size_t>(t)] = loss.item();
    });
  }
  for (auto& th : threads) th.join();
  for (int t = 0; t < 4; ++t) {
    testing::RandomGraph graph(static_cast<std::uint64_t>(t));
    EXPECT_EQ(graph.Loss().item(), losses[static_cast<std::size_t>(t)]);
  }
}

TEST(SerializationTest, TensorRecordLayout) {
  std::ostringstream out;
  WriteTensor(out, M({1, 2}, {1.5, -2.0}));
  const std::string bytes = out.str();
  // u32 rank + 2 x u64 dims + 2 x f64.
  ASSERT_EQ(bytes.size(), 4u + 16u + 16u);
  EXPECT_EQ(bytes[0], 2);
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[12], 2);
  double first;
  std::memcpy(&first, bytes.data() + 20, sizeof(double));
  EXPECT_EQ(first, 1.5);
}

TEST(SerializationTest, RoundTripPreservesBits) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 1 + rng() % 5, c = 1 + rng() % 5;
    std::vector<double> v(r * c);
    for (double& x : v) x = u(rng);
    Checkpoint ckpt;
    ckpt.metadata["kind"] = "test";
    ckpt.tensors.emplace_back("w", M({r, c}, v));
    ckpt.tensors.emplace_back("s", Tensor::Scalar(u(rng)));
    std::stringstream buf;
    WriteCheckpoint(buf, ckpt);
    Checkpoint back = ReadCheckpoint(buf);
    EXPECT_EQ(back.metadata["kind"], "test");
    ASSERT_EQ(back.tensors.size(), 2u);
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_EQ(back.tensors[k].first, ckpt.tensors[k].first);
      EXPECT_EQ(back.tensors[k].second.shape(), ckpt.tensors[k].second.shape());
      EXPECT_EQ(0, std::memcmp(back.tensors[k].second.data().data(),
                               ckpt.tensors[k].second.data().data(),
                               ckpt.tensors[k].second.size() * sizeof(double)));
    }
  }
}

TEST(SerializationTest, RejectsGarbage) {
  std::istringstream in("not a checkpoint");
  EXPECT_THROW(ReadCheckpoint(in), FormatError);
}

TEST(SerializationTest, GitBlobHashOfKnownContent) {
  // `printf 'hello\n' | git hash-object --stdin`
  EXPECT_EQ(GitBlobHashOfBytes("hello\n"),
            "ce013625030ba8dba906f756967f9e9ca394464a");
}

}  // namespace
}  // namespace matryoshka
