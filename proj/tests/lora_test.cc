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

#include "matryoshka/lora.h"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <sstream>

namespace matryoshka {
namespace {

ModelConfig Tiny() {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = 16;
  c.max_seq_len = 16;
  c.d_ff = 12;
  return c;
}

void Fill(Tensor t, double value) {
  for (double& v : t.mutable_data()) v = value;
}

void Randomize(AdapterBank& bank, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& [name, t] : bank.Parameters()) {
    for (double& v : t.mutable_data()) v = n(rng);
  }
}

void ExpectEqualTensors(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a.data()[i], b.data()[i], tol) << "at " << i;
  }
}

RankerInput Sample() {
  const std::vector<int> q = {4, 9}, d = {5, 6, 7, 8, 10, 11};
  return RenderInput(q, d, 16);
}

TEST(ComposeTest, ZeroHIsVExactly) {
  AdapterBank bank(Tiny(), BankConfig{}, 1);
  Randomize(bank, 2);
  for (auto& [name, t] : bank.Parameters()) {
    if (name[0] == 'h') Fill(t, 0.0);
  }
  const LoraAdapter c = bank.Compose(2, 3, Projection::kQuery);
  const LoraAdapter& v = bank.V(2, Projection::kQuery);
  for (std::size_t i = 0; i < c.a.size(); ++i) EXPECT_EQ(c.a.data()[i], v.a.data()[i]);
  for (std::size_t i = 0; i < c.b.size(); ++i) EXPECT_EQ(c.b.data()[i], v.b.data()[i]);
}

TEST(ComposeTest, FactorOneIsV) {
  AdapterBank bank(Tiny(), BankConfig{}, 1);
  const LoraAdapter c = bank.Compose(1, 1, Projection::kValue);
  EXPECT_EQ(c.a.impl(), bank.V(1, Projection::kValue).a.impl());
}

TEST(ComposeTest, ParametersAddComponentwise) {
  AdapterBank bank(Tiny(), BankConfig{}, 1);
  Fill(bank.V(1, Projection::kQuery).a, 1.0);
  Fill(bank.H(2, Projection::kQuery).a, 2.0);
  const LoraAdapter c = bank.Compose(1, 2, Projection::kQuery);
  for (double v : c.a.data()) EXPECT_EQ(v, 3.0);
}

TEST(ComposeTest, FactorBeyondBankRejected) {
  AdapterBank bank(Tiny(), BankConfig{}, 1);
  try {
    bank.Compose(1, 5, Projection::kQuery);
    FAIL();
  } catch (const std::out_of_range& e) {
    EXPECT_STREQ(e.what(), "factor exceeds trained compensators");
  }
  EXPECT_THROW(bank.V(1, Projection::kKey), std::out_of_range);
}

TEST(ComposeTest, IsLinearInTheBank) {
  AdapterBank b1(Tiny(), BankConfig{}, 1), b2(Tiny(), BankConfig{}, 2);
  Randomize(b1, 3);
  Randomize(b2, 4);
  const AdapterBank sum = b1.Plus(b2);
  for (int layer = 1; layer <= 3; ++layer) {
    for (int k = 1; k <= 4; ++k) {
      const auto c = sum.Compose(layer, k, Projection::kValue);
      const auto c1 = b1.Compose(layer, k, Projection::kValue);
      const auto c2 = b2.Compose(layer, k, Projection::kValue);
      ExpectEqualTensors(c.a, Add(c1.a, c2.a), 1e-15);
      ExpectEqualTensors(c.b, Add(c1.b, c2.b), 1e-15);
    }
  }
}

TEST(ApplyTest, RankOneUnitVectorsPerturbOneEntry) {
  const std::size_t i = 2, j = 5;
  std::vector<double> a(8, 0.0), b(8, 0.0);
  a[i] = 1.0;
  b[j] = 1.0;
  const LoraAdapter adapter{Tensor::FromData({1, 8}, a), Tensor::FromData({1, 8}, b), 1, 1.0};
  const Tensor w = Tensor::Full({8, 8}, 0.5);
  const Tensor out = ApplyAdapter(w, adapter);
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_EQ(out.at(r, c), r == i && c == j ? 1.5 : 0.5);
    }
  }
  EXPECT_THROW(ApplyAdapter(Tensor::Zeros({8, 7}), adapter), DimensionError);
}

TEST(ApplyTest, UpdateRankBoundedByR) {
  BankConfig config;
  config.rank = 3;
  config.alpha = 6;
  config.targets = {Projection::kQuery, Projection::kUp};
  AdapterBank bank(Tiny(), config, 5);
  Randomize(bank, 6);
  for (Projection p : config.targets) {
    const Tensor m = bank.Compose(2, 3, p).Materialize();
    Eigen::MatrixXd dense(m.dim(0), m.dim(1));
    for (std::size_t r = 0; r < m.dim(0); ++r) {
      for (std::size_t c = 0; c < m.dim(1); ++c) dense(r, c) = m.at(r, c);
    }
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(dense);
    const auto& sv = svd.singularValues();
    EXPECT_GT(sv(2), 1e-8);
    for (Eigen::Index k = 3; k < sv.size(); ++k) EXPECT_LT(sv(k), 1e-10 * sv(0));
  }
}

TEST(ApplyTest, ApplyThenRemoveRestoresWeight) {
  AdapterBank bank(Tiny(), BankConfig{}, 1);
  Randomize(bank, 7);
  const LoraAdapter a = bank.Compose(3, 2, Projection::kQuery);
  Tensor w;
  for (const auto& [name, t] : Reranker(Tiny(), 2).Parameters()) {
    if (name == "layers.2.wq") w = t;
  }
  ASSERT_EQ(w.shape(), (Shape{8, 8}));
  const Tensor back = Sub(ApplyAdapter(w, a), a.Materialize());
  ExpectEqualTensors(back, w, 1e-12);
}

TEST(BankTest, ParameterCountMatchesFormula) {
  const ModelConfig model;
  BankConfig config;
  config.rank = 4;
  const AdapterBank bank(model, config, 1);
  // (N + M - 1) adapters per projection, 2 d r parameters each.
  EXPECT_EQ(bank.ParameterCount(), static_cast<std::size_t>((8 + 4 - 1) * 2 * 2 * 64 * 4));
}

TEST(BankTest, FreshBankIsNoOp) {
  const Reranker model(Tiny(), 3);
  const AdapterBank bank(Tiny(), BankConfig{}, 4);
  const auto in = Sample();
  const auto shape = ExpandEvents(3, in.size(), {{1, 2}});
  EXPECT_NEAR(model.Score(in, shape).item(),
              model.Score(in, shape, bank.ForShape(shape)).item(), 1e-12);
}

TEST(BankTest, FactoredForwardMatchesMaterializedWeights) {
  BankConfig config;
  config.targets = {Projection::kQuery, Projection::kValue, Projection::kDown};
  AdapterBank bank(Tiny(), config, 4);
  Randomize(bank, 9);
  Reranker model(Tiny(), 3);
  const auto in = Sample();
  const auto shape = ExpandEvents(3, in.size(), {{2, 3}});
  const double factored = model.Score(in, shape, bank.ForShape(shape)).item();

  for (auto& [name, t] : model.Parameters()) {
    for (int l = 1; l <= 3; ++l) {
      for (Projection p : config.targets) {
        if (name != "layers." + std::to_string(l - 1) + "." + ProjectionName(p)) continue;
        const Tensor merged = ApplyAdapter(t, bank.Compose(l, shape.factors[l - 1], p));
        std::copy(merged.data().begin(), merged.data().end(), t.mutable_data().begin());
      }
    }
  }
  EXPECT_NEAR(model.Score(in, shape).item(), factored, 1e-12);
}

TEST(BankTest, SumOfProductsDiffersFromParameterSum) {
  BankConfig config;
  AdapterBank bank(Tiny(), config, 4);
  Randomize(bank, 10);
  config.sum_of_products = true;
  Checkpoint ckpt = bank.ToCheckpoint();
  ckpt.metadata["bank"]["compose"] = "products";
  const AdapterBank products = AdapterBank::FromCheckpoint(ckpt);
  const auto shape = ExpandEvents(3, 10, {{1, 2}});
  const auto layers = products.ForShape(shape);
  EXPECT_EQ(layers[1].on(Projection::kQuery).size(), 2u);
  EXPECT_EQ(layers[0].on(Projection::kQuery).size(), 1u);
  EXPECT_EQ(bank.ForShape(shape)[1].on(Projection::kQuery).size(), 1u);
}

TEST(BankTest, CheckpointRoundTripWithManifest) {
  AdapterBank bank(Tiny(), BankConfig{}, 4);
  Randomize(bank, 11);
  std::stringstream buf;
  WriteCheckpoint(buf, bank.ToCheckpoint());
  const Checkpoint ckpt = ReadCheckpoint(buf);
  EXPECT_EQ(ckpt.metadata.at("manifest").size(), static_cast<std::size_t>((3 + 3) * 2));
  EXPECT_EQ(ckpt.metadata.at("manifest")[0].at("projection"), "wq");
  EXPECT_EQ(AdapterBank::FromCheckpoint(ckpt).ParameterChecksum(), bank.ParameterChecksum());
  EXPECT_THROW(AdapterBank::FromCheckpoint(Reranker(Tiny(), 1).ToCheckpoint()), FormatError);
}

TEST(CompensationConfigTest, MixesBankAndTrainingKeys) {
  const auto c = CompensationConfig::Parse(
      "rank: 2\nalpha: 4\ntargets: wq, w_up\ncompose: products\nlr: 0.5\n");
  EXPECT_EQ(c.bank.rank, 2);
  EXPECT_EQ(c.bank.targets, (std::vector<Projection>{Projection::kQuery, Projection::kUp}));
  EXPECT_TRUE(c.bank.sum_of_products);
  EXPECT_EQ(c.train.lr, 0.5);
  EXPECT_THROW(CompensationConfig::Parse("targets: wz\n"), KvParseError);
}

std::vector<TrainBatch> TinyData() {
  std::vector<TrainBatch> data;
  for (int qi = 0; qi < 4; ++qi) {
    TrainBatch b;
    const std::vector<int> q = {4 + qi, 9};
    for (int c = 0; c < 3; ++c) {
      std::vector<int> d;
      for (int i = 0; i < 6; ++i) d.push_back(4 + (i * (c + 2) + c + qi) % 12);
      b.candidates.push_back(RenderInput(q, d, 16));
    }
    b.gt = qi % 3;
    data.push_back(b);
  }
  return data;
}

TEST(TrainCompensationTest, ZeroStepsLeaveBankUnchanged) {
  Reranker model(Tiny(), 3);
  AdapterBank bank(Tiny(), BankConfig{}, 4);
  const std::string before = bank.ParameterChecksum();
  TrainCompensation(model, bank, {}, TrainConfig{}, nullptr);
  EXPECT_EQ(bank.ParameterChecksum(), before);
}

TEST(TrainCompensationTest, OnlyAdaptersMove) {
  Reranker model(Tiny(), 3);
  model.SetRequiresGrad(true);
  AdapterBank bank(Tiny(), BankConfig{}, 4);
  const std::string base = model.ParameterChecksum();
  const std::string adapters = bank.ParameterChecksum();
  TrainConfig config;
  config.batch_size = 2;
  config.event_prob = 0.5;
  TrainCompensation(model, bank, TinyData(), config, nullptr);
  EXPECT_EQ(model.ParameterChecksum(), base);
  EXPECT_NE(bank.ParameterChecksum(), adapters);
  for (const auto& [name, t] : model.Parameters()) {
    EXPECT_FALSE(t.requires_grad()) << name;
    for (double g : t.grad()) EXPECT_EQ(g, 0.0) << name;
  }
}

}  // namespace
}  // namespace matryoshka
