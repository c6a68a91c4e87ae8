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

#include "matryoshka/bench.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "matryoshka/experiment.h"
#include "matryoshka/kv_text.h"
#include "matryoshka/serialization.h"

namespace matryoshka {
namespace {

ModelConfig TinyModel() {
  ModelConfig m;
  m.n_layers = 4;
  m.d_model = 16;
  m.n_heads = 2;
  m.d_ff = 32;
  return m;
}

Dataset TinyData() {
  TaskConfig c;
  c.train_queries = 4;
  c.eval_queries = 12;
  c.doc_len = 10;
  return GenerateTask(c);
}

std::string ToCsv(std::span<const SweepRow> rows) {
  std::ostringstream out;
  WriteSweepCsv(out, rows);
  return out.str();
}

TEST(EvalTest, RerankIsAPermutationOfTheCandidates) {
  const Reranker model(TinyModel(), 3);
  const Dataset d = TinyData();
  for (const QueryRecord& r : d.eval) {
    std::vector<int> got = RerankQuery(model, nullptr, {2, {{1, 2}}}, r);
    std::vector<int> want;
    for (const Candidate& c : r.candidates) want.push_back(c.did);
    std::sort(got.begin(), got.end());
    std::sort(want.begin(), want.end());
    EXPECT_EQ(got, want);
  }
}

TEST(EvalTest, RankOf) {
  const std::vector<int> order = {5, 2, 9};
  EXPECT_EQ(RankOf(order, 2), 2);
  EXPECT_FALSE(RankOf(order, 4).has_value());
}

TEST(EvalTest, ThreadCountDoesNotChangeResults) {
  const Reranker model(TinyModel(), 3);
  const Dataset d = TinyData();
  const EvalResult a = Evaluate(model, nullptr, {3, {}}, d.eval, {1});
  const EvalResult b = Evaluate(model, nullptr, {3, {}}, d.eval, {4});
  EXPECT_EQ(a.mrr_at_10, b.mrr_at_10);
  EXPECT_EQ(a.ndcg_at_10, b.ndcg_at_10);
  EXPECT_EQ(a.config_id, b.config_id);
}

TEST(SweepTest, HeightGridCostIsMonotone) {
  const ModelConfig m = TinyModel();
  const Reranker model(m, 3);
  const Dataset d = TinyData();
  const SweepSpec spec = SweepSpec::Default(SweepMode::kHeight, m);
  const auto rows = RunSweep(spec, model, nullptr, d.eval);
  ASSERT_EQ(rows.size(), spec.points.size() + 1);
  for (std::size_t i = 1; i + 1 < rows.size(); ++i) {
    EXPECT_LE(rows[i].depth, rows[i - 1].depth);
    EXPECT_GE(*rows[i].flops_savings, *rows[i - 1].flops_savings);
  }
  EXPECT_EQ(rows.back().mode, "baseline");
}

TEST(SweepTest, FullScalePointMatchesStandaloneEval) {
  const ModelConfig m = TinyModel();
  const Reranker model(m, 3);
  const Dataset d = TinyData();
  SweepSpec spec;
  spec.mode = SweepMode::kJoint;
  spec.points = {ExitSchedule::FullScale(m)};
  const auto rows = RunSweep(spec, model, nullptr, d.eval);
  const EvalResult direct = Evaluate(model, nullptr, ExitSchedule::FullScale(m), d.eval);
  EXPECT_EQ(*rows[0].mrr_at_10, direct.mrr_at_10);
  EXPECT_EQ(*rows[0].ndcg_at_10, direct.ndcg_at_10);
  EXPECT_EQ(*rows[0].flops_savings, 0.0);
}

TEST(SweepTest, InvalidPointsBecomeErrorRows) {
  const ModelConfig m = TinyModel();
  const Reranker model(m, 3);
  BankConfig bc;
  bc.max_factor = 2;
  const AdapterBank bank(m, bc, 1);
  const Dataset d = TinyData();
  SweepSpec spec;
  spec.mode = SweepMode::kWidth;
  // Depth past the model, an event at the exit layer, a factor the bank
  // lacks, then a valid point.
  spec.points = {{9, {}}, {2, {{2, 2}}}, {4, {{1, 3}}}, {4, {{1, 2}}}};
  const auto rows = RunSweep(spec, model, &bank, d.eval);
  ASSERT_EQ(rows.size(), 5u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_FALSE(rows[static_cast<std::size_t>(i)].error.empty()) << i;
    EXPECT_FALSE(rows[static_cast<std::size_t>(i)].mrr_at_10.has_value());
  }
  EXPECT_TRUE(rows[3].error.empty());
  EXPECT_TRUE(rows[3].mrr_at_10.has_value());
  // Every grid point appears once, in grid order.
  for (std::size_t i = 0; i < spec.points.size(); ++i) {
    EXPECT_EQ(rows[i].config_id, PointId(spec.points[i]));
  }
}

TEST(SweepTest, CsvIsVersionedDeterministicAndRoundTrips) {
  const ModelConfig m = TinyModel();
  const Reranker model(m, 3);
  const Dataset d = TinyData();
  const SweepSpec spec = SweepSpec::Default(SweepMode::kWidth, m);
  const std::string a = ToCsv(RunSweep(spec, model, nullptr, d.eval));
  const std::string b = ToCsv(RunSweep(spec, model, nullptr, d.eval, {{2}, false}));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.substr(0, a.find('\n')),
            "schema_version,mode,config_id,depth,widths,flops_savings,mrr_at_10,"
            "ndcg_at_10,wallclock_ms,error");
  std::istringstream in(a);
  const auto rows = ReadSweepCsv(in);
  EXPECT_EQ(ToCsv(rows), a);
  for (const SweepRow& r : rows) EXPECT_FALSE(r.wallclock_ms.has_value());

  const auto timed = RunSweep(spec, model, nullptr, d.eval, {{}, true});
  EXPECT_TRUE(timed[0].wallclock_ms.has_value());
}

TEST(SweepTest, CsvRejectsOtherSchemaVersions) {
  std::istringstream bad_header("a,b\n");
  EXPECT_THROW(ReadSweepCsv(bad_header), FormatError);
  std::istringstream bad_version(
      "schema_version,mode,config_id,depth,widths,flops_savings,mrr_at_10,"
      "ndcg_at_10,wallclock_ms,error\n99,height,d4,4,,,,,,\n");
  EXPECT_THROW(ReadSweepCsv(bad_version), FormatError);
}

TEST(SweepTest, CsvFieldQuoting) {
  EXPECT_EQ(CsvField("plain"), "plain");
  EXPECT_EQ(CsvField("a,b"), "\"a,b\"");
  EXPECT_EQ(CsvField("say \"hi\""), "\"say \"\"hi\"\"\"");
}

TEST(SweepSpecTest, ParsesPointsAndDefaults) {
  const ModelConfig m;
  const SweepSpec s = SweepSpec::Parse(
      "mode: joint\nseed: 3\ncandidates: 8\n"
      "point: depth=4 compress=2:2\npoint: widths=23,23,12\n",
      m);
  EXPECT_EQ(s.mode, SweepMode::kJoint);
  EXPECT_EQ(s.seed, 3u);
  EXPECT_EQ(s.candidates, 8);
  ASSERT_EQ(s.points.size(), 2u);
  EXPECT_EQ(PointId(s.points[0]), "d4_c2k2");
  EXPECT_EQ(PointId(s.points[1]), "d3_w23-23-12");
  EXPECT_EQ(SweepSpec::Parse(s.ToText(), m).ToText(), s.ToText());

  const SweepSpec h = SweepSpec::Parse("mode: height\n", m);
  std::vector<int> depths;
  for (const auto& p : h.points) depths.push_back(p.depth);
  EXPECT_EQ(depths, (std::vector<int>{8, 6, 4, 2}));
  const SweepSpec j = SweepSpec::Default(SweepMode::kJoint, m);
  const ExitSchedule light = LightweightSchedule(m);
  EXPECT_TRUE(std::any_of(j.points.begin(), j.points.end(), [&](const ExitSchedule& p) {
    return p.depth == light.depth && p.events == light.events;
  }));
}

TEST(SweepSpecTest, ErrorsCiteLine) {
  const ModelConfig m;
  EXPECT_THROW(SweepSpec::Parse("seed: 1\n", m), KvParseError);
  try {
    SweepSpec::Parse("mode: height\npoint: depth=4 compress=2\n", m);
    FAIL();
  } catch (const KvParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(SweepSpec::Parse("mode: diagonal\n", m), KvParseError);
}

TEST(LightweightTest, RecipeSavesMoreThanHalf) {
  const ModelConfig m;
  const ExitSchedule light = LightweightSchedule(m);
  EXPECT_EQ(light.depth, 4);
  ASSERT_EQ(light.events.size(), 1u);
  EXPECT_EQ(light.events[0], (CompressEvent{2, 2}));
  const int len = TaskConfig{}.input_len();
  EXPECT_GE(FlopsEstimate(light.Expand(len), m, len).savings, 0.5);
}

TEST(AblationTest, RelPerfAgainstBaselineAndUpper) {
  std::vector<AblationRow> rows = {{"first_stage", "baseline", 0.2, std::nullopt},
                                   {"specialized", "upperbound", 0.6, std::nullopt},
                                   {"a", "variant", 0.5, std::nullopt},
                                   {"b", "variant", 0.6, std::nullopt}};
  ComputeRelPerf(rows);
  EXPECT_FALSE(rows[0].rel_perf.has_value());
  EXPECT_NEAR(*rows[2].rel_perf, 75.0, 1e-12);
  EXPECT_NEAR(*rows[3].rel_perf, 100.0, 1e-12);
  std::ostringstream out;
  WriteAblationCsv(out, rows);
  EXPECT_EQ(out.str(),
            "schema_version,variant,role,mrr_at_10,rel_perf\n"
            "1,first_stage,baseline,0.200000,\n"
            "1,specialized,upperbound,0.600000,\n"
            "1,a,variant,0.500000,75.000000\n"
            "1,b,variant,0.600000,100.000000\n");
  std::vector<AblationRow> missing = {{"a", "variant", 0.5, std::nullopt}};
  EXPECT_THROW(ComputeRelPerf(missing), std::invalid_argument);
}

TEST(ManifestTest, HashesArtifactsLikeGit) {
  const auto dir = std::filesystem::temp_directory_path() / "matryoshka_manifest_test";
  std::filesystem::create_directories(dir);
  const std::string file = (dir / "hello.txt").string();
  std::ofstream(file) << "hello\n";
  RunManifest m;
  m.seed = 5;
  m.configs = {{"k", 1}};
  m.artifacts = {{"hello", file}};
  const auto j = m.ToJson();
  EXPECT_EQ(j.at("seed"), 5);
  // `git hash-object` of "hello\n".
  EXPECT_EQ(j.at("artifacts").at("hello").at("git_blob_sha1"),
            "ce013625030ba8dba906f756967f9e9ca394464a");
  std::filesystem::remove_all(dir);
}

TEST(ExperimentConfigTest, RoutesKeysToEachSection) {
  const ExperimentConfig c = ExperimentConfig::Parse(
      "n_layers: 4\nd_model: 32\nvocab_size: 48\nkey_vocab: 6\nlr: 0.002\n"
      "rank: 2\nalpha: 4\ncompensation_lr: 0.01\nsafety_shapes: 3\n");
  EXPECT_EQ(c.model.n_layers, 4);
  EXPECT_EQ(c.model.d_model, 32);
  EXPECT_EQ(c.model.vocab_size, 48);
  EXPECT_EQ(c.task.key_vocab, 6);
  EXPECT_EQ(c.train.lr, 0.002);
  EXPECT_EQ(c.bank.rank, 2);
  EXPECT_EQ(c.CompensationTrain().lr, 0.01);
  EXPECT_EQ(c.safety_shapes, 3);
  EXPECT_THROW(ExperimentConfig::Parse("n_heads: 5\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::Parse("doc_len: 80\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::Parse("nonsense: 1\n"), KvParseError);
}

TEST(ExperimentTest, SampledSchedulesAreValidAndRespectTheBank) {
  const ModelConfig m;
  std::mt19937_64 rng(4);
  const std::vector<int> factors = {2, 3, 4};
  const auto shapes = SampleEvalSchedules(rng, m, factors, 3, 0.5, 50);
  ASSERT_EQ(shapes.size(), 50u);
  const int len = TaskConfig{}.input_len();
  for (const ExitSchedule& s : shapes) {
    EXPECT_NO_THROW(ValidateConfig(s.Expand(len), m, len));
    for (const CompressEvent& e : s.events) {
      EXPECT_LE(e.factor, 3);
      EXPECT_LT(e.layer, s.depth);
    }
  }
}

}  // namespace
}  // namespace matryoshka
