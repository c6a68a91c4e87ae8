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

// Compression sweeps, versioned CSV outputs and run manifests.

#ifndef MATRYOSHKA_BENCH_H_
#define MATRYOSHKA_BENCH_H_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "matryoshka/eval.h"

namespace matryoshka {

// Bumped whenever a CSV column changes meaning or position.
inline constexpr int kCsvSchemaVersion = 1;

enum class SweepMode { kHeight, kWidth, kJoint };

SweepMode ParseSweepMode(const std::string& name);
std::string SweepModeName(SweepMode mode);

// A grid of substructures evaluated in order.
//
//   # comment
//   mode: joint
//   seed: 1
//   candidates: 16
//   point: depth=4 compress=2:2     (repeatable; compress=layer:factor)
//   point: depth=4 widths=23,23,12,12
//
// Without `point` lines the default grid of the mode is used.
struct SweepSpec {
  SweepMode mode = SweepMode::kHeight;
  std::vector<ExitSchedule> points;
  std::uint64_t seed = 1;
  // First-stage candidates re-ranked per query.
  int candidates = 16;

  // Height: depths N, N-2, ... down to 1 or 2. Width: full depth with one
  // pooling event at a time. Joint: pooling at layer N/4 with k = 2 and
  // exits at every depth past it.
  static SweepSpec Default(SweepMode mode, const ModelConfig& model);
  static SweepSpec Parse(const std::string& text, const ModelConfig& model);
  std::string ToText() const;
  nlohmann::json ToJson() const;
};

// Stable, comma-free identifier such as "d4_c2k2" or "d4_w23-23-12-12".
std::string PointId(const ExitSchedule& point);

struct SweepRow {
  std::string mode;  // Sweep mode, or "baseline" for the first stage.
  std::string config_id;
  int depth = 0;
  std::string widths;  // Widths joined by '-', empty for the baseline.
  std::optional<double> flops_savings;
  std::optional<double> mrr_at_10;
  std::optional<double> ndcg_at_10;
  std::optional<double> wallclock_ms;
  std::string error;  // Non-empty marks an error row.
};

struct SweepOptions {
  EvalOptions eval;
  // Record wall-clock time; off by default so CSVs are byte-deterministic.
  bool wallclock = false;
};

// Keeps each query's top-m first-stage candidates.
std::vector<QueryRecord> TruncateCandidates(std::span<const QueryRecord> records,
                                            int m);

// Evaluates every grid point in order, then the first-stage baseline. A point
// that fails validation becomes an error row and the sweep continues.
std::vector<SweepRow> RunSweep(const SweepSpec& spec, const Reranker& model,
                               const AdapterBank* bank,
                               std::span<const QueryRecord> records,
                               const SweepOptions& options = {});

// Quotes a field when it holds a comma, quote or line break.
std::string CsvField(const std::string& value);

// Header: schema_version,mode,config_id,depth,widths,flops_savings,
// mrr_at_10,ndcg_at_10,wallclock_ms,error
void WriteSweepCsv(std::ostream& out, std::span<const SweepRow> rows);
// Parses rows written by WriteSweepCsv; throws FormatError on a header or
// schema version mismatch.
std::vector<SweepRow> ReadSweepCsv(std::istream& in);

struct AblationRow {
  std::string variant;
  std::string role;  // "baseline", "upperbound" or "variant".
  double mrr_at_10 = 0.0;
  std::optional<double> rel_perf;
};

// Fills rel_perf for variant rows from the baseline and upperbound rows.
void ComputeRelPerf(std::vector<AblationRow>& rows);

// Header: schema_version,variant,role,mrr_at_10,rel_perf
void WriteAblationCsv(std::ostream& out, std::span<const AblationRow> rows);

// Run manifest: seed, configs and git-style blob hashes of artifacts.
struct RunManifest {
  std::uint64_t seed = 0;
  nlohmann::json configs = nlohmann::json::object();
  // Artifact name -> path; hashed when written.
  std::vector<std::pair<std::string, std::string>> artifacts;

  nlohmann::json ToJson() const;
  void Save(const std::string& path) const;
};

}  // namespace matryoshka

#endif  // MATRYOSHKA_BENCH_H_
