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

// Re-ranking evaluation over held-out queries.

#ifndef MATRYOSHKA_EVAL_H_
#define MATRYOSHKA_EVAL_H_

#include <span>
#include <string>
#include <vector>

#include "matryoshka/lora.h"
#include "matryoshka/model.h"
#include "matryoshka/task.h"

namespace matryoshka {

inline constexpr int kMetricCutoff = 10;

// A substructure given as exit depth plus compression events, or as explicit
// widths; resolved per input length.
struct ExitSchedule {
  ExitSchedule() = default;
  ExitSchedule(int depth, std::vector<CompressEvent> events = {},
               std::vector<int> widths = {}, std::vector<int> factors = {})
      : depth(depth),
        events(std::move(events)),
        widths(std::move(widths)),
        factors(std::move(factors)) {}

  int depth = 0;
  std::vector<CompressEvent> events;
  std::vector<int> widths;
  std::vector<int> factors;

  static ExitSchedule FullScale(const ModelConfig& model) { return {model.n_layers, {}}; }
  static ExitSchedule FromSpec(const ShapeSpec& spec) {
    return {spec.depth, spec.events, spec.widths, spec.factors};
  }
  ShapeConfig Expand(int input_len) const {
    return ShapeSpec{depth, widths, factors, events}.Resolve(input_len);
  }
};

struct EvalResult {
  std::string config_id;
  int depth = 0;
  double flops_savings = 0.0;
  double mrr_at_10 = 0.0;
  double ndcg_at_10 = 0.0;
  double wallclock_ms = 0.0;
};

struct EvalOptions {
  // Worker threads for independent queries; 0 picks the hardware count.
  int threads = 0;
};

// Candidate ids of one query in re-ranked order: descending score, ties
// kept in first-stage order.
std::vector<int> RerankQuery(const Reranker& model, const AdapterBank* bank,
                             const ExitSchedule& schedule,
                             const QueryRecord& record);

// Re-ranks each query's first-stage list under `schedule`. `bank` may be
// null. Shapes are validated against the first query's input length.
EvalResult Evaluate(const Reranker& model, const AdapterBank* bank,
                    const ExitSchedule& schedule,
                    std::span<const QueryRecord> records,
                    const EvalOptions& options = {});

// Metrics of the first-stage order itself.
EvalResult EvaluateFirstStage(std::span<const QueryRecord> records);

// 1-based rank of the positive in `order`, if present.
std::optional<int> RankOf(std::span<const int> order, int positive_did);

}  // namespace matryoshka

#endif  // MATRYOSHKA_EVAL_H_
