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

#include "matryoshka/eval.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <numeric>
#include <thread>

#include "matryoshka/metrics.h"

namespace matryoshka {
namespace {

std::vector<int> FirstStageOrder(const QueryRecord& r) {
  std::vector<int> ids;
  for (const Candidate& c : FirstStageRetrieve(r.query, r.candidates, r.candidates.size())) {
    ids.push_back(c.did);
  }
  return ids;
}

EvalResult Summarize(const std::vector<std::vector<int>>& orders,
                     std::span<const QueryRecord> records) {
  std::vector<std::optional<int>> ranks;
  std::vector<std::vector<int>> relevance;
  for (std::size_t q = 0; q < records.size(); ++q) {
    ranks.push_back(RankOf(orders[q], records[q].positive_did));
    std::vector<int> rel;
    for (int did : orders[q]) rel.push_back(did == records[q].positive_did ? 1 : 0);
    relevance.push_back(std::move(rel));
  }
  EvalResult r;
  r.mrr_at_10 = MrrAtK(ranks, kMetricCutoff);
  r.ndcg_at_10 = NdcgAtK(relevance, kMetricCutoff);
  return r;
}

}  // namespace

std::optional<int> RankOf(std::span<const int> order, int positive_did) {
  const auto it = std::find(order.begin(), order.end(), positive_did);
  if (it == order.end()) return std::nullopt;
  return static_cast<int>(it - order.begin()) + 1;
}

std::vector<int> RerankQuery(const Reranker& model, const AdapterBank* bank,
                             const ExitSchedule& schedule,
                             const QueryRecord& record) {
  NoGradGuard no_grad;
  const std::vector<Candidate> first =
      FirstStageRetrieve(record.query, record.candidates, record.candidates.size());
  std::vector<double> scores;
  for (const Candidate& c : first) {
    const RankerInput input =
        RenderInput(record.query, c.tokens, model.config().max_seq_len);
    const ShapeConfig shape = schedule.Expand(input.size());
    if (bank != nullptr) {
      scores.push_back(model.Score(input, shape, bank->ForShape(shape)).item());
    } else {
      scores.push_back(model.Score(input, shape).item());
    }
  }
  std::vector<std::size_t> idx(first.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<int> out;
  for (std::size_t i : idx) out.push_back(first[i].did);
  return out;
}

EvalResult Evaluate(const Reranker& model, const AdapterBank* bank,
                    const ExitSchedule& schedule,
                    std::span<const QueryRecord> records,
                    const EvalOptions& options) {
  if (records.empty()) throw std::invalid_argument("Evaluate: no queries");
  const int input_len =
      RenderInput(records[0].query, records[0].candidates[0].tokens,
                  model.config().max_seq_len)
          .size();
  const ShapeConfig shape = schedule.Expand(input_len);
  ValidateConfig(shape, model.config(), input_len);
  // Fails here, not inside a worker, when the bank lacks a factor.
  if (bank != nullptr) bank->ForShape(shape);

  const auto start = std::chrono::steady_clock::now();
  std::vector<std::vector<int>> orders(records.size());
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const auto n_threads = static_cast<std::size_t>(
      std::min<std::size_t>(options.threads > 0 ? static_cast<std::size_t>(options.threads) : hw,
                            records.size()));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t q = next++; q < records.size(); q = next++) {
      orders[q] = RerankQuery(model, bank, schedule, records[q]);
    }
  };
  if (n_threads <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
  }
  const auto stop = std::chrono::steady_clock::now();

  EvalResult r = Summarize(orders, records);
  r.config_id = shape.Id();
  r.depth = shape.depth;
  r.flops_savings = FlopsEstimate(shape, model.config(), input_len).savings;
  r.wallclock_ms = std::chrono::duration<double, std::milli>(stop - start).count();
  return r;
}

EvalResult EvaluateFirstStage(std::span<const QueryRecord> records) {
  if (records.empty()) throw std::invalid_argument("EvaluateFirstStage: no queries");
  std::vector<std::vector<int>> orders;
  for (const QueryRecord& r : records) orders.push_back(FirstStageOrder(r));
  EvalResult r = Summarize(orders, records);
  r.config_id = "first_stage";
  return r;
}

}  // namespace matryoshka
