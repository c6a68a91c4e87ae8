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

// Ranking metrics and the relative-performance normalization.

#ifndef MATRYOSHKA_METRICS_H_
#define MATRYOSHKA_METRICS_H_

#include <optional>
#include <span>
#include <vector>

namespace matryoshka {

// Mean over queries of 1/rank when the relevant item is within the top k,
// else 0. Ranks are 1-based; nullopt means not retrieved. Throws
// std::invalid_argument on empty input or a rank < 1.
double MrrAtK(std::span<const std::optional<int>> ranks, int k);

// Mean NDCG@k over queries. Each list holds binary relevance in ranked
// order; a query with no relevant item scores 0.
double NdcgAtK(std::span<const std::vector<int>> ranked_relevance, int k);

// 100 * (light - baseline) / (upper - baseline). Throws
// std::invalid_argument("degenerate upperbound") when upper == baseline.
double RelPerf(double light, double upper, double baseline);

}  // namespace matryoshka

#endif  // MATRYOSHKA_METRICS_H_
