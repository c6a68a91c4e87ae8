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

#include "matryoshka/metrics.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace matryoshka {

double MrrAtK(std::span<const std::optional<int>> ranks, int k) {
  if (ranks.empty()) throw std::invalid_argument("MrrAtK: no queries");
  double total = 0.0;
  for (const auto& r : ranks) {
    if (!r) continue;
    if (*r < 1) throw std::invalid_argument("MrrAtK: ranks are 1-based");
    if (*r <= k) total += 1.0 / *r;
  }
  return total / static_cast<double>(ranks.size());
}

double NdcgAtK(std::span<const std::vector<int>> ranked_relevance, int k) {
  if (ranked_relevance.empty()) throw std::invalid_argument("NdcgAtK: no queries");
  double total = 0.0;
  for (const auto& rel : ranked_relevance) {
    const auto cut = std::min<std::size_t>(rel.size(), static_cast<std::size_t>(k));
    double dcg = 0.0;
    for (std::size_t i = 0; i < cut; ++i) {
      dcg += rel[i] / std::log2(static_cast<double>(i) + 2.0);
    }
    std::vector<int> ideal = rel;
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t i = 0; i < cut; ++i) {
      idcg += ideal[i] / std::log2(static_cast<double>(i) + 2.0);
    }
    if (idcg > 0.0) total += dcg / idcg;
  }
  return total / static_cast<double>(ranked_relevance.size());
}

double RelPerf(double light, double upper, double baseline) {
  if (upper == baseline) throw std::invalid_argument("degenerate upperbound");
  return 100.0 * (light - baseline) / (upper - baseline);
}

}  // namespace matryoshka
