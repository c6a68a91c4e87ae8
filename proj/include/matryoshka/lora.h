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

// Factorized compensation adapters. A bank holds one V adapter per layer and
// one H adapter per compression factor k = 2..M, for each adapted
// projection. The adapter used at layer l under entry factor k is V_l + H_k,
// added parameter-wise, so it stays rank r.

#ifndef MATRYOSHKA_LORA_H_
#define MATRYOSHKA_LORA_H_

#include <cstdint>
#include <iosfwd>
#include <array>
#include <span>
#include <string>
#include <vector>

#include "matryoshka/distill.h"
#include "matryoshka/kv_text.h"
#include "matryoshka/model.h"
#include "matryoshka/serialization.h"

namespace matryoshka {

// Update scale * A^T B with A [r x d_in], B [r x d_out], scale = alpha / r.
struct LoraAdapter {
  Tensor a;
  Tensor b;
  int rank = 0;
  double alpha = 0.0;

  double scale() const { return alpha / rank; }
  std::size_t d_in() const { return a.dim(1); }
  std::size_t d_out() const { return b.dim(1); }
  // scale * A^T B as a dense [d_in x d_out] matrix.
  Tensor Materialize() const;
  LowRankDelta AsDelta() const { return {a, b, scale()}; }
};

// W + scale * A^T B, materialized. Throws DimensionError on mismatch.
Tensor ApplyAdapter(const Tensor& weight, const LoraAdapter& adapter);

// Input and output widths of a projection.
std::pair<std::size_t, std::size_t> ProjectionDims(const ModelConfig& model,
                                                   Projection p);

struct BankConfig {
  int rank = 4;
  double alpha = 8.0;  // 2 * rank.
  int max_factor = 4;
  std::vector<Projection> targets = {Projection::kQuery, Projection::kValue};
  // Sum the V and H updates instead of adding their parameters.
  bool sum_of_products = false;

  bool ApplyKey(const KvLine& kv);
  nlohmann::json ToJson() const;
  static BankConfig FromJson(const nlohmann::json& j);
};

class AdapterBank {
 public:
  // A ~ N(0, 1/sqrt(d_in)) and B = 0, so a fresh bank is a no-op.
  AdapterBank(const ModelConfig& model, const BankConfig& config,
              std::uint64_t seed);

  const BankConfig& config() const { return config_; }
  const ModelConfig& model_config() const { return model_; }

  // 1-based layer.
  const LoraAdapter& V(int layer, Projection p) const;
  // 2 <= k <= max_factor.
  const LoraAdapter& H(int factor, Projection p) const;

  // V_layer + H_factor parameter-wise; V_layer alone for factor 1. Throws
  // std::out_of_range("factor exceeds trained compensators") past M.
  LoraAdapter Compose(int layer, int factor, Projection p) const;

  // Per executed layer: the composed adapters keyed by the factor at that
  // layer's entry (shape.factors[l - 1]).
  std::vector<LayerAdapters> ForShape(const ShapeConfig& shape) const;

  // Componentwise sum of two banks with identical layouts.
  AdapterBank Plus(const AdapterBank& other) const;

  NamedTensors Parameters() const;
  std::size_t ParameterCount() const;
  void SetRequiresGrad(bool value);
  std::string ParameterChecksum() const;

  Checkpoint ToCheckpoint() const;
  static AdapterBank FromCheckpoint(const Checkpoint& checkpoint);

 private:
  AdapterBank() = default;
  static std::size_t Slot(Projection p) { return static_cast<std::size_t>(p); }

  ModelConfig model_;
  BankConfig config_;
  // v_[layer - 1][projection], h_[k - 2][projection]; absent projections
  // hold empty adapters.
  std::vector<std::array<LoraAdapter, kNumProjections>> v_;
  std::vector<std::array<LoraAdapter, kNumProjections>> h_;
};

struct CompensationConfig {
  TrainConfig train;
  BankConfig bank;

  static CompensationConfig Parse(const std::string& text);
};

// Trains the bank's parameters with the contrastive loss summed over every
// depth of sampled compression schedules. The base model is frozen: its
// parameters stop requiring gradients and are never written.
void TrainCompensation(Reranker& model, AdapterBank& bank,
                       std::span<const TrainBatch> data,
                       const TrainConfig& config, std::ostream* log);

}  // namespace matryoshka

#endif  // MATRYOSHKA_LORA_H_
