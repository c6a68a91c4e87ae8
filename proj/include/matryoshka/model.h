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

// Cross-encoder re-ranker with a scoring head after every layer.
//
// The input is rendered as [QRY] q... [DOC] d... [SCORE]. Each layer is a
// pre-norm decoder block (RMS norm, causal multi-head attention with rotary
// positions, gated SiLU MLP). Head i maps the last hidden state of layer i
// to a scalar relevance score, so any prefix of the stack is a complete
// re-ranker. Between layers the sequence may be pooled (see shapes.h);
// rotary positions are recomputed over the pooled sequence.

#ifndef MATRYOSHKA_MODEL_H_
#define MATRYOSHKA_MODEL_H_

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "matryoshka/model_config.h"
#include "matryoshka/serialization.h"
#include "matryoshka/shapes.h"
#include "matryoshka/tensor.h"

namespace matryoshka {

namespace token {
inline constexpr int kPad = 0;
inline constexpr int kQuery = 1;
inline constexpr int kDoc = 2;
inline constexpr int kScore = 3;
inline constexpr int kFirstContent = 4;
}  // namespace token

struct RankerInput {
  std::vector<int> tokens;
  int query_len = 0;  // Content tokens kept after truncation.
  int doc_len = 0;

  int size() const { return static_cast<int>(tokens.size()); }
};

// Lays out [QRY] q [DOC] d [SCORE]. On overflow the document is truncated
// first, then the query; [SCORE] is always the last token. Throws
// ConfigError if max_seq_len cannot hold the three markers.
RankerInput RenderInput(std::span<const int> query, std::span<const int> doc,
                        int max_seq_len);

struct LayerState {
  Tensor hidden;  // [width x d_model], the layer's output before pooling.
  // Attention of the last position toward every position, averaged over
  // heads.
  std::vector<double> last_token_attn;
  Tensor attn_row;  // The same values as a differentiable [1 x width] row.
};

enum class Projection { kQuery, kKey, kValue, kOutput, kGate, kUp, kDown };
inline constexpr int kNumProjections = 7;
const char* ProjectionName(Projection p);
Projection ParseProjection(const std::string& name);

// x W  ->  x W + scale * (x A^T) B, with A [r x d_in] and B [r x d_out].
struct LowRankDelta {
  Tensor a;
  Tensor b;
  double scale = 1.0;
};

// Low-rank updates attached to the projections of one layer. Several deltas
// on the same projection are summed.
struct LayerAdapters {
  std::array<std::vector<LowRankDelta>, kNumProjections> deltas;

  const std::vector<LowRankDelta>& on(Projection p) const {
    return deltas[static_cast<std::size_t>(p)];
  }
  std::vector<LowRankDelta>& on(Projection p) {
    return deltas[static_cast<std::size_t>(p)];
  }
};

// x W plus every delta attached to the projection.
Tensor Project(const Tensor& x, const Tensor& weight,
               const std::vector<LowRankDelta>& deltas);

class Reranker {
 public:
  // Random initialization from `seed`.
  Reranker(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Runs layers 1..shape.depth. `adapters`, when non-empty, holds one entry
  // per executed layer. Throws ShapeError for invalid shapes.
  std::vector<LayerState> ForwardLayers(
      const RankerInput& input, const ShapeConfig& shape,
      std::span<const LayerAdapters> adapters = {}) const;

  // sigma_i for 1-based `layer`, as a scalar tensor.
  Tensor ScoreAtLayer(const std::vector<LayerState>& states, int layer) const;

  // Score at the shape's exit layer.
  Tensor Score(const RankerInput& input, const ShapeConfig& shape,
               std::span<const LayerAdapters> adapters = {}) const;

  // Handles onto the live parameters, in a stable order.
  NamedTensors Parameters() const;
  void SetRequiresGrad(bool value);
  void ZeroGrad();
  // Content hash of every parameter value.
  std::string ParameterChecksum() const;

  Checkpoint ToCheckpoint() const;
  static Reranker FromCheckpoint(const Checkpoint& checkpoint);

 private:
  struct Layer {
    Tensor attn_norm, wq, wk, wv, wo;
    Tensor mlp_norm, w_gate, w_up, w_down;
  };
  struct Head {
    Tensor norm, weight, bias;
  };

  Reranker() = default;
  Tensor RunLayer(const Layer& layer, const Tensor& x,
                  const LayerAdapters* adapters,
                  LayerState* state) const;

  ModelConfig config_;
  Tensor embedding_;
  std::vector<Layer> layers_;
  std::vector<Head> heads_;
};

}  // namespace matryoshka

#endif  // MATRYOSHKA_MODEL_H_
