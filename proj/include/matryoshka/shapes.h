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

// Runtime substructures of the re-ranker: a depth plus the sequence width
// entering each executed layer, together with the attention-guided pooling
// that realizes a width reduction and the multiply-add cost model.
//
// Pooling layout. A sequence of length L is cut into consecutive groups of k
// positions starting at position 0; the last group holds the remaining
// L mod k positions when k does not divide L. Only full groups that do not
// contain the final ([SCORE]) position may be pooled, so every pooled group
// shrinks the sequence by exactly k - 1 and the scoring position always
// survives untouched.

#ifndef MATRYOSHKA_SHAPES_H_
#define MATRYOSHKA_SHAPES_H_

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "matryoshka/model_config.h"
#include "matryoshka/tensor.h"

namespace matryoshka {

enum class ShapeErrorCode {
  kDepthNotPositive,
  kDepthExceedsModel,
  kWidthCountMismatch,
  kInputExceedsMaxLen,
  kFirstWidthNotInput,
  kWidthExceedsMaxLen,
  kWidthsIncreasing,
  kWidthNotPositive,
  kBadFactor,
  kUnreachableWidth,
  kEventOutOfRange,
};

const char* ShapeErrorName(ShapeErrorCode code);

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(ShapeErrorCode code, const std::string& detail);
  ShapeErrorCode code() const { return code_; }

 private:
  ShapeErrorCode code_;
};

struct ShapeConfig {
  int depth = 0;
  // widths[i] is the sequence length entering layer i + 1; widths[0] is the
  // raw input length.
  std::vector<int> widths;
  // factors[i] is the aggregation factor that produced widths[i] from
  // widths[i - 1]; 1 where no pooling happens (always 1 for i = 0).
  std::vector<int> factors;

  static ShapeConfig FullScale(const ModelConfig& model, int input_len);
  // Depth exit without width compression.
  static ShapeConfig FullWidth(int depth, int input_len);
  // Explicit widths with factors derived via DeriveFactor.
  static ShapeConfig FromWidths(std::vector<int> widths);

  bool is_full_width() const;
  // Compact identifier, e.g. "d4:23,23,12,12".
  std::string Id() const;

  bool operator==(const ShapeConfig&) const = default;
};

// Throws ShapeError naming the first violated constraint.
void ValidateConfig(const ShapeConfig& shape, const ModelConfig& model,
                    int input_len);

// Number of full groups of size `factor` that may be pooled in a sequence of
// length `len` (the group holding the last position is excluded).
int PoolableGroups(int len, int factor);
// Length after pooling every poolable group.
int CompressedLength(int len, int factor);
// Whether `target` is exactly reachable from `len` with `factor`.
bool IsReachable(int len, int target, int factor);
// Smallest factor >= ceil(len / target) that reaches `target` exactly.
std::optional<int> DeriveFactor(int len, int target);

// A compression event: pool every poolable group of layer `layer`'s output
// (1-based) with aggregation factor `factor`.
struct CompressEvent {
  int layer = 0;
  int factor = 2;
  bool operator==(const CompressEvent&) const = default;
};

// Expands events into explicit widths. Events are applied in layer order;
// an event on a sequence with no poolable group is a no-op. Throws ShapeError
// for events at or beyond `depth`.
ShapeConfig ExpandEvents(int depth, int input_len,
                         std::vector<CompressEvent> events);

struct PoolGroup {
  int begin = 0;
  int size = 0;
  bool pooled = false;
};

struct CompressionPlan {
  int factor = 2;
  int input_len = 0;
  int output_len = 0;
  // Consecutive layout covering [0, input_len).
  std::vector<PoolGroup> groups;
  // Indices into `groups`, ascending.
  std::vector<int> selected;

  bool is_identity() const { return selected.empty(); }
};

// Chooses the groups with the lowest summed last-token attention (earlier
// group wins ties) until the target length is reached. When the reduction is
// not a multiple of factor - 1 the plan overshoots to the next multiple;
// output_len reports the length actually produced.
CompressionPlan PlanCompression(std::span<const double> last_token_attn,
                                int current_len, int target_len, int factor);

// Pooling weights of one group: softmax over the members' attention values.
std::vector<double> PoolingWeights(std::span<const double> group_attn);

// Applies `plan` to the hidden states [input_len x d]. Selected groups are
// replaced by their attention-weighted average, everything else is copied.
Tensor CompressLayer(const Tensor& hidden,
                     std::span<const double> last_token_attn,
                     const CompressionPlan& plan);

// As above with the attention as a [1 x input_len] tensor; gradients flow
// through the pooling weights.
Tensor CompressLayer(const Tensor& hidden, const Tensor& last_token_attn,
                     const CompressionPlan& plan);

struct LayerFlops {
  double attention = 0.0;
  double mlp = 0.0;
  double head = 0.0;
  double total() const { return attention + mlp + head; }
};

struct FlopsReport {
  double total = 0.0;
  std::vector<LayerFlops> per_layer;
  double savings = 0.0;  // 1 - total / full-scale total.
};

// Multiply-add count of running `shape`: per layer with entry width w,
// attention 2 w^2 d + 4 w d^2, MLP 2 w d d_ff * mlp matrices; the scoring
// head adds d at the exit layer. Softmax and normalization are not counted.
FlopsReport FlopsEstimate(const ShapeConfig& shape, const ModelConfig& model,
                          int input_len);

class ShapeParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parsed shape file, resolved against an input length on demand.
//
//   # comment
//   depth: 4
//   widths: 23,23,12,12          (explicit widths; optional `factors:` line)
//   compress: layer=2 factor=2   (or any number of compression events)
struct ShapeSpec {
  int depth = 0;
  std::vector<int> widths;
  std::vector<int> factors;
  std::vector<CompressEvent> events;

  ShapeConfig Resolve(int input_len) const;
  std::string ToText() const;
};

ShapeSpec ParseShapeSpec(const std::string& text);
ShapeSpec LoadShapeSpec(const std::string& path);

}  // namespace matryoshka

#endif  // MATRYOSHKA_SHAPES_H_
