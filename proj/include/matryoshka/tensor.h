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

// Dense f64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap, shared handle onto a TensorImpl. Every differentiable
// op creates a new tensor whose Node records the parents and a closure that
// pushes the output gradient back into them. Nodes carry a process-wide
// creation sequence number; since a node is always created after its
// parents, sorting reachable nodes by decreasing sequence yields a valid
// reverse topological order (see GradTape).
//
// Storage is row-major. Broadcasting is limited to what the model needs:
// elementwise ops take equal shapes, scalars go through Scale/AddScalar.

#ifndef MATRYOSHKA_TENSOR_H_
#define MATRYOSHKA_TENSOR_H_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace matryoshka {

using Shape = std::vector<std::size_t>;

std::size_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

// Raised for any shape or rank incompatibility. The message names the
// offending shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorImpl;

struct Node {
  std::string_view op;
  std::uint64_t sequence = 0;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads out.grad and accumulates into the parents' grad buffers.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // Allocated lazily; same size as data.
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  // Returns the grad buffer, zero-allocating it on first use.
  std::vector<double>& MutableGrad();
};

class Tensor {
 public:
  Tensor();  // Scalar zero, no grad.
  explicit Tensor(std::shared_ptr<TensorImpl> impl);

  static Tensor Zeros(Shape shape);
  static Tensor Ones(Shape shape);
  static Tensor Full(Shape shape, double value);
  static Tensor Scalar(double value);
  static Tensor FromData(Shape shape, std::vector<double> data);
  static Tensor Identity(std::size_t n);
  // A leaf that accumulates gradients.
  static Tensor Parameter(Shape shape, std::vector<double> data);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value);
  bool has_grad() const { return !impl_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return impl_->grad; }
  void ZeroGrad();

  bool is_leaf() const { return impl_->node == nullptr; }
  std::string_view op() const;

  // A new tensor sharing no graph history, with a copy of the values.
  Tensor Detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool GradEnabled();

// The reverse-topological replay order of one graph.
class GradTape {
 public:
  static GradTape Record(const Tensor& root);

  // Impls in replay order (root first).
  const std::vector<std::shared_ptr<TensorImpl>>& nodes() const {
    return order_;
  }
  void Replay() const;

 private:
  std::vector<std::shared_ptr<TensorImpl>> order_;
};

// Populates gradients of every requires_grad tensor reachable from `loss`.
// Leaf gradients accumulate across calls; call ZeroGrad between steps.
void Backward(const Tensor& loss);

// ---- Differentiable ops ----------------------------------------------------

Tensor MatMul(const Tensor& a, const Tensor& b);
Tensor Transpose(const Tensor& x);
Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Scale(const Tensor& x, double factor);
Tensor AddScalar(const Tensor& x, double value);
Tensor SiLU(const Tensor& x);
Tensor Exp(const Tensor& x);
Tensor Log(const Tensor& x);
Tensor Reshape(const Tensor& x, Shape shape);

// Sum of every element, as a scalar.
Tensor Sum(const Tensor& x);
Tensor Mean(const Tensor& x);

// Softmax over `axis` (rank 1 or 2), max-subtracted.
Tensor Softmax(const Tensor& x, std::size_t axis);
// Rank-1 log-softmax.
Tensor LogSoftmax(const Tensor& x);
// Rank-1 cross entropy: -log softmax(logits)[target].
Tensor CrossEntropy(const Tensor& logits, std::size_t target);

// Square [n x n] scores: entries above the diagonal become -inf.
Tensor CausalMask(const Tensor& scores);

// Row-wise RMS normalization with a learned per-column gain [d].
Tensor RmsNorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// Row lookup: out[i] = table[ids[i]].
Tensor Embedding(const Tensor& table, std::span<const int> ids);

Tensor SliceCols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor ConcatCols(std::span<const Tensor> parts);
// Row i of a matrix, as [1 x cols].
Tensor Row(const Tensor& x, std::size_t i);
// Element i of any tensor, as a scalar.
Tensor Pick(const Tensor& x, std::size_t i);
// Scalars (or single-element tensors) stacked into a rank-1 tensor.
Tensor Stack(std::span<const Tensor> scalars);

// Rotary position embedding applied independently to each head's slice of
// the columns, using positions 0..rows-1 of the current sequence.
Tensor Rotary(const Tensor& x, std::size_t n_heads, double base);

// Weighted row pooling. Output row r is sum_j weights[r][j] * x[rows[r][j]].
// A single-member group with weight exactly 1 is copied bit-for-bit.
Tensor PoolRows(const Tensor& x, const std::vector<std::vector<std::size_t>>& rows,
                const std::vector<std::vector<double>>& weights);

// As above with differentiable weights: a rank-1 tensor listing every
// group's member weights in order.
Tensor PoolRows(const Tensor& x, const std::vector<std::vector<std::size_t>>& rows,
                const Tensor& weights);

}  // namespace matryoshka

#endif  // MATRYOSHKA_TENSOR_H_
