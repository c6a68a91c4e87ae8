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

#include "matryoshka/tensor.h"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace matryoshka {
namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutableMap = Eigen::Map<RowMatrix>;

std::atomic<std::uint64_t> g_next_sequence{1};
thread_local bool t_grad_enabled = true;

using BackwardFn = std::function<void(const TensorImpl& out)>;

// Builds the result of an op. The graph node is only attached when grad mode
// is on and some parent requires a gradient.
Tensor MakeResult(Shape shape, std::vector<double> data, std::string_view op,
                  std::vector<std::shared_ptr<TensorImpl>> parents,
                  BackwardFn backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs_grad = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs_grad = needs_grad || p->requires_grad;
  }
  if (needs_grad) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = op;
    node->sequence = g_next_sequence.fetch_add(1, std::memory_order_relaxed);
    node->parents = std::move(parents);
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

void RequireRank(const Tensor& x, std::size_t rank, std::string_view op) {
  if (x.rank() != rank) {
    std::ostringstream msg;
    msg << op << ": expected rank " << rank << ", got shape "
        << ShapeToString(x.shape());
    throw DimensionError(msg.str());
  }
}

void RequireSameShape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    std::ostringstream msg;
    msg << op << ": shape mismatch " << ShapeToString(a.shape()) << " vs "
        << ShapeToString(b.shape());
    throw DimensionError(msg.str());
  }
}

// Applies `fn(out_grad_i, in_grad_i_ref)` when the parent needs gradients.
template <typename Fn>
void Accumulate(TensorImpl* parent, Fn&& fn) {
  if (!parent->requires_grad) return;
  fn(parent->MutableGrad());
}

}  // namespace

std::size_t NumElements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << "x";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

std::vector<double>& TensorImpl::MutableGrad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor() : Tensor(Scalar(0.0)) {}

Tensor::Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor Tensor::Zeros(Shape shape) { return Full(std::move(shape), 0.0); }

Tensor Tensor::Ones(Shape shape) { return Full(std::move(shape), 1.0); }

Tensor Tensor::Full(Shape shape, double value) {
  const std::size_t n = NumElements(shape);
  return FromData(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::Scalar(double value) { return FromData({}, {value}); }

Tensor Tensor::FromData(Shape shape, std::vector<double> data) {
  if (NumElements(shape) != data.size()) {
    std::ostringstream msg;
    msg << "FromData: shape " << ShapeToString(shape) << " needs "
        << NumElements(shape) << " values, got " << data.size();
    throw DimensionError(msg.str());
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::Identity(std::size_t n) {
  Tensor eye = Zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) eye.mutable_data()[i * n + i] = 1.0;
  return eye;
}

Tensor Tensor::Parameter(Shape shape, std::vector<double> data) {
  Tensor t = FromData(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + ShapeToString(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on non-scalar shape " +
                         ShapeToString(shape()));
  }
  return impl_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  RequireRank(*this, 2, "at");
  return impl_->data.at(row * impl_->shape[1] + col);
}

void Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

void Tensor::ZeroGrad() {
  if (!impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
}

std::string_view Tensor::op() const {
  return impl_->node ? impl_->node->op : std::string_view("leaf");
}

Tensor Tensor::Detach() const { return FromData(shape(), impl_->data); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) {
  t_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool GradEnabled() { return t_grad_enabled; }

GradTape GradTape::Record(const Tensor& root) {
  GradTape tape;
  std::unordered_set<const TensorImpl*> seen;
  std::vector<std::shared_ptr<TensorImpl>> stack = {root.impl()};
  while (!stack.empty()) {
    auto impl = std::move(stack.back());
    stack.pop_back();
    if (!impl->node || !seen.insert(impl.get()).second) continue;
    for (const auto& parent : impl->node->parents) stack.push_back(parent);
    tape.order_.push_back(std::move(impl));
  }
  // Children are always created after their parents.
  std::sort(tape.order_.begin(), tape.order_.end(),
            [](const auto& a, const auto& b) {
              return a->node->sequence > b->node->sequence;
            });
  return tape;
}

void GradTape::Replay() const {
  for (const auto& impl : order_) {
    if (impl->grad.empty()) continue;  // Nothing flows from here.
    impl->node->backward(*impl);
  }
}

void Backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw DimensionError("Backward: loss must be a scalar, got shape " +
                         ShapeToString(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("Backward: loss has no gradient graph");
  }
  auto& seed = loss.impl()->MutableGrad();
  seed[0] += 1.0;
  if (loss.is_leaf()) return;
  GradTape::Record(loss).Replay();
}

// ---- Ops -------------------------------------------------------------------

Tensor MatMul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("MatMul: incompatible shapes " +
                         ShapeToString(a.shape()) + " and " +
                         ShapeToString(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MutableMap(out.data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return MakeResult(
      {m, n}, std::move(out), "matmul", {a.impl(), b.impl()},
      [pa, pb, m, k, n](const TensorImpl& o) {
        ConstMap dc(o.grad.data(), m, n);
        Accumulate(pa, [&](std::vector<double>& g) {
          MutableMap(g.data(), m, k).noalias() +=
              dc * ConstMap(pb->data.data(), k, n).transpose();
        });
        Accumulate(pb, [&](std::vector<double>& g) {
          MutableMap(g.data(), k, n).noalias() +=
              ConstMap(pa->data.data(), m, k).transpose() * dc;
        });
      });
}

Tensor Transpose(const Tensor& x) {
  RequireRank(x, 2, "Transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  MutableMap(out.data(), n, m) = ConstMap(x.data().data(), m, n).transpose();
  TensorImpl* px = x.impl().get();
  return MakeResult({n, m}, std::move(out), "transpose", {x.impl()},
                    [px, m, n](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        MutableMap(g.data(), m, n) +=
                            ConstMap(o.grad.data(), n, m).transpose();
                      });
                    });
}

Tensor Add(const Tensor& a, const Tensor& b) {
  RequireSameShape(a, b, "Add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return MakeResult(a.shape(), std::move(out), "add", {a.impl(), b.impl()},
                    [pa, pb](const TensorImpl& o) {
                      for (TensorImpl* p : {pa, pb}) {
                        Accumulate(p, [&](std::vector<double>& g) {
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            g[i] += o.grad[i];
                          }
                        });
                      }
                    });
}

Tensor Sub(const Tensor& a, const Tensor& b) {
  RequireSameShape(a, b, "Sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return MakeResult(a.shape(), std::move(out), "sub", {a.impl(), b.impl()},
                    [pa, pb](const TensorImpl& o) {
                      Accumulate(pa, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += o.grad[i];
                        }
                      });
                      Accumulate(pb, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] -= o.grad[i];
                        }
                      });
                    });
}

Tensor Mul(const Tensor& a, const Tensor& b) {
  RequireSameShape(a, b, "Mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return MakeResult(a.shape(), std::move(out), "mul", {a.impl(), b.impl()},
                    [pa, pb](const TensorImpl& o) {
                      Accumulate(pa, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += o.grad[i] * pb->data[i];
                        }
                      });
                      Accumulate(pb, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += o.grad[i] * pa->data[i];
                        }
                      });
                    });
}

Tensor Scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= factor;
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "scale", {x.impl()},
                    [px, factor](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += factor * o.grad[i];
                        }
                      });
                    });
}

Tensor AddScalar(const Tensor& x, double value) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v += value;
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "add_scalar", {x.impl()},
                    [px](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += o.grad[i];
                        }
                      });
                    });
}

Tensor SiLU(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.at(i);
    out[i] = v / (1.0 + std::exp(-v));
  }
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "silu", {x.impl()},
                    [px](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double v = px->data[i];
                          const double s = 1.0 / (1.0 + std::exp(-v));
                          g[i] += o.grad[i] * s * (1.0 + v * (1.0 - s));
                        }
                      });
                    });
}

Tensor Exp(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.at(i));
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "exp", {x.impl()},
                    [px](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += o.grad[i] * o.data[i];
                        }
                      });
                    });
}

Tensor Log(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x.at(i));
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "log", {x.impl()},
                    [px](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += o.grad[i] / px->data[i];
                        }
                      });
                    });
}

Tensor Reshape(const Tensor& x, Shape shape) {
  if (NumElements(shape) != x.size()) {
    throw DimensionError("Reshape: cannot view " + ShapeToString(x.shape()) +
                         " as " + ShapeToString(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  TensorImpl* px = x.impl().get();
  return MakeResult(std::move(shape), std::move(out), "reshape", {x.impl()},
                    [px](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += o.grad[i];
                        }
                      });
                    });
}

Tensor Sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  TensorImpl* px = x.impl().get();
  return MakeResult({}, {total}, "sum", {x.impl()},
                    [px](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (double& v : g) v += o.grad[0];
                      });
                    });
}

Tensor Mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("Mean: empty tensor");
  return Scale(Sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor Softmax(const Tensor& x, std::size_t axis) {
  if (x.rank() == 0 || x.rank() > 2 || axis >= x.rank()) {
    throw DimensionError("Softmax: invalid axis " + std::to_string(axis) +
                         " for shape " + ShapeToString(x.shape()));
  }
  const std::size_t len = x.dim(axis);
  if (len == 0) throw DimensionError("Softmax: empty axis");
  // Slices are described by (count, stride between elements, slice offset).
  const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
  const std::size_t cols = x.rank() == 1 ? x.dim(0) : x.dim(1);
  const bool along_rows = x.rank() == 1 || axis == 1;
  const std::size_t slices = along_rows ? rows : cols;
  const std::size_t stride = along_rows ? 1 : cols;
  auto offset = [=](std::size_t s) { return along_rows ? s * cols : s; };

  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t s = 0; s < slices; ++s) {
    const std::size_t base = offset(s);
    double max_v = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) {
      max_v = std::max(max_v, in[base + j * stride]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double e = std::exp(in[base + j * stride] - max_v);
      out[base + j * stride] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < len; ++j) out[base + j * stride] /= denom;
  }
  TensorImpl* px = x.impl().get();
  return MakeResult(
      x.shape(), std::move(out), "softmax", {x.impl()},
      [px, slices, len, stride, offset](const TensorImpl& o) {
        Accumulate(px, [&](std::vector<double>& g) {
          for (std::size_t s = 0; s < slices; ++s) {
            const std::size_t base = offset(s);
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t i = base + j * stride;
              dot += o.grad[i] * o.data[i];
            }
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t i = base + j * stride;
              g[i] += o.data[i] * (o.grad[i] - dot);
            }
          }
        });
      });
}

Tensor LogSoftmax(const Tensor& x) {
  RequireRank(x, 1, "LogSoftmax");
  if (x.size() == 0) throw DimensionError("LogSoftmax: empty input");
  const auto in = x.data();
  const double max_v = *std::max_element(in.begin(), in.end());
  double denom = 0.0;
  for (double v : in) denom += std::exp(v - max_v);
  const double lse = max_v + std::log(denom);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] - lse;
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "log_softmax", {x.impl()},
                    [px](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        double total = 0.0;
                        for (double v : o.grad) total += v;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += o.grad[i] - std::exp(o.data[i]) * total;
                        }
                      });
                    });
}

Tensor CrossEntropy(const Tensor& logits, std::size_t target) {
  RequireRank(logits, 1, "CrossEntropy");
  if (target >= logits.size()) {
    throw std::out_of_range("CrossEntropy: target " + std::to_string(target) +
                            " out of range for " +
                            std::to_string(logits.size()) + " logits");
  }
  return Scale(Pick(LogSoftmax(logits), target), -1.0);
}

Tensor CausalMask(const Tensor& scores) {
  RequireRank(scores, 2, "CausalMask");
  const std::size_t n = scores.dim(0);
  if (scores.dim(1) != n) {
    throw DimensionError("CausalMask: expected square scores, got " +
                         ShapeToString(scores.shape()));
  }
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      out[i * n + j] = -std::numeric_limits<double>::infinity();
    }
  }
  TensorImpl* px = scores.impl().get();
  return MakeResult(scores.shape(), std::move(out), "causal_mask",
                    {scores.impl()}, [px, n](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < n; ++i) {
                          for (std::size_t j = 0; j <= i; ++j) {
                            g[i * n + j] += o.grad[i * n + j];
                          }
                        }
                      });
                    });
}

Tensor RmsNorm(const Tensor& x, const Tensor& gain, double eps) {
  RequireRank(x, 2, "RmsNorm");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (gain.size() != d) {
    throw DimensionError("RmsNorm: gain " + ShapeToString(gain.shape()) +
                         " does not match input " + ShapeToString(x.shape()));
  }
  std::vector<double> inv_rms(rows);
  std::vector<double> out(x.size());
  const auto in = x.data();
  const auto g = gain.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += in[r * d + c] * in[r * d + c];
    inv_rms[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t c = 0; c < d; ++c) {
      out[r * d + c] = in[r * d + c] * inv_rms[r] * g[c];
    }
  }
  TensorImpl* px = x.impl().get();
  TensorImpl* pg = gain.impl().get();
  return MakeResult(
      x.shape(), std::move(out), "rms_norm", {x.impl(), gain.impl()},
      [px, pg, rows, d, inv_rms = std::move(inv_rms)](const TensorImpl& o) {
        Accumulate(pg, [&](std::vector<double>& gg) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
              gg[c] += o.grad[r * d + c] * px->data[r * d + c] * inv_rms[r];
            }
          }
        });
        Accumulate(px, [&](std::vector<double>& gx) {
          for (std::size_t r = 0; r < rows; ++r) {
            const double ir = inv_rms[r];
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              dot += o.grad[r * d + c] * pg->data[c] * px->data[r * d + c];
            }
            const double coeff = ir * ir * ir * dot / static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              gx[r * d + c] += ir * pg->data[c] * o.grad[r * d + c] -
                               px->data[r * d + c] * coeff;
            }
          }
        });
      });
}

Tensor Embedding(const Tensor& table, std::span<const int> ids) {
  RequireRank(table, 2, "Embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("Embedding: token id " + std::to_string(ids[i]) +
                              " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d),
                d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  TensorImpl* pt = table.impl().get();
  std::vector<int> saved(ids.begin(), ids.end());
  return MakeResult({ids.size(), d}, std::move(out), "embedding",
                    {table.impl()},
                    [pt, d, saved = std::move(saved)](const TensorImpl& o) {
                      Accumulate(pt, [&](std::vector<double>& g) {
                        for (std::size_t i = 0; i < saved.size(); ++i) {
                          const std::size_t row =
                              static_cast<std::size_t>(saved[i]);
                          for (std::size_t c = 0; c < d; ++c) {
                            g[row * d + c] += o.grad[i * d + c];
                          }
                        }
                      });
                    });
}

Tensor SliceCols(const Tensor& x, std::size_t begin, std::size_t count) {
  RequireRank(x, 2, "SliceCols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin + count > cols) {
    throw DimensionError("SliceCols: columns [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") exceed shape " +
                         ShapeToString(x.shape()));
  }
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < count; ++c) {
      out[r * count + c] = x.data()[r * cols + begin + c];
    }
  }
  TensorImpl* px = x.impl().get();
  return MakeResult({rows, count}, std::move(out), "slice_cols", {x.impl()},
                    [px, rows, cols, begin, count](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t c = 0; c < count; ++c) {
                            g[r * cols + begin + c] += o.grad[r * count + c];
                          }
                        }
                      });
                    });
}

Tensor ConcatCols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("ConcatCols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  for (const Tensor& p : parts) {
    RequireRank(p, 2, "ConcatCols");
    if (p.dim(0) != rows) {
      throw DimensionError("ConcatCols: row mismatch " +
                           ShapeToString(parts.front().shape()) + " vs " +
                           ShapeToString(p.shape()));
    }
    widths.push_back(p.dim(1));
    cols += p.dim(1);
    parents.push_back(p.impl());
  }
  std::vector<double> out(rows * cols);
  std::size_t col0 = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < widths[k]; ++c) {
        out[r * cols + col0 + c] = src[r * widths[k] + c];
      }
    }
    col0 += widths[k];
  }
  std::vector<TensorImpl*> raw;
  for (const auto& p : parents) raw.push_back(p.get());
  return MakeResult(
      {rows, cols}, std::move(out), "concat_cols", std::move(parents),
      [raw = std::move(raw), widths = std::move(widths), rows,
       cols](const TensorImpl& o) {
        std::size_t col0 = 0;
        for (std::size_t k = 0; k < raw.size(); ++k) {
          Accumulate(raw[k], [&](std::vector<double>& g) {
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < widths[k]; ++c) {
                g[r * widths[k] + c] += o.grad[r * cols + col0 + c];
              }
            }
          });
          col0 += widths[k];
        }
      });
}

Tensor Row(const Tensor& x, std::size_t i) {
  RequireRank(x, 2, "Row");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (i >= rows) {
    throw std::out_of_range("Row: index " + std::to_string(i) +
                            " out of range for shape " +
                            ShapeToString(x.shape()));
  }
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(i * cols),
                          x.data().begin() +
                              static_cast<std::ptrdiff_t>((i + 1) * cols));
  TensorImpl* px = x.impl().get();
  return MakeResult({1, cols}, std::move(out), "row", {x.impl()},
                    [px, i, cols](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        for (std::size_t c = 0; c < cols; ++c) {
                          g[i * cols + c] += o.grad[c];
                        }
                      });
                    });
}

Tensor Pick(const Tensor& x, std::size_t i) {
  if (i >= x.size()) {
    throw std::out_of_range("Pick: index " + std::to_string(i) +
                            " out of range for shape " +
                            ShapeToString(x.shape()));
  }
  TensorImpl* px = x.impl().get();
  return MakeResult({}, {x.at(i)}, "pick", {x.impl()},
                    [px, i](const TensorImpl& o) {
                      Accumulate(px, [&](std::vector<double>& g) {
                        g[i] += o.grad[0];
                      });
                    });
}

Tensor Stack(std::span<const Tensor> scalars) {
  std::vector<double> out;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::vector<TensorImpl*> raw;
  for (const Tensor& s : scalars) {
    if (s.size() != 1) {
      throw DimensionError("Stack: expected single-element tensors, got " +
                           ShapeToString(s.shape()));
    }
    out.push_back(s.at(0));
    parents.push_back(s.impl());
    raw.push_back(s.impl().get());
  }
  return MakeResult({out.size()}, std::move(out), "stack", std::move(parents),
                    [raw = std::move(raw)](const TensorImpl& o) {
                      for (std::size_t k = 0; k < raw.size(); ++k) {
                        Accumulate(raw[k], [&](std::vector<double>& g) {
                          g[0] += o.grad[k];
                        });
                      }
                    });
}

Tensor Rotary(const Tensor& x, std::size_t n_heads, double base) {
  RequireRank(x, 2, "Rotary");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (n_heads == 0 || cols % n_heads != 0 || (cols / n_heads) % 2 != 0) {
    throw DimensionError("Rotary: " + ShapeToString(x.shape()) +
                         " cannot be split into " + std::to_string(n_heads) +
                         " even-width heads");
  }
  const std::size_t head_dim = cols / n_heads;
  const std::size_t pairs = head_dim / 2;
  std::vector<double> cos_t(rows * pairs), sin_t(rows * pairs);
  for (std::size_t p = 0; p < rows; ++p) {
    for (std::size_t m = 0; m < pairs; ++m) {
      const double freq = std::pow(
          base, -2.0 * static_cast<double>(m) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * freq;
      cos_t[p * pairs + m] = std::cos(angle);
      sin_t[p * pairs + m] = std::sin(angle);
    }
  }
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t p = 0; p < rows; ++p) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t m = 0; m < pairs; ++m) {
        const std::size_t i0 = p * cols + h * head_dim + 2 * m;
        const double c = cos_t[p * pairs + m], s = sin_t[p * pairs + m];
        out[i0] = in[i0] * c - in[i0 + 1] * s;
        out[i0 + 1] = in[i0] * s + in[i0 + 1] * c;
      }
    }
  }
  TensorImpl* px = x.impl().get();
  return MakeResult(
      x.shape(), std::move(out), "rotary", {x.impl()},
      [px, rows, cols, n_heads, head_dim, pairs, cos_t = std::move(cos_t),
       sin_t = std::move(sin_t)](const TensorImpl& o) {
        Accumulate(px, [&](std::vector<double>& g) {
          for (std::size_t p = 0; p < rows; ++p) {
            for (std::size_t h = 0; h < n_heads; ++h) {
              for (std::size_t m = 0; m < pairs; ++m) {
                const std::size_t i0 = p * cols + h * head_dim + 2 * m;
                const double c = cos_t[p * pairs + m], s = sin_t[p * pairs + m];
                g[i0] += o.grad[i0] * c + o.grad[i0 + 1] * s;
                g[i0 + 1] += -o.grad[i0] * s + o.grad[i0 + 1] * c;
              }
            }
          }
        });
      });
}

Tensor PoolRows(const Tensor& x,
                const std::vector<std::vector<std::size_t>>& rows,
                const std::vector<std::vector<double>>& weights) {
  if (rows.size() != weights.size()) {
    throw DimensionError("PoolRows: " + std::to_string(rows.size()) +
                         " groups but " + std::to_string(weights.size()) +
                         " weight lists");
  }
  std::vector<double> flat;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != weights[r].size()) {
      throw DimensionError("PoolRows: malformed group " + std::to_string(r));
    }
    flat.insert(flat.end(), weights[r].begin(), weights[r].end());
  }
  const std::size_t n = flat.size();
  return PoolRows(x, rows, Tensor::FromData({n}, std::move(flat)));
}

Tensor PoolRows(const Tensor& x,
                const std::vector<std::vector<std::size_t>>& rows,
                const Tensor& weights) {
  RequireRank(x, 2, "PoolRows");
  RequireRank(weights, 1, "PoolRows");
  const std::size_t in_rows = x.dim(0), cols = x.dim(1);
  std::vector<std::size_t> offset(rows.size() + 1, 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].empty()) {
      throw DimensionError("PoolRows: malformed group " + std::to_string(r));
    }
    for (std::size_t src : rows[r]) {
      if (src >= in_rows) {
        throw std::out_of_range("PoolRows: row " + std::to_string(src) +
                                " out of range for shape " +
                                ShapeToString(x.shape()));
      }
    }
    offset[r + 1] = offset[r] + rows[r].size();
  }
  if (offset.back() != weights.size()) {
    throw DimensionError("PoolRows: " + std::to_string(offset.back()) +
                         " group members but " +
                         std::to_string(weights.size()) + " weights");
  }
  std::vector<double> out(rows.size() * cols, 0.0);
  const auto in = x.data();
  const auto w = weights.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double* dst = out.data() + r * cols;
    if (rows[r].size() == 1 && w[offset[r]] == 1.0) {
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(rows[r][0] * cols),
                  cols, dst);
      continue;
    }
    for (std::size_t j = 0; j < rows[r].size(); ++j) {
      const double wj = w[offset[r] + j];
      const double* src = in.data() + rows[r][j] * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += wj * src[c];
    }
  }
  TensorImpl* px = x.impl().get();
  TensorImpl* pw = weights.impl().get();
  return MakeResult(
      {rows.size(), cols}, std::move(out), "pool_rows",
      {x.impl(), weights.impl()},
      [px, pw, cols, rows, offset](const TensorImpl& o) {
        Accumulate(px, [&](std::vector<double>& g) {
          for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t j = 0; j < rows[r].size(); ++j) {
              const double wj = pw->data[offset[r] + j];
              double* dst = g.data() + rows[r][j] * cols;
              const double* src = o.grad.data() + r * cols;
              for (std::size_t c = 0; c < cols; ++c) dst[c] += wj * src[c];
            }
          }
        });
        Accumulate(pw, [&](std::vector<double>& g) {
          for (std::size_t r = 0; r < rows.size(); ++r) {
            const double* up = o.grad.data() + r * cols;
            for (std::size_t j = 0; j < rows[r].size(); ++j) {
              const double* src = px->data.data() + rows[r][j] * cols;
              double dot = 0.0;
              for (std::size_t c = 0; c < cols; ++c) dot += up[c] * src[c];
              g[offset[r] + j] += dot;
            }
          }
        });
      });
}

}  // namespace matryoshka
