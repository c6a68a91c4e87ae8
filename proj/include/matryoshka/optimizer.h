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

// First-order optimizers with optional global gradient-norm clipping.

#ifndef MATRYOSHKA_OPTIMIZER_H_
#define MATRYOSHKA_OPTIMIZER_H_

#include <string>
#include <vector>

#include "matryoshka/serialization.h"

namespace matryoshka {

enum class OptimizerKind { kSgd, kAdam };

// Parses "sgd" or "adam"; throws ConfigError otherwise.
OptimizerKind ParseOptimizerKind(const std::string& name);
std::string OptimizerKindName(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  // Heavy-ball momentum for SGD, beta1 for Adam.
  double momentum = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // <= 0 disables clipping.
  double clip_norm = 1.0;
};

class Optimizer {
 public:
  Optimizer(NamedTensors params, const OptimizerConfig& config);

  // Gradients are scaled by min(1, clip_norm / |g|) first. SGD then applies
  // v <- mu v + g; p <- p - lr v. Adam applies the bias-corrected update.
  // Parameters without a gradient are skipped. Returns the pre-clipping
  // gradient norm.
  double Step();
  void ZeroGrad();

  double lr() const { return config_.lr; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  NamedTensors params_;
  OptimizerConfig config_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  long steps_ = 0;
};

}  // namespace matryoshka

#endif  // MATRYOSHKA_OPTIMIZER_H_
