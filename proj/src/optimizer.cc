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

#include "matryoshka/optimizer.h"

#include <cmath>

#include "matryoshka/model_config.h"

namespace matryoshka {

OptimizerKind ParseOptimizerKind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("optimizer must be sgd or adam, got '" + name + "'");
}

std::string OptimizerKindName(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adam";
}

Optimizer::Optimizer(NamedTensors params, const OptimizerConfig& config)
    : params_(std::move(params)), config_(config) {
  first_.reserve(params_.size());
  for (const auto& [name, p] : params_) {
    first_.emplace_back(p.size(), 0.0);
    if (config_.kind == OptimizerKind::kAdam) second_.emplace_back(p.size(), 0.0);
  }
}

double Optimizer::Step() {
  double sq = 0.0;
  for (const auto& [name, p] : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = config_.clip_norm > 0.0 && norm > config_.clip_norm
                          ? config_.clip_norm / norm
                          : 1.0;
  ++steps_;
  const double mu = config_.momentum;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(mu, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    const auto grad = p.grad();
    auto data = p.mutable_data();
    auto& m = first_[i];
    if (config_.kind == OptimizerKind::kSgd) {
      for (std::size_t j = 0; j < m.size(); ++j) {
        m[j] = mu * m[j] + clip * grad[j];
        data[j] -= config_.lr * m[j];
      }
      continue;
    }
    auto& v = second_[i];
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double g = clip * grad[j];
      m[j] = mu * m[j] + (1.0 - mu) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      data[j] -= config_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
  }
  return norm;
}

void Optimizer::ZeroGrad() {
  for (auto& [name, p] : params_) p.ZeroGrad();
}

}  // namespace matryoshka
