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

#ifndef MATRYOSHKA_MODEL_CONFIG_H_
#define MATRYOSHKA_MODEL_CONFIG_H_

#include <stdexcept>

#include "json.hpp"

namespace matryoshka {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Full-scale architecture of the re-ranker. Defaults are the toy scale.
struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int vocab_size = 64;
  int max_seq_len = 64;
  // Hidden width of the gated (SwiGLU) MLP.
  int d_ff = 128;
  double rope_base = 10000.0;

  // Number of weight matrices in the MLP block (gate, up, down).
  static constexpr int kMlpMatrices = 3;

  int head_dim() const { return d_model / n_heads; }

  // Throws ConfigError on the first violated constraint.
  void Validate() const;

  nlohmann::json ToJson() const;
  static ModelConfig FromJson(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace matryoshka

#endif  // MATRYOSHKA_MODEL_CONFIG_H_
