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

#include "matryoshka/model_config.h"

#include <string>

namespace matryoshka {

void ModelConfig::Validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) {
    throw ConfigError("d_model and n_heads must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("n_heads (" + std::to_string(n_heads) +
                      ") must divide d_model (" + std::to_string(d_model) +
                      ")");
  }
  if (head_dim() % 2 != 0) {
    throw ConfigError("head dimension must be even for rotary positions");
  }
  if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
  if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
  if (d_ff < 1) throw ConfigError("d_ff must be positive");
  if (rope_base <= 0.0) throw ConfigError("rope_base must be positive");
}

nlohmann::json ModelConfig::ToJson() const {
  return {{"n_layers", n_layers},   {"d_model", d_model},
          {"n_heads", n_heads},     {"vocab_size", vocab_size},
          {"max_seq_len", max_seq_len}, {"d_ff", d_ff},
          {"rope_base", rope_base}};
}

ModelConfig ModelConfig::FromJson(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.rope_base = j.at("rope_base").get<double>();
  c.Validate();
  return c;
}

}  // namespace matryoshka
