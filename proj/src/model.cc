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

#include "matryoshka/model.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <stdexcept>

namespace matryoshka {
namespace {

Tensor RandomParameter(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> data(NumElements(shape));
  for (double& v : data) v = normal(rng);
  return Tensor::Parameter(std::move(shape), std::move(data));
}

Tensor OnesParameter(std::size_t n) {
  return Tensor::Parameter({n}, std::vector<double>(n, 1.0));
}

}  // namespace

RankerInput RenderInput(std::span<const int> query, std::span<const int> doc,
                        int max_seq_len) {
  if (max_seq_len < 3) {
    throw ConfigError("max_seq_len " + std::to_string(max_seq_len) +
                      " cannot hold the three marker tokens");
  }
  const int budget = max_seq_len - 3;
  const int q_total = static_cast<int>(query.size());
  const int d_total = static_cast<int>(doc.size());
  const int overflow = std::max(0, q_total + d_total - budget);
  const int doc_keep = std::max(0, d_total - overflow);
  const int query_keep = std::min(q_total, budget - doc_keep);

  RankerInput input;
  input.query_len = query_keep;
  input.doc_len = doc_keep;
  input.tokens.reserve(static_cast<std::size_t>(3 + query_keep + doc_keep));
  input.tokens.push_back(token::kQuery);
  input.tokens.insert(input.tokens.end(), query.begin(),
                      query.begin() + query_keep);
  input.tokens.push_back(token::kDoc);
  input.tokens.insert(input.tokens.end(), doc.begin(), doc.begin() + doc_keep);
  input.tokens.push_back(token::kScore);
  return input;
}

const char* ProjectionName(Projection p) {
  switch (p) {
    case Projection::kQuery:
      return "wq";
    case Projection::kKey:
      return "wk";
    case Projection::kValue:
      return "wv";
    case Projection::kOutput:
      return "wo";
    case Projection::kGate:
      return "w_gate";
    case Projection::kUp:
      return "w_up";
    case Projection::kDown:
      return "w_down";
  }
  return "?";
}

Projection ParseProjection(const std::string& name) {
  for (int i = 0; i < kNumProjections; ++i) {
    const auto p = static_cast<Projection>(i);
    if (name == ProjectionName(p)) return p;
  }
  throw ConfigError("unknown projection '" + name + "'");
}

Tensor Project(const Tensor& x, const Tensor& weight,
               const std::vector<LowRankDelta>& deltas) {
  Tensor out = MatMul(x, weight);
  for (const LowRankDelta& delta : deltas) {
    Tensor low = MatMul(MatMul(x, Transpose(delta.a)), delta.b);
    out = Add(out, Scale(low, delta.scale));
  }
  return out;
}

Reranker::Reranker(const ModelConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.Validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto d_ff = static_cast<std::size_t>(config_.d_ff);
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double ff_std = 1.0 / std::sqrt(static_cast<double>(d_ff));
  // Residual-writing projections are damped by depth.
  const double residual_gain = 1.0 / std::sqrt(2.0 * config_.n_layers);

  embedding_ = RandomParameter(
      {static_cast<std::size_t>(config_.vocab_size), d}, 1.0, rng);
  for (int i = 0; i < config_.n_layers; ++i) {
    Layer layer;
    layer.attn_norm = OnesParameter(d);
    layer.wq = RandomParameter({d, d}, in_std, rng);
    layer.wk = RandomParameter({d, d}, in_std, rng);
    layer.wv = RandomParameter({d, d}, in_std, rng);
    layer.wo = RandomParameter({d, d}, in_std * residual_gain, rng);
    layer.mlp_norm = OnesParameter(d);
    layer.w_gate = RandomParameter({d, d_ff}, in_std, rng);
    layer.w_up = RandomParameter({d, d_ff}, in_std, rng);
    layer.w_down = RandomParameter({d_ff, d}, ff_std * residual_gain, rng);
    layers_.push_back(std::move(layer));
  }
  for (int i = 0; i < config_.n_layers; ++i) {
    Head head;
    head.norm = OnesParameter(d);
    head.weight = RandomParameter({d, 1}, in_std, rng);
    head.bias = Tensor::Parameter({1, 1}, {0.0});
    heads_.push_back(std::move(head));
  }
}

Tensor Reranker::RunLayer(const Layer& layer, const Tensor& x,
                          const LayerAdapters* adapters,
                          LayerState* state) const {
  static const LayerAdapters kNone;
  const LayerAdapters& ad = adapters != nullptr ? *adapters : kNone;
  const auto n = x.dim(0);
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const auto head_dim = static_cast<std::size_t>(config_.head_dim());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor h = RmsNorm(x, layer.attn_norm);
  Tensor q = Rotary(Project(h, layer.wq, ad.on(Projection::kQuery)), heads,
                    config_.rope_base);
  Tensor k = Rotary(Project(h, layer.wk, ad.on(Projection::kKey)), heads,
                    config_.rope_base);
  Tensor v = Project(h, layer.wv, ad.on(Projection::kValue));

  std::vector<Tensor> head_out;
  Tensor attn_sum;
  head_out.reserve(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    Tensor qh = SliceCols(q, hd * head_dim, head_dim);
    Tensor kh = SliceCols(k, hd * head_dim, head_dim);
    Tensor vh = SliceCols(v, hd * head_dim, head_dim);
    Tensor probs =
        Softmax(CausalMask(Scale(MatMul(qh, Transpose(kh)), inv_sqrt)), 1);
    Tensor last = Row(probs, n - 1);
    attn_sum = hd == 0 ? last : Add(attn_sum, last);
    head_out.push_back(MatMul(probs, vh));
  }
  state->attn_row = Scale(attn_sum, 1.0 / static_cast<double>(heads));
  const auto row = state->attn_row.data();
  state->last_token_attn.assign(row.begin(), row.end());

  Tensor attn = Project(ConcatCols(head_out), layer.wo, ad.on(Projection::kOutput));
  Tensor resid = Add(x, attn);
  Tensor h2 = RmsNorm(resid, layer.mlp_norm);
  Tensor gate = SiLU(Project(h2, layer.w_gate, ad.on(Projection::kGate)));
  Tensor up = Project(h2, layer.w_up, ad.on(Projection::kUp));
  Tensor mlp = Project(Mul(gate, up), layer.w_down, ad.on(Projection::kDown));
  state->hidden = Add(resid, mlp);
  return state->hidden;
}

std::vector<LayerState> Reranker::ForwardLayers(
    const RankerInput& input, const ShapeConfig& shape,
    std::span<const LayerAdapters> adapters) const {
  ValidateConfig(shape, config_, input.size());
  if (input.tokens.empty() || input.tokens.back() != token::kScore) {
    throw std::invalid_argument("ForwardLayers: input must end with [SCORE]");
  }
  if (!adapters.empty() &&
      adapters.size() < static_cast<std::size_t>(shape.depth)) {
    throw std::invalid_argument(
        "ForwardLayers: " + std::to_string(adapters.size()) +
        " adapter layers for depth " + std::to_string(shape.depth));
  }
  std::vector<LayerState> states;
  states.reserve(static_cast<std::size_t>(shape.depth));
  Tensor x = Embedding(embedding_, input.tokens);
  for (int i = 0; i < shape.depth; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    LayerState state;
    x = RunLayer(layers_[idx], x, adapters.empty() ? nullptr : &adapters[idx],
                 &state);
    if (i + 1 < shape.depth && shape.widths[idx + 1] < shape.widths[idx]) {
      const CompressionPlan plan =
          PlanCompression(state.last_token_attn, shape.widths[idx],
                          shape.widths[idx + 1], shape.factors[idx + 1]);
      x = CompressLayer(state.hidden, state.attn_row, plan);
    }
    states.push_back(std::move(state));
  }
  return states;
}

Tensor Reranker::ScoreAtLayer(const std::vector<LayerState>& states,
                              int layer) const {
  if (layer < 1 || layer > static_cast<int>(states.size())) {
    throw std::out_of_range("ScoreAtLayer: layer " + std::to_string(layer) +
                            " outside 1.." + std::to_string(states.size()));
  }
  const Head& head = heads_[static_cast<std::size_t>(layer - 1)];
  const Tensor& hidden = states[static_cast<std::size_t>(layer - 1)].hidden;
  Tensor last = Row(hidden, hidden.dim(0) - 1);
  Tensor logit = Add(MatMul(RmsNorm(last, head.norm), head.weight), head.bias);
  return Reshape(logit, {});
}

Tensor Reranker::Score(const RankerInput& input, const ShapeConfig& shape,
                       std::span<const LayerAdapters> adapters) const {
  return ScoreAtLayer(ForwardLayers(input, shape, adapters), shape.depth);
}

NamedTensors Reranker::Parameters() const {
  NamedTensors params;
  params.emplace_back("embedding", embedding_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    const Layer& l = layers_[i];
    params.emplace_back(p + "attn_norm", l.attn_norm);
    params.emplace_back(p + "wq", l.wq);
    params.emplace_back(p + "wk", l.wk);
    params.emplace_back(p + "wv", l.wv);
    params.emplace_back(p + "wo", l.wo);
    params.emplace_back(p + "mlp_norm", l.mlp_norm);
    params.emplace_back(p + "w_gate", l.w_gate);
    params.emplace_back(p + "w_up", l.w_up);
    params.emplace_back(p + "w_down", l.w_down);
  }
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    const std::string p = "heads." + std::to_string(i) + ".";
    params.emplace_back(p + "norm", heads_[i].norm);
    params.emplace_back(p + "weight", heads_[i].weight);
    params.emplace_back(p + "bias", heads_[i].bias);
  }
  return params;
}

void Reranker::SetRequiresGrad(bool value) {
  for (auto& [name, t] : Parameters()) t.set_requires_grad(value);
}

void Reranker::ZeroGrad() {
  for (auto& [name, t] : Parameters()) t.ZeroGrad();
}

std::string Reranker::ParameterChecksum() const {
  std::string bytes;
  for (const auto& [name, t] : Parameters()) {
    bytes += name;
    const auto data = t.data();
    bytes.append(reinterpret_cast<const char*>(data.data()),
                 data.size() * sizeof(double));
  }
  return GitBlobHashOfBytes(bytes);
}

Checkpoint Reranker::ToCheckpoint() const {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "model";
  ckpt.metadata["config"] = config_.ToJson();
  for (const auto& [name, t] : Parameters()) {
    ckpt.tensors.emplace_back(name, t.Detach());
  }
  return ckpt;
}

Reranker Reranker::FromCheckpoint(const Checkpoint& checkpoint) {
  if (checkpoint.metadata.value("kind", "") != "model") {
    throw FormatError("checkpoint is not a model checkpoint");
  }
  const ModelConfig config =
      ModelConfig::FromJson(checkpoint.metadata.at("config"));
  Reranker model(config, 0);
  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : checkpoint.tensors) stored[name] = &t;
  for (auto& [name, param] : model.Parameters()) {
    const auto it = stored.find(name);
    if (it == stored.end()) {
      throw FormatError("checkpoint lacks parameter '" + name + "'");
    }
    if (it->second->shape() != param.shape()) {
      throw FormatError("parameter '" + name + "' has shape " +
                        ShapeToString(it->second->shape()) + ", expected " +
                        ShapeToString(param.shape()));
    }
    std::copy(it->second->data().begin(), it->second->data().end(),
              param.mutable_data().begin());
  }
  return model;
}

}  // namespace matryoshka
