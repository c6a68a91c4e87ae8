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

#include "matryoshka/lora.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace matryoshka {
namespace {

LoraAdapter AddParameters(const LoraAdapter& x, const LoraAdapter& y) {
  return {Add(x.a, y.a), Add(x.b, y.b), x.rank, x.alpha};
}

std::string AdapterName(const char* kind, int index, Projection p,
                        const char* part) {
  return std::string(kind) + "." + std::to_string(index) + "." +
         ProjectionName(p) + "." + part;
}

}  // namespace

Tensor LoraAdapter::Materialize() const {
  return Scale(MatMul(Transpose(a), b), scale());
}

Tensor ApplyAdapter(const Tensor& weight, const LoraAdapter& adapter) {
  if (weight.rank() != 2 || weight.dim(0) != adapter.d_in() ||
      weight.dim(1) != adapter.d_out()) {
    throw DimensionError("ApplyAdapter: adapter " +
                         std::to_string(adapter.d_in()) + "x" +
                         std::to_string(adapter.d_out()) + " for weight " +
                         ShapeToString(weight.shape()));
  }
  return Add(weight, adapter.Materialize());
}

std::pair<std::size_t, std::size_t> ProjectionDims(const ModelConfig& model,
                                                   Projection p) {
  const auto d = static_cast<std::size_t>(model.d_model);
  const auto ff = static_cast<std::size_t>(model.d_ff);
  switch (p) {
    case Projection::kGate:
    case Projection::kUp:
      return {d, ff};
    case Projection::kDown:
      return {ff, d};
    default:
      return {d, d};
  }
}

bool BankConfig::ApplyKey(const KvLine& kv) {
  if (kv.key == "rank") {
    rank = KvInt(kv);
    if (rank < 1) KvFail(kv, "must be >= 1");
  } else if (kv.key == "alpha") {
    alpha = KvDouble(kv);
  } else if (kv.key == "max_factor") {
    max_factor = KvInt(kv);
    if (max_factor < 2) KvFail(kv, "must be >= 2");
  } else if (kv.key == "targets") {
    targets.clear();
    std::istringstream in(kv.value);
    std::string name;
    while (std::getline(in, name, ',')) {
      name.erase(0, name.find_first_not_of(' '));
      name.erase(name.find_last_not_of(' ') + 1);
      try {
        targets.push_back(ParseProjection(name));
      } catch (const std::invalid_argument& e) {
        KvFail(kv, e.what());
      }
    }
    if (targets.empty()) KvFail(kv, "expected projection names");
  } else if (kv.key == "compose") {
    if (kv.value == "parameters") {
      sum_of_products = false;
    } else if (kv.value == "products") {
      sum_of_products = true;
    } else {
      KvFail(kv, "expected parameters or products");
    }
  } else {
    return false;
  }
  return true;
}

nlohmann::json BankConfig::ToJson() const {
  std::vector<std::string> names;
  for (Projection p : targets) names.emplace_back(ProjectionName(p));
  return {{"rank", rank},
          {"alpha", alpha},
          {"max_factor", max_factor},
          {"targets", names},
          {"compose", sum_of_products ? "products" : "parameters"}};
}

BankConfig BankConfig::FromJson(const nlohmann::json& j) {
  BankConfig c;
  c.rank = j.at("rank").get<int>();
  c.alpha = j.at("alpha").get<double>();
  c.max_factor = j.at("max_factor").get<int>();
  c.targets.clear();
  for (const auto& name : j.at("targets")) {
    c.targets.push_back(ParseProjection(name.get<std::string>()));
  }
  c.sum_of_products = j.at("compose").get<std::string>() == "products";
  return c;
}

AdapterBank::AdapterBank(const ModelConfig& model, const BankConfig& config,
                         std::uint64_t seed)
    : model_(model), config_(config) {
  if (config.rank < 1) throw ConfigError("adapter rank must be >= 1");
  if (config.max_factor < 2) throw ConfigError("max_factor must be >= 2");
  std::mt19937_64 rng(seed);
  auto make = [&](Projection p) {
    const auto [d_in, d_out] = ProjectionDims(model_, p);
    const auto r = static_cast<std::size_t>(config_.rank);
    std::normal_distribution<double> normal(
        0.0, 1.0 / std::sqrt(static_cast<double>(d_in)));
    std::vector<double> a(r * d_in);
    for (double& x : a) x = normal(rng);
    return LoraAdapter{Tensor::FromData({r, d_in}, std::move(a)),
                       Tensor::Zeros({r, d_out}), config_.rank, config_.alpha};
  };
  v_.resize(static_cast<std::size_t>(model_.n_layers));
  h_.resize(static_cast<std::size_t>(config_.max_factor - 1));
  for (auto& layer : v_) {
    for (Projection p : config_.targets) layer[Slot(p)] = make(p);
  }
  for (auto& factor : h_) {
    for (Projection p : config_.targets) factor[Slot(p)] = make(p);
  }
}

const LoraAdapter& AdapterBank::V(int layer, Projection p) const {
  if (layer < 1 || layer > model_.n_layers) {
    throw std::out_of_range("AdapterBank: layer " + std::to_string(layer) +
                            " outside 1.." + std::to_string(model_.n_layers));
  }
  const LoraAdapter& a = v_[static_cast<std::size_t>(layer - 1)][Slot(p)];
  if (a.rank == 0) {
    throw std::out_of_range(std::string("AdapterBank: projection ") +
                            ProjectionName(p) + " is not adapted");
  }
  return a;
}

const LoraAdapter& AdapterBank::H(int factor, Projection p) const {
  if (factor < 2 || factor > config_.max_factor) {
    throw std::out_of_range("factor exceeds trained compensators");
  }
  const LoraAdapter& a = h_[static_cast<std::size_t>(factor - 2)][Slot(p)];
  if (a.rank == 0) {
    throw std::out_of_range(std::string("AdapterBank: projection ") +
                            ProjectionName(p) + " is not adapted");
  }
  return a;
}

LoraAdapter AdapterBank::Compose(int layer, int factor, Projection p) const {
  if (factor < 1 || factor > config_.max_factor) {
    throw std::out_of_range("factor exceeds trained compensators");
  }
  const LoraAdapter& v = V(layer, p);
  if (factor == 1) return v;
  return AddParameters(v, H(factor, p));
}

std::vector<LayerAdapters> AdapterBank::ForShape(const ShapeConfig& shape) const {
  if (shape.depth > model_.n_layers) {
    throw std::out_of_range("AdapterBank: depth exceeds model");
  }
  std::vector<LayerAdapters> out(static_cast<std::size_t>(shape.depth));
  for (int l = 1; l <= shape.depth; ++l) {
    const int k = shape.factors[static_cast<std::size_t>(l - 1)];
    auto& layer = out[static_cast<std::size_t>(l - 1)];
    for (Projection p : config_.targets) {
      if (config_.sum_of_products && k > 1) {
        if (k > config_.max_factor) {
          throw std::out_of_range("factor exceeds trained compensators");
        }
        layer.on(p).push_back(V(l, p).AsDelta());
        layer.on(p).push_back(H(k, p).AsDelta());
      } else {
        layer.on(p).push_back(Compose(l, k, p).AsDelta());
      }
    }
  }
  return out;
}

AdapterBank AdapterBank::Plus(const AdapterBank& other) const {
  if (!(model_ == other.model_) || config_.rank != other.config_.rank ||
      config_.max_factor != other.config_.max_factor ||
      config_.targets != other.config_.targets) {
    throw std::invalid_argument("AdapterBank::Plus: layouts differ");
  }
  NoGradGuard no_grad;
  AdapterBank out = *this;
  auto sum = [](auto& mine, const auto& theirs) {
    for (std::size_t i = 0; i < mine.size(); ++i) {
      for (std::size_t p = 0; p < kNumProjections; ++p) {
        if (mine[i][p].rank == 0) continue;
        mine[i][p] = AddParameters(mine[i][p], theirs[i][p]);
      }
    }
  };
  sum(out.v_, other.v_);
  sum(out.h_, other.h_);
  return out;
}

NamedTensors AdapterBank::Parameters() const {
  NamedTensors out;
  for (std::size_t l = 0; l < v_.size(); ++l) {
    for (Projection p : config_.targets) {
      const auto& a = v_[l][Slot(p)];
      out.emplace_back(AdapterName("v", static_cast<int>(l) + 1, p, "a"), a.a);
      out.emplace_back(AdapterName("v", static_cast<int>(l) + 1, p, "b"), a.b);
    }
  }
  for (std::size_t k = 0; k < h_.size(); ++k) {
    for (Projection p : config_.targets) {
      const auto& a = h_[k][Slot(p)];
      out.emplace_back(AdapterName("h", static_cast<int>(k) + 2, p, "a"), a.a);
      out.emplace_back(AdapterName("h", static_cast<int>(k) + 2, p, "b"), a.b);
    }
  }
  return out;
}

std::size_t AdapterBank::ParameterCount() const {
  std::size_t n = 0;
  for (const auto& [name, t] : Parameters()) n += t.size();
  return n;
}

void AdapterBank::SetRequiresGrad(bool value) {
  for (auto& [name, t] : Parameters()) t.set_requires_grad(value);
}

std::string AdapterBank::ParameterChecksum() const {
  std::ostringstream bytes;
  for (const auto& [name, t] : Parameters()) WriteTensor(bytes, t);
  return GitBlobHashOfBytes(bytes.str());
}

Checkpoint AdapterBank::ToCheckpoint() const {
  Checkpoint ckpt;
  ckpt.metadata = {{"kind", "adapter_bank"},
                   {"model", model_.ToJson()},
                   {"bank", config_.ToJson()}};
  nlohmann::json manifest = nlohmann::json::array();
  for (int l = 1; l <= model_.n_layers; ++l) {
    for (Projection p : config_.targets) {
      manifest.push_back({{"layer", l},
                          {"projection", ProjectionName(p)},
                          {"rank", config_.rank}});
    }
  }
  for (int k = 2; k <= config_.max_factor; ++k) {
    for (Projection p : config_.targets) {
      manifest.push_back({{"factor", k},
                          {"projection", ProjectionName(p)},
                          {"rank", config_.rank}});
    }
  }
  ckpt.metadata["manifest"] = manifest;
  ckpt.tensors = Parameters();
  return ckpt;
}

AdapterBank AdapterBank::FromCheckpoint(const Checkpoint& checkpoint) {
  if (checkpoint.metadata.value("kind", "") != "adapter_bank") {
    throw FormatError("checkpoint is not an adapter bank");
  }
  AdapterBank bank(ModelConfig::FromJson(checkpoint.metadata.at("model")),
                   BankConfig::FromJson(checkpoint.metadata.at("bank")), 0);
  auto params = bank.Parameters();
  if (params.size() != checkpoint.tensors.size()) {
    throw FormatError("adapter bank has " +
                      std::to_string(checkpoint.tensors.size()) +
                      " tensors, expected " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, saved] = checkpoint.tensors[i];
    if (name != params[i].first || saved.shape() != params[i].second.shape()) {
      throw FormatError("adapter bank tensor '" + name + "' does not match '" +
                        params[i].first + "'");
    }
    std::copy(saved.data().begin(), saved.data().end(),
              params[i].second.mutable_data().begin());
  }
  return bank;
}

CompensationConfig CompensationConfig::Parse(const std::string& text) {
  CompensationConfig c;
  for (const KvLine& kv : ReadKeyValues(text)) {
    if (!c.bank.ApplyKey(kv) && !c.train.ApplyKey(kv)) {
      KvFail(kv, "unknown key");
    }
  }
  return c;
}

void TrainCompensation(Reranker& model, AdapterBank& bank,
                       std::span<const TrainBatch> data,
                       const TrainConfig& config, std::ostream* log) {
  model.SetRequiresGrad(false);
  bank.SetRequiresGrad(true);
  const int n_layers = model.config().n_layers;
  std::vector<int> factors;
  for (int k : config.factors) {
    if (k <= bank.config().max_factor) factors.push_back(k);
  }
  if (factors.empty()) {
    throw ConfigError("no training factor is covered by the adapter bank");
  }
  Optimizer optimizer(bank.Parameters(), config.Optim());
  std::mt19937_64 rng(config.seed);
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(
          order.size(), begin + static_cast<std::size_t>(config.batch_size));
      const double scale = 1.0 / static_cast<double>(end - begin);
      optimizer.ZeroGrad();
      double total = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const TrainBatch& batch = data[order[i]];
        const auto events =
            SampleStudentEvents(rng, n_layers, factors, config.event_prob);
        std::vector<std::vector<Tensor>> scores(
            static_cast<std::size_t>(n_layers));
        for (const RankerInput& input : batch.candidates) {
          const ShapeConfig shape = ExpandEvents(n_layers, input.size(), events);
          const auto adapters = bank.ForShape(shape);
          const auto states = model.ForwardLayers(input, shape, adapters);
          for (int d = 1; d <= n_layers; ++d) {
            scores[static_cast<std::size_t>(d - 1)].push_back(
                model.ScoreAtLayer(states, d));
          }
        }
        Tensor loss = Tensor::Scalar(0.0);
        for (const auto& s : scores) {
          loss = Add(loss, ContrastiveLoss(s, batch.gt, batch.tau));
        }
        total += loss.item() * scale;
        Backward(Scale(loss, scale));
      }
      const double norm = optimizer.Step();
      if (log != nullptr && config.log_every > 0 && step % config.log_every == 0) {
        *log << nlohmann::json{{"step", step},
                               {"loss", total},
                               {"lr", optimizer.lr()},
                               {"grad_norm", norm}}
                    .dump()
             << '\n';
      }
      ++step;
    }
  }
  optimizer.ZeroGrad();
}

}  // namespace matryoshka
