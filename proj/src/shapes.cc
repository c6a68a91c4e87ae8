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

#include "matryoshka/shapes.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace matryoshka {
namespace {

std::string JoinInts(const std::vector<int>& values, char sep) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out += sep;
    out += std::to_string(values[i]);
  }
  return out;
}

}  // namespace

const char* ShapeErrorName(ShapeErrorCode code) {
  switch (code) {
    case ShapeErrorCode::kDepthNotPositive:
      return "depth must be positive";
    case ShapeErrorCode::kDepthExceedsModel:
      return "depth exceeds model";
    case ShapeErrorCode::kWidthCountMismatch:
      return "width count must equal depth";
    case ShapeErrorCode::kInputExceedsMaxLen:
      return "input length exceeds max_seq_len";
    case ShapeErrorCode::kFirstWidthNotInput:
      return "first width must equal input length";
    case ShapeErrorCode::kWidthExceedsMaxLen:
      return "width exceeds max_seq_len";
    case ShapeErrorCode::kWidthsIncreasing:
      return "widths must be non-increasing";
    case ShapeErrorCode::kWidthNotPositive:
      return "widths must be positive";
    case ShapeErrorCode::kBadFactor:
      return "invalid compression factor";
    case ShapeErrorCode::kUnreachableWidth:
      return "width not reachable by pooling";
    case ShapeErrorCode::kEventOutOfRange:
      return "compression event outside executed layers";
  }
  return "shape error";
}

ShapeError::ShapeError(ShapeErrorCode code, const std::string& detail)
    : std::invalid_argument(std::string(ShapeErrorName(code)) +
                            (detail.empty() ? "" : ": " + detail)),
      code_(code) {}

ShapeConfig ShapeConfig::FullScale(const ModelConfig& model, int input_len) {
  return FullWidth(model.n_layers, input_len);
}

ShapeConfig ShapeConfig::FullWidth(int depth, int input_len) {
  ShapeConfig shape;
  shape.depth = depth;
  shape.widths.assign(static_cast<std::size_t>(std::max(depth, 0)), input_len);
  shape.factors.assign(shape.widths.size(), 1);
  return shape;
}

ShapeConfig ShapeConfig::FromWidths(std::vector<int> widths) {
  ShapeConfig shape;
  shape.depth = static_cast<int>(widths.size());
  shape.factors.assign(widths.size(), 1);
  for (std::size_t i = 1; i < widths.size(); ++i) {
    if (widths[i] >= widths[i - 1]) continue;  // Validation reports growth.
    const auto factor = DeriveFactor(widths[i - 1], widths[i]);
    if (!factor) {
      throw ShapeError(ShapeErrorCode::kUnreachableWidth,
                       std::to_string(widths[i - 1]) + " -> " +
                           std::to_string(widths[i]));
    }
    shape.factors[i] = *factor;
  }
  shape.widths = std::move(widths);
  return shape;
}

bool ShapeConfig::is_full_width() const {
  return std::all_of(widths.begin(), widths.end(),
                     [&](int w) { return w == widths.front(); });
}

std::string ShapeConfig::Id() const {
  return "d" + std::to_string(depth) + ":" + JoinInts(widths, ',');
}

void ValidateConfig(const ShapeConfig& shape, const ModelConfig& model,
                    int input_len) {
  using Code = ShapeErrorCode;
  if (input_len < 1 || input_len > model.max_seq_len) {
    throw ShapeError(Code::kInputExceedsMaxLen,
                     std::to_string(input_len) + " vs " +
                         std::to_string(model.max_seq_len));
  }
  if (shape.depth < 1) throw ShapeError(Code::kDepthNotPositive, "");
  if (shape.depth > model.n_layers) {
    throw ShapeError(Code::kDepthExceedsModel,
                     std::to_string(shape.depth) + " > " +
                         std::to_string(model.n_layers));
  }
  const auto depth = static_cast<std::size_t>(shape.depth);
  if (shape.widths.size() != depth || shape.factors.size() != depth) {
    throw ShapeError(Code::kWidthCountMismatch,
                     std::to_string(shape.widths.size()) + " widths, " +
                         std::to_string(shape.factors.size()) +
                         " factors for depth " + std::to_string(depth));
  }
  for (int w : shape.widths) {
    if (w < 1) throw ShapeError(Code::kWidthNotPositive, std::to_string(w));
    if (w > model.max_seq_len) {
      throw ShapeError(Code::kWidthExceedsMaxLen, std::to_string(w));
    }
  }
  if (shape.widths[0] != input_len) {
    throw ShapeError(Code::kFirstWidthNotInput,
                     std::to_string(shape.widths[0]) + " vs " +
                         std::to_string(input_len));
  }
  for (std::size_t i = 1; i < depth; ++i) {
    if (shape.widths[i] > shape.widths[i - 1]) {
      throw ShapeError(Code::kWidthsIncreasing,
                       "layer " + std::to_string(i + 1) + " width " +
                           std::to_string(shape.widths[i]) + " > " +
                           std::to_string(shape.widths[i - 1]));
    }
  }
  if (shape.factors[0] != 1) {
    throw ShapeError(Code::kBadFactor, "the input width is never pooled");
  }
  for (std::size_t i = 1; i < depth; ++i) {
    const int prev = shape.widths[i - 1], cur = shape.widths[i];
    const int k = shape.factors[i];
    if (prev == cur) {
      if (k != 1) {
        throw ShapeError(Code::kBadFactor,
                         "factor " + std::to_string(k) + " at layer " +
                             std::to_string(i + 1) + " without reduction");
      }
      continue;
    }
    if (k < 2) {
      throw ShapeError(Code::kBadFactor, "reduction at layer " +
                                             std::to_string(i + 1) +
                                             " needs factor >= 2");
    }
    if (!IsReachable(prev, cur, k)) {
      throw ShapeError(Code::kUnreachableWidth,
                       std::to_string(prev) + " -> " + std::to_string(cur) +
                           " with factor " + std::to_string(k));
    }
  }
}

int PoolableGroups(int len, int factor) {
  if (factor < 2 || len < 1) return 0;
  const int full = len / factor;
  return len % factor == 0 ? full - 1 : full;
}

int CompressedLength(int len, int factor) {
  return len - PoolableGroups(len, factor) * (factor - 1);
}

bool IsReachable(int len, int target, int factor) {
  if (factor < 2 || target < 1 || target > len) return false;
  const int reduction = len - target;
  if (reduction % (factor - 1) != 0) return false;
  return reduction / (factor - 1) <= PoolableGroups(len, factor);
}

std::optional<int> DeriveFactor(int len, int target) {
  if (target < 1 || target > len) return std::nullopt;
  if (target == len) return 1;
  for (int k = std::max(2, (len + target - 1) / target); k <= len; ++k) {
    if (IsReachable(len, target, k)) return k;
  }
  return std::nullopt;
}

ShapeConfig ExpandEvents(int depth, int input_len,
                         std::vector<CompressEvent> events) {
  std::sort(events.begin(), events.end(),
            [](const auto& a, const auto& b) { return a.layer < b.layer; });
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (e.layer < 1 || e.layer >= depth) {
      throw ShapeError(ShapeErrorCode::kEventOutOfRange,
                       "layer " + std::to_string(e.layer) + " with depth " +
                           std::to_string(depth));
    }
    if (e.factor < 2) {
      throw ShapeError(ShapeErrorCode::kBadFactor,
                       "factor " + std::to_string(e.factor));
    }
    if (i > 0 && events[i - 1].layer == e.layer) {
      throw ShapeError(ShapeErrorCode::kBadFactor,
                       "two events at layer " + std::to_string(e.layer));
    }
  }
  ShapeConfig shape = ShapeConfig::FullWidth(depth, input_len);
  std::size_t next = 0;
  for (int i = 1; i < depth; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    shape.widths[idx] = shape.widths[idx - 1];
    if (next < events.size() && events[next].layer == i) {
      const int k = events[next].factor;
      const int pooled = CompressedLength(shape.widths[idx - 1], k);
      if (pooled < shape.widths[idx - 1]) {
        shape.widths[idx] = pooled;
        shape.factors[idx] = k;
      }
      ++next;
    }
  }
  return shape;
}

CompressionPlan PlanCompression(std::span<const double> last_token_attn,
                                int current_len, int target_len, int factor) {
  if (static_cast<int>(last_token_attn.size()) != current_len) {
    throw DimensionError("PlanCompression: " +
                         std::to_string(last_token_attn.size()) +
                         " attention weights for length " +
                         std::to_string(current_len));
  }
  if (factor < 2) {
    throw ShapeError(ShapeErrorCode::kBadFactor,
                     "factor " + std::to_string(factor));
  }
  if (target_len > current_len || target_len < 1) {
    throw ShapeError(ShapeErrorCode::kWidthsIncreasing,
                     "target " + std::to_string(target_len) +
                         " for length " + std::to_string(current_len));
  }
  CompressionPlan plan;
  plan.factor = factor;
  plan.input_len = current_len;
  plan.output_len = current_len;
  std::vector<int> candidates;
  std::vector<double> sums;
  for (int begin = 0; begin < current_len; begin += factor) {
    const int size = std::min(factor, current_len - begin);
    plan.groups.push_back({begin, size, false});
    double sum = 0.0;
    for (int j = begin; j < begin + size; ++j) {
      sum += last_token_attn[static_cast<std::size_t>(j)];
    }
    sums.push_back(sum);
    const bool holds_last = begin + size == current_len;
    if (size == factor && !holds_last) {
      candidates.push_back(static_cast<int>(plan.groups.size()) - 1);
    }
  }
  if (target_len == current_len) return plan;

  const int needed =
      (current_len - target_len + factor - 2) / (factor - 1);  // ceil
  if (needed > static_cast<int>(candidates.size())) {
    throw ShapeError(ShapeErrorCode::kUnreachableWidth,
                     "target " + std::to_string(target_len) +
                         " below minimum achievable length " +
                         std::to_string(CompressedLength(current_len, factor)));
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    return sums[static_cast<std::size_t>(a)] < sums[static_cast<std::size_t>(b)];
  });
  plan.selected.assign(candidates.begin(), candidates.begin() + needed);
  std::sort(plan.selected.begin(), plan.selected.end());
  for (int g : plan.selected) plan.groups[static_cast<std::size_t>(g)].pooled = true;
  plan.output_len = current_len - needed * (factor - 1);
  return plan;
}

std::vector<double> PoolingWeights(std::span<const double> group_attn) {
  if (group_attn.empty()) return {};
  const double max_v = *std::max_element(group_attn.begin(), group_attn.end());
  std::vector<double> w(group_attn.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(group_attn[i] - max_v);
    denom += w[i];
  }
  for (double& v : w) v /= denom;
  return w;
}

Tensor CompressLayer(const Tensor& hidden,
                     std::span<const double> last_token_attn,
                     const CompressionPlan& plan) {
  return CompressLayer(
      hidden,
      Tensor::FromData({1, last_token_attn.size()},
                       std::vector<double>(last_token_attn.begin(),
                                           last_token_attn.end())),
      plan);
}

Tensor CompressLayer(const Tensor& hidden, const Tensor& last_token_attn,
                     const CompressionPlan& plan) {
  if (hidden.rank() != 2 || last_token_attn.rank() != 2 ||
      last_token_attn.dim(0) != 1 ||
      static_cast<int>(hidden.dim(0)) != plan.input_len ||
      static_cast<int>(last_token_attn.dim(1)) != plan.input_len) {
    throw DimensionError("CompressLayer: plan for length " +
                         std::to_string(plan.input_len) + " applied to " +
                         ShapeToString(hidden.shape()) + " with attention " +
                         ShapeToString(last_token_attn.shape()));
  }
  if (plan.is_identity()) return hidden;
  std::vector<std::vector<std::size_t>> rows;
  std::vector<Tensor> weights;
  rows.reserve(static_cast<std::size_t>(plan.output_len));
  const Tensor one = Tensor::Ones({1, 1});
  for (const PoolGroup& g : plan.groups) {
    const auto begin = static_cast<std::size_t>(g.begin);
    const auto size = static_cast<std::size_t>(g.size);
    if (g.pooled) {
      std::vector<std::size_t> members(size);
      std::iota(members.begin(), members.end(), begin);
      weights.push_back(Softmax(SliceCols(last_token_attn, begin, size), 1));
      rows.push_back(std::move(members));
    } else {
      for (std::size_t j = begin; j < begin + size; ++j) {
        rows.push_back({j});
        weights.push_back(one);
      }
    }
  }
  Tensor flat = ConcatCols(weights);
  return PoolRows(hidden, rows, Reshape(flat, {flat.size()}));
}

FlopsReport FlopsEstimate(const ShapeConfig& shape, const ModelConfig& model,
                          int input_len) {
  ValidateConfig(shape, model, input_len);
  const double d = model.d_model;
  const double d_ff = model.d_ff;
  auto cost = [&](const ShapeConfig& s, std::vector<LayerFlops>* layers) {
    double total = 0.0;
    for (int i = 0; i < s.depth; ++i) {
      const double w = s.widths[static_cast<std::size_t>(i)];
      LayerFlops f;
      f.attention = 2.0 * w * w * d + 4.0 * w * d * d;
      f.mlp = 2.0 * w * d * d_ff * ModelConfig::kMlpMatrices;
      f.head = i + 1 == s.depth ? d : 0.0;
      total += f.total();
      if (layers != nullptr) layers->push_back(f);
    }
    return total;
  };
  FlopsReport report;
  report.total = cost(shape, &report.per_layer);
  const double full = cost(ShapeConfig::FullScale(model, input_len), nullptr);
  report.savings = 1.0 - report.total / full;
  return report;
}

ShapeConfig ShapeSpec::Resolve(int input_len) const {
  if (!widths.empty()) {
    if (factors.empty()) return ShapeConfig::FromWidths(widths);
    ShapeConfig shape;
    shape.depth = depth;
    shape.widths = widths;
    shape.factors = factors;
    return shape;
  }
  return ExpandEvents(depth, input_len, events);
}

std::string ShapeSpec::ToText() const {
  std::ostringstream out;
  out << "depth: " << depth << "\n";
  if (!widths.empty()) {
    out << "widths: " << JoinInts(widths, ',') << "\n";
    if (!factors.empty()) out << "factors: " << JoinInts(factors, ',') << "\n";
  }
  for (const auto& e : events) {
    out << "compress: layer=" << e.layer << " factor=" << e.factor << "\n";
  }
  return out.str();
}

namespace {

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int ParseInt(const std::string& text, int line) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ShapeParseError("line " + std::to_string(line) +
                          ": expected integer, got '" + text + "'");
  }
}

std::vector<int> ParseIntList(const std::string& text, int line) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(ParseInt(Trim(item), line));
  if (out.empty()) {
    throw ShapeParseError("line " + std::to_string(line) + ": empty list");
  }
  return out;
}

}  // namespace

ShapeSpec ParseShapeSpec(const std::string& text) {
  ShapeSpec spec;
  bool have_depth = false;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = Trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
      throw ShapeParseError("line " + std::to_string(line_no) +
                            ": expected 'key: value'");
    }
    const std::string key = Trim(line.substr(0, colon));
    const std::string value = Trim(line.substr(colon + 1));
    if (key == "depth") {
      spec.depth = ParseInt(value, line_no);
      have_depth = true;
    } else if (key == "widths") {
      spec.widths = ParseIntList(value, line_no);
    } else if (key == "factors") {
      spec.factors = ParseIntList(value, line_no);
    } else if (key == "compress") {
      CompressEvent event;
      bool have_layer = false, have_factor = false;
      std::istringstream fields(value);
      std::string field;
      while (fields >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) {
          throw ShapeParseError("line " + std::to_string(line_no) +
                                ": expected name=value, got '" + field + "'");
        }
        const std::string name = field.substr(0, eq);
        const int v = ParseInt(field.substr(eq + 1), line_no);
        if (name == "layer") {
          event.layer = v;
          have_layer = true;
        } else if (name == "factor") {
          event.factor = v;
          have_factor = true;
        } else {
          throw ShapeParseError("line " + std::to_string(line_no) +
                                ": unknown field '" + name + "'");
        }
      }
      if (!have_layer || !have_factor) {
        throw ShapeParseError("line " + std::to_string(line_no) +
                              ": compress needs layer= and factor=");
      }
      spec.events.push_back(event);
    } else {
      throw ShapeParseError("line " + std::to_string(line_no) +
                            ": unknown key '" + key + "'");
    }
  }
  if (!have_depth) throw ShapeParseError("missing 'depth' line");
  if (!spec.widths.empty() && !spec.events.empty()) {
    throw ShapeParseError("'widths' and 'compress' are mutually exclusive");
  }
  if (!spec.factors.empty() && spec.widths.empty()) {
    throw ShapeParseError("'factors' requires 'widths'");
  }
  if (!spec.widths.empty() &&
      static_cast<int>(spec.widths.size()) != spec.depth) {
    throw ShapeParseError("'widths' lists " +
                          std::to_string(spec.widths.size()) +
                          " entries for depth " + std::to_string(spec.depth));
  }
  return spec;
}

ShapeSpec LoadShapeSpec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ShapeParseError("cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return ParseShapeSpec(buffer.str());
}

}  // namespace matryoshka
