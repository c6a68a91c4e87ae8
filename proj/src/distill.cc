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

#include "matryoshka/distill.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "matryoshka/kv_text.h"

namespace matryoshka {
namespace {

void CheckGt(std::size_t n, int gt, const char* who) {
  if (n == 0) throw std::invalid_argument(std::string(who) + ": no candidates");
  if (gt < 0 || static_cast<std::size_t>(gt) >= n) {
    throw std::out_of_range(std::string(who) + ": ground truth " +
                            std::to_string(gt) + " out of range for " +
                            std::to_string(n) + " candidates");
  }
}

void CheckTau(double tau, const char* who) {
  if (!(tau > 0.0)) throw std::invalid_argument(std::string(who) + ": tau must be > 0");
}

std::string JoinInts(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out += (i ? "," : "") + std::to_string(v[i]);
  }
  return out;
}

// Shuffled index order for one epoch.
std::vector<std::size_t> EpochOrder(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void LogStep(std::ostream* log, int step, const StepStats& s, double lr,
             double grad_norm) {
  if (log == nullptr) return;
  nlohmann::json j = {{"step", step},       {"loss", s.loss},
                      {"anchor", s.anchor}, {"kd", s.kd},
                      {"kd_terms", s.kd_terms}, {"lr", lr},
                      {"grad_norm", grad_norm}};
  *log << j.dump() << '\n';
}

}  // namespace

Tensor ContrastiveLoss(std::span<const Tensor> scores, int gt, double tau) {
  CheckGt(scores.size(), gt, "ContrastiveLoss");
  CheckTau(tau, "ContrastiveLoss");
  return CrossEntropy(Scale(Stack(scores), 1.0 / tau),
                      static_cast<std::size_t>(gt));
}

std::vector<double> TeacherDistribution(std::span<const double> scores,
                                        double tau) {
  CheckTau(tau, "TeacherDistribution");
  if (scores.empty()) throw std::invalid_argument("TeacherDistribution: empty");
  const double hi = *std::max_element(scores.begin(), scores.end());
  std::vector<double> p(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    total += p[i] = std::exp((scores[i] - hi) / tau);
  }
  for (double& v : p) v /= total;
  return p;
}

Tensor KdLoss(std::span<const double> teacher_probs,
              std::span<const Tensor> student_scores, int gt, double tau) {
  if (teacher_probs.size() != student_scores.size()) {
    throw std::invalid_argument(
        "KdLoss: " + std::to_string(teacher_probs.size()) +
        " teacher probabilities for " + std::to_string(student_scores.size()) +
        " student scores");
  }
  CheckGt(student_scores.size(), gt, "KdLoss");
  return Scale(ContrastiveLoss(student_scores, gt, tau),
               teacher_probs[static_cast<std::size_t>(gt)]);
}

bool IsSuper(const SubStructure& t, const SubStructure& s) {
  if (t.depth < s.depth) return false;
  for (int i = 0; i < s.depth; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    if (t.widths[idx] < s.widths[idx]) return false;
  }
  return true;
}

TeacherCommittee TeacherCommittee::EveryOther(int n_layers) {
  TeacherCommittee c;
  for (int l = n_layers; l >= 1; l -= 2) c.layers.insert(c.layers.begin(), l);
  return c;
}

void TeacherCommittee::Validate(int n_layers) const {
  if (layers.empty()) throw ConfigError("teacher committee is empty");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 1 || layers[i] > n_layers) {
      throw ConfigError("committee layer " + std::to_string(layers[i]) +
                        " outside 1.." + std::to_string(n_layers));
    }
    if (i > 0 && layers[i] <= layers[i - 1]) {
      throw ConfigError("committee layers must be strictly increasing");
    }
  }
  if (layers.back() != n_layers) {
    throw ConfigError("committee must include the last layer");
  }
}

std::vector<int> TeacherCommittee::Select(int student_depth,
                                          TeacherMode mode) const {
  // Committee members are full width, so depth alone decides dominance.
  std::vector<int> out;
  for (int l : layers) {
    if (l < student_depth) continue;
    out.push_back(l);
    if (mode == TeacherMode::kClose) break;
  }
  return out;
}

std::vector<CompressEvent> SampleStudentEvents(std::mt19937_64& rng,
                                               int n_layers,
                                               std::span<const int> factors,
                                               double event_prob) {
  if (factors.empty()) {
    throw std::invalid_argument("SampleStudentEvents: empty factor set");
  }
  std::bernoulli_distribution fire(event_prob);
  std::uniform_int_distribution<std::size_t> pick(0, factors.size() - 1);
  std::vector<CompressEvent> events;
  for (int layer = 1; layer < n_layers; ++layer) {
    if (fire(rng)) events.push_back({layer, factors[pick(rng)]});
  }
  return events;
}

SubStructure SampleStudent(std::mt19937_64& rng, int input_len, int n_layers,
                           std::span<const int> factors, double event_prob) {
  return ExpandEvents(n_layers, input_len,
                      SampleStudentEvents(rng, n_layers, factors, event_prob));
}

bool TrainConfig::ApplyKey(const KvLine& kv) {
  TrainConfig& c = *this;
  {
    if (kv.key == "committee") {
      c.committee = KvIntList(kv);
    } else if (kv.key == "factors") {
      c.factors = KvIntList(kv);
      for (int k : c.factors) {
        if (k < 2) KvFail(kv, "factors must be >= 2");
      }
    } else if (kv.key == "teacher_mode") {
      if (kv.value == "close") {
        c.teacher_mode = TeacherMode::kClose;
      } else if (kv.value == "all") {
        c.teacher_mode = TeacherMode::kAll;
      } else {
        KvFail(kv, "expected close or all");
      }
    } else if (kv.key == "teacher_source") {
      if (kv.value == "committee") {
        c.teacher_source = TeacherSource::kCommittee;
      } else if (kv.value == "labels") {
        c.teacher_source = TeacherSource::kLabels;
      } else {
        KvFail(kv, "expected committee or labels");
      }
    } else if (kv.key == "event_prob") {
      c.event_prob = KvDouble(kv);
      if (c.event_prob < 0.0 || c.event_prob > 1.0) KvFail(kv, "must be in [0, 1]");
    } else if (kv.key == "tau") {
      c.tau = KvDouble(kv);
      if (!(c.tau > 0.0)) KvFail(kv, "must be > 0");
    } else if (kv.key == "optimizer") {
      try {
        c.optimizer = ParseOptimizerKind(kv.value);
      } catch (const ConfigError& e) {
        KvFail(kv, e.what());
      }
    } else if (kv.key == "lr") {
      c.lr = KvDouble(kv);
    } else if (kv.key == "momentum") {
      c.momentum = KvDouble(kv);
    } else if (kv.key == "clip_norm") {
      c.clip_norm = KvDouble(kv);
    } else if (kv.key == "epochs") {
      c.epochs = KvInt(kv);
    } else if (kv.key == "batch_size") {
      c.batch_size = KvInt(kv);
      if (c.batch_size < 1) KvFail(kv, "must be >= 1");
    } else if (kv.key == "negatives") {
      c.negatives = KvInt(kv);
      if (c.negatives < 1) KvFail(kv, "must be >= 1");
    } else if (kv.key == "seed") {
      c.seed = static_cast<std::uint64_t>(KvInt(kv));
    } else if (kv.key == "log_every") {
      c.log_every = KvInt(kv);
    } else {
      return false;
    }
  }
  return true;
}

OptimizerConfig TrainConfig::Optim() const {
  OptimizerConfig o;
  o.kind = optimizer;
  o.lr = lr;
  o.momentum = momentum;
  o.clip_norm = clip_norm;
  return o;
}

TrainConfig TrainConfig::Parse(const std::string& text) {
  TrainConfig c;
  for (const KvLine& kv : ReadKeyValues(text)) {
    if (!c.ApplyKey(kv)) KvFail(kv, "unknown key");
  }
  return c;
}

std::string TrainConfig::ToText() const {
  std::ostringstream out;
  out.precision(17);
  out << "committee: " << JoinInts(committee) << '\n'
      << "factors: " << JoinInts(factors) << '\n'
      << "teacher_mode: " << (teacher_mode == TeacherMode::kClose ? "close" : "all") << '\n'
      << "teacher_source: "
      << (teacher_source == TeacherSource::kCommittee ? "committee" : "labels") << '\n'
      << "event_prob: " << event_prob << '\n'
      << "tau: " << tau << '\n'
      << "optimizer: " << OptimizerKindName(optimizer) << '\n'
      << "lr: " << lr << '\n'
      << "momentum: " << momentum << '\n'
      << "clip_norm: " << clip_norm << '\n'
      << "epochs: " << epochs << '\n'
      << "batch_size: " << batch_size << '\n'
      << "negatives: " << negatives << '\n'
      << "seed: " << seed << '\n'
      << "log_every: " << log_every << '\n';
  return out.str();
}

nlohmann::json TrainConfig::ToJson() const {
  return {{"committee", committee},
          {"factors", factors},
          {"teacher_mode", teacher_mode == TeacherMode::kClose ? "close" : "all"},
          {"teacher_source",
           teacher_source == TeacherSource::kCommittee ? "committee" : "labels"},
          {"event_prob", event_prob},
          {"tau", tau},
          {"optimizer", OptimizerKindName(optimizer)},
          {"lr", lr},
          {"momentum", momentum},
          {"clip_norm", clip_norm},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"negatives", negatives},
          {"seed", seed}};
}

TeacherScores ScoreCommittee(const Reranker& model, const TrainBatch& batch,
                             const TeacherCommittee& committee) {
  NoGradGuard no_grad;
  TeacherScores scores(committee.layers.size());
  for (const RankerInput& input : batch.candidates) {
    const auto states = model.ForwardLayers(
        input, ShapeConfig::FullScale(model.config(), input.size()));
    for (std::size_t t = 0; t < committee.layers.size(); ++t) {
      scores[t].push_back(model.ScoreAtLayer(states, committee.layers[t]).item());
    }
  }
  return scores;
}

StepStats AccumulateDistillGradients(const Reranker& model,
                                     const TrainBatch& batch,
                                     const TeacherCommittee& committee,
                                     std::span<const CompressEvent> student,
                                     const TrainConfig& config,
                                     double loss_scale,
                                     const TeacherScores* cached) {
  const int n_layers = model.config().n_layers;
  committee.Validate(n_layers);
  const std::size_t n_cand = batch.candidates.size();
  CheckGt(n_cand, batch.gt, "AccumulateDistillGradients");

  // Full-width pass: anchor scores keep their graph, teacher scores are
  // read off as plain numbers.
  std::vector<Tensor> anchor_scores;
  TeacherScores teacher(committee.layers.size());
  for (const RankerInput& input : batch.candidates) {
    const auto states = model.ForwardLayers(
        input, ShapeConfig::FullScale(model.config(), input.size()));
    anchor_scores.push_back(model.ScoreAtLayer(states, n_layers));
    for (std::size_t t = 0; t < committee.layers.size(); ++t) {
      teacher[t].push_back(model.ScoreAtLayer(states, committee.layers[t]).item());
    }
  }
  if (cached != nullptr) teacher = *cached;
  std::vector<std::vector<double>> teacher_probs;
  for (const auto& s : teacher) {
    teacher_probs.push_back(TeacherDistribution(s, batch.tau));
  }

  // Student pass: per depth, one score per candidate.
  const std::vector<CompressEvent> events(student.begin(), student.end());
  std::vector<std::vector<Tensor>> student_scores(
      static_cast<std::size_t>(n_layers));
  for (const RankerInput& input : batch.candidates) {
    const auto states = model.ForwardLayers(
        input, ExpandEvents(n_layers, input.size(), events));
    for (int d = 1; d <= n_layers; ++d) {
      student_scores[static_cast<std::size_t>(d - 1)].push_back(
          model.ScoreAtLayer(states, d));
    }
  }

  StepStats stats;
  Tensor anchor = ContrastiveLoss(anchor_scores, batch.gt, batch.tau);
  Tensor total = anchor;
  std::vector<double> one_hot(n_cand, 0.0);
  one_hot[static_cast<std::size_t>(batch.gt)] = 1.0;
  Tensor kd = Tensor::Scalar(0.0);
  for (int d = 1; d <= n_layers; ++d) {
    const auto& s = student_scores[static_cast<std::size_t>(d - 1)];
    if (config.teacher_source == TeacherSource::kLabels) {
      kd = Add(kd, KdLoss(one_hot, s, batch.gt, batch.tau));
      ++stats.kd_terms;
      continue;
    }
    for (int t : committee.Select(d, config.teacher_mode)) {
      const auto pos = static_cast<std::size_t>(
          std::find(committee.layers.begin(), committee.layers.end(), t) -
          committee.layers.begin());
      kd = Add(kd, KdLoss(teacher_probs[pos], s, batch.gt, batch.tau));
      ++stats.kd_terms;
    }
  }
  total = Add(total, kd);
  stats.anchor = anchor.item();
  stats.kd = kd.item();
  stats.loss = total.item();
  Backward(Scale(total, loss_scale));
  return stats;
}

StepStats SelfDistillStep(Reranker& model, std::span<const TrainBatch> batches,
                          const TeacherCommittee& committee,
                          const TrainConfig& config, std::mt19937_64& rng,
                          Optimizer& optimizer) {
  optimizer.ZeroGrad();
  StepStats sum;
  const double scale = 1.0 / static_cast<double>(batches.size());
  for (const TrainBatch& batch : batches) {
    const auto events = SampleStudentEvents(rng, model.config().n_layers,
                                            config.factors, config.event_prob);
    const StepStats s = AccumulateDistillGradients(model, batch, committee,
                                                   events, config, scale);
    sum.loss += s.loss * scale;
    sum.anchor += s.anchor * scale;
    sum.kd += s.kd * scale;
    sum.kd_terms += s.kd_terms;
  }
  sum.grad_norm = optimizer.Step();
  return sum;
}

void TrainSelfDistill(Reranker& model, std::span<const TrainBatch> data,
                      const TrainConfig& config, std::ostream* log) {
  TeacherCommittee committee{config.committee};
  committee.Validate(model.config().n_layers);
  model.SetRequiresGrad(true);
  Optimizer optimizer(model.Parameters(), config.Optim());
  std::mt19937_64 rng(config.seed);
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = EpochOrder(data.size(), rng);
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.batch_size)) {
      std::vector<TrainBatch> group;
      for (std::size_t i = begin;
           i < std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
           ++i) {
        group.push_back(data[order[i]]);
      }
      const StepStats s =
          SelfDistillStep(model, group, committee, config, rng, optimizer);
      if (config.log_every > 0 && step % config.log_every == 0) {
        LogStep(log, step, s, optimizer.lr(), s.grad_norm);
      }
      ++step;
    }
  }
  optimizer.ZeroGrad();
}

void TrainFixedShape(Reranker& model, std::span<const TrainBatch> data,
                     int depth, std::span<const CompressEvent> events,
                     const TrainConfig& config, std::ostream* log) {
  model.SetRequiresGrad(true);
  Optimizer optimizer(model.Parameters(), config.Optim());
  std::mt19937_64 rng(config.seed);
  const std::vector<CompressEvent> schedule(events.begin(), events.end());
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = EpochOrder(data.size(), rng);
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      const double scale = 1.0 / static_cast<double>(end - begin);
      optimizer.ZeroGrad();
      StepStats stats;
      for (std::size_t i = begin; i < end; ++i) {
        const TrainBatch& batch = data[order[i]];
        std::vector<Tensor> scores;
        for (const RankerInput& input : batch.candidates) {
          scores.push_back(model.Score(input, ExpandEvents(depth, input.size(), schedule)));
        }
        Tensor loss = ContrastiveLoss(scores, batch.gt, batch.tau);
        stats.anchor += loss.item() * scale;
        Backward(Scale(loss, scale));
      }
      stats.loss = stats.anchor;
      stats.grad_norm = optimizer.Step();
      if (config.log_every > 0 && step % config.log_every == 0) {
        LogStep(log, step, stats, optimizer.lr(), stats.grad_norm);
      }
      ++step;
    }
  }
  optimizer.ZeroGrad();
}

}  // namespace matryoshka
