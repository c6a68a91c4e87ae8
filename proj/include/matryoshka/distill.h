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

// Contrastive ranking loss, cascaded self-distillation from a committee of
// full-width teacher layers, and the training loop built on them.
//
// One step per query group: a full-width pass scores every candidate at
// every committee layer (teachers, detached) and at layer N (anchor loss,
// with gradients); a second pass under a sampled compression schedule scores
// every depth as a student of its selected teachers.

#ifndef MATRYOSHKA_DISTILL_H_
#define MATRYOSHKA_DISTILL_H_

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "matryoshka/kv_text.h"
#include "matryoshka/model.h"
#include "matryoshka/optimizer.h"
#include "matryoshka/shapes.h"
#include "matryoshka/tensor.h"

namespace matryoshka {

// A (depth, width schedule) slice of the full model.
using SubStructure = ShapeConfig;

// One query with its candidates; exactly one is relevant.
struct TrainBatch {
  std::vector<RankerInput> candidates;
  int gt = 0;
  double tau = 1.0;
};

// -log softmax(scores / tau)[gt] over the candidates' scalar scores.
Tensor ContrastiveLoss(std::span<const Tensor> scores, int gt, double tau);

// softmax(scores / tau): the teacher's distribution over candidates.
std::vector<double> TeacherDistribution(std::span<const double> scores,
                                        double tau);

// teacher_probs[gt] * -log softmax(student / tau)[gt]. Teacher
// probabilities are constants.
Tensor KdLoss(std::span<const double> teacher_probs,
              std::span<const Tensor> student_scores, int gt, double tau);

// True iff `t` is at least as deep as `s` and at least as wide at every
// layer `s` executes.
bool IsSuper(const SubStructure& t, const SubStructure& s);

enum class TeacherMode { kClose, kAll };

struct TeacherCommittee {
  std::vector<int> layers;  // Sorted, 1-based, includes N.

  static TeacherCommittee EveryOther(int n_layers);
  void Validate(int n_layers) const;
  // Committee layers whose full-width prefix dominates a student of
  // `student_depth`: the shallowest one (kClose) or all of them (kAll).
  std::vector<int> Select(int student_depth, TeacherMode mode) const;
};

// Step-like schedule: each boundary between layers 1..n_layers-1 carries a
// compression event with probability `event_prob`, with k drawn uniformly
// from `factors`. Deeper layers can only be narrower.
std::vector<CompressEvent> SampleStudentEvents(std::mt19937_64& rng,
                                               int n_layers,
                                               std::span<const int> factors,
                                               double event_prob);
SubStructure SampleStudent(std::mt19937_64& rng, int input_len, int n_layers,
                           std::span<const int> factors,
                           double event_prob = 0.25);

// Where the per-depth student targets come from.
enum class TeacherSource {
  kCommittee,  // Cascaded self-distillation.
  kLabels,     // One-hot ground truth at every depth.
};

struct TrainConfig {
  std::vector<int> committee = {2, 4, 6, 8};
  std::vector<int> factors = {2, 3, 4};
  TeacherMode teacher_mode = TeacherMode::kClose;
  TeacherSource teacher_source = TeacherSource::kCommittee;
  double event_prob = 0.25;
  double tau = 1.0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double lr = 1e-3;
  double momentum = 0.9;
  double clip_norm = 1.0;
  int epochs = 1;
  int batch_size = 2;
  int negatives = 7;
  std::uint64_t seed = 1;
  int log_every = 10;

  static TrainConfig Parse(const std::string& text);
  // Applies one parsed line; false if the key is not a training key.
  bool ApplyKey(const KvLine& kv);
  std::string ToText() const;
  nlohmann::json ToJson() const;
  OptimizerConfig Optim() const;
};

struct StepStats {
  double loss = 0.0;
  double anchor = 0.0;
  double kd = 0.0;
  int kd_terms = 0;
  double grad_norm = 0.0;
};

// Teacher scores per committee layer (outer) and candidate (inner).
using TeacherScores = std::vector<std::vector<double>>;

// Full-width scores at every committee layer without building a graph.
TeacherScores ScoreCommittee(const Reranker& model, const TrainBatch& batch,
                             const TeacherCommittee& committee);

// Builds the step loss for one query group and back-propagates
// `loss_scale * loss` into the model's gradients. With `cached` set the
// teacher distributions come from it instead of the anchor pass.
StepStats AccumulateDistillGradients(const Reranker& model,
                                     const TrainBatch& batch,
                                     const TeacherCommittee& committee,
                                     std::span<const CompressEvent> student,
                                     const TrainConfig& config,
                                     double loss_scale,
                                     const TeacherScores* cached = nullptr);

// Samples a student per group, accumulates gradients over `batches`, and
// applies one optimizer step.
StepStats SelfDistillStep(Reranker& model, std::span<const TrainBatch> batches,
                          const TeacherCommittee& committee,
                          const TrainConfig& config, std::mt19937_64& rng,
                          Optimizer& optimizer);

// Runs `config.epochs` epochs of self-distillation over `data`, writing one
// JSON line per logged step to `log` when non-null.
void TrainSelfDistill(Reranker& model, std::span<const TrainBatch> data,
                      const TrainConfig& config, std::ostream* log);

// Contrastive training of a single fixed compression schedule at the
// schedule's exit depth: the specialized upper bound.
void TrainFixedShape(Reranker& model, std::span<const TrainBatch> data,
                     int depth, std::span<const CompressEvent> events,
                     const TrainConfig& config, std::ostream* log);

}  // namespace matryoshka

#endif  // MATRYOSHKA_DISTILL_H_
