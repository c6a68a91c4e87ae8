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

// End-to-end experiment: data, self-distillation, compensation, the
// ablation variants and the checks run over them.

#ifndef MATRYOSHKA_EXPERIMENT_H_
#define MATRYOSHKA_EXPERIMENT_H_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "matryoshka/bench.h"
#include "matryoshka/distill.h"
#include "matryoshka/eval.h"
#include "matryoshka/lora.h"
#include "matryoshka/task.h"

namespace matryoshka {

// Width halved (k = 2) at layer N/4, exit at N/2.
ExitSchedule LightweightSchedule(const ModelConfig& model);

// One config file for the whole pipeline. Task, training and adapter-bank
// keys are accepted as in their own configs, plus:
//   n_layers, d_model, n_heads, d_ff, max_seq_len   model shape
//   compensation_lr, compensation_epochs            adapter training
//   safety_shapes                                   shapes in the safety check
//   threads                                         eval workers (0 = all)
// The model vocabulary follows the task's vocab_size, `seed` seeds the
// model, trainer and adapter bank, and the committee defaults to every other
// layer of the model.
struct ExperimentConfig {
  TaskConfig task;
  ModelConfig model;
  TrainConfig train;
  BankConfig bank;
  double compensation_lr = 1e-3;
  int compensation_epochs = 1;
  int safety_shapes = 8;
  int threads = 0;

  static ExperimentConfig Parse(const std::string& text);
  static ExperimentConfig Load(const std::string& path);
  TrainConfig CompensationTrain() const;
  EvalOptions Eval() const { return {threads}; }
  nlohmann::json ToJson() const;
};

struct Experiment {
  ExperimentConfig config;
  Dataset data;
  std::vector<TrainBatch> batches;
  std::optional<Reranker> distilled;    // Cascaded self-distillation.
  std::optional<AdapterBank> bank;      // Compensation for `distilled`.
  std::optional<Reranker> labels_only;  // Every depth on labels alone.
  std::optional<Reranker> specialist;   // Trained on the lightweight shape.
};

// Generates the task and its training batches.
Experiment PrepareExperiment(const ExperimentConfig& config);

// Each trainer writes JSONL progress to `log` when non-null.
void TrainDistilled(Experiment& e, std::ostream* log);
void TrainCompensator(Experiment& e, std::ostream* log);
void TrainLabelsOnly(Experiment& e, std::ostream* log);
void TrainSpecialist(Experiment& e, std::ostream* log);

// Baseline, upper bound and the three lightweight variants, with rel_perf.
// Needs every model above.
std::vector<AblationRow> RunAblation(const Experiment& e);

// Held-out MRR@10 of each committee depth at full width, in committee order.
std::vector<double> CommitteeMrr(const Reranker& model, const Experiment& e);

// `count` exit schedules with a uniform depth and pooling events drawn like
// training students, restricted to factors <= max_factor.
std::vector<ExitSchedule> SampleEvalSchedules(std::mt19937_64& rng,
                                              const ModelConfig& model,
                                              std::span<const int> factors,
                                              int max_factor, double event_prob,
                                              int count);

}  // namespace matryoshka

#endif  // MATRYOSHKA_EXPERIMENT_H_
