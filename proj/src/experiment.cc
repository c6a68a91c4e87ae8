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

#include "matryoshka/experiment.h"

#include <algorithm>

#include "matryoshka/kv_text.h"

namespace matryoshka {

ExitSchedule LightweightSchedule(const ModelConfig& model) {
  const int quarter = std::max(1, model.n_layers / 4);
  return {std::max(quarter + 1, model.n_layers / 2), {{quarter, 2}}};
}

ExperimentConfig ExperimentConfig::Parse(const std::string& text) {
  ExperimentConfig c;
  bool committee_set = false;
  for (const KvLine& kv : ReadKeyValues(text)) {
    committee_set = committee_set || kv.key == "committee";
    if (c.task.ApplyKey(kv) || c.train.ApplyKey(kv) || c.bank.ApplyKey(kv)) continue;
    if (kv.key == "n_layers") {
      c.model.n_layers = KvInt(kv);
    } else if (kv.key == "d_model") {
      c.model.d_model = KvInt(kv);
    } else if (kv.key == "n_heads") {
      c.model.n_heads = KvInt(kv);
    } else if (kv.key == "d_ff") {
      c.model.d_ff = KvInt(kv);
    } else if (kv.key == "max_seq_len") {
      c.model.max_seq_len = KvInt(kv);
    } else if (kv.key == "compensation_lr") {
      c.compensation_lr = KvDouble(kv);
    } else if (kv.key == "compensation_epochs") {
      c.compensation_epochs = KvInt(kv);
      if (c.compensation_epochs < 0) KvFail(kv, "must be >= 0");
    } else if (kv.key == "safety_shapes") {
      c.safety_shapes = KvInt(kv);
      if (c.safety_shapes < 1) KvFail(kv, "must be >= 1");
    } else if (kv.key == "threads") {
      c.threads = KvInt(kv);
    } else {
      KvFail(kv, "unknown key");
    }
  }
  c.model.vocab_size = c.task.vocab_size;
  c.task.Validate();
  c.model.Validate();
  // Without an explicit committee, every other layer up to the model depth.
  if (!committee_set) c.train.committee = TeacherCommittee::EveryOther(c.model.n_layers).layers;
  TeacherCommittee{c.train.committee}.Validate(c.model.n_layers);
  if (c.task.input_len() > c.model.max_seq_len) {
    throw ConfigError("task input length exceeds max_seq_len");
  }
  return c;
}

ExperimentConfig ExperimentConfig::Load(const std::string& path) {
  return Parse(ReadTextFile(path));
}

TrainConfig ExperimentConfig::CompensationTrain() const {
  TrainConfig t = train;
  t.lr = compensation_lr;
  t.epochs = compensation_epochs;
  return t;
}

nlohmann::json ExperimentConfig::ToJson() const {
  return {{"task", task.ToJson()},
          {"model", model.ToJson()},
          {"train", train.ToJson()},
          {"bank", bank.ToJson()},
          {"compensation_lr", compensation_lr},
          {"compensation_epochs", compensation_epochs},
          {"safety_shapes", safety_shapes}};
}

Experiment PrepareExperiment(const ExperimentConfig& config) {
  Experiment e;
  e.config = config;
  e.data = GenerateTask(config.task);
  e.batches = ToTrainBatches(e.data.train, config.model.max_seq_len, config.train.tau);
  return e;
}

void TrainDistilled(Experiment& e, std::ostream* log) {
  e.distilled.emplace(e.config.model, e.config.train.seed);
  TrainSelfDistill(*e.distilled, e.batches, e.config.train, log);
}

void TrainCompensator(Experiment& e, std::ostream* log) {
  if (!e.distilled) throw std::logic_error("TrainCompensator: no distilled model");
  e.bank.emplace(e.config.model, e.config.bank, e.config.train.seed);
  TrainCompensation(*e.distilled, *e.bank, e.batches, e.config.CompensationTrain(), log);
}

void TrainLabelsOnly(Experiment& e, std::ostream* log) {
  TrainConfig t = e.config.train;
  t.teacher_source = TeacherSource::kLabels;
  e.labels_only.emplace(e.config.model, t.seed);
  TrainSelfDistill(*e.labels_only, e.batches, t, log);
}

void TrainSpecialist(Experiment& e, std::ostream* log) {
  const ExitSchedule light = LightweightSchedule(e.config.model);
  e.specialist.emplace(e.config.model, e.config.train.seed);
  TrainFixedShape(*e.specialist, e.batches, light.depth, light.events, e.config.train, log);
}

std::vector<AblationRow> RunAblation(const Experiment& e) {
  if (!e.distilled || !e.bank || !e.labels_only || !e.specialist) {
    throw std::logic_error("RunAblation: train every model first");
  }
  const ExitSchedule light = LightweightSchedule(e.config.model);
  const EvalOptions opts = e.config.Eval();
  const auto& eval = e.data.eval;
  std::vector<AblationRow> rows = {
      {"first_stage", "baseline", EvaluateFirstStage(eval).mrr_at_10, std::nullopt},
      {"specialized", "upperbound",
       Evaluate(*e.specialist, nullptr, light, eval, opts).mrr_at_10, std::nullopt},
      {"matryoshka", "variant",
       Evaluate(*e.distilled, &*e.bank, light, eval, opts).mrr_at_10, std::nullopt},
      {"without_compensation", "variant",
       Evaluate(*e.distilled, nullptr, light, eval, opts).mrr_at_10, std::nullopt},
      {"without_self_distillation", "variant",
       Evaluate(*e.labels_only, nullptr, light, eval, opts).mrr_at_10, std::nullopt},
  };
  ComputeRelPerf(rows);
  return rows;
}

std::vector<double> CommitteeMrr(const Reranker& model, const Experiment& e) {
  std::vector<double> out;
  for (int depth : e.config.train.committee) {
    out.push_back(Evaluate(model, nullptr, {depth, {}}, e.data.eval, e.config.Eval()).mrr_at_10);
  }
  return out;
}

std::vector<ExitSchedule> SampleEvalSchedules(std::mt19937_64& rng,
                                              const ModelConfig& model,
                                              std::span<const int> factors,
                                              int max_factor, double event_prob,
                                              int count) {
  std::vector<int> allowed;
  for (int k : factors) {
    if (k <= max_factor) allowed.push_back(k);
  }
  if (allowed.empty()) throw ConfigError("no factor is covered by the adapter bank");
  std::uniform_int_distribution<int> depth(1, model.n_layers);
  std::vector<ExitSchedule> out;
  for (int i = 0; i < count; ++i) {
    ExitSchedule s;
    s.depth = depth(rng);
    for (const CompressEvent& ev :
         SampleStudentEvents(rng, model.n_layers, allowed, event_prob)) {
      if (ev.layer < s.depth) s.events.push_back(ev);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace matryoshka
