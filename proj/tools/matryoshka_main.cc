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

// Command-line entry points: gen-data, train, compensate, eval, sweep,
// ablate and inspect.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "matryoshka/bench.h"
#include "matryoshka/experiment.h"
#include "matryoshka/kv_text.h"
#include "matryoshka/serialization.h"
#include "matryoshka/shapes.h"

namespace fs = std::filesystem;
using namespace matryoshka;

namespace {

ExperimentConfig LoadConfig(const std::string& path) {
  return path.empty() ? ExperimentConfig::Parse("") : ExperimentConfig::Load(path);
}

std::vector<QueryRecord> ReadRecords(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return ReadJsonl(in);
}

void WriteRecords(const std::string& path, std::span<const QueryRecord> records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  WriteJsonl(out, records);
}

std::ofstream OpenOut(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

// Training records from --train-data, else generated from the config.
std::vector<QueryRecord> TrainRecords(const ExperimentConfig& c, const std::string& path) {
  return path.empty() ? GenerateTask(c.task).train : ReadRecords(path);
}

std::vector<QueryRecord> EvalRecords(const ExperimentConfig& c, const std::string& path) {
  return path.empty() ? GenerateTask(c.task).eval : ReadRecords(path);
}

std::optional<AdapterBank> MaybeBank(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return AdapterBank::FromCheckpoint(LoadCheckpoint(path));
}

void WriteCsv(const std::string& path, std::span<const SweepRow> rows) {
  if (path.empty()) {
    WriteSweepCsv(std::cout, rows);
    return;
  }
  std::ofstream out = OpenOut(path);
  WriteSweepCsv(out, rows);
}

struct DataFlags {
  std::string config;
  std::string train_data;
  std::string eval_data;
};

void AddDataFlags(CLI::App* app, DataFlags& f, bool train, bool eval) {
  app->add_option("--config", f.config, "Experiment config (task, model, training keys)")
      ->check(CLI::ExistingFile);
  if (train) {
    app->add_option("--train-data", f.train_data, "Training JSONL instead of generating")
        ->check(CLI::ExistingFile);
  }
  if (eval) {
    app->add_option("--eval-data", f.eval_data, "Held-out JSONL instead of generating")
        ->check(CLI::ExistingFile);
  }
}

int GenData(const std::string& config_path, const std::string& out_dir) {
  const ExperimentConfig c = LoadConfig(config_path);
  fs::create_directories(out_dir);
  const Dataset d = GenerateTask(c.task);
  WriteRecords((fs::path(out_dir) / "train.jsonl").string(), d.train);
  WriteRecords((fs::path(out_dir) / "eval.jsonl").string(), d.eval);
  std::cout << "wrote " << d.train.size() << " train and " << d.eval.size()
            << " eval queries to " << out_dir << "\n";
  return 0;
}

int Train(const std::string& config_path, const std::string& out_dir,
          const std::string& variant, const DataFlags& data) {
  const ExperimentConfig c = ExperimentConfig::Load(config_path);
  fs::create_directories(out_dir);
  Experiment e;
  e.config = c;
  e.data.train = TrainRecords(c, data.train_data);
  e.batches = ToTrainBatches(e.data.train, c.model.max_seq_len, c.train.tau);
  std::ofstream log = OpenOut(fs::path(out_dir) / "train_log.jsonl");
  const Reranker* model = nullptr;
  if (variant == "distill") {
    TrainDistilled(e, &log);
    model = &*e.distilled;
  } else if (variant == "labels") {
    TrainLabelsOnly(e, &log);
    model = &*e.labels_only;
  } else {
    TrainSpecialist(e, &log);
    model = &*e.specialist;
  }
  const std::string ckpt = (fs::path(out_dir) / "model.ckpt").string();
  SaveCheckpoint(ckpt, model->ToCheckpoint());
  RunManifest m;
  m.seed = c.train.seed;
  m.configs = c.ToJson();
  m.configs["variant"] = variant;
  m.artifacts = {{"model", ckpt}};
  m.Save((fs::path(out_dir) / "manifest.json").string());
  std::cout << "model " << ckpt << " " << GitBlobHash(ckpt) << "\n";
  return 0;
}

int Compensate(const std::string& model_path, const std::string& config_path,
               const std::string& out_dir, const DataFlags& data) {
  const ExperimentConfig c = ExperimentConfig::Load(config_path);
  fs::create_directories(out_dir);
  Experiment e;
  e.config = c;
  e.distilled.emplace(Reranker::FromCheckpoint(LoadCheckpoint(model_path)));
  if (!(e.distilled->config() == c.model)) {
    throw ConfigError("config model shape differs from the checkpoint");
  }
  const std::string before = e.distilled->ParameterChecksum();
  e.data.train = TrainRecords(c, data.train_data);
  e.batches = ToTrainBatches(e.data.train, c.model.max_seq_len, c.train.tau);
  std::ofstream log = OpenOut(fs::path(out_dir) / "compensate_log.jsonl");
  TrainCompensator(e, &log);
  if (e.distilled->ParameterChecksum() != before) {
    throw std::logic_error("compensation changed base parameters");
  }
  const std::string ckpt = (fs::path(out_dir) / "bank.ckpt").string();
  SaveCheckpoint(ckpt, e.bank->ToCheckpoint());
  RunManifest m;
  m.seed = c.train.seed;
  m.configs = c.ToJson();
  m.artifacts = {{"model", model_path}, {"bank", ckpt}};
  m.Save((fs::path(out_dir) / "manifest.json").string());
  std::cout << "bank " << ckpt << " " << GitBlobHash(ckpt) << " ("
            << e.bank->ParameterCount() << " parameters)\n";
  return 0;
}

int Eval(const std::string& model_path, const std::string& shape_path,
         const std::string& bank_path, const std::string& out, bool wallclock,
         const DataFlags& data) {
  const ExperimentConfig c = LoadConfig(data.config);
  const Reranker model = Reranker::FromCheckpoint(LoadCheckpoint(model_path));
  const auto bank = MaybeBank(bank_path);
  SweepSpec spec;
  spec.mode = SweepMode::kJoint;
  spec.candidates = c.task.eval_candidates;
  spec.points = {ExitSchedule::FromSpec(LoadShapeSpec(shape_path))};
  const auto records = EvalRecords(c, data.eval_data);
  auto rows = RunSweep(spec, model, bank ? &*bank : nullptr, records,
                       {c.Eval(), wallclock});
  rows.front().mode = "eval";
  WriteCsv(out, rows);
  if (!rows.front().error.empty()) std::cerr << "error: " << rows.front().error << "\n";
  return rows.front().error.empty() ? 0 : 1;
}

int Sweep(const std::string& model_path, const std::string& spec_path,
          const std::string& bank_path, const std::string& out, bool wallclock,
          const std::string& manifest, const DataFlags& data) {
  const ExperimentConfig c = LoadConfig(data.config);
  const Reranker model = Reranker::FromCheckpoint(LoadCheckpoint(model_path));
  const auto bank = MaybeBank(bank_path);
  const SweepSpec spec = SweepSpec::Parse(ReadTextFile(spec_path), model.config());
  const auto records = EvalRecords(c, data.eval_data);
  const auto rows = RunSweep(spec, model, bank ? &*bank : nullptr, records,
                             {c.Eval(), wallclock});
  WriteCsv(out, rows);
  if (!manifest.empty()) {
    RunManifest m;
    m.seed = spec.seed;
    m.configs = c.ToJson();
    m.configs["sweep"] = spec.ToJson();
    m.artifacts = {{"model", model_path}};
    if (!bank_path.empty()) m.artifacts.emplace_back("bank", bank_path);
    if (!out.empty()) m.artifacts.emplace_back("metrics", out);
    m.Save(manifest);
  }
  return 0;
}

int Ablate(const std::string& config_path, const std::string& out_dir, bool wallclock) {
  const ExperimentConfig c = ExperimentConfig::Load(config_path);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  Experiment e = PrepareExperiment(c);
  auto step = [&](const char* name, auto train) {
    std::cerr << "training " << name << "\n";
    std::ofstream log = OpenOut(dir / (std::string(name) + "_log.jsonl"));
    train(e, &log);
  };
  step("distilled", TrainDistilled);
  step("compensation", TrainCompensator);
  step("labels_only", TrainLabelsOnly);
  step("specialized", TrainSpecialist);

  std::vector<SweepRow> rows;
  for (SweepMode mode : {SweepMode::kHeight, SweepMode::kWidth, SweepMode::kJoint}) {
    SweepSpec spec = SweepSpec::Default(mode, c.model);
    spec.seed = c.train.seed;
    spec.candidates = c.task.eval_candidates;
    auto part = RunSweep(spec, *e.distilled, &*e.bank, e.data.eval, {c.Eval(), wallclock});
    // One baseline row for the combined file.
    if (!rows.empty()) part.pop_back();
    rows.insert(rows.end(), part.begin(), part.end());
  }
  std::stable_partition(rows.begin(), rows.end(),
                        [](const SweepRow& r) { return r.mode != "baseline"; });
  const std::string sweep_csv = (dir / "sweep.csv").string();
  WriteCsv(sweep_csv, rows);
  const auto ablation = RunAblation(e);
  const std::string ablation_csv = (dir / "ablation.csv").string();
  {
    std::ofstream out = OpenOut(ablation_csv);
    WriteAblationCsv(out, ablation);
  }
  WriteAblationCsv(std::cout, ablation);

  const std::string model_ckpt = (dir / "model.ckpt").string();
  const std::string bank_ckpt = (dir / "bank.ckpt").string();
  SaveCheckpoint(model_ckpt, e.distilled->ToCheckpoint());
  SaveCheckpoint(bank_ckpt, e.bank->ToCheckpoint());
  RunManifest m;
  m.seed = c.train.seed;
  m.configs = c.ToJson();
  m.artifacts = {{"model", model_ckpt},
                 {"bank", bank_ckpt},
                 {"sweep", sweep_csv},
                 {"ablation", ablation_csv}};
  m.Save((dir / "manifest.json").string());
  return 0;
}

int Inspect(const std::string& path, const std::string& shape_path, int len) {
  const Checkpoint ckpt = LoadCheckpoint(path);
  const std::string kind = ckpt.metadata.value("kind", "");
  std::cout << "file: " << path << "\ngit_blob_sha1: " << GitBlobHash(path)
            << "\nkind: " << kind << "\n";
  if (kind == "model") {
    const Reranker model = Reranker::FromCheckpoint(ckpt);
    std::size_t count = 0;
    for (const auto& [name, t] : model.Parameters()) count += t.size();
    std::cout << "config: " << model.config().ToJson().dump() << "\nparameters: " << count
              << "\nchecksum: " << model.ParameterChecksum() << "\n";
    if (!shape_path.empty()) {
      const ShapeSpec spec = LoadShapeSpec(shape_path);
      const ShapeConfig shape = spec.Resolve(len);
      ValidateConfig(shape, model.config(), len);
      const FlopsReport f = FlopsEstimate(shape, model.config(), len);
      std::cout << "shape: " << shape.Id() << "\nflops: " << f.total
                << "\nflops_savings: " << f.savings << "\n";
    }
  } else if (kind == "adapter_bank") {
    const AdapterBank bank = AdapterBank::FromCheckpoint(ckpt);
    std::cout << "bank: " << bank.config().ToJson().dump()
              << "\nparameters: " << bank.ParameterCount()
              << "\nchecksum: " << bank.ParameterChecksum() << "\nmanifest:\n";
    for (const auto& entry : ckpt.metadata.at("manifest")) std::cout << "  " << entry.dump() << "\n";
  }
  std::cout << "tensors:\n";
  for (const auto& [name, t] : ckpt.tensors) {
    std::cout << "  " << name << " [";
    for (std::size_t i = 0; i < t.shape().size(); ++i) std::cout << (i ? "x" : "") << t.shape()[i];
    std::cout << "]\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Matryoshka re-ranker: train, compensate, evaluate and sweep"};
  app.require_subcommand(1);
  int status = 0;

  std::string config, out, model, bank, shape, spec, manifest, variant = "distill";
  bool wallclock = false;
  DataFlags data;

  auto* gen = app.add_subcommand("gen-data", "Write train.jsonl and eval.jsonl");
  gen->add_option("config", config, "Config with task keys")->check(CLI::ExistingFile);
  gen->add_option("out_dir", out, "Output directory")->required();
  gen->callback([&] { status = GenData(config, out); });

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  train->add_option("out_dir", out, "Output directory")->required();
  train->add_option("--variant", variant, "distill, labels or specialized")
      ->check(CLI::IsMember({"distill", "labels", "specialized"}));
  train->add_option("--train-data", data.train_data, "Training JSONL instead of generating")
      ->check(CLI::ExistingFile);
  train->callback([&] { status = Train(config, out, variant, data); });

  auto* comp = app.add_subcommand("compensate", "Train an adapter bank for a frozen model");
  comp->add_option("model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
  comp->add_option("config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  comp->add_option("--out-dir", out, "Output directory")->required();
  comp->add_option("--train-data", data.train_data, "Training JSONL instead of generating")
      ->check(CLI::ExistingFile);
  comp->callback([&] { status = Compensate(model, config, out, data); });

  auto* eval = app.add_subcommand("eval", "Evaluate one substructure");
  eval->add_option("model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("shape", shape, "Shape file")->required()->check(CLI::ExistingFile);
  eval->add_option("--bank", bank, "Adapter bank checkpoint")->check(CLI::ExistingFile);
  eval->add_option("--out", out, "Metrics CSV (default stdout)");
  eval->add_flag("--wallclock", wallclock, "Record wall-clock time");
  AddDataFlags(eval, data, false, true);
  eval->callback([&] { status = Eval(model, shape, bank, out, wallclock, data); });

  auto* sweep = app.add_subcommand("sweep", "Evaluate a sweep grid");
  sweep->add_option("model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
  sweep->add_option("spec", spec, "Sweep spec")->required()->check(CLI::ExistingFile);
  sweep->add_option("--bank", bank, "Adapter bank checkpoint")->check(CLI::ExistingFile);
  sweep->add_option("--out", out, "Metrics CSV (default stdout)");
  sweep->add_option("--manifest", manifest, "Run manifest JSON");
  sweep->add_flag("--wallclock", wallclock, "Record wall-clock time");
  AddDataFlags(sweep, data, false, true);
  sweep->callback([&] { status = Sweep(model, spec, bank, out, wallclock, manifest, data); });

  auto* ablate = app.add_subcommand(
      "ablate", "Train every variant, then write sweep.csv, ablation.csv and a manifest");
  ablate->add_option("config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  ablate->add_option("out_dir", out, "Output directory")->required();
  ablate->add_flag("--wallclock", wallclock, "Record wall-clock time");
  ablate->callback([&] { status = Ablate(config, out, wallclock); });

  auto* inspect = app.add_subcommand("inspect", "Describe a checkpoint");
  inspect->add_option("checkpoint", model, "Model or adapter bank checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  inspect->add_option("--shape", shape, "Report FLOPs of a shape file")->check(CLI::ExistingFile);
  int input_len = TaskConfig{}.input_len();
  inspect->add_option("--input-len", input_len, "Input length for --shape")
      ->check(CLI::PositiveNumber);
  inspect->callback([&] { status = Inspect(model, shape, input_len); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return status;
}
