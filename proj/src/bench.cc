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

#include "matryoshka/bench.h"

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "matryoshka/kv_text.h"
#include "matryoshka/metrics.h"
#include "matryoshka/serialization.h"

namespace matryoshka {
namespace {

constexpr const char* kSweepHeader[] = {
    "schema_version", "mode",       "config_id",  "depth",        "widths",
    "flops_savings",  "mrr_at_10",  "ndcg_at_10", "wallclock_ms", "error"};

std::string Join(std::span<const int> values, char sep) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out += sep;
    out += std::to_string(values[i]);
  }
  return out;
}

std::string Fixed(std::optional<double> v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", *v);
  return buf;
}

std::optional<double> ParseOptional(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

// Splits one CSV record, honouring double-quoted fields.
std::vector<std::string> SplitCsv(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

ExitSchedule ParsePoint(const KvLine& kv) {
  ExitSchedule p;
  std::istringstream in(kv.value);
  std::string item;
  bool has_depth = false;
  while (in >> item) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) KvFail(kv, "expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq);
    KvLine part = kv;
    part.value = item.substr(eq + 1);
    if (key == "depth") {
      p.depth = KvInt(part);
      has_depth = true;
    } else if (key == "compress") {
      const auto colon = part.value.find(':');
      if (colon == std::string::npos) KvFail(kv, "compress expects layer:factor");
      KvLine layer = part, factor = part;
      layer.value = part.value.substr(0, colon);
      factor.value = part.value.substr(colon + 1);
      p.events.push_back({KvInt(layer), KvInt(factor)});
    } else if (key == "widths") {
      p.widths = KvIntList(part);
    } else if (key == "factors") {
      p.factors = KvIntList(part);
    } else {
      KvFail(kv, "unknown point field '" + key + "'");
    }
  }
  if (!has_depth && p.widths.empty()) KvFail(kv, "point needs depth or widths");
  if (!has_depth) p.depth = static_cast<int>(p.widths.size());
  return p;
}

}  // namespace

SweepMode ParseSweepMode(const std::string& name) {
  if (name == "height") return SweepMode::kHeight;
  if (name == "width") return SweepMode::kWidth;
  if (name == "joint") return SweepMode::kJoint;
  throw ConfigError("sweep mode must be height, width or joint, got '" + name + "'");
}

std::string SweepModeName(SweepMode mode) {
  switch (mode) {
    case SweepMode::kHeight:
      return "height";
    case SweepMode::kWidth:
      return "width";
    case SweepMode::kJoint:
      return "joint";
  }
  return "";
}

SweepSpec SweepSpec::Default(SweepMode mode, const ModelConfig& model) {
  const int n = model.n_layers;
  const int quarter = std::max(1, n / 4);
  SweepSpec s;
  s.mode = mode;
  switch (mode) {
    case SweepMode::kHeight:
      for (int d = n; d >= 1; d -= 2) s.points.push_back({d, {}});
      break;
    case SweepMode::kWidth:
      s.points.push_back({n, {}});
      if (n / 2 >= 1 && n / 2 < n) s.points.push_back({n, {{n / 2, 2}}});
      for (int k = 2; k <= 4; ++k) {
        if (quarter < n) s.points.push_back({n, {{quarter, k}}});
      }
      if (quarter > 1) s.points.push_back({n, {{1, 2}}});
      break;
    case SweepMode::kJoint:
      s.points.push_back({n, {}});
      for (int d : {n, 3 * n / 4, n / 2, quarter + 1}) {
        if (d > quarter && d <= n) s.points.push_back({d, {{quarter, 2}}});
      }
      break;
  }
  return s;
}

SweepSpec SweepSpec::Parse(const std::string& text, const ModelConfig& model) {
  std::optional<SweepMode> mode;
  std::vector<ExitSchedule> points;
  SweepSpec s;
  for (const KvLine& kv : ReadKeyValues(text)) {
    if (kv.key == "mode") {
      try {
        mode = ParseSweepMode(kv.value);
      } catch (const ConfigError& e) {
        KvFail(kv, e.what());
      }
    } else if (kv.key == "seed") {
      s.seed = static_cast<std::uint64_t>(KvInt(kv));
    } else if (kv.key == "candidates") {
      s.candidates = KvInt(kv);
      if (s.candidates < 1) KvFail(kv, "must be >= 1");
    } else if (kv.key == "point") {
      points.push_back(ParsePoint(kv));
    } else {
      KvFail(kv, "unknown key");
    }
  }
  if (!mode) throw KvParseError("sweep spec: missing 'mode'");
  SweepSpec out = points.empty() ? Default(*mode, model) : s;
  out.mode = *mode;
  out.seed = s.seed;
  out.candidates = s.candidates;
  if (!points.empty()) out.points = std::move(points);
  return out;
}

std::string SweepSpec::ToText() const {
  std::ostringstream out;
  out << "mode: " << SweepModeName(mode) << "\nseed: " << seed
      << "\ncandidates: " << candidates << "\n";
  for (const ExitSchedule& p : points) {
    out << "point: depth=" << p.depth;
    for (const CompressEvent& e : p.events) out << " compress=" << e.layer << ':' << e.factor;
    if (!p.widths.empty()) out << " widths=" << Join(p.widths, ',');
    if (!p.factors.empty()) out << " factors=" << Join(p.factors, ',');
    out << "\n";
  }
  return out.str();
}

nlohmann::json SweepSpec::ToJson() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const ExitSchedule& p : points) pts.push_back(PointId(p));
  return {{"mode", SweepModeName(mode)},
          {"seed", seed},
          {"candidates", candidates},
          {"points", pts}};
}

std::string PointId(const ExitSchedule& point) {
  std::string id = "d" + std::to_string(point.depth);
  for (const CompressEvent& e : point.events) {
    id += "_c" + std::to_string(e.layer) + "k" + std::to_string(e.factor);
  }
  if (!point.widths.empty()) id += "_w" + Join(point.widths, '-');
  return id;
}

std::vector<QueryRecord> TruncateCandidates(std::span<const QueryRecord> records,
                                            int m) {
  std::vector<QueryRecord> out;
  out.reserve(records.size());
  for (const QueryRecord& r : records) {
    QueryRecord t = r;
    t.candidates = FirstStageRetrieve(r.query, r.candidates, static_cast<std::size_t>(m));
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<SweepRow> RunSweep(const SweepSpec& spec, const Reranker& model,
                               const AdapterBank* bank,
                               std::span<const QueryRecord> records,
                               const SweepOptions& options) {
  if (records.empty()) throw std::invalid_argument("RunSweep: no queries");
  const std::vector<QueryRecord> pool = TruncateCandidates(records, spec.candidates);
  const int input_len =
      RenderInput(pool[0].query, pool[0].candidates[0].tokens, model.config().max_seq_len)
          .size();
  std::vector<SweepRow> rows;
  for (const ExitSchedule& point : spec.points) {
    SweepRow row;
    row.mode = SweepModeName(spec.mode);
    row.config_id = PointId(point);
    row.depth = point.depth;
    try {
      const ShapeConfig shape = point.Expand(input_len);
      row.widths = Join(shape.widths, '-');
      const EvalResult r = Evaluate(model, bank, point, pool, options.eval);
      row.flops_savings = r.flops_savings;
      row.mrr_at_10 = r.mrr_at_10;
      row.ndcg_at_10 = r.ndcg_at_10;
      if (options.wallclock) row.wallclock_ms = r.wallclock_ms;
    } catch (const ShapeError& e) {
      row.error = e.what();
    } catch (const std::out_of_range& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  const EvalResult base = EvaluateFirstStage(pool);
  SweepRow b;
  b.mode = "baseline";
  b.config_id = base.config_id;
  b.mrr_at_10 = base.mrr_at_10;
  b.ndcg_at_10 = base.ndcg_at_10;
  rows.push_back(std::move(b));
  return rows;
}

std::string CsvField(const std::string& value) {
  if (value.find_first_of(",\"\r\n") == std::string::npos) return value;
  std::string out = "\"";
  for (char c : value) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void WriteSweepCsv(std::ostream& out, std::span<const SweepRow> rows) {
  for (std::size_t i = 0; i < std::size(kSweepHeader); ++i) {
    out << (i ? "," : "") << kSweepHeader[i];
  }
  out << '\n';
  for (const SweepRow& r : rows) {
    out << kCsvSchemaVersion << ',' << CsvField(r.mode) << ',' << CsvField(r.config_id)
        << ',' << r.depth << ',' << CsvField(r.widths) << ',' << Fixed(r.flops_savings)
        << ',' << Fixed(r.mrr_at_10) << ',' << Fixed(r.ndcg_at_10) << ','
        << Fixed(r.wallclock_ms) << ',' << CsvField(r.error) << '\n';
  }
}

std::vector<SweepRow> ReadSweepCsv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("sweep CSV: empty");
  const auto header = SplitCsv(line);
  if (header.size() != std::size(kSweepHeader)) throw FormatError("sweep CSV: bad header");
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] != kSweepHeader[i]) throw FormatError("sweep CSV: bad header");
  }
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = SplitCsv(line);
    if (f.size() != header.size()) throw FormatError("sweep CSV: wrong field count");
    if (f[0] != std::to_string(kCsvSchemaVersion)) {
      throw FormatError("sweep CSV: schema version " + f[0]);
    }
    SweepRow r;
    r.mode = f[1];
    r.config_id = f[2];
    r.depth = std::stoi(f[3]);
    r.widths = f[4];
    r.flops_savings = ParseOptional(f[5]);
    r.mrr_at_10 = ParseOptional(f[6]);
    r.ndcg_at_10 = ParseOptional(f[7]);
    r.wallclock_ms = ParseOptional(f[8]);
    r.error = f[9];
    rows.push_back(std::move(r));
  }
  return rows;
}

void ComputeRelPerf(std::vector<AblationRow>& rows) {
  const AblationRow* base = nullptr;
  const AblationRow* upper = nullptr;
  for (const AblationRow& r : rows) {
    if (r.role == "baseline") base = &r;
    if (r.role == "upperbound") upper = &r;
  }
  if (base == nullptr || upper == nullptr) {
    throw std::invalid_argument("ablation needs baseline and upperbound rows");
  }
  const double b = base->mrr_at_10;
  const double u = upper->mrr_at_10;
  for (AblationRow& r : rows) {
    if (r.role == "variant") r.rel_perf = RelPerf(r.mrr_at_10, u, b);
  }
}

void WriteAblationCsv(std::ostream& out, std::span<const AblationRow> rows) {
  out << "schema_version,variant,role,mrr_at_10,rel_perf\n";
  for (const AblationRow& r : rows) {
    out << kCsvSchemaVersion << ',' << CsvField(r.variant) << ',' << CsvField(r.role)
        << ',' << Fixed(r.mrr_at_10) << ',' << Fixed(r.rel_perf) << '\n';
  }
}

nlohmann::json RunManifest::ToJson() const {
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& [name, path] : artifacts) {
    hashes[name] = {{"path", path}, {"git_blob_sha1", GitBlobHash(path)}};
  }
  return {{"schema_version", kCsvSchemaVersion},
          {"seed", seed},
          {"configs", configs},
          {"artifacts", hashes}};
}

void RunManifest::Save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << ToJson().dump(2) << '\n';
}

}  // namespace matryoshka
