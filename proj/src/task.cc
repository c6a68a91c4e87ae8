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

#include "matryoshka/task.h"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "matryoshka/model.h"

namespace matryoshka {
namespace {

int Uniform(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

class Generator {
 public:
  explicit Generator(const TaskConfig& config)
      : c_(config), rng_(config.seed) {}

  QueryRecord Make(int qid, int n_candidates) {
    QueryRecord r;
    r.qid = qid;
    r.query = Distinct(c_.key_len, KeyLo(), KeyHi());
    for (int t : Distinct(c_.query_len - c_.key_len, KeyHi() + 1, c_.vocab_size - 1)) {
      r.query.push_back(t);
    }
    const std::unordered_set<int> in_query(r.query.begin(), r.query.end());
    const std::vector<int> key(r.query.begin(), r.query.begin() + c_.key_len);
    const std::vector<int> baits(r.query.begin() + c_.key_len, r.query.end());

    std::vector<std::vector<int>> docs;
    docs.push_back(Plant(key, in_query));
    for (int i = 1; i < n_candidates; ++i) {
      std::vector<int> doc = Plant(Decoy(key, in_query), in_query);
      AddBaits(doc, baits);
      docs.push_back(std::move(doc));
    }
    // Doc ids are a random permutation so the positive's id carries nothing.
    std::vector<int> ids(static_cast<std::size_t>(n_candidates));
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng_);
    for (std::size_t i = 0; i < docs.size(); ++i) {
      r.candidates.push_back({ids[i], std::move(docs[i])});
    }
    std::sort(r.candidates.begin(), r.candidates.end(),
              [](const Candidate& a, const Candidate& b) { return a.did < b.did; });
    r.positive_did = ids[0];
    return r;
  }

 private:
  int KeyLo() const { return token::kFirstContent; }
  int KeyHi() const { return token::kFirstContent + c_.key_vocab - 1; }

  // Noise never uses key symbols or query tokens.
  int Noise(const std::unordered_set<int>& in_query) {
    for (;;) {
      const int t = Uniform(rng_, KeyHi() + 1, c_.vocab_size - 1);
      if (!in_query.contains(t)) return t;
    }
  }

  // A key symbol outside the query's key.
  int OtherKey(const std::unordered_set<int>& in_query) {
    for (;;) {
      const int t = Uniform(rng_, KeyLo(), KeyHi());
      if (!in_query.contains(t)) return t;
    }
  }

  std::vector<int> Distinct(int n, int lo, int hi) {
    std::vector<int> out;
    while (static_cast<int>(out.size()) < n) {
      const int t = Uniform(rng_, lo, hi);
      if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    }
    return out;
  }

  // Key with 1..key_len positions replaced, or the key reversed.
  std::vector<int> Decoy(const std::vector<int>& key,
                         const std::unordered_set<int>& in_query) {
    std::vector<int> d = key;
    if (key.size() > 1 &&
        std::bernoulli_distribution(c_.reversed_decoy_prob)(rng_)) {
      std::reverse(d.begin(), d.end());
      return d;
    }
    std::vector<std::size_t> pos(key.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::shuffle(pos.begin(), pos.end(), rng_);
    const int distance = Uniform(rng_, 1, static_cast<int>(key.size()));
    for (int i = 0; i < distance; ++i) d[pos[static_cast<std::size_t>(i)]] = OtherKey(in_query);
    return d;
  }

  std::vector<int> Plant(const std::vector<int>& pattern,
                         const std::unordered_set<int>& in_query) {
    std::vector<int> doc(static_cast<std::size_t>(c_.doc_len));
    for (int& t : doc) t = Noise(in_query);
    const int offset = Uniform(rng_, 0, c_.doc_len - static_cast<int>(pattern.size()));
    std::copy(pattern.begin(), pattern.end(), doc.begin() + offset);
    return doc;
  }

  // Overwrites noise positions (never a planted key symbol) with query tokens.
  void AddBaits(std::vector<int>& doc, const std::vector<int>& baits) {
    if (baits.empty()) return;
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < doc.size(); ++i) {
      if (doc[i] < KeyLo() || doc[i] > KeyHi()) free.push_back(i);
    }
    std::shuffle(free.begin(), free.end(), rng_);
    const int n = std::min<int>(Uniform(rng_, c_.bait_min, c_.bait_max),
                                static_cast<int>(free.size()));
    std::uniform_int_distribution<std::size_t> pick(0, baits.size() - 1);
    for (int i = 0; i < n; ++i) doc[free[static_cast<std::size_t>(i)]] = baits[pick(rng_)];
  }

  TaskConfig c_;
  std::mt19937_64 rng_;
};

}  // namespace

void TaskConfig::Validate() const {
  if (query_len < 1 || key_len < 1 || key_len > query_len) {
    throw ConfigError("need 1 <= key_len <= query_len");
  }
  if (key_vocab < key_len + 1) {
    throw ConfigError("key_vocab must exceed key_len so decoys exist");
  }
  // Noise needs at least a few symbols outside the key alphabet and query.
  if (vocab_size - token::kFirstContent - key_vocab < query_len - key_len + 4) {
    throw ConfigError("vocab_size too small for key_vocab and query_len");
  }
  if (doc_len < key_len) throw ConfigError("doc_len must hold the key");
  if (train_queries < 0 || eval_queries < 0) {
    throw ConfigError("query counts must be non-negative");
  }
  if (train_negatives < 1 || eval_candidates < 2) {
    throw ConfigError("need at least one negative per query");
  }
  if (bait_min < 0 || bait_max < bait_min) {
    throw ConfigError("need 0 <= bait_min <= bait_max");
  }
  if (reversed_decoy_prob < 0.0 || reversed_decoy_prob > 1.0) {
    throw ConfigError("reversed_decoy_prob must be in [0, 1]");
  }
}

bool TaskConfig::ApplyKey(const KvLine& kv) {
  if (kv.key == "vocab_size") {
    vocab_size = KvInt(kv);
  } else if (kv.key == "query_len") {
    query_len = KvInt(kv);
  } else if (kv.key == "doc_len") {
    doc_len = KvInt(kv);
  } else if (kv.key == "key_len") {
    key_len = KvInt(kv);
  } else if (kv.key == "key_vocab") {
    key_vocab = KvInt(kv);
  } else if (kv.key == "train_queries") {
    train_queries = KvInt(kv);
  } else if (kv.key == "eval_queries") {
    eval_queries = KvInt(kv);
  } else if (kv.key == "train_negatives") {
    train_negatives = KvInt(kv);
  } else if (kv.key == "eval_candidates") {
    eval_candidates = KvInt(kv);
  } else if (kv.key == "bait_min") {
    bait_min = KvInt(kv);
  } else if (kv.key == "bait_max") {
    bait_max = KvInt(kv);
  } else if (kv.key == "reversed_decoy_prob") {
    reversed_decoy_prob = KvDouble(kv);
  } else if (kv.key == "task_seed") {
    seed = static_cast<std::uint64_t>(KvInt(kv));
  } else {
    return false;
  }
  return true;
}

TaskConfig TaskConfig::Parse(const std::string& text) {
  TaskConfig c;
  for (const KvLine& kv : ReadKeyValues(text)) {
    if (!c.ApplyKey(kv)) KvFail(kv, "unknown key");
  }
  c.Validate();
  return c;
}

std::string TaskConfig::ToText() const {
  std::ostringstream out;
  out.precision(17);
  out << "vocab_size: " << vocab_size << '\n'
      << "query_len: " << query_len << '\n'
      << "doc_len: " << doc_len << '\n'
      << "key_len: " << key_len << '\n'
      << "key_vocab: " << key_vocab << '\n'
      << "train_queries: " << train_queries << '\n'
      << "eval_queries: " << eval_queries << '\n'
      << "train_negatives: " << train_negatives << '\n'
      << "eval_candidates: " << eval_candidates << '\n'
      << "bait_min: " << bait_min << '\n'
      << "bait_max: " << bait_max << '\n'
      << "reversed_decoy_prob: " << reversed_decoy_prob << '\n'
      << "task_seed: " << seed << '\n';
  return out.str();
}

nlohmann::json TaskConfig::ToJson() const {
  return {{"vocab_size", vocab_size},
          {"query_len", query_len},
          {"doc_len", doc_len},
          {"key_len", key_len},
          {"key_vocab", key_vocab},
          {"train_queries", train_queries},
          {"eval_queries", eval_queries},
          {"train_negatives", train_negatives},
          {"eval_candidates", eval_candidates},
          {"bait_min", bait_min},
          {"bait_max", bait_max},
          {"reversed_decoy_prob", reversed_decoy_prob},
          {"task_seed", seed}};
}

Dataset GenerateTask(const TaskConfig& config) {
  config.Validate();
  Generator gen(config);
  Dataset data;
  for (int q = 0; q < config.train_queries; ++q) {
    data.train.push_back(gen.Make(q, config.train_negatives + 1));
  }
  for (int q = 0; q < config.eval_queries; ++q) {
    data.eval.push_back(gen.Make(config.train_queries + q, config.eval_candidates));
  }
  return data;
}

void WriteJsonl(std::ostream& out, std::span<const QueryRecord> records) {
  for (const QueryRecord& r : records) {
    nlohmann::json cands = nlohmann::json::array();
    for (const Candidate& c : r.candidates) {
      cands.push_back({{"did", c.did}, {"tokens", c.tokens}});
    }
    out << nlohmann::json{{"qid", r.qid},
                          {"query_tokens", r.query},
                          {"candidates", cands},
                          {"positive_did", r.positive_did}}
               .dump()
        << '\n';
  }
}

std::vector<QueryRecord> ReadJsonl(std::istream& in) {
  std::vector<QueryRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      QueryRecord r;
      r.qid = j.at("qid").get<int>();
      r.query = j.at("query_tokens").get<std::vector<int>>();
      for (const auto& c : j.at("candidates")) {
        r.candidates.push_back({c.at("did").get<int>(),
                                c.at("tokens").get<std::vector<int>>()});
      }
      r.positive_did = j.at("positive_did").get<int>();
      const auto hits = std::count_if(
          r.candidates.begin(), r.candidates.end(),
          [&](const Candidate& c) { return c.did == r.positive_did; });
      if (hits != 1) throw std::invalid_argument("positive_did must name one candidate");
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::invalid_argument("dataset line " + std::to_string(line_no) +
                                  ": " + e.what());
    }
  }
  return out;
}

int OverlapScore(std::span<const int> query, std::span<const int> doc) {
  const std::unordered_set<int> q(query.begin(), query.end());
  return static_cast<int>(
      std::count_if(doc.begin(), doc.end(), [&](int t) { return q.contains(t); }));
}

std::vector<Candidate> FirstStageRetrieve(std::span<const int> query,
                                          std::span<const Candidate> candidates,
                                          std::size_t m) {
  std::vector<std::pair<int, const Candidate*>> scored;
  for (const Candidate& c : candidates) scored.emplace_back(OverlapScore(query, c.tokens), &c);
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second->did < b.second->did;
  });
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < std::min(m, scored.size()); ++i) out.push_back(*scored[i].second);
  return out;
}

std::vector<TrainBatch> ToTrainBatches(std::span<const QueryRecord> records,
                                       int max_seq_len, double tau) {
  std::vector<TrainBatch> out;
  out.reserve(records.size());
  for (const QueryRecord& r : records) {
    TrainBatch b;
    b.tau = tau;
    for (std::size_t i = 0; i < r.candidates.size(); ++i) {
      b.candidates.push_back(RenderInput(r.query, r.candidates[i].tokens, max_seq_len));
      if (r.candidates[i].did == r.positive_did) b.gt = static_cast<int>(i);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace matryoshka
