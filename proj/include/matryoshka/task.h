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

// Synthetic retrieval task with a planted relevance rule, and the lexical
// first-stage retriever used as the baseline.
//
// A query starts with a key of `key_len` distinct symbols from a small key
// alphabet, followed by ordinary content tokens. The positive document holds
// the key contiguously at a random offset among noise tokens that never occur
// in the query or the alphabet. Each negative holds a decoy (the key with
// 1..key_len symbols swapped for other alphabet symbols, or the key reversed)
// plus "bait" tokens copied from the query's non-key part, so lexical overlap
// favours negatives while only the positive holds the key in order.

#ifndef MATRYOSHKA_TASK_H_
#define MATRYOSHKA_TASK_H_

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "matryoshka/distill.h"
#include "matryoshka/kv_text.h"

namespace matryoshka {

struct TaskConfig {
  int vocab_size = 64;
  int query_len = 6;
  int doc_len = 16;
  int key_len = 4;
  // Key tokens come from a reserved alphabet of this many symbols.
  int key_vocab = 16;
  int train_queries = 2000;
  int eval_queries = 200;
  int train_negatives = 7;
  int eval_candidates = 16;
  // Bait tokens per negative, drawn uniformly from [bait_min, bait_max].
  int bait_min = 1;
  int bait_max = 3;
  // Probability that a negative's decoy is the reversed key rather than a
  // key with substituted positions.
  double reversed_decoy_prob = 0.0;
  std::uint64_t seed = 7;

  void Validate() const;
  bool ApplyKey(const KvLine& kv);
  static TaskConfig Parse(const std::string& text);
  std::string ToText() const;
  nlohmann::json ToJson() const;
  // Rendered length of every example.
  int input_len() const { return query_len + doc_len + 3; }
};

struct Candidate {
  int did = 0;
  std::vector<int> tokens;
};

struct QueryRecord {
  int qid = 0;
  std::vector<int> query;
  std::vector<Candidate> candidates;
  int positive_did = 0;
};

struct Dataset {
  std::vector<QueryRecord> train;
  std::vector<QueryRecord> eval;
};

// Deterministic in the config: the same config gives identical records.
Dataset GenerateTask(const TaskConfig& config);

// {qid, query_tokens, candidates: [{did, tokens}], positive_did} per line.
void WriteJsonl(std::ostream& out, std::span<const QueryRecord> records);
std::vector<QueryRecord> ReadJsonl(std::istream& in);

// Number of document tokens that occur in the query.
int OverlapScore(std::span<const int> query, std::span<const int> doc);

// Candidates by descending overlap, ties by ascending doc id; top `m`.
std::vector<Candidate> FirstStageRetrieve(std::span<const int> query,
                                          std::span<const Candidate> candidates,
                                          std::size_t m);

// Renders records as training groups, candidates in stored order.
std::vector<TrainBatch> ToTrainBatches(std::span<const QueryRecord> records,
                                       int max_seq_len, double tau);

}  // namespace matryoshka

#endif  // MATRYOSHKA_TASK_H_
