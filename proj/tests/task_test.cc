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

#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>
#include <vector>

#include "matryoshka/eval.h"
#include "matryoshka/model.h"

namespace matryoshka {
namespace {

TaskConfig Small() {
  TaskConfig c;
  c.train_queries = 60;
  c.eval_queries = 40;
  return c;
}

std::string Serialize(std::span<const QueryRecord> records) {
  std::ostringstream out;
  WriteJsonl(out, records);
  return out.str();
}

bool IsKeySymbol(const TaskConfig& c, int t) {
  return t >= token::kFirstContent && t < token::kFirstContent + c.key_vocab;
}

// Key-alphabet tokens of `doc` in order, with their positions.
std::vector<std::pair<int, int>> KeyRun(const TaskConfig& c, const std::vector<int>& doc) {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < static_cast<int>(doc.size()); ++i) {
    if (IsKeySymbol(c, doc[static_cast<std::size_t>(i)])) {
      out.emplace_back(i, doc[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

TEST(TaskTest, RegenerationIsBitIdentical) {
  const Dataset a = GenerateTask(Small());
  const Dataset b = GenerateTask(Small());
  EXPECT_EQ(Serialize(a.train), Serialize(b.train));
  EXPECT_EQ(Serialize(a.eval), Serialize(b.eval));
  TaskConfig other = Small();
  other.seed = 8;
  EXPECT_NE(Serialize(GenerateTask(other).eval), Serialize(a.eval));
}

TEST(TaskTest, OnePositiveAmongShuffledCandidates) {
  const TaskConfig c = Small();
  const Dataset d = GenerateTask(c);
  ASSERT_EQ(d.train.size(), 60u);
  ASSERT_EQ(d.eval.size(), 40u);
  auto check = [&](const QueryRecord& r, int m) {
    ASSERT_EQ(static_cast<int>(r.candidates.size()), m);
    std::set<int> ids;
    int positives = 0;
    for (const Candidate& cand : r.candidates) {
      ids.insert(cand.did);
      positives += cand.did == r.positive_did;
      EXPECT_EQ(static_cast<int>(cand.tokens.size()), c.doc_len);
    }
    EXPECT_EQ(positives, 1);
    EXPECT_EQ(static_cast<int>(ids.size()), m);
    EXPECT_EQ(*ids.begin(), 0);
    EXPECT_EQ(*ids.rbegin(), m - 1);
  };
  for (const QueryRecord& r : d.train) check(r, c.train_negatives + 1);
  for (const QueryRecord& r : d.eval) check(r, c.eval_candidates);
  // The positive is not always at the same slot.
  std::set<int> slots;
  for (const QueryRecord& r : d.eval) slots.insert(r.positive_did);
  EXPECT_GT(slots.size(), 4u);
}

TEST(TaskTest, PlantedRule) {
  TaskConfig c = Small();
  c.reversed_decoy_prob = 0.3;
  const Dataset d = GenerateTask(c);
  int reversed = 0;
  for (const QueryRecord& r : d.eval) {
    ASSERT_EQ(static_cast<int>(r.query.size()), c.query_len);
    const std::vector<int> key(r.query.begin(), r.query.begin() + c.key_len);
    for (int t : key) EXPECT_TRUE(IsKeySymbol(c, t));
    for (std::size_t i = static_cast<std::size_t>(c.key_len); i < r.query.size(); ++i) {
      EXPECT_FALSE(IsKeySymbol(c, r.query[i]));
    }
    for (const Candidate& cand : r.candidates) {
      for (int t : cand.tokens) {
        EXPECT_GE(t, token::kFirstContent);
        EXPECT_LT(t, c.vocab_size);
      }
      // The only key-alphabet tokens form one contiguous planted pattern.
      const auto run = KeyRun(c, cand.tokens);
      ASSERT_EQ(static_cast<int>(run.size()), c.key_len);
      EXPECT_EQ(run.back().first - run.front().first, c.key_len - 1);
      std::vector<int> pattern;
      for (const auto& [pos, t] : run) pattern.push_back(t);
      if (cand.did == r.positive_did) {
        EXPECT_EQ(pattern, key);
        continue;
      }
      EXPECT_NE(pattern, key);
      std::vector<int> back = key;
      std::reverse(back.begin(), back.end());
      if (pattern == back) {
        ++reversed;
        continue;
      }
      int distance = 0;
      for (int i = 0; i < c.key_len; ++i) {
        const int t = pattern[static_cast<std::size_t>(i)];
        if (t != key[static_cast<std::size_t>(i)]) {
          ++distance;
          // Substitutes come from outside the query.
          EXPECT_EQ(std::count(r.query.begin(), r.query.end(), t), 0);
        }
      }
      EXPECT_GE(distance, 1);
      EXPECT_LE(distance, c.key_len);
    }
  }
  EXPECT_GT(reversed, 0);
}

TEST(TaskTest, BaitsMakeLexicalOverlapMisleading) {
  const TaskConfig c = Small();
  const Dataset d = GenerateTask(c);
  for (const QueryRecord& r : d.eval) {
    for (const Candidate& cand : r.candidates) {
      const int overlap = OverlapScore(r.query, cand.tokens);
      if (cand.did == r.positive_did) {
        EXPECT_EQ(overlap, c.key_len);
      } else {
        EXPECT_GE(overlap, c.bait_min);
        EXPECT_LE(overlap, c.key_len - 1 + c.bait_max);
      }
    }
  }
  EXPECT_LT(EvaluateFirstStage(d.eval).mrr_at_10, 0.3);
}

TEST(TaskTest, JsonlRoundTrip) {
  const Dataset d = GenerateTask(Small());
  std::istringstream in(Serialize(d.eval));
  const auto back = ReadJsonl(in);
  EXPECT_EQ(Serialize(back), Serialize(d.eval));
}

TEST(TaskTest, JsonlRejectsTwoPositives) {
  std::istringstream in(
      R"({"qid":0,"query_tokens":[4,5],"candidates":[{"did":0,"tokens":[4]},)"
      R"({"did":0,"tokens":[5]}],"positive_did":0})"
      "\n");
  EXPECT_THROW(ReadJsonl(in), std::exception);
}

TEST(TaskTest, ConfigValidation) {
  EXPECT_THROW(TaskConfig::Parse("key_len: 7\n"), std::exception);
  EXPECT_THROW(TaskConfig::Parse("key_vocab: 2\n"), std::exception);
  EXPECT_THROW(TaskConfig::Parse("bait_min: 3\nbait_max: 1\n"), std::exception);
  EXPECT_THROW(TaskConfig::Parse("colour: blue\n"), KvParseError);
  TaskConfig c;
  c.doc_len = 12;
  c.key_vocab = 6;
  EXPECT_EQ(TaskConfig::Parse(c.ToText()).ToText(), c.ToText());
}

TEST(FirstStageTest, OverlapCountsDocTokens) {
  const std::vector<int> q = {4, 5, 6};
  EXPECT_EQ(OverlapScore(q, std::vector<int>{4, 4, 9}), 2);
  EXPECT_EQ(OverlapScore(q, std::vector<int>{7, 8}), 0);
}

TEST(FirstStageTest, SortsByOverlapThenId) {
  const std::vector<int> q = {4, 5, 6};
  // Overlap counts {3, 1, 2}.
  const std::vector<Candidate> cands = {
      {0, {4, 5, 6, 9}}, {1, {4, 9, 9, 9}}, {2, {5, 6, 9, 9}}};
  const auto order = FirstStageRetrieve(q, cands, 3);
  ASSERT_EQ(order.size(), 3u);
  EXPECT_EQ(order[0].did, 0);
  EXPECT_EQ(order[1].did, 2);
  EXPECT_EQ(order[2].did, 1);
  const std::vector<Candidate> tied = {{7, {4}}, {3, {5}}, {5, {9}}};
  const auto t = FirstStageRetrieve(q, tied, 2);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].did, 3);
  EXPECT_EQ(t[1].did, 7);
}

TEST(FirstStageTest, DocEqualToQueryRanksFirst) {
  const std::vector<int> q = {4, 5, 6, 7};
  const std::vector<Candidate> cands = {{0, {4, 9, 9, 9}}, {1, {8, 8, 8, 8}}, {2, q}};
  EXPECT_EQ(FirstStageRetrieve(q, cands, 1).at(0).did, 2);
}

}  // namespace
}  // namespace matryoshka
