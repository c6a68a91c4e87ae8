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

// Line-oriented "key: value" text used by the training, task and sweep
// config files. '#' starts a comment; blank lines are skipped. Errors cite
// the 1-based line number.

#ifndef MATRYOSHKA_KV_TEXT_H_
#define MATRYOSHKA_KV_TEXT_H_

#include <stdexcept>
#include <string>
#include <vector>

namespace matryoshka {

class KvParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KvLine {
  int line = 0;
  std::string key;
  std::string value;
};

std::vector<KvLine> ReadKeyValues(const std::string& text);
std::string ReadTextFile(const std::string& path);

int KvInt(const KvLine& kv);
double KvDouble(const KvLine& kv);
bool KvBool(const KvLine& kv);
std::vector<int> KvIntList(const KvLine& kv);
[[noreturn]] void KvFail(const KvLine& kv, const std::string& message);

}  // namespace matryoshka

#endif  // MATRYOSHKA_KV_TEXT_H_
