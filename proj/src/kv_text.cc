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

#include "matryoshka/kv_text.h"

#include <charconv>
#include <fstream>
#include <sstream>

namespace matryoshka {
namespace {

std::string Trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

std::vector<KvLine> ReadKeyValues(const std::string& text) {
  std::vector<KvLine> out;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line =
        Trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
      throw KvParseError("line " + std::to_string(line_no) +
                         ": expected 'key: value'");
    }
    out.push_back({line_no, Trim(line.substr(0, colon)),
                   Trim(line.substr(colon + 1))});
  }
  return out;
}

std::string ReadTextFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw KvParseError("cannot open '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void KvFail(const KvLine& kv, const std::string& message) {
  throw KvParseError("line " + std::to_string(kv.line) + ": " + kv.key + ": " +
                     message);
}

int KvInt(const KvLine& kv) {
  int v = 0;
  const char* end = kv.value.data() + kv.value.size();
  const auto [ptr, ec] = std::from_chars(kv.value.data(), end, v);
  if (ec != std::errc() || ptr != end) KvFail(kv, "expected an integer");
  return v;
}

double KvDouble(const KvLine& kv) {
  double v = 0;
  const char* end = kv.value.data() + kv.value.size();
  const auto [ptr, ec] = std::from_chars(kv.value.data(), end, v);
  if (ec != std::errc() || ptr != end) KvFail(kv, "expected a number");
  return v;
}

bool KvBool(const KvLine& kv) {
  if (kv.value == "true" || kv.value == "1") return true;
  if (kv.value == "false" || kv.value == "0") return false;
  KvFail(kv, "expected true or false");
}

std::vector<int> KvIntList(const KvLine& kv) {
  std::vector<int> out;
  std::istringstream in(kv.value);
  std::string item;
  while (std::getline(in, item, ',')) {
    KvLine one = kv;
    one.value = Trim(item);
    out.push_back(KvInt(one));
  }
  if (out.empty()) KvFail(kv, "expected a comma-separated list");
  return out;
}

}  // namespace matryoshka
