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

#include "matryoshka/serialization.h"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>

namespace matryoshka {
namespace {

constexpr char kMagic[8] = {'M', 'T', 'R', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void WriteLittle(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T ReadLittle(std::istream& in) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw FormatError("unexpected end of stream");
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void WriteTensor(std::ostream& out, const Tensor& tensor) {
  WriteLittle<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) {
    WriteLittle<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  }
  for (double v : tensor.data()) WriteLittle<double>(out, v);
  if (!out) throw FormatError("failed to write tensor");
}

Tensor ReadTensor(std::istream& in) {
  const auto rank = ReadLittle<std::uint32_t>(in);
  if (rank > kMaxRank) {
    throw FormatError("tensor rank " + std::to_string(rank) + " exceeds " +
                      std::to_string(kMaxRank));
  }
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(ReadLittle<std::uint64_t>(in));
  std::vector<double> data(NumElements(shape));
  for (double& v : data) v = ReadLittle<double>(in);
  return Tensor::FromData(std::move(shape), std::move(data));
}

void WriteCheckpoint(std::ostream& out, const Checkpoint& checkpoint) {
  nlohmann::json header = checkpoint.metadata;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, tensor] : checkpoint.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", tensor.shape()}});
  }
  const std::string text = header.dump();
  out.write(kMagic, sizeof(kMagic));
  WriteLittle<std::uint32_t>(out, kFormatVersion);
  WriteLittle<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, tensor] : checkpoint.tensors) WriteTensor(out, tensor);
  if (!out) throw FormatError("failed to write checkpoint");
}

Checkpoint ReadCheckpoint(std::istream& in) {
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const auto version = ReadLittle<std::uint32_t>(in);
  if (version != kFormatVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  const auto header_len = ReadLittle<std::uint64_t>(in);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw FormatError("truncated checkpoint header");
  }
  Checkpoint checkpoint;
  try {
    checkpoint.metadata = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  const auto entries = checkpoint.metadata.at("tensors");
  for (const auto& entry : entries) {
    Tensor t = ReadTensor(in);
    const auto expected = entry.at("shape").get<Shape>();
    if (t.shape() != expected) {
      throw FormatError("tensor '" + entry.at("name").get<std::string>() +
                        "' has shape " + ShapeToString(t.shape()) +
                        ", header says " + ShapeToString(expected));
    }
    checkpoint.tensors.emplace_back(entry.at("name").get<std::string>(),
                                    std::move(t));
  }
  checkpoint.metadata.erase("tensors");
  return checkpoint;
}

void SaveCheckpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  WriteCheckpoint(out, checkpoint);
}

Checkpoint LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return ReadCheckpoint(in);
}

std::string GitBlobHashOfBytes(const std::string& bytes) {
  const std::string prefix = "blob " + std::to_string(bytes.size());
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int digest_len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, prefix.data(), prefix.size() + 1);  // Includes NUL.
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, digest.data(), &digest_len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < digest_len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0')
        << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string GitBlobHash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return GitBlobHashOfBytes(bytes);
}

}  // namespace matryoshka
