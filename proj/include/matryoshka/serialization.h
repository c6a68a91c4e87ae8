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

// Binary formats for tensors and named-tensor checkpoints.
//
// Tensor record (all integers and floats little-endian):
//   u32  rank
//   u64  dim[rank]
//   f64  data[product(dim)]          row-major
//
// Checkpoint container:
//   char[8] magic "MTRKCKPT"
//   u32     format version (1)
//   u64     header byte length H
//   char[H] UTF-8 JSON header; "tensors" is an array of {"name", "shape"}
//           in payload order, other keys are owner-defined metadata
//   then one tensor record per "tensors" entry, in order

#ifndef MATRYOSHKA_SERIALIZATION_H_
#define MATRYOSHKA_SERIALIZATION_H_

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "matryoshka/tensor.h"

namespace matryoshka {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void WriteTensor(std::ostream& out, const Tensor& tensor);
Tensor ReadTensor(std::istream& in);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  NamedTensors tensors;
};

void WriteCheckpoint(std::ostream& out, const Checkpoint& checkpoint);
Checkpoint ReadCheckpoint(std::istream& in);
void SaveCheckpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint LoadCheckpoint(const std::string& path);

// Git blob hash ("blob <len>\0" + bytes, SHA-1, lowercase hex) of a file.
std::string GitBlobHash(const std::string& path);
std::string GitBlobHashOfBytes(const std::string& bytes);

}  // namespace matryoshka

#endif  // MATRYOSHKA_SERIALIZATION_H_
