// Copyright 2026 The pmam-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef PMAM_ERRORS_HPP
#define PMAM_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace pmam {

// Error taxonomy. The CLI maps these onto process exit codes:
// ParameterError/config problems -> 2, DataError -> 3, NumericalError -> 4.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes or category counts.
struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid hyperparameter, flag, or config value.
struct ParameterError : Error {
  explicit ParameterError(const std::string& msg) : Error(msg) {}
};

// Dataset violates a contract (too few samples, missing labels, ...).
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// API misuse: non-scalar loss, empty mask over a whole batch, ...
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Filesystem or serialization failure.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Checkpoint/config incompatible with the requested model.
struct LoadError : Error {
  explicit LoadError(const std::string& msg) : Error(msg) {}
};

// Non-finite values encountered during training.
struct NumericalError : Error {
  explicit NumericalError(const std::string& msg) : Error(msg) {}
};

}  // namespace pmam

#endif  // PMAM_ERRORS_HPP
