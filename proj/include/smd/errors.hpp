// Copyright 2026 The SMD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace smd {

/// Raised when array shapes or widths disagree with what an operation expects.
class DimensionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for values outside an operation's domain (non-binary bits, bad
/// probabilities, empty collections, invalid distances or ids).
class DomainError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a file on disk is malformed: bad magic, version, checksum.
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
  public:
    using FormatError::FormatError;
};

/// A tensor in a weights file does not match the shape the config implies.
class ShapeMismatchError : public FormatError {
  public:
    ShapeMismatchError(const std::string &tensor, const std::string &detail)
        : FormatError("shape mismatch for tensor '" + tensor + "': " + detail), tensor_name(tensor) {
    }
    std::string tensor_name;
};

/// Training produced a NaN/Inf.
class NonFiniteError : public std::runtime_error {
  public:
    NonFiniteError(const std::string &tensor, const std::string &detail)
        : std::runtime_error("non-finite value in '" + tensor + "': " + detail), tensor_name(tensor) {
    }
    std::string tensor_name;
};

}  // namespace smd
