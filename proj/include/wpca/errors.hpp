#pragma once

#include <stdexcept>
#include <string>

namespace wpca {

// Thrown on dimension/rank mismatches between tensors or matrices.
class shape_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown on invalid values handed to a public entry point (non-finite data,
// out-of-range genes, malformed genome literals, too-small batches).
class input_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when serialized data (JSONL datasets, CSV, batch files) is malformed.
class codec_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when an API is used against its documented contract (e.g. asking for
// gradients of a node that was never tagged differentiable).
class contract_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown for configurations that parse but cannot be satisfied, e.g. a search
// space whose every genome violates the parameter cap. The CLI maps this to
// exit code 3.
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when an iterative numeric routine fails to converge or produces
// non-finite intermediates. The CLI maps this to exit code 4.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wpca
