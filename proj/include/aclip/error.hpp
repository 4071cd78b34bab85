// Exception taxonomy shared by the whole library. The CLI maps these to
// process exit codes (config -> 2, data/format -> 3, numeric -> 4).
#pragma once

#include <stdexcept>
#include <string>

namespace aclip {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or API misuse (bad flag values, empty sample sets,
// incompatible layer selections, out-of-range labels).
class config_error : public error {
 public:
  using error::error;
};

// Tensor shape/dimension mismatch.
class shape_error : public config_error {
 public:
  using config_error::config_error;
};

// Index out of range (class labels, layer keys).
class index_error : public config_error {
 public:
  using config_error::config_error;
};

// Malformed external data: IDX files, checkpoints, CSV.
class data_error : public error {
 public:
  using error::error;
};

// Numerical failure: NaN/Inf produced by an operation, diverged training.
class numeric_error : public error {
 public:
  using error::error;
};

}  // namespace aclip
