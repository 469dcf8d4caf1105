#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace usgen {

// Images travel as float32 tensors shaped (count, channels, height, width)
// with values in [-1, 1].
using ImageBatch = torch::Tensor;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyDatasetError : Error {
  using Error::Error;
};
struct LoadError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ChecksumError : Error {
  using Error::Error;
};
struct VersionError : Error {
  using Error::Error;
};
struct ConfigMismatchError : Error {
  using Error::Error;
};

/// Derives an independent stream seed from a base seed and a path of
/// integers (epoch, batch, image index, ...). Stateless, so a run can be
/// resumed from nothing but the base seed and its counters.
std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::uint64_t> path);

/// CPU generator for torch sampling functions.
at::Generator make_generator(std::uint64_t seed);

/// FNV-1a over raw bytes, rendered as 16 hex digits.
std::string fnv1a_hex(const void* data, std::size_t size,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Pins libtorch to the single-threaded deterministic configuration every
/// bit-reproducibility guarantee in this project relies on.
void use_deterministic_runtime();

inline void check_image_batch(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.dim() != 4) {
    throw ShapeError(std::string(what) + ": expected a rank-4 image batch");
  }
}

std::string shape_str(const torch::Tensor& t);

}  // namespace usgen
