#pragma once

// Shared helpers for the test binaries: temp dirs, random stores and
// bit-level comparisons.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "maet/tensor_store.hpp"

namespace maet::testing {

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

using Rng = std::mt19937_64;

/// Uniform in [lo, hi).
double uniform(Rng& rng, double lo, double hi);
std::uint64_t pick(Rng& rng, std::uint64_t n);  // [0, n)
std::string random_name(Rng& rng);

/// Random values that survive a trip through `dtype` unchanged.
std::vector<float> encodable_values(Rng& rng, std::size_t n, DType dtype, double scale = 4.0);

/// 1-6 floating tensors with random names, dtypes and shapes (0-3 dims),
/// plus occasionally a U64 tensor.
std::vector<Tensor> random_tensors(Rng& rng, bool allow_u64 = true);
Metadata random_metadata(Rng& rng);

/// F32 store over the toy model's tensor universe.
std::vector<Tensor> toy_tensors(Rng& rng, double scale);
TensorStore toy_store(Rng& rng, double scale);

/// `base` plus sparse perturbations: each element moves with probability
/// `density` by a random amount of size `scale`.
TensorStore perturbed(const TensorStore& base, Rng& rng, double density, double scale);

TensorStore memory_store(std::vector<Tensor> tensors, const Metadata& metadata = {});

bool same_bits(float a, float b);
/// Names, shapes, dtypes and value bits equal.
bool stores_bit_equal(const TensorStore& a, const TensorStore& b);
std::string slurp(const std::filesystem::path& path);

}  // namespace maet::testing
