#pragma once

// Elementwise arithmetic and inner products over aligned stores.
//
// Values are decoded to binary32; every reduction accumulates in binary64,
// sequentially in flat-index order. Parallelism is only ever across tensors,
// so results do not depend on MAET_THREADS.

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "maet/tensor_store.hpp"

namespace maet {

// ---- per-tensor kernels ---------------------------------------------------

struct WeightedValues {
  std::span<const float> values;
  double coefficient = 0.0;
};

/// minuend - subtrahend in binary32.
std::vector<float> subtract(std::span<const float> minuend, std::span<const float> subtrahend);

/// Sum of coefficient_k * values_k in binary64, in term order. Terms with a
/// zero coefficient are dropped, the first remaining term initialises the
/// accumulator, and later products that are exactly zero are not added. A
/// single surviving term therefore reproduces its values bit-exactly,
/// signed zeros included.
std::vector<double> combine_values(std::span<const WeightedValues> terms);

double dot(std::span<const float> a, std::span<const float> b);
double squared_norm(std::span<const float> a);
/// Throws Error if either operand has zero norm.
double cosine(std::span<const float> a, std::span<const float> b);
double l1_distance(std::span<const float> a, std::span<const float> b);

/// Rounds to binary32; throws if any value is or becomes non-finite,
/// naming `tensor` and the flat index.
std::vector<float> narrow_checked(std::span<const double> values, std::string_view tensor);

// ---- store-level operations -----------------------------------------------

/// Strict alignment: identical name sets, identical shapes, floating dtypes.
/// The error names the first offending tensor.
void require_aligned(const TensorStore& a, const TensorStore& b, std::string_view a_role,
                     std::string_view b_role);

/// Emits one tensor per entry of `layout` (same names and shapes), computed by
/// `compute` in parallel across tensors and written in name order.
/// `output_dtype` defaults to F32.
TensorStore transform_store(const TensorStore& layout, const Destination& dest,
                            const Metadata& metadata,
                            const std::function<std::vector<float>(const TensorMeta&)>& compute,
                            const std::function<DType(const TensorMeta&)>& output_dtype = {});

/// Delta store minuend - subtrahend, persisted as F32 with metadata
/// kind=delta and the SHA-256 of both operands.
TensorStore diff(const TensorStore& minuend, const TensorStore& subtrahend,
                 const Destination& dest = Destination::memory(), const Metadata& extra = {});

struct Term {
  TensorStore store;
  double coefficient = 0.0;
};

/// Elementwise sum of coefficient * store over aligned delta stores.
TensorStore linear_combine(const std::vector<Term>& terms,
                           const Destination& dest = Destination::memory(),
                           const Metadata& extra = {});

double tensor_dot(const TensorStore& a, const TensorStore& b, std::string_view name);
double tensor_cosine(const TensorStore& a, const TensorStore& b, std::string_view name);
double tensor_l1(const TensorStore& a, const TensorStore& b, std::string_view name);

}  // namespace maet
