#pragma once

// Diagnostics over stores: per-layer similarity of two delta stores and
// per-tensor summary statistics.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "maet/tensor_store.hpp"

namespace maet {

/// First run of decimal digits in the name ("layers.12.mlp.w" -> "12"), or
/// "other" when the name contains none. Leading zeros are kept.
std::string layer_key(std::string_view tensor_name);

struct LayerRow {
  std::string layer;
  std::optional<double> cosine;  // empty when either group has zero norm
  double l1 = 0.0;
  std::size_t tensor_count = 0;
};

struct LayerReport {
  /// Numeric keys in numeric order, then "other".
  std::vector<LayerRow> rows;
};

/// Cosine over each layer's concatenated, flattened tensors (name order) and
/// the summed L1 distance.
LayerReport compare_layers(const TensorStore& a, const TensorStore& b);

struct TensorStats {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double l2 = 0.0;
  double zero_fraction = 0.0;
  std::uint64_t non_finite = 0;  // NaN/Inf count; stats cover the finite values
};

/// One row per tensor, name order. U64 tensors are summarised as integers.
std::vector<TensorStats> summarize(const TensorStore& store);

std::string layer_report_to_json(const LayerReport& report);
std::string stats_to_json(const std::vector<TensorStats>& stats);

}  // namespace maet
