#pragma once

// Key-neuron scoring and masks.
//
// A neuron's importance is approximated by how far a short probe training run
// moved it: |probe - base| per scalar, or the L2 norm of the moved row. The
// top k% of units across all eligible tensors form the key-neuron mask.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "maet/patterns.hpp"
#include "maet/tensor_store.hpp"

namespace maet {

enum class Granularity { Scalar, Row };

std::string_view to_string(Granularity granularity);
Granularity parse_granularity(std::string_view text);

struct ScoreTensor {
  Shape shape;
  std::uint64_t row_length = 1;  // elements per unit; 1 for scalar granularity
  std::vector<double> scores;    // one non-negative score per unit
};

struct ImportanceMap {
  Granularity granularity = Granularity::Scalar;
  /// Recorded scale of the approximation; never consulted by selection.
  double lambda_scale = 1.0;
  std::map<std::string, ScoreTensor> tensors;

  std::uint64_t total_units() const;
  /// Copy with every score multiplied by `factor` (> 0) in binary64.
  ImportanceMap rescaled(double factor) const;
  /// Throws unless every score is finite and non-negative and unit counts
  /// agree with the shapes.
  void validate() const;
};

/// Scores every floating tensor of `base` against the probe-trained copy.
/// Scores are rounded to binary32 so a saved map reloads without change.
ImportanceMap importance(const TensorStore& base, const TensorStore& probe_trained,
                         Granularity granularity = Granularity::Scalar, double lambda_scale = 1.0);

/// Importance file: one F32 tensor of per-unit scores per scored tensor,
/// metadata kind=importance, granularity, lambda and the source shapes.
TensorStore save_importance(const ImportanceMap& map, const Destination& dest,
                            const Metadata& extra = {});
ImportanceMap load_importance(const TensorStore& store);

struct NeuronMask {
  /// Strictly ascending flat indices per tensor; tensors without selected
  /// indices are absent.
  std::map<std::string, std::vector<std::uint64_t>> selected;
  /// Tensor universe the mask was built over: name -> element count.
  std::map<std::string, std::uint64_t> universe;
  std::uint64_t total_units = 0;
  double k_percent = 0.0;

  std::uint64_t size() const;
  bool contains(std::string_view tensor, std::uint64_t index) const;
  /// Throws on non-ascending, out-of-range or out-of-universe indices.
  void validate() const;

  friend bool operator==(const NeuronMask&, const NeuronMask&) = default;
};

/// Selects ceil(k/100 * N) units with the highest scores across all eligible
/// tensors jointly (N = eligible units). Ties go to the smaller tensor name,
/// then the smaller index. Row units expand to all indices of the row.
NeuronMask top_k_mask(const ImportanceMap& map, double k_percent,
                      const NamePatterns& eligible = {});
/// Same selection streamed from an importance file, one tensor at a time.
NeuronMask top_k_mask(const TensorStore& importance_file, double k_percent,
                      const NamePatterns& eligible = {});

NeuronMask mask_union(const NeuronMask& a, const NeuronMask& b);
NeuronMask mask_intersect(const NeuronMask& a, const NeuronMask& b);

/// base everywhere except masked indices, which take the trained value.
/// Output dtypes mirror base.
TensorStore project_update(const TensorStore& base, const TensorStore& trained,
                           const NeuronMask& mask, const Destination& dest = Destination::memory(),
                           const Metadata& extra = {});

/// Mask file: a store of U64 index tensors "<tensor>.idx", metadata kind=mask.
TensorStore mask_to_store(const NeuronMask& mask, const Destination& dest);
NeuronMask mask_from_store(const TensorStore& store);
void export_mask(const NeuronMask& mask, const std::filesystem::path& path);
NeuronMask import_mask(const std::filesystem::path& path);

}  // namespace maet
