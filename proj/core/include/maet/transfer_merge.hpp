#pragma once

// Final assembly of the multi-lingual ability-enhanced checkpoint:
//
//   tensor in the selection:      base + gamma * R(A) + eta * R_Lang
//   tensor outside the selection: base + R_Lang
//
// The outside branch carries no eta unless `eta_everywhere` is set.

#include <set>
#include <string>
#include <vector>

#include "maet/tensor_store.hpp"

namespace maet {

inline constexpr double kDefaultGamma = 0.2;
inline constexpr double kDefaultEta = 1.0;

struct MergePlan {
  TensorStore base;
  TensorStore ability;
  TensorStore multilingual;
  std::set<std::string> selection;
  double gamma = kDefaultGamma;
  double eta = kDefaultEta;
  bool eta_everywhere = false;
};

struct MergeRow {
  std::string name;
  bool selected = false;
  double max_abs_update = 0.0;  // max |merged - base| before narrowing
  DType dtype = DType::F32;
};

struct MergeSummary {
  std::vector<MergeRow> rows;  // ascending name, one per tensor
  std::size_t selected_count() const;
};

/// Throws on misaligned stores, selection names outside the universe or
/// non-finite hyper-parameters.
void validate(const MergePlan& plan);

/// Streams the merge one tensor at a time. Each element starts from the base
/// value in binary64 and adds the non-zero weighted updates, so zero updates
/// leave base values bit-identical. Output dtypes mirror base. Metadata is
/// the base metadata plus kind=merged, gamma, eta, eta_scope and the input
/// digests.
TensorStore merge(const MergePlan& plan, const Destination& dest = Destination::memory());

/// Computes everything merge() would, including its errors, without writing.
MergeSummary dry_run(const MergePlan& plan);

std::string summary_to_json(const MergeSummary& summary);

}  // namespace maet
