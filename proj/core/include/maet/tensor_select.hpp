#pragma once

// Ranks tensors by the similarity of the ability weight and the multi-lingual
// weight, and picks the low-similarity tail: tensors where the ability update
// has little overlap with the language update.

#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "maet/patterns.hpp"
#include "maet/tensor_store.hpp"

namespace maet {

enum class Metric { Dot, Cosine };

std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view text);

struct SimilarityRow {
  std::string name;
  double score = 0.0;
};

struct SimilarityReport {
  Metric metric = Metric::Dot;
  /// Descending by score; equal scores by ascending name.
  std::vector<SimilarityRow> rows;
};

/// Which end of the ranking forms the selection.
enum class SelectEnd {
  Lowest,   // default: the last k2% of the descending ranking
  Highest,  // the opposite reading, for comparison runs
};

struct TensorSelection {
  std::set<std::string> names;
  double k2_percent = 0.0;
  NamePatterns filters;
  SelectEnd end = SelectEnd::Lowest;
};

SimilarityReport similarity_report(const TensorStore& ability, const TensorStore& multilingual,
                                   Metric metric = Metric::Dot);

/// Rows whose names match any include pattern (all when none) and no exclude pattern.
SimilarityReport filter_patterns(const SimilarityReport& report, const NamePatterns& patterns);

/// Filters, then takes ceil(k2/100 * M) rows from the requested end. At a tie
/// on the boundary, smaller names enter the selection first.
TensorSelection select_last(const SimilarityReport& report, double k2_percent,
                            const NamePatterns& filters = {}, SelectEnd end = SelectEnd::Lowest);

/// Selection file (JSON): metric, k2_percent, filters, one row per reported
/// tensor with its score and selected flag, and the sorted selected names.
std::string selection_to_json(const SimilarityReport& report, const TensorSelection& selection,
                              const Metadata& provenance = {});
void write_selection(const std::filesystem::path& path, const SimilarityReport& report,
                     const TensorSelection& selection, const Metadata& provenance = {});
TensorSelection selection_from_json(std::string_view text);
TensorSelection read_selection(const std::filesystem::path& path);

}  // namespace maet
