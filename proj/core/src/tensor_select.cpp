#include "maet/tensor_select.hpp"

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "maet/delta_ops.hpp"
#include "maet/error.hpp"
#include "maet/numeric.hpp"
#include "maet/parallel.hpp"

namespace maet {

using json = nlohmann::json;

std::string_view to_string(Metric metric) { return metric == Metric::Dot ? "dot" : "cosine"; }

Metric parse_metric(std::string_view text) {
  if (text == "dot") return Metric::Dot;
  if (text == "cosine") return Metric::Cosine;
  throw InvalidArgument("metric must be 'dot' or 'cosine', got '" + std::string(text) + "'");
}

SimilarityReport similarity_report(const TensorStore& ability, const TensorStore& multilingual,
                                   Metric metric) {
  require_aligned(ability, multilingual, "ability weight", "multi-lingual weight");
  const std::vector<TensorMeta>& entries = ability.entries();
  SimilarityReport report;
  report.metric = metric;
  report.rows.resize(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const std::string& name = entries[i].name;
    report.rows[i].name = name;
    report.rows[i].score = metric == Metric::Dot ? tensor_dot(ability, multilingual, name)
                                                 : tensor_cosine(ability, multilingual, name);
  });
  std::sort(report.rows.begin(), report.rows.end(), [](const SimilarityRow& a, const SimilarityRow& b) {
    return a.score != b.score ? a.score > b.score : a.name < b.name;
  });
  return report;
}

SimilarityReport filter_patterns(const SimilarityReport& report, const NamePatterns& patterns) {
  patterns.validate();
  SimilarityReport out;
  out.metric = report.metric;
  for (const SimilarityRow& row : report.rows) {
    if (patterns.matches(row.name)) out.rows.push_back(row);
  }
  return out;
}

TensorSelection select_last(const SimilarityReport& report, double k2_percent,
                            const NamePatterns& filters, SelectEnd end) {
  check_percent(k2_percent, "k2 (tensor percent)");
  std::vector<SimilarityRow> rows = filter_patterns(report, filters).rows;
  if (rows.empty()) throw InvalidArgument("no tensors left to select from after filtering");
  // Order by distance from the chosen end; names ascending within a tie so
  // they enter the selection first.
  std::sort(rows.begin(), rows.end(), [end](const SimilarityRow& a, const SimilarityRow& b) {
    if (a.score != b.score) return end == SelectEnd::Lowest ? a.score < b.score : a.score > b.score;
    return a.name < b.name;
  });
  TensorSelection selection;
  selection.k2_percent = k2_percent;
  selection.filters = filters;
  selection.end = end;
  const std::uint64_t count = selection_count(k2_percent, rows.size());
  for (std::uint64_t i = 0; i < count; ++i) selection.names.insert(rows[i].name);
  return selection;
}

std::string selection_to_json(const SimilarityReport& report, const TensorSelection& selection,
                              const Metadata& provenance) {
  json doc;
  doc["kind"] = "selection";
  doc["metric"] = to_string(report.metric);
  doc["k2_percent"] = selection.k2_percent;
  doc["end"] = selection.end == SelectEnd::Lowest ? "lowest" : "highest";
  doc["include"] = selection.filters.include;
  doc["exclude"] = selection.filters.exclude;
  json rows = json::array();
  for (const SimilarityRow& row : report.rows) {
    rows.push_back({{"name", row.name},
                    {"score", row.score},
                    {"selected", selection.names.contains(row.name)}});
  }
  doc["rows"] = std::move(rows);
  doc["names"] = selection.names;
  if (!provenance.empty()) doc["provenance"] = provenance;
  return doc.dump(2) + "\n";
}

void write_selection(const std::filesystem::path& path, const SimilarityReport& report,
                     const TensorSelection& selection, const Metadata& provenance) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << selection_to_json(report, selection, provenance);
  if (!out) throw Error("cannot write selection file '" + path.string() + "'");
}

TensorSelection selection_from_json(std::string_view text) {
  TensorSelection selection;
  try {
    const json doc = json::parse(text);
    if (!doc.is_object() || doc.value("kind", "") != "selection") {
      throw Error("selection file: kind != selection");
    }
    selection.names = doc.at("names").get<std::set<std::string>>();
    selection.k2_percent = doc.value("k2_percent", 0.0);
    selection.end = doc.value("end", "lowest") == "highest" ? SelectEnd::Highest : SelectEnd::Lowest;
    selection.filters.include = doc.value("include", std::vector<std::string>{});
    selection.filters.exclude = doc.value("exclude", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw Error(std::string("malformed selection file: ") + e.what());
  }
  return selection;
}

TensorSelection read_selection(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open selection file '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return selection_from_json(text.str());
}

}  // namespace maet
