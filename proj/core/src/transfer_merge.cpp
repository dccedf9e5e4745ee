#include "maet/transfer_merge.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "maet/delta_ops.hpp"
#include "maet/error.hpp"
#include "maet/numeric.hpp"
#include "maet/parallel.hpp"

namespace maet {

namespace {

struct MergedTensor {
  std::vector<float> values;
  double max_abs_update = 0.0;
};

MergedTensor merge_tensor(const MergePlan& plan, const TensorMeta& m) {
  const bool selected = plan.selection.contains(m.name);
  const std::vector<float> base = plan.base.read_f32(m.name);
  const std::vector<float> language = plan.multilingual.read_f32(m.name);
  const double language_coefficient = selected || plan.eta_everywhere ? plan.eta : 1.0;
  std::vector<float> ability;
  if (selected) ability = plan.ability.read_f32(m.name);

  MergedTensor out;
  std::vector<double> acc(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    double value = static_cast<double>(base[i]);
    if (selected) {
      const double a = plan.gamma * static_cast<double>(ability[i]);
      if (a != 0.0) value += a;
    }
    const double l = language_coefficient * static_cast<double>(language[i]);
    if (l != 0.0) value += l;
    acc[i] = value;
    out.max_abs_update = std::max(out.max_abs_update, std::fabs(value - static_cast<double>(base[i])));
  }
  out.values = narrow_checked(acc, m.name);
  return out;
}

}  // namespace

std::size_t MergeSummary::selected_count() const {
  return static_cast<std::size_t>(
      std::count_if(rows.begin(), rows.end(), [](const MergeRow& r) { return r.selected; }));
}

void validate(const MergePlan& plan) {
  if (!std::isfinite(plan.gamma) || !std::isfinite(plan.eta)) {
    throw InvalidArgument("gamma and eta must be finite");
  }
  require_aligned(plan.base, plan.ability, "base", "ability weight");
  require_aligned(plan.base, plan.multilingual, "base", "multi-lingual weight");
  for (const std::string& name : plan.selection) {
    if (!plan.base.contains(name)) {
      throw Error("selected tensor '" + name + "' is not in the base checkpoint");
    }
  }
}

TensorStore merge(const MergePlan& plan, const Destination& dest) {
  validate(plan);
  Metadata metadata = plan.base.metadata();
  metadata["kind"] = "merged";
  metadata["gamma"] = format_real(plan.gamma);
  metadata["eta"] = format_real(plan.eta);
  metadata["eta_scope"] = plan.eta_everywhere ? "all" : "selected";
  metadata["selected_tensors"] = std::to_string(plan.selection.size());
  metadata["base"] = plan.base.digest();
  metadata["ability_weight"] = plan.ability.digest();
  metadata["multilingual_weight"] = plan.multilingual.digest();
  return transform_store(
      plan.base, dest, metadata,
      [&](const TensorMeta& m) { return merge_tensor(plan, m).values; },
      [](const TensorMeta& m) { return m.dtype; });
}

MergeSummary dry_run(const MergePlan& plan) {
  validate(plan);
  const std::vector<TensorMeta>& entries = plan.base.entries();
  MergeSummary summary;
  summary.rows.resize(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const TensorMeta& m = entries[i];
    MergedTensor merged = merge_tensor(plan, m);
    // Surface narrowing errors exactly as the real write would.
    for (std::size_t k = 0; k < merged.values.size(); ++k) {
      if (m.dtype == DType::F16 && !float_to_half(merged.values[k])) {
        throw Error("value of tensor '" + m.name + "' at flat index " + std::to_string(k) +
                    " is not representable as F16");
      }
      if (m.dtype == DType::BF16 && !float_to_bf16(merged.values[k])) {
        throw Error("value of tensor '" + m.name + "' at flat index " + std::to_string(k) +
                    " is not representable as BF16");
      }
    }
    summary.rows[i] = {m.name, plan.selection.contains(m.name), merged.max_abs_update, m.dtype};
  });
  return summary;
}

std::string summary_to_json(const MergeSummary& summary) {
  nlohmann::json rows = nlohmann::json::array();
  for (const MergeRow& row : summary.rows) {
    rows.push_back({{"name", row.name},
                    {"branch", row.selected ? "selected" : "unselected"},
                    {"max_abs_update", row.max_abs_update},
                    {"dtype", std::string(to_string(row.dtype))}});
  }
  nlohmann::json doc{{"kind", "merge_summary"},
                     {"tensors", summary.rows.size()},
                     {"selected", summary.selected_count()},
                     {"rows", std::move(rows)}};
  return doc.dump(2) + "\n";
}

}  // namespace maet
