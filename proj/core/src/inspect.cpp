#include "maet/inspect.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>

#include "maet/delta_ops.hpp"
#include "maet/parallel.hpp"

namespace maet {

namespace {

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

// Numeric keys first, ordered by value (then text for leading zeros).
bool layer_less(const std::string& a, const std::string& b) {
  const bool a_num = a != "other";
  const bool b_num = b != "other";
  if (a_num != b_num) return a_num;
  if (!a_num) return false;
  const auto strip = [](const std::string& s) {
    const std::size_t p = s.find_first_not_of('0');
    return p == std::string::npos ? std::string("0") : s.substr(p);
  };
  const std::string sa = strip(a);
  const std::string sb = strip(b);
  if (sa.size() != sb.size()) return sa.size() < sb.size();
  if (sa != sb) return sa < sb;
  return a < b;
}

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace

std::string layer_key(std::string_view tensor_name) {
  const auto first = std::find_if(tensor_name.begin(), tensor_name.end(), is_digit);
  if (first == tensor_name.end()) return "other";
  const auto last = std::find_if_not(first, tensor_name.end(), is_digit);
  return std::string(first, last);
}

LayerReport compare_layers(const TensorStore& a, const TensorStore& b) {
  require_aligned(a, b, "first store", "second store");
  std::map<std::string, std::vector<std::string>, decltype(&layer_less)> groups(&layer_less);
  for (const TensorMeta& m : a.entries()) groups[layer_key(m.name)].push_back(m.name);

  std::vector<std::pair<std::string, std::vector<std::string>>> ordered(groups.begin(), groups.end());
  LayerReport report;
  report.rows.resize(ordered.size());
  parallel_for(ordered.size(), [&](std::size_t g) {
    double ab = 0.0, aa = 0.0, bb = 0.0, l1 = 0.0;
    for (const std::string& name : ordered[g].second) {
      const std::vector<float> va = a.read_f32(name);
      const std::vector<float> vb = b.read_f32(name);
      for (std::size_t i = 0; i < va.size(); ++i) {
        const double x = va[i];
        const double y = vb[i];
        ab += x * y;
        aa += x * x;
        bb += y * y;
        l1 += std::fabs(x - y);
      }
    }
    LayerRow& row = report.rows[g];
    row.layer = ordered[g].first;
    row.l1 = l1;
    row.tensor_count = ordered[g].second.size();
    if (aa > 0.0 && bb > 0.0) row.cosine = std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
  });
  return report;
}

std::vector<TensorStats> summarize(const TensorStore& store) {
  const std::vector<TensorMeta>& entries = store.entries();
  std::vector<TensorStats> stats(entries.size());
  parallel_for(entries.size(), [&](std::size_t t) {
    const TensorMeta& m = entries[t];
    std::vector<double> values;
    if (is_floating(m.dtype)) {
      const std::vector<float> raw = store.read_f32_unchecked(m.name);
      values.assign(raw.begin(), raw.end());
    } else {
      const std::vector<std::uint64_t> raw = store.read_u64(m.name);
      values.assign(raw.begin(), raw.end());
    }
    TensorStats& s = stats[t];
    s.name = m.name;
    s.dtype = m.dtype;
    s.shape = m.shape;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    double sum = 0.0, squares = 0.0;
    std::uint64_t finite = 0, zeros = 0;
    for (const double v : values) {
      if (!std::isfinite(v)) {
        ++s.non_finite;
        continue;
      }
      ++finite;
      if (v == 0.0) ++zeros;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      sum += v;
      squares += v * v;
    }
    if (finite > 0) {
      s.min = lo;
      s.max = hi;
      s.mean = sum / static_cast<double>(finite);
      s.l2 = std::sqrt(squares);
    }
    s.zero_fraction = values.empty() ? 0.0 : static_cast<double>(zeros) / static_cast<double>(values.size());
  });
  return stats;
}

std::string layer_report_to_json(const LayerReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const LayerRow& row : report.rows) {
    rows.push_back({{"layer", row.layer},
                    {"cosine", row.cosine ? nlohmann::json(*row.cosine) : nlohmann::json("undefined")},
                    {"l1", number_or_null(row.l1)},
                    {"tensors", row.tensor_count}});
  }
  return nlohmann::json{{"kind", "layer_report"}, {"rows", std::move(rows)}}.dump(2) + "\n";
}

std::string stats_to_json(const std::vector<TensorStats>& stats) {
  nlohmann::json rows = nlohmann::json::array();
  for (const TensorStats& s : stats) {
    rows.push_back({{"name", s.name},
                    {"dtype", std::string(to_string(s.dtype))},
                    {"shape", s.shape},
                    {"min", s.min},
                    {"max", s.max},
                    {"mean", s.mean},
                    {"l2", number_or_null(s.l2)},
                    {"zero_fraction", s.zero_fraction},
                    {"non_finite", s.non_finite}});
  }
  return nlohmann::json{{"kind", "summary"}, {"rows", std::move(rows)}}.dump(2) + "\n";
}

}  // namespace maet
