#include "maet/neuron_importance.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <nlohmann/json.hpp>

#include "maet/delta_ops.hpp"
#include "maet/error.hpp"
#include "maet/numeric.hpp"
#include "maet/parallel.hpp"

namespace maet {

using json = nlohmann::json;

namespace {

constexpr std::string_view kIndexSuffix = ".idx";

std::uint64_t units_for(const Shape& shape, Granularity granularity) {
  if (granularity == Granularity::Scalar || shape.empty()) return element_count(shape);
  return shape.front();
}

std::uint64_t row_length_for(const Shape& shape, Granularity granularity) {
  if (granularity == Granularity::Scalar || shape.empty()) return 1;
  return shape.front() == 0 ? 0 : element_count(shape) / shape.front();
}

std::uint64_t parse_u64(const std::string& text, std::string_view what) {
  std::uint64_t value = 0;
  const auto result = std::from_chars(text.data(), text.data() + text.size(), value);
  if (result.ec != std::errc() || result.ptr != text.data() + text.size()) {
    throw Error(std::string(what) + ": '" + text + "' is not an unsigned integer");
  }
  return value;
}

// One eligible tensor as seen by the selector.
struct ScoreSource {
  std::string name;
  std::uint64_t units = 0;
  std::uint64_t row_length = 1;
  std::uint64_t numel = 0;
  std::function<std::vector<double>()> load;
};

struct Candidate {
  double score;
  std::uint32_t tensor;  // ordinal in ascending name order
  std::uint64_t unit;
};

// Strict total order: higher score first, then smaller tensor name, then
// smaller unit index. The selected set is therefore independent of the
// selection algorithm.
bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tensor != b.tensor) return a.tensor < b.tensor;
  return a.unit < b.unit;
}

void keep_best(std::vector<Candidate>& pool, std::uint64_t k) {
  if (pool.size() <= k) return;
  std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end(),
                   ranks_before);
  pool.resize(k);
}

NeuronMask select_top(const std::vector<ScoreSource>& sources, double k_percent) {
  check_percent(k_percent, "k1 (key-neuron percent)");
  std::uint64_t total = 0;
  for (const ScoreSource& s : sources) total += s.units;
  if (total == 0) throw InvalidArgument("no eligible units: the eligible tensor set is empty");
  const std::uint64_t k = selection_count(k_percent, total);

  std::vector<Candidate> pool;
  for (std::uint32_t t = 0; t < sources.size(); ++t) {
    const ScoreSource& source = sources[t];
    if (source.units == 0) continue;
    const std::vector<double> scores = source.load();
    if (scores.size() != source.units) {
      throw Error("tensor '" + source.name + "' has " + std::to_string(scores.size()) +
                  " scores, expected " + std::to_string(source.units));
    }
    const std::uint64_t take = std::min<std::uint64_t>(k, scores.size());
    std::vector<std::uint64_t> order(scores.size());
    for (std::uint64_t u = 0; u < order.size(); ++u) order[u] = u;
    auto unit_before = [&](std::uint64_t a, std::uint64_t b) {
      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
    };
    if (take < order.size()) {
      std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                       unit_before);
    }
    for (std::uint64_t i = 0; i < take; ++i) pool.push_back({scores[order[i]], t, order[i]});
    if (pool.size() > 2 * k) keep_best(pool, k);
  }
  keep_best(pool, k);

  NeuronMask mask;
  mask.total_units = total;
  mask.k_percent = k_percent;
  for (const ScoreSource& s : sources) mask.universe.emplace(s.name, s.numel);
  std::sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
    return a.tensor != b.tensor ? a.tensor < b.tensor : a.unit < b.unit;
  });
  for (const Candidate& c : pool) {
    const ScoreSource& s = sources[c.tensor];
    std::vector<std::uint64_t>& indices = mask.selected[s.name];
    for (std::uint64_t j = 0; j < s.row_length; ++j) indices.push_back(c.unit * s.row_length + j);
  }
  std::erase_if(mask.selected, [](const auto& entry) { return entry.second.empty(); });
  return mask;
}

void require_compatible(const NeuronMask& a, const NeuronMask& b) {
  for (const auto& [name, numel] : a.universe) {
    auto it = b.universe.find(name);
    if (it != b.universe.end() && it->second != numel) {
      throw Error("incompatible tensor universes: '" + name + "' has " + std::to_string(numel) +
                  " vs " + std::to_string(it->second) + " elements");
    }
  }
}

NeuronMask combine_masks(const NeuronMask& a, const NeuronMask& b, bool keep_union) {
  require_compatible(a, b);
  NeuronMask out;
  out.universe = a.universe;
  out.universe.insert(b.universe.begin(), b.universe.end());
  for (const auto& [name, numel] : out.universe) {
    static const std::vector<std::uint64_t> kNone;
    auto ia = a.selected.find(name);
    auto ib = b.selected.find(name);
    const auto& xs = ia == a.selected.end() ? kNone : ia->second;
    const auto& ys = ib == b.selected.end() ? kNone : ib->second;
    std::vector<std::uint64_t> merged;
    if (keep_union) {
      std::set_union(xs.begin(), xs.end(), ys.begin(), ys.end(), std::back_inserter(merged));
    } else {
      std::set_intersection(xs.begin(), xs.end(), ys.begin(), ys.end(), std::back_inserter(merged));
    }
    if (!merged.empty()) out.selected.emplace(name, std::move(merged));
    out.total_units += numel;
  }
  out.k_percent = out.total_units == 0
                      ? 0.0
                      : 100.0 * static_cast<double>(out.size()) / static_cast<double>(out.total_units);
  return out;
}

}  // namespace

std::string_view to_string(Granularity granularity) {
  return granularity == Granularity::Scalar ? "scalar" : "row";
}

Granularity parse_granularity(std::string_view text) {
  if (text == "scalar") return Granularity::Scalar;
  if (text == "row") return Granularity::Row;
  throw InvalidArgument("granularity must be 'scalar' or 'row', got '" + std::string(text) + "'");
}

// ---- ImportanceMap ----------------------------------------------------------

std::uint64_t ImportanceMap::total_units() const {
  std::uint64_t total = 0;
  for (const auto& [name, t] : tensors) total += t.scores.size();
  return total;
}

ImportanceMap ImportanceMap::rescaled(double factor) const {
  if (!(factor > 0.0) || !std::isfinite(factor)) {
    throw InvalidArgument("rescale factor must be positive and finite");
  }
  ImportanceMap out = *this;
  for (auto& [name, t] : out.tensors) {
    for (double& s : t.scores) s *= factor;
  }
  return out;
}

void ImportanceMap::validate() const {
  for (const auto& [name, t] : tensors) {
    if (t.scores.size() != units_for(t.shape, granularity)) {
      throw Error("importance for '" + name + "' has " + std::to_string(t.scores.size()) +
                  " scores for shape " + shape_to_string(t.shape));
    }
    for (std::size_t i = 0; i < t.scores.size(); ++i) {
      if (!std::isfinite(t.scores[i]) || t.scores[i] < 0.0) {
        throw Error("importance for '" + name + "' unit " + std::to_string(i) +
                    " is negative or non-finite");
      }
    }
  }
}

ImportanceMap importance(const TensorStore& base, const TensorStore& probe_trained,
                         Granularity granularity, double lambda_scale) {
  require_aligned(base, probe_trained, "base", "probe");
  if (!(lambda_scale > 0.0) || !std::isfinite(lambda_scale)) {
    throw InvalidArgument("lambda must be positive and finite");
  }
  const std::vector<TensorMeta>& entries = base.entries();
  std::vector<ScoreTensor> scored(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const TensorMeta& m = entries[i];
    const std::vector<float> moved = subtract(probe_trained.read_f32(m.name), base.read_f32(m.name));
    ScoreTensor& out = scored[i];
    out.shape = m.shape;
    out.row_length = row_length_for(m.shape, granularity);
    const std::uint64_t units = units_for(m.shape, granularity);
    out.scores.resize(units);
    for (std::uint64_t u = 0; u < units; ++u) {
      double score = 0.0;
      if (granularity == Granularity::Scalar) {
        score = std::fabs(moved[u]);
      } else {
        double sum = 0.0;
        for (std::uint64_t j = 0; j < out.row_length; ++j) {
          const double d = moved[u * out.row_length + j];
          sum += d * d;
        }
        score = std::sqrt(sum);
      }
      const float rounded = static_cast<float>(score);
      if (!std::isfinite(rounded)) {
        throw Error("non-finite difference in tensor '" + m.name + "' unit " + std::to_string(u));
      }
      out.scores[u] = rounded;
    }
  });
  ImportanceMap map;
  map.granularity = granularity;
  map.lambda_scale = lambda_scale;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    map.tensors.emplace(entries[i].name, std::move(scored[i]));
  }
  return map;
}

TensorStore save_importance(const ImportanceMap& map, const Destination& dest,
                            const Metadata& extra) {
  map.validate();
  Metadata metadata = extra;
  metadata["kind"] = "importance";
  metadata["granularity"] = std::string(to_string(map.granularity));
  metadata["lambda"] = format_real(map.lambda_scale);
  json shapes = json::object();
  std::vector<TensorSpec> specs;
  for (const auto& [name, t] : map.tensors) {
    shapes[name] = t.shape;
    specs.push_back({name, DType::F32, Shape{t.scores.size()}});
  }
  metadata["shapes"] = shapes.dump();
  return emit_store(dest, std::move(specs), metadata, [&](StoreWriter& writer) {
    for (const auto& [name, t] : map.tensors) {
      std::vector<float> narrowed(t.scores.begin(), t.scores.end());
      writer.write_f32(name, narrowed);
    }
  });
}

namespace {

struct ImportanceHeader {
  Granularity granularity = Granularity::Scalar;
  double lambda = 1.0;
  std::map<std::string, Shape> shapes;
};

ImportanceHeader read_importance_header(const TensorStore& store) {
  if (store.metadata_value("kind") != "importance") {
    throw Error(store.label() + " is not an importance file (metadata kind != importance)");
  }
  ImportanceHeader header;
  header.granularity = parse_granularity(store.metadata_value("granularity").value_or("scalar"));
  header.lambda = parse_real(store.metadata_value("lambda").value_or("1"), "importance lambda");
  try {
    const json shapes = json::parse(store.metadata_value("shapes").value_or("{}"));
    for (const auto& [name, shape] : shapes.items()) {
      header.shapes.emplace(name, shape.get<Shape>());
    }
  } catch (const json::exception& e) {
    throw Error("importance file has malformed 'shapes' metadata: " + std::string(e.what()));
  }
  for (const TensorMeta& m : store.entries()) {
    if (!header.shapes.contains(m.name)) {
      throw Error("importance file lacks the source shape of '" + m.name + "'");
    }
  }
  return header;
}

}  // namespace

ImportanceMap load_importance(const TensorStore& store) {
  const ImportanceHeader header = read_importance_header(store);
  ImportanceMap map;
  map.granularity = header.granularity;
  map.lambda_scale = header.lambda;
  for (const TensorMeta& m : store.entries()) {
    ScoreTensor t;
    t.shape = header.shapes.at(m.name);
    t.row_length = row_length_for(t.shape, map.granularity);
    const std::vector<float> scores = store.read_f32(m.name);
    t.scores.assign(scores.begin(), scores.end());
    map.tensors.emplace(m.name, std::move(t));
  }
  map.validate();
  return map;
}

// ---- selection ---------------------------------------------------------------

NeuronMask top_k_mask(const ImportanceMap& map, double k_percent, const NamePatterns& eligible) {
  eligible.validate();
  map.validate();
  std::vector<ScoreSource> sources;
  for (const auto& [name, t] : map.tensors) {
    if (!eligible.matches(name)) continue;
    const ScoreTensor* tensor = &t;
    sources.push_back({name, t.scores.size(), t.row_length, element_count(t.shape),
                       [tensor] { return tensor->scores; }});
  }
  return select_top(sources, k_percent);
}

NeuronMask top_k_mask(const TensorStore& importance_file, double k_percent,
                      const NamePatterns& eligible) {
  eligible.validate();
  const ImportanceHeader header = read_importance_header(importance_file);
  std::vector<ScoreSource> sources;
  for (const TensorMeta& m : importance_file.entries()) {
    if (!eligible.matches(m.name)) continue;
    const Shape& shape = header.shapes.at(m.name);
    if (m.numel() != units_for(shape, header.granularity)) {
      throw Error("importance tensor '" + m.name + "' does not match its source shape");
    }
    std::string name = m.name;
    sources.push_back({name, m.numel(), row_length_for(shape, header.granularity),
                       element_count(shape), [&importance_file, name] {
                         const std::vector<float> scores = importance_file.read_f32(name);
                         for (float s : scores) {
                           if (s < 0.0f) throw Error("negative importance score in '" + name + "'");
                         }
                         return std::vector<double>(scores.begin(), scores.end());
                       }});
  }
  return select_top(sources, k_percent);
}

// ---- NeuronMask -----------------------------------------------------------------

std::uint64_t NeuronMask::size() const {
  std::uint64_t n = 0;
  for (const auto& [name, indices] : selected) n += indices.size();
  return n;
}

bool NeuronMask::contains(std::string_view tensor, std::uint64_t index) const {
  auto it = selected.find(std::string(tensor));
  return it != selected.end() && std::binary_search(it->second.begin(), it->second.end(), index);
}

void NeuronMask::validate() const {
  for (const auto& [name, indices] : selected) {
    auto it = universe.find(name);
    if (it == universe.end()) throw Error("mask selects tensor '" + name + "' outside its universe");
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (i > 0 && indices[i] <= indices[i - 1]) {
        throw Error("mask indices for '" + name + "' are not strictly ascending at position " +
                    std::to_string(i));
      }
      if (indices[i] >= it->second) {
        throw Error("mask index " + std::to_string(indices[i]) + " out of range for '" + name + "'");
      }
    }
  }
}

NeuronMask mask_union(const NeuronMask& a, const NeuronMask& b) { return combine_masks(a, b, true); }

NeuronMask mask_intersect(const NeuronMask& a, const NeuronMask& b) {
  return combine_masks(a, b, false);
}

TensorStore project_update(const TensorStore& base, const TensorStore& trained,
                           const NeuronMask& mask, const Destination& dest, const Metadata& extra) {
  require_aligned(base, trained, "base", "trained");
  mask.validate();
  for (const auto& [name, numel] : mask.universe) {
    if (!base.contains(name)) throw Error("mask tensor '" + name + "' missing from base");
    if (base.meta(name).numel() != numel) {
      throw Error("mask tensor '" + name + "' has " + std::to_string(numel) +
                  " elements but base has " + std::to_string(base.meta(name).numel()));
    }
  }
  Metadata metadata = base.metadata();
  for (const auto& [key, value] : extra) metadata[key] = value;
  metadata["kind"] = "projected";
  metadata["mask_size"] = std::to_string(mask.size());
  return transform_store(
      base, dest, metadata,
      [&](const TensorMeta& m) {
        std::vector<float> values = base.read_f32(m.name);
        auto it = mask.selected.find(m.name);
        if (it != mask.selected.end()) {
          const std::vector<float> updated = trained.read_f32(m.name);
          for (std::uint64_t i : it->second) values[i] = updated[i];
        }
        return values;
      },
      [](const TensorMeta& m) { return m.dtype; });
}

// ---- mask files -------------------------------------------------------------------

TensorStore mask_to_store(const NeuronMask& mask, const Destination& dest) {
  mask.validate();
  Metadata metadata;
  metadata["kind"] = "mask";
  metadata["k_percent"] = format_real(mask.k_percent);
  metadata["total_units"] = std::to_string(mask.total_units);
  metadata["universe"] = json(mask.universe).dump();
  std::vector<TensorSpec> specs;
  for (const auto& [name, indices] : mask.selected) {
    specs.push_back({name + std::string(kIndexSuffix), DType::U64, Shape{indices.size()}});
  }
  // Appending ".idx" can reorder names ("a.b.idx" < "a.idx"), so follow the
  // writer's order.
  return emit_store(dest, std::move(specs), metadata, [&](StoreWriter& writer) {
    while (!writer.next_name().empty()) {
      const std::string_view file_name = writer.next_name();
      const std::string tensor(file_name.substr(0, file_name.size() - kIndexSuffix.size()));
      writer.write_u64(file_name, mask.selected.at(tensor));
    }
  });
}

NeuronMask mask_from_store(const TensorStore& store) {
  if (store.metadata_value("kind") != "mask") {
    throw Error("malformed mask file " + store.label() + ": metadata kind != mask");
  }
  NeuronMask mask;
  try {
    mask.universe = json::parse(store.metadata_value("universe").value_or("{}"))
                        .get<std::map<std::string, std::uint64_t>>();
  } catch (const json::exception& e) {
    throw Error("malformed mask file " + store.label() + ": bad universe (" + e.what() + ")");
  }
  mask.total_units = parse_u64(store.metadata_value("total_units").value_or("0"), "mask total_units");
  mask.k_percent = parse_real(store.metadata_value("k_percent").value_or("0"), "mask k_percent");
  for (const TensorMeta& m : store.entries()) {
    if (m.name.size() <= kIndexSuffix.size() || !m.name.ends_with(kIndexSuffix) ||
        m.dtype != DType::U64 || m.shape.size() != 1) {
      throw Error("malformed mask file " + store.label() + ": unexpected tensor '" + m.name + "'");
    }
    const std::string tensor = m.name.substr(0, m.name.size() - kIndexSuffix.size());
    std::vector<std::uint64_t> indices = store.read_u64(m.name);
    if (!indices.empty()) mask.selected.emplace(tensor, std::move(indices));
  }
  mask.validate();
  return mask;
}

void export_mask(const NeuronMask& mask, const std::filesystem::path& path) {
  mask_to_store(mask, Destination::file(path));
}

NeuronMask import_mask(const std::filesystem::path& path) {
  return mask_from_store(TensorStore::open(path));
}

}  // namespace maet
