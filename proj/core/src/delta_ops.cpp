#include "maet/delta_ops.hpp"

#include <algorithm>
#include <cmath>

#include "maet/error.hpp"
#include "maet/numeric.hpp"
#include "maet/parallel.hpp"

namespace maet {

namespace {

void require_same_length(std::size_t a, std::size_t b) {
  if (a != b) {
    throw Error("operand length mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

void require_shape_match(const TensorStore& a, const TensorStore& b, std::string_view name) {
  const TensorMeta& ma = a.meta(name);
  const TensorMeta& mb = b.meta(name);
  if (ma.shape != mb.shape) {
    throw Error("shape mismatch for tensor '" + ma.name + "': " + shape_to_string(ma.shape) +
                " vs " + shape_to_string(mb.shape));
  }
}

}  // namespace

std::vector<float> subtract(std::span<const float> minuend, std::span<const float> subtrahend) {
  require_same_length(minuend.size(), subtrahend.size());
  std::vector<float> out(minuend.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = minuend[i] - subtrahend[i];
  return out;
}

std::vector<double> combine_values(std::span<const WeightedValues> terms) {
  if (terms.empty()) return {};
  const std::size_t n = terms.front().values.size();
  for (const WeightedValues& t : terms) require_same_length(n, t.values.size());
  std::vector<double> acc(n, 0.0);
  bool started = false;
  for (const WeightedValues& t : terms) {
    if (t.coefficient == 0.0) continue;
    if (!started) {
      for (std::size_t i = 0; i < n; ++i) acc[i] = t.coefficient * static_cast<double>(t.values[i]);
      started = true;
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double product = t.coefficient * static_cast<double>(t.values[i]);
      if (product != 0.0) acc[i] += product;
    }
  }
  return acc;
}

double dot(std::span<const float> a, std::span<const float> b) {
  require_same_length(a.size(), b.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sum += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return sum;
}

double squared_norm(std::span<const float> a) { return dot(a, a); }

double cosine(std::span<const float> a, std::span<const float> b) {
  const double na = squared_norm(a);
  const double nb = squared_norm(b);
  if (na == 0.0 || nb == 0.0) throw Error("cosine similarity undefined for a zero-norm operand");
  const double c = dot(a, b) / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

double l1_distance(std::span<const float> a, std::span<const float> b) {
  require_same_length(a.size(), b.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sum += std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  }
  return sum;
}

std::vector<float> narrow_checked(std::span<const double> values, std::string_view tensor) {
  std::vector<float> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = static_cast<float>(values[i]);
    if (!std::isfinite(out[i])) {
      throw Error("non-finite result in tensor '" + std::string(tensor) + "' at flat index " +
                  std::to_string(i));
    }
  }
  return out;
}

void require_aligned(const TensorStore& a, const TensorStore& b, std::string_view a_role,
                     std::string_view b_role) {
  for (const TensorMeta& m : a.entries()) {
    if (!b.contains(m.name)) {
      throw Error("tensor '" + m.name + "' missing from " + std::string(b_role));
    }
  }
  for (const TensorMeta& m : b.entries()) {
    if (!a.contains(m.name)) {
      throw Error("tensor '" + m.name + "' missing from " + std::string(a_role));
    }
  }
  for (const TensorMeta& m : a.entries()) {
    require_shape_match(a, b, m.name);
    if (!is_floating(m.dtype) || !is_floating(b.meta(m.name).dtype)) {
      throw Error("tensor '" + m.name + "' is not a floating tensor in both " + std::string(a_role) +
                  " and " + std::string(b_role));
    }
  }
}

TensorStore transform_store(const TensorStore& layout, const Destination& dest,
                            const Metadata& metadata,
                            const std::function<std::vector<float>(const TensorMeta&)>& compute,
                            const std::function<DType(const TensorMeta&)>& output_dtype) {
  const std::vector<TensorMeta>& entries = layout.entries();
  std::vector<TensorSpec> specs;
  specs.reserve(entries.size());
  for (const TensorMeta& m : entries) {
    specs.push_back({m.name, output_dtype ? output_dtype(m) : DType::F32, m.shape});
  }
  return emit_store(dest, std::move(specs), metadata, [&](StoreWriter& writer) {
    ordered_map<std::vector<float>>(
        entries.size(), [&](std::size_t i) { return compute(entries[i]); },
        [&](std::size_t i, std::vector<float>& values) { writer.write_f32(entries[i].name, values); });
  });
}

TensorStore diff(const TensorStore& minuend, const TensorStore& subtrahend, const Destination& dest,
                 const Metadata& extra) {
  require_aligned(minuend, subtrahend, "minuend", "subtrahend");
  Metadata metadata = extra;
  metadata.emplace("kind", "delta");
  metadata.emplace("minuend", minuend.digest());
  metadata.emplace("subtrahend", subtrahend.digest());
  return transform_store(minuend, dest, metadata, [&](const TensorMeta& m) {
    std::vector<float> out = subtract(minuend.read_f32(m.name), subtrahend.read_f32(m.name));
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!std::isfinite(out[i])) {
        throw Error("non-finite difference in tensor '" + m.name + "' at flat index " +
                    std::to_string(i));
      }
    }
    return out;
  });
}

TensorStore linear_combine(const std::vector<Term>& terms, const Destination& dest,
                           const Metadata& extra) {
  if (terms.empty()) throw InvalidArgument("linear_combine needs at least one term");
  for (std::size_t k = 1; k < terms.size(); ++k) {
    require_aligned(terms[0].store, terms[k].store, "term 0", "term " + std::to_string(k));
  }
  for (const TensorMeta& m : terms[0].store.entries()) {
    if (!is_floating(m.dtype)) throw Error("tensor '" + m.name + "' is not a floating tensor");
  }
  Metadata metadata = extra;
  metadata.emplace("kind", "delta");
  for (std::size_t k = 0; k < terms.size(); ++k) {
    metadata.emplace("term." + std::to_string(k) + ".coefficient", format_real(terms[k].coefficient));
  }
  return transform_store(terms[0].store, dest, metadata, [&](const TensorMeta& m) {
    std::vector<std::vector<float>> values;
    std::vector<WeightedValues> weighted;
    values.reserve(terms.size());
    for (const Term& t : terms) values.push_back(t.store.read_f32(m.name));
    for (std::size_t k = 0; k < terms.size(); ++k) {
      weighted.push_back({values[k], terms[k].coefficient});
    }
    return narrow_checked(combine_values(weighted), m.name);
  });
}

double tensor_dot(const TensorStore& a, const TensorStore& b, std::string_view name) {
  require_shape_match(a, b, name);
  return dot(a.read_f32(name), b.read_f32(name));
}

double tensor_cosine(const TensorStore& a, const TensorStore& b, std::string_view name) {
  require_shape_match(a, b, name);
  const std::vector<float> va = a.read_f32(name);
  const std::vector<float> vb = b.read_f32(name);
  if (squared_norm(va) == 0.0 || squared_norm(vb) == 0.0) {
    throw Error("cosine similarity undefined for tensor '" + std::string(name) +
                "': zero-norm operand");
  }
  return cosine(va, vb);
}

double tensor_l1(const TensorStore& a, const TensorStore& b, std::string_view name) {
  require_shape_match(a, b, name);
  return l1_distance(a.read_f32(name), b.read_f32(name));
}

}  // namespace maet
