#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "maet/toy_lab.hpp"

namespace maet::testing {

TempDir::TempDir() {
  static std::uint64_t counter = 0;
  std::random_device rd;
  const auto base = std::filesystem::temp_directory_path();
  for (;;) {
    path_ = base / ("maet-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    if (std::filesystem::create_directory(path_)) break;
  }
}

TempDir::~TempDir() {
  std::error_code ignored;
  std::filesystem::remove_all(path_, ignored);
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::uint64_t pick(Rng& rng, std::uint64_t n) {
  return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng);
}

std::string random_name(Rng& rng) {
  static const char* const parts[] = {"layers", "attn", "mlp", "q", "k", "v", "up", "down",
                                      "norm", "weight", "bias", "embed", "blk"};
  std::string name;
  const std::uint64_t n = 1 + pick(rng, 4);
  for (std::uint64_t i = 0; i < n; ++i) {
    if (i) name += '.';
    if (pick(rng, 4) == 0) {
      name += std::to_string(pick(rng, 40));
    } else {
      name += parts[pick(rng, std::size(parts))];
    }
  }
  return name;
}

std::vector<float> encodable_values(Rng& rng, std::size_t n, DType dtype, double scale) {
  std::vector<float> out(n);
  for (float& v : out) {
    float x = static_cast<float>(uniform(rng, -scale, scale));
    if (pick(rng, 16) == 0) x = 0.0f;
    if (pick(rng, 64) == 0) x = -0.0f;
    if (dtype == DType::F16) x = half_to_float(*float_to_half(x));
    if (dtype == DType::BF16) x = bf16_to_float(*float_to_bf16(x));
    v = x;
  }
  return out;
}

std::vector<Tensor> random_tensors(Rng& rng, bool allow_u64) {
  std::vector<Tensor> tensors;
  std::vector<std::string> used;
  const std::uint64_t count = 1 + pick(rng, 6);
  while (tensors.size() < count) {
    std::string name = random_name(rng);
    if (std::find(used.begin(), used.end(), name) != used.end()) continue;
    used.push_back(name);
    Shape shape;
    const std::uint64_t rank = pick(rng, 4);
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(pick(rng, 6));  // zeros allowed
    const std::uint64_t n = element_count(shape);
    if (allow_u64 && pick(rng, 8) == 0) {
      std::vector<std::uint64_t> values(n);
      for (auto& v : values) v = rng();
      tensors.push_back({name, DType::U64, shape, values});
      continue;
    }
    static const DType floating[] = {DType::F32, DType::F16, DType::BF16};
    const DType dtype = floating[pick(rng, 3)];
    tensors.push_back({name, dtype, shape, encodable_values(rng, n, dtype)});
  }
  return tensors;
}

Metadata random_metadata(Rng& rng) {
  Metadata m;
  const std::uint64_t n = pick(rng, 4);
  for (std::uint64_t i = 0; i < n; ++i) m[random_name(rng)] = random_name(rng) + " \"quoted\" é";
  return m;
}

std::vector<Tensor> toy_tensors(Rng& rng, double scale) {
  std::vector<Tensor> tensors;
  for (const toy::LayerSlot& slot : toy::layout()) {
    tensors.push_back({slot.name, DType::F32, slot.shape(), encodable_values(rng, slot.size(), DType::F32, scale)});
  }
  return tensors;
}

TensorStore toy_store(Rng& rng, double scale) { return memory_store(toy_tensors(rng, scale)); }

TensorStore perturbed(const TensorStore& base, Rng& rng, double density, double scale) {
  std::vector<Tensor> tensors = load_all(base);
  for (Tensor& t : tensors) {
    auto* values = std::get_if<std::vector<float>>(&t.values);
    if (!values) continue;
    for (float& v : *values) {
      if (uniform(rng, 0.0, 1.0) < density) v += static_cast<float>(uniform(rng, -scale, scale));
    }
  }
  return memory_store(std::move(tensors), base.metadata());
}

TensorStore memory_store(std::vector<Tensor> tensors, const Metadata& metadata) {
  return TensorStore::from_bytes(encode_store(std::move(tensors), metadata));
}

bool same_bits(float a, float b) { return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b); }

bool stores_bit_equal(const TensorStore& a, const TensorStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const TensorMeta& ma = a.entries()[i];
    const TensorMeta& mb = b.entries()[i];
    if (ma.name != mb.name || ma.shape != mb.shape || ma.dtype != mb.dtype) return false;
    if (a.read_raw(ma.name) != b.read_raw(mb.name)) return false;
  }
  return true;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

}  // namespace maet::testing
