#include <benchmark/benchmark.h>

#include <random>
#include <string>
#include <vector>

#include "maet/ability_extract.hpp"
#include "maet/neuron_importance.hpp"
#include "maet/tensor_select.hpp"
#include "maet/tensor_store.hpp"
#include "maet/transfer_merge.hpp"

using namespace maet;

namespace {

// Store of `tensors` F32 tensors of `elements` values each.
TensorStore synthetic_store(std::size_t tensors, std::size_t elements, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> value(0.0f, 1.0f);
  std::vector<Tensor> out;
  for (std::size_t t = 0; t < tensors; ++t) {
    std::vector<float> values(elements);
    for (float& v : values) v = value(rng);
    out.push_back({"layers." + std::to_string(t) + ".weight", DType::F32, {elements}, std::move(values)});
  }
  return TensorStore::from_bytes(encode_store(std::move(out)));
}

void BM_EncodeStore(benchmark::State& state) {
  const TensorStore store = synthetic_store(16, static_cast<std::size_t>(state.range(0)), 1);
  const std::vector<Tensor> tensors = load_all(store);
  for (auto _ : state) benchmark::DoNotOptimize(encode_store(tensors));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(store.file_size()));
}
BENCHMARK(BM_EncodeStore)->Arg(1 << 12)->Arg(1 << 16);

void BM_ReadStore(benchmark::State& state) {
  const TensorStore store = synthetic_store(16, static_cast<std::size_t>(state.range(0)), 1);
  for (auto _ : state) {
    for (const TensorMeta& m : store.entries()) benchmark::DoNotOptimize(store.read_f32(m.name));
  }
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(store.file_size()));
}
BENCHMARK(BM_ReadStore)->Arg(1 << 12)->Arg(1 << 16);

void BM_TopKMask(benchmark::State& state) {
  const std::size_t elements = static_cast<std::size_t>(state.range(0));
  const TensorStore base = synthetic_store(16, elements, 1);
  const TensorStore probe = synthetic_store(16, elements, 2);
  const ImportanceMap map = importance(base, probe);
  for (auto _ : state) benchmark::DoNotOptimize(top_k_mask(map, 5.0));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(map.total_units()));
}
BENCHMARK(BM_TopKMask)->Arg(1 << 12)->Arg(1 << 16);

void BM_ExtractAbility(benchmark::State& state) {
  const std::size_t elements = static_cast<std::size_t>(state.range(0));
  const TensorStore base = synthetic_store(16, elements, 1);
  const TensorStore joint = synthetic_store(16, elements, 2);
  const TensorStore lang = synthetic_store(16, elements, 3);
  for (auto _ : state) benchmark::DoNotOptimize(extract_ability(joint, lang, base, 0.8, 0.2));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(3 * base.file_size()));
}
BENCHMARK(BM_ExtractAbility)->Arg(1 << 12)->Arg(1 << 16);

void BM_SelectAndMerge(benchmark::State& state) {
  const std::size_t elements = static_cast<std::size_t>(state.range(0));
  const TensorStore base = synthetic_store(64, elements, 1);
  const TensorStore ability = synthetic_store(64, elements, 2);
  const TensorStore multilingual = synthetic_store(64, elements, 3);
  for (auto _ : state) {
    const TensorSelection selection = select_last(similarity_report(ability, multilingual), 80.0);
    MergePlan plan{base, ability, multilingual, selection.names};
    benchmark::DoNotOptimize(merge(plan));
  }
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(3 * base.file_size()));
}
BENCHMARK(BM_SelectAndMerge)->Arg(1 << 10)->Arg(1 << 14);

}  // namespace

BENCHMARK_MAIN();
