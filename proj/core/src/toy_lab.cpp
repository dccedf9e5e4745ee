#include "maet/toy_lab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "maet/ability_extract.hpp"
#include "maet/error.hpp"
#include "maet/lingual_combine.hpp"
#include "maet/numeric.hpp"
#include "maet/tensor_select.hpp"
#include "maet/transfer_merge.hpp"

namespace maet::toy {

namespace {

constexpr std::array<LayerSlot, 6> kLayout{{
    {"layers.0.bias", 0, kHidden, 0},
    {"layers.0.weight", 32, kHidden, kInput},
    {"layers.1.bias", 288, kHidden, 0},
    {"layers.1.weight", 320, kHidden, kHidden},
    {"layers.2.bias", 1344, 1, 0},
    {"layers.2.weight", 1345, 1, kHidden},
}};
static_assert(kLayout[5].offset + kHidden == kParameterCount);

constexpr std::size_t kB0 = 0, kW0 = 32, kB1 = 288, kW1 = 320, kB2 = 1344, kW2 = 1345;

// Readout used by the general task.
constexpr std::array<double, kInput> kGeneralReadout{1.0, -1.0, 0.5, -0.5, 0.0, 0.0, 0.0, 0.0};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
  return splitmix(splitmix(seed) ^ splitmix(stream + 0x51ED270B27A5C3ull));
}

struct Forward {
  std::array<double, kHidden> h1{};
  std::array<double, kHidden> h2{};
  double y = 0.0;
};

Forward forward(std::span<const double> p, std::span<const double> x) {
  Forward f;
  for (std::size_t i = 0; i < kHidden; ++i) {
    double a = p[kB0 + i];
    for (std::size_t j = 0; j < kInput; ++j) a += p[kW0 + i * kInput + j] * x[j];
    f.h1[i] = std::tanh(a);
  }
  for (std::size_t i = 0; i < kHidden; ++i) {
    double a = p[kB1 + i];
    for (std::size_t j = 0; j < kHidden; ++j) a += p[kW1 + i * kHidden + j] * f.h1[j];
    f.h2[i] = std::tanh(a);
  }
  f.y = p[kB2];
  for (std::size_t j = 0; j < kHidden; ++j) f.y += p[kW2 + j] * f.h2[j];
  return f;
}

std::vector<double> widen(const std::vector<float>& params) {
  return std::vector<double>(params.begin(), params.end());
}

template <typename Fn>
auto in_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(std::string("stage '") + stage + "': " + e.what());
  } catch (const std::exception& e) {
    throw Error(std::string("stage '") + stage + "': " + e.what());
  }
}

}  // namespace

Shape LayerSlot::shape() const {
  return cols == 0 ? Shape{rows} : Shape{rows, cols};
}

const std::array<LayerSlot, 6>& layout() { return kLayout; }

ToyModel ToyModel::init(std::uint64_t seed) {
  ToyModel model;
  std::mt19937_64 rng(derive(seed, 0xA11));
  for (const LayerSlot& slot : kLayout) {
    if (slot.cols == 0) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(slot.cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < slot.size(); ++i) {
      model.params[slot.offset + i] = static_cast<float>(dist(rng));
    }
  }
  return model;
}

ToyModel ToyModel::from_store(const TensorStore& store) {
  ToyModel model;
  for (const LayerSlot& slot : kLayout) {
    if (!store.contains(slot.name)) {
      throw Error(std::string("toy checkpoint lacks tensor '") + slot.name + "'");
    }
    if (store.meta(slot.name).shape != slot.shape()) {
      throw Error(std::string("toy checkpoint tensor '") + slot.name + "' has shape " +
                  shape_to_string(store.meta(slot.name).shape));
    }
    const std::vector<float> values = store.read_f32(slot.name);
    std::copy(values.begin(), values.end(), model.params.begin() + static_cast<std::ptrdiff_t>(slot.offset));
  }
  if (store.size() != kLayout.size()) throw Error("toy checkpoint has unexpected extra tensors");
  return model;
}

TensorStore ToyModel::to_store(const Destination& dest, const Metadata& metadata) const {
  std::vector<TensorSpec> specs;
  for (const LayerSlot& slot : kLayout) specs.push_back({slot.name, DType::F32, slot.shape()});
  return emit_store(dest, specs, metadata, [&](StoreWriter& writer) {
    for (const LayerSlot& slot : kLayout) {
      writer.write_f32(slot.name, std::span<const float>(params).subspan(slot.offset, slot.size()));
    }
  });
}

double ToyTask::target(std::span<const double> x) const {
  std::array<double, kInput> z{};
  for (std::size_t i = 0; i < kInput; ++i) {
    for (std::size_t j = 0; j < kInput; ++j) z[i] += q[i * kInput + j] * x[j];
  }
  switch (function) {
    case Function::SumSquares: {
      double s = 0.0;
      for (double v : z) s += v * v;
      return s;
    }
    case Function::Max:
      return *std::max_element(z.begin(), z.end());
    case Function::General: {
      double s = 0.0;
      for (std::size_t i = 0; i < kInput; ++i) s += kGeneralReadout[i] * z[i];
      return s;
    }
  }
  return 0.0;
}

Rotation language_rotation(std::uint64_t seed, int language) {
  Rotation q{};
  if (language == 0) {
    for (std::size_t i = 0; i < kInput; ++i) q[i * kInput + i] = 1.0;
    return q;
  }
  std::mt19937_64 rng(derive(seed, 0x1A0000 + static_cast<std::uint64_t>(language)));
  std::normal_distribution<double> normal;
  for (double& v : q) v = normal(rng);
  // Modified Gram-Schmidt over the rows.
  for (std::size_t i = 0; i < kInput; ++i) {
    double* row = &q[i * kInput];
    for (std::size_t k = 0; k < i; ++k) {
      const double* prev = &q[k * kInput];
      double d = 0.0;
      for (std::size_t j = 0; j < kInput; ++j) d += row[j] * prev[j];
      for (std::size_t j = 0; j < kInput; ++j) row[j] -= d * prev[j];
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < kInput; ++j) norm += row[j] * row[j];
    norm = std::sqrt(norm);
    if (norm < 1e-8) throw Error("degenerate rotation draw");
    for (std::size_t j = 0; j < kInput; ++j) row[j] /= norm;
  }
  return q;
}

std::vector<ToyTask> gen_tasks(std::uint64_t seed, int n_languages, int n_abilities) {
  if (n_languages < 1) throw InvalidArgument("n_languages must be at least 1");
  if (n_abilities < 1 || n_abilities > 2) throw InvalidArgument("n_abilities must be 1 or 2");
  std::vector<ToyTask> tasks;
  for (int l = 0; l < n_languages; ++l) {
    const Rotation q = language_rotation(seed, l);
    for (int a = 0; a < n_abilities; ++a) {
      tasks.push_back({l, a, a == 0 ? Function::SumSquares : Function::Max, q});
    }
  }
  return tasks;
}

ToyTask general_task(std::uint64_t seed, int language) {
  return {language, -1, Function::General, language_rotation(seed, language)};
}

Sample draw_sample(const std::vector<MixtureComponent>& mixture, std::mt19937_64& rng) {
  double total = 0.0;
  for (const MixtureComponent& c : mixture) total += c.weight;
  std::uniform_real_distribution<double> pick(0.0, total);
  const double r = mixture.size() == 1 ? 0.0 : pick(rng);
  std::size_t chosen = mixture.size() - 1;
  double running = 0.0;
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    running += mixture[i].weight;
    if (r < running) {
      chosen = i;
      break;
    }
  }
  Sample s;
  std::normal_distribution<double> normal;
  for (double& v : s.x) v = normal(rng);
  s.y = mixture[chosen].task.target(s.x);
  return s;
}

double predict(std::span<const double> params, std::span<const double> x) {
  return forward(params, x).y;
}

double batch_loss(std::span<const double> p, std::span<const Sample> batch,
                  std::vector<double>* gradient) {
  if (gradient) gradient->assign(kParameterCount, 0.0);
  if (batch.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const Sample& s : batch) {
    const Forward f = forward(p, s.x);
    const double err = f.y - s.y;
    loss += err * err;
    if (!gradient) continue;
    std::vector<double>& g = *gradient;
    const double dy = 2.0 * err * scale;
    g[kB2] += dy;
    std::array<double, kHidden> da2{};
    for (std::size_t j = 0; j < kHidden; ++j) {
      g[kW2 + j] += dy * f.h2[j];
      da2[j] = dy * p[kW2 + j] * (1.0 - f.h2[j] * f.h2[j]);
    }
    std::array<double, kHidden> dh1{};
    for (std::size_t i = 0; i < kHidden; ++i) {
      g[kB1 + i] += da2[i];
      for (std::size_t j = 0; j < kHidden; ++j) {
        g[kW1 + i * kHidden + j] += da2[i] * f.h1[j];
        dh1[j] += p[kW1 + i * kHidden + j] * da2[i];
      }
    }
    for (std::size_t i = 0; i < kHidden; ++i) {
      const double da1 = dh1[i] * (1.0 - f.h1[i] * f.h1[i]);
      g[kB0 + i] += da1;
      for (std::size_t j = 0; j < kInput; ++j) g[kW0 + i * kInput + j] += da1 * s.x[j];
    }
  }
  return loss * scale;
}

std::vector<bool> flat_mask(const NeuronMask& mask) {
  std::vector<bool> flat(kParameterCount, false);
  for (const auto& [name, indices] : mask.selected) {
    const auto slot = std::find_if(kLayout.begin(), kLayout.end(),
                                   [&](const LayerSlot& s) { return name == s.name; });
    if (slot == kLayout.end()) throw Error("mask names tensor '" + name + "' outside the toy model");
    for (const std::uint64_t i : indices) {
      if (i >= slot->size()) throw Error("mask index out of range for tensor '" + name + "'");
      flat[slot->offset + i] = true;
    }
  }
  return flat;
}

ToyModel train(const ToyModel& model, const std::vector<MixtureComponent>& mixture,
               const std::optional<NeuronMask>& mask, const TrainOptions& options) {
  ToyModel out = model;
  if (options.steps == 0) return out;
  if (mixture.empty()) throw InvalidArgument("training mixture is empty");
  if (options.batch_size == 0) throw InvalidArgument("batch size must be positive");
  const std::vector<bool> allowed = mask ? flat_mask(*mask) : std::vector<bool>(kParameterCount, true);
  std::mt19937_64 rng(derive(options.seed, 0x7A1));
  std::vector<Sample> batch(options.batch_size);
  std::vector<double> gradient;
  for (std::uint64_t step = 0; step < options.steps; ++step) {
    for (Sample& s : batch) s = draw_sample(mixture, rng);
    const std::vector<double> p = widen(out.params);
    const double loss = batch_loss(p, batch, &gradient);
    if (!std::isfinite(loss)) {
      throw Error("training diverged at step " + std::to_string(step) + " (loss is not finite)");
    }
    for (std::size_t i = 0; i < kParameterCount; ++i) {
      if (!allowed[i]) continue;
      const float next = static_cast<float>(p[i] - options.lr * gradient[i]);
      if (!std::isfinite(next)) {
        throw Error("training diverged at step " + std::to_string(step) + " (parameter overflow)");
      }
      out.params[i] = next;
    }
  }
  return out;
}

double evaluate(const std::function<double(std::span<const double>)>& predictor, const ToyTask& task,
                std::size_t n_samples, std::uint64_t seed) {
  if (n_samples == 0) throw InvalidArgument("evaluation needs at least one sample");
  std::mt19937_64 rng(derive(seed, 0xE7A1));
  std::normal_distribution<double> normal;
  double total = 0.0;
  std::array<double, kInput> x{};
  for (std::size_t n = 0; n < n_samples; ++n) {
    for (double& v : x) v = normal(rng);
    const double err = predictor(x) - task.target(x);
    total += err * err;
  }
  return total / static_cast<double>(n_samples);
}

double evaluate(const ToyModel& model, const ToyTask& task, std::size_t n_samples, std::uint64_t seed) {
  const std::vector<double> p = widen(model.params);
  return evaluate([&](std::span<const double> x) { return predict(p, x); }, task, n_samples, seed);
}

// ---- experiment -------------------------------------------------------------

void ToyConfig::validate() const {
  if (n_languages < 2) throw InvalidArgument("toy config: n_languages must be at least 2");
  if (n_abilities < 1 || n_abilities > 2) throw InvalidArgument("toy config: n_abilities must be 1 or 2");
  if (ability < 0 || ability >= n_abilities) throw InvalidArgument("toy config: ability out of range");
  if (target_language < 1 || target_language >= n_languages) {
    throw InvalidArgument("toy config: target_language must name a non-reference language");
  }
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("toy config: lr must be positive");
  if (batch_size == 0) throw InvalidArgument("toy config: batch_size must be positive");
  if (!(mixture >= 0.0 && mixture <= 1.0)) throw InvalidArgument("toy config: mixture must lie in [0, 1]");
  check_percent(k1, "toy config: k1");
  check_percent(k2, "toy config: k2");
  for (double v : {alpha, beta, gamma, eta}) {
    if (!std::isfinite(v)) throw InvalidArgument("toy config: hyper-parameters must be finite");
  }
  if (!mu.empty() && mu.size() != static_cast<std::size_t>(n_languages - 1)) {
    throw InvalidArgument("toy config: mu needs one value per non-reference language");
  }
  if (eval_samples == 0) throw InvalidArgument("toy config: eval_samples must be positive");
}

double ExperimentReport::merged_improvement() const {
  return (heldout_base - heldout_merged) / heldout_base;
}

double ExperimentReport::ablation_improvement() const {
  return (heldout_base - heldout_ablation) / heldout_base;
}

std::string ExperimentReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const ReportRow& r : rows) {
    rows_json.push_back(
        {{"ability", r.ability}, {"language", r.language}, {"variant", r.variant}, {"mse", r.mse}});
  }
  const ToyConfig& c = config;
  nlohmann::json doc{
      {"kind", "toy_report"},
      {"config",
       {{"seed", c.seed}, {"n_languages", c.n_languages}, {"n_abilities", c.n_abilities},
        {"ability", c.ability}, {"target_language", c.target_language},
        {"pretrain_steps", c.pretrain_steps}, {"probe_steps", c.probe_steps},
        {"cpt_steps", c.cpt_steps}, {"language_steps", c.language_steps}, {"lr", c.lr},
        {"batch_size", c.batch_size}, {"mixture", c.mixture}, {"k1", c.k1}, {"k2", c.k2},
        {"alpha", c.alpha}, {"beta", c.beta}, {"gamma", c.gamma}, {"eta", c.eta}, {"mu", c.mu},
        {"eval_samples", c.eval_samples}}},
      {"rows", std::move(rows_json)},
      {"heldout",
       {{"ability", c.ability}, {"language", c.target_language}, {"base", heldout_base},
        {"merged", heldout_merged}, {"ablation", heldout_ablation},
        {"merged_improvement", merged_improvement()}, {"ablation_improvement", ablation_improvement()}}},
      {"note", "toy-scale direction-of-effect check; says nothing about behaviour at model scale"}};
  return doc.dump(2) + "\n";
}

ExperimentReport run_transfer_experiment(const ToyConfig& config, const std::filesystem::path& run_dir) {
  config.validate();
  const bool to_disk = !run_dir.empty();
  if (to_disk) std::filesystem::create_directories(run_dir);
  const auto dest = [&](const std::string& stem) {
    return to_disk ? Destination::file(run_dir / (stem + ".safetensors")) : Destination::memory(stem);
  };
  const std::uint64_t seed = config.seed;
  const auto options = [&](std::uint64_t steps, std::uint64_t stream) {
    return TrainOptions{steps, config.lr, config.batch_size, derive(seed, stream)};
  };
  const auto general = [&](int language) {
    return std::vector<MixtureComponent>{{general_task(seed, language), 1.0}};
  };
  const std::vector<ToyTask> tasks = gen_tasks(seed, config.n_languages, config.n_abilities);
  const auto task = [&](int language, int ability) {
    return tasks[static_cast<std::size_t>(language * config.n_abilities + ability)];
  };

  // Backbone: general data in every language.
  const TensorStore base = in_stage("pretrain", [&] {
    std::vector<MixtureComponent> mix;
    for (int l = 0; l < config.n_languages; ++l) mix.push_back({general_task(seed, l), 1.0});
    const ToyModel model = train(ToyModel::init(seed), mix, std::nullopt, options(config.pretrain_steps, 1));
    return model.to_store(dest("base"), {{"kind", "checkpoint"}, {"stage", "pretrain"}});
  });
  const ToyModel base_model = ToyModel::from_store(base);

  // Key neurons from short unmasked probe runs.
  const auto locate = [&](const std::string& stem, const std::vector<MixtureComponent>& mix,
                          std::uint64_t stream) {
    return in_stage(("importance:" + stem).c_str(), [&] {
      const TensorStore probe = train(base_model, mix, std::nullopt, options(config.probe_steps, stream))
                                    .to_store(dest("probe_" + stem), {{"kind", "checkpoint"}, {"stage", "probe"}});
      const ImportanceMap map = importance(base, probe);
      const TensorStore saved = save_importance(map, dest("importance_" + stem));
      const NeuronMask mask = top_k_mask(saved, config.k1);
      if (to_disk) export_mask(mask, run_dir / ("mask_" + stem + ".safetensors"));
      return mask;
    });
  };
  const std::string ref = "lang0";
  const NeuronMask ability_mask =
      locate("ability", {{task(0, config.ability), 1.0}}, 2);
  const NeuronMask ref_mask = locate(ref, general(0), 3);

  // Masked continual training in the reference language.
  const TensorStore theta_ability_lang = in_stage("cpt:ability", [&] {
    const std::vector<MixtureComponent> mix{{task(0, config.ability), config.mixture},
                                            {general_task(seed, 0), 1.0 - config.mixture}};
    return train(base_model, mix, mask_union(ability_mask, ref_mask), options(config.cpt_steps, 4))
        .to_store(dest("theta_ability_lang0"), {{"kind", "checkpoint"}, {"stage", "cpt"}});
  });
  const TensorStore theta_lang = in_stage("cpt:lang0", [&] {
    return train(base_model, general(0), ref_mask, options(config.cpt_steps, 5))
        .to_store(dest("theta_lang0"), {{"kind", "checkpoint"}, {"stage", "cpt"}});
  });

  const TensorStore ability_weight = in_stage("extract", [&] {
    return extract_ability(theta_ability_lang, theta_lang, base, config.alpha, config.beta,
                           "ability" + std::to_string(config.ability), dest("ability_weight"));
  });
  const TensorStore ablation_weight = in_stage("extract:ablation", [&] {
    return extract_ability(theta_ability_lang, theta_lang, base, 1.0, 0.0,
                           "ability" + std::to_string(config.ability), dest("ablation_ability_weight"));
  });

  // Language weights for every non-reference language.
  const TensorStore multilingual = in_stage("combine", [&] {
    std::vector<LanguageWeight> items;
    for (int l = 1; l < config.n_languages; ++l) {
      const std::string id = "lang" + std::to_string(l);
      const NeuronMask mask = locate(id, general(l), 100 + static_cast<std::uint64_t>(l));
      const TensorStore trained =
          in_stage(("cpt:" + id).c_str(), [&] {
            return train(base_model, general(l), mask, options(config.language_steps, 200 + static_cast<std::uint64_t>(l)))
                .to_store(dest("theta_" + id), {{"kind", "checkpoint"}, {"stage", "cpt"}});
          });
      std::optional<double> mu;
      if (!config.mu.empty()) mu = config.mu[static_cast<std::size_t>(l - 1)];
      items.push_back({id, extract_language(trained, base, id, dest("language_weight_" + id)), mu});
    }
    return combine_languages(std::move(items), dest("multilingual_weight"));
  });

  const auto transfer = [&](const TensorStore& weight, const std::string& stem) {
    return in_stage(("merge:" + stem).c_str(), [&] {
      const SimilarityReport report = similarity_report(weight, multilingual, Metric::Dot);
      const TensorSelection selection = select_last(report, config.k2);
      if (to_disk) write_selection(run_dir / ("selection_" + stem + ".json"), report, selection);
      MergePlan plan{base, weight, multilingual, selection.names, config.gamma, config.eta, false};
      return ToyModel::from_store(merge(plan, dest(stem)));
    });
  };
  const ToyModel merged = transfer(ability_weight, "merged");
  const ToyModel ablation = transfer(ablation_weight, "ablation");

  ExperimentReport report;
  report.config = config;
  const std::uint64_t eval_seed = derive(seed, 0xE);
  for (const ToyTask& t : tasks) {
    const double b = evaluate(base_model, t, config.eval_samples, eval_seed);
    const double m = evaluate(merged, t, config.eval_samples, eval_seed);
    const double a = evaluate(ablation, t, config.eval_samples, eval_seed);
    report.rows.push_back({t.ability, t.language, "base", b});
    report.rows.push_back({t.ability, t.language, "merged", m});
    report.rows.push_back({t.ability, t.language, "ablation", a});
    if (t.ability == config.ability && t.language == config.target_language) {
      report.heldout_base = b;
      report.heldout_merged = m;
      report.heldout_ablation = a;
    }
  }
  if (to_disk) {
    std::ofstream out(run_dir / "report.json", std::ios::binary | std::ios::trunc);
    out << report.to_json();
    if (!out) throw Error("cannot write toy report");
  }
  return report;
}

}  // namespace maet::toy
