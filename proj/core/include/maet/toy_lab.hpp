#pragma once

// Desk-scale laboratory for the full transfer procedure.
//
// A 8 -> 32 -> 32 -> 1 tanh regressor stands in for the backbone. A
// "language" is an orthogonal rotation Q_l of the input and an "ability" is a
// target function f_a; a sample is (x, f_a(Q_l x)) with x standard normal.
// General (non-ability) data uses a fixed linear readout of Q_l x, so general
// training teaches the model a language and nothing else.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "maet/neuron_importance.hpp"
#include "maet/tensor_store.hpp"

namespace maet::toy {

inline constexpr std::size_t kInput = 8;
inline constexpr std::size_t kHidden = 32;
inline constexpr std::size_t kParameterCount = 1377;

/// One parameter tensor inside the flat parameter vector. Tensors are laid
/// out in ascending name order, the same order a store lists them in.
struct LayerSlot {
  const char* name;
  std::size_t offset;
  std::size_t rows;
  std::size_t cols;  // 0 for biases
  std::size_t size() const { return cols == 0 ? rows : rows * cols; }
  Shape shape() const;
};

/// layers.{0,1,2}.{bias,weight}; weights are [out, in] row-major.
const std::array<LayerSlot, 6>& layout();

struct ToyModel {
  std::vector<float> params = std::vector<float>(kParameterCount, 0.0f);

  /// Uniform(+-1/sqrt(fan_in)) weights, zero biases.
  static ToyModel init(std::uint64_t seed);
  static ToyModel from_store(const TensorStore& store);
  TensorStore to_store(const Destination& dest, const Metadata& metadata = {}) const;

  friend bool operator==(const ToyModel&, const ToyModel&) = default;
};

enum class Function { SumSquares, Max, General };

using Rotation = std::array<double, kInput * kInput>;  // row-major

struct ToyTask {
  int language = 0;
  int ability = 0;  // -1 for the general task
  Function function = Function::General;
  Rotation q{};

  double target(std::span<const double> x) const;
};

/// Rotation of language l: identity for l = 0, otherwise modified
/// Gram-Schmidt of a Gaussian matrix seeded by (seed, l).
Rotation language_rotation(std::uint64_t seed, int language);

/// Every (language, ability) pair, languages outer. Ability 0 is the sum of
/// squares, ability 1 the maximum coordinate. Requires 1 <= n_abilities <= 2.
std::vector<ToyTask> gen_tasks(std::uint64_t seed, int n_languages, int n_abilities);

/// The general task in a language.
ToyTask general_task(std::uint64_t seed, int language);

struct Sample {
  std::array<double, kInput> x{};
  double y = 0.0;
};

struct MixtureComponent {
  ToyTask task;
  double weight = 1.0;
};

/// Draws a component by weight, then x ~ N(0, I).
Sample draw_sample(const std::vector<MixtureComponent>& mixture, std::mt19937_64& rng);

double predict(std::span<const double> params, std::span<const double> x);

/// Mean squared error of the batch; fills `gradient` (same layout as the
/// parameters) when given. Everything in binary64.
double batch_loss(std::span<const double> params, std::span<const Sample> batch,
                  std::vector<double>* gradient = nullptr);

/// Flat per-parameter mask over the model layout.
std::vector<bool> flat_mask(const NeuronMask& mask);

struct TrainOptions {
  std::uint64_t steps = 0;
  double lr = 0.01;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

/// Plain SGD on mean squared error. With a mask, gradients outside it are
/// zeroed, so those parameters keep their exact initial values. Throws when
/// the loss becomes non-finite, naming the step.
ToyModel train(const ToyModel& model, const std::vector<MixtureComponent>& mixture,
               const std::optional<NeuronMask>& mask, const TrainOptions& options);

/// MSE on a fixed evaluation set drawn from `seed`.
double evaluate(const ToyModel& model, const ToyTask& task, std::size_t n_samples, std::uint64_t seed);
/// Same evaluation set, arbitrary predictor.
double evaluate(const std::function<double(std::span<const double>)>& predictor, const ToyTask& task,
                std::size_t n_samples, std::uint64_t seed);

struct ToyConfig {
  std::uint64_t seed = 1;
  int n_languages = 3;
  int n_abilities = 2;
  int ability = 0;          // the ability whose corpus exists in language 0
  int target_language = 1;  // held-out language for the headline comparison

  std::uint64_t pretrain_steps = 4000;
  std::uint64_t probe_steps = 100;
  std::uint64_t cpt_steps = 2000;
  std::uint64_t language_steps = 2000;
  double lr = 0.005;
  std::size_t batch_size = 32;
  double mixture = 0.5;  // share of ability samples in the ability CPT stage

  double k1 = 5.0;
  double k2 = 80.0;
  double alpha = 0.8;
  double beta = 0.2;
  double gamma = 0.2;
  double eta = 1.0;
  std::vector<double> mu;  // one per non-reference language; empty -> uniform

  std::size_t eval_samples = 4096;

  void validate() const;
};

struct ReportRow {
  int ability = 0;
  int language = 0;
  std::string variant;  // base, merged, ablation
  double mse = 0.0;
};

struct ExperimentReport {
  ToyConfig config;
  std::vector<ReportRow> rows;  // (ability, language) x {base, merged, ablation}
  double heldout_base = 0.0;
  double heldout_merged = 0.0;
  double heldout_ablation = 0.0;

  double merged_improvement() const;    // (base - merged) / base
  double ablation_improvement() const;  // (base - ablation) / base
  std::string to_json() const;
};

/// Runs the whole procedure, writing every intermediate checkpoint, mask,
/// importance map and selection under `run_dir` and a report.json beside
/// them. Stage failures are rethrown with the stage name.
ExperimentReport run_transfer_experiment(const ToyConfig& config,
                                         const std::filesystem::path& run_dir);

}  // namespace maet::toy
