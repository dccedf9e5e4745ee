#include <gtest/gtest.h>

#include <cmath>

#include "maet/error.hpp"
#include "maet/toy_lab.hpp"
#include "support.hpp"

using namespace maet;
using namespace maet::testing;
using namespace maet::toy;

namespace {

std::vector<Sample> samples(const ToyTask& task, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(draw_sample({{task, 1.0}}, rng));
  return out;
}

// Rule fixed up front: |a - n| / max(|a| + |n|, 1e-7), i.e. symmetric relative
// error with a floor for gradients that are numerically zero.
double relative_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) / std::max(std::fabs(analytic) + std::fabs(numeric), 1e-7);
}

}  // namespace

TEST(ToyModel, LayoutHas1377Parameters) {
  std::size_t total = 0;
  for (const LayerSlot& slot : layout()) total += slot.size();
  EXPECT_EQ(total, kParameterCount);
  EXPECT_EQ(kParameterCount, 8u * 32 + 32 + 32 * 32 + 32 + 32 + 1);
}

TEST(ToyModel, StoreRoundTrip) {
  TempDir dir;
  const ToyModel model = ToyModel::init(3);
  const TensorStore store = model.to_store(Destination::file(dir / "m.safetensors"));
  EXPECT_EQ(ToyModel::from_store(TensorStore::open(dir / "m.safetensors")), model);
  EXPECT_EQ(store.names().size(), 6u);
}

TEST(ToyTasks, ReferenceLanguageIsIdentityAndRotationsAreOrthogonal) {
  const std::vector<ToyTask> tasks = gen_tasks(5, 3, 2);
  ASSERT_EQ(tasks.size(), 6u);
  for (std::size_t i = 0; i < kInput; ++i) {
    for (std::size_t j = 0; j < kInput; ++j) EXPECT_EQ(tasks[0].q[i * kInput + j], i == j ? 1.0 : 0.0);
  }
  EXPECT_EQ(gen_tasks(5, 3, 2)[2].q, tasks[2].q);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Rotation q = language_rotation(seed, 1 + static_cast<int>(seed % 5));
    for (std::size_t i = 0; i < kInput; ++i) {
      for (std::size_t j = 0; j < kInput; ++j) {
        double d = 0.0;
        for (std::size_t k = 0; k < kInput; ++k) d += q[k * kInput + i] * q[k * kInput + j];
        ASSERT_NEAR(d, i == j ? 1.0 : 0.0, 1e-5);
      }
    }
  }
  EXPECT_THROW(gen_tasks(1, 0, 1), InvalidArgument);
  EXPECT_THROW(gen_tasks(1, 1, 3), InvalidArgument);
}

TEST(ToyTrain, ZeroStepsAndFullMask) {
  const ToyModel model = ToyModel::init(1);
  const std::vector<MixtureComponent> mix{{gen_tasks(1, 1, 1)[0], 1.0}};
  EXPECT_EQ(train(model, mix, std::nullopt, {0, 0.01, 8, 1}), model);

  NeuronMask full;
  for (const LayerSlot& slot : layout()) {
    full.universe[slot.name] = slot.size();
    for (std::uint64_t i = 0; i < slot.size(); ++i) full.selected[slot.name].push_back(i);
  }
  full.total_units = kParameterCount;
  full.k_percent = 100.0;
  const TrainOptions options{50, 0.005, 16, 9};
  EXPECT_EQ(train(model, mix, full, options), train(model, mix, std::nullopt, options));
  EXPECT_NE(train(model, mix, std::nullopt, options), model);
}

TEST(ToyTrain, MaskedTrainingLeavesOtherParametersUntouched) {
  const ToyModel model = ToyModel::init(2);
  NeuronMask mask;
  for (const LayerSlot& slot : layout()) mask.universe[slot.name] = slot.size();
  mask.total_units = kParameterCount;
  mask.selected["layers.1.weight"] = {0, 5, 77, 1000};
  mask.selected["layers.2.bias"] = {0};
  const ToyModel trained = train(model, {{gen_tasks(2, 1, 2)[1], 1.0}}, mask, {200, 0.01, 16, 4});
  const std::vector<bool> allowed = flat_mask(mask);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < kParameterCount; ++i) {
    if (!allowed[i]) {
      ASSERT_TRUE(same_bits(trained.params[i], model.params[i])) << i;
    } else if (trained.params[i] != model.params[i]) {
      ++changed;
    }
  }
  EXPECT_GT(changed, 0u);
}

TEST(ToyTrain, DivergenceIsReportedWithStep) {
  try {
    train(ToyModel::init(1), {{gen_tasks(1, 1, 1)[0], 1.0}}, std::nullopt, {500, 1e3, 8, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at step"), std::string::npos);
  }
}

TEST(ToyTrain, GradientMatchesFiniteDifferences) {
  const ToyTask task = gen_tasks(4, 2, 2)[3];
  const std::vector<Sample> batch = samples(task, 16, 77);
  std::mt19937_64 rng(13);
  for (int model_seed = 0; model_seed < 3; ++model_seed) {
    const ToyModel model = ToyModel::init(static_cast<std::uint64_t>(model_seed));
    std::vector<double> p(model.params.begin(), model.params.end());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += 0.1 * std::sin(static_cast<double>(i));  // nonzero biases
    std::vector<double> gradient;
    batch_loss(p, batch, &gradient);
    auto central = [&](std::size_t i, double h) {
      std::vector<double> plus = p;
      std::vector<double> minus = p;
      plus[i] += h;
      minus[i] -= h;
      return (batch_loss(plus, batch) - batch_loss(minus, batch)) / (2.0 * h);
    };
    for (const LayerSlot& slot : layout()) {
      for (int probe = 0; probe < 50; ++probe) {
        const std::size_t i = slot.offset + std::uniform_int_distribution<std::size_t>(0, slot.size() - 1)(rng);
        // Richardson extrapolation cancels the second-order truncation term,
        // so near-zero components are checked as tightly as large ones.
        const double numeric = (4.0 * central(i, 5e-4) - central(i, 1e-3)) / 3.0;
        ASSERT_LT(relative_error(gradient[i], numeric), 1e-6)
            << slot.name << " index " << i << " analytic " << gradient[i] << " numeric " << numeric;
      }
    }
  }
}

TEST(ToyEvaluate, OracleAndZeroModels) {
  const ToyTask f1 = gen_tasks(1, 1, 1)[0];
  const ToyModel zero;
  const double mse = evaluate(zero, f1, 100000, 5);
  EXPECT_NEAR(mse, 80.0, 4.0);
  EXPECT_EQ(evaluate(zero, f1, 1000, 5), evaluate(zero, f1, 1000, 5));
  // Sampling cross-check of E[(chi2_8)^2] = 80 without the model.
  std::mt19937_64 rng(99);
  std::normal_distribution<double> normal;
  double total = 0.0;
  for (int n = 0; n < 100000; ++n) {
    double s = 0.0;
    for (int j = 0; j < 8; ++j) {
      const double x = normal(rng);
      s += x * x;
    }
    total += s * s;
  }
  EXPECT_NEAR(total / 100000.0, 80.0, 4.0);
  EXPECT_THROW(evaluate(zero, f1, 0, 1), InvalidArgument);
}

TEST(ToyEvaluate, OracleAndHandComputedErrors) {
  for (const ToyTask& task : gen_tasks(8, 2, 2)) {
    EXPECT_EQ(evaluate([&](std::span<const double> x) { return task.target(x); }, task, 1000, 3), 0.0);
  }
  // A constant predictor c on f1: error is E[(c - chi2_8)^2] = (c - 8)^2 + 16.
  const ToyTask f1 = gen_tasks(8, 1, 1)[0];
  EXPECT_NEAR(evaluate([](std::span<const double>) { return 8.0; }, f1, 100000, 3), 16.0, 0.8);
  const ToyModel model = ToyModel::init(8);
  const std::vector<double> p(model.params.begin(), model.params.end());
  EXPECT_EQ(evaluate(model, f1, 500, 21),
            evaluate([&](std::span<const double> x) { return predict(p, x); }, f1, 500, 21));
}

TEST(ToyExperiment, NullPipelineLeavesBaseUnchanged) {
  ToyConfig config;
  config.pretrain_steps = 0;
  config.probe_steps = 0;
  config.cpt_steps = 0;
  config.language_steps = 0;
  config.eval_samples = 256;
  const ExperimentReport report = run_transfer_experiment(config, {});
  ASSERT_EQ(report.rows.size(), static_cast<std::size_t>(config.n_languages * config.n_abilities * 3));
  for (std::size_t i = 0; i < report.rows.size(); i += 3) {
    EXPECT_EQ(report.rows[i].variant, "base");
    EXPECT_EQ(report.rows[i].mse, report.rows[i + 1].mse);
    EXPECT_EQ(report.rows[i].mse, report.rows[i + 2].mse);
  }
}

TEST(ToyExperiment, ArtifactsMatchAndRunsAreReproducible) {
  ToyConfig config;
  config.pretrain_steps = 200;
  config.probe_steps = 20;
  config.cpt_steps = 100;
  config.language_steps = 100;
  config.eval_samples = 256;
  TempDir a, b;
  const ExperimentReport first = run_transfer_experiment(config, a.path());
  const ExperimentReport second = run_transfer_experiment(config, b.path());
  EXPECT_EQ(first.to_json(), second.to_json());
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(a.path())) {
    ++files;
    const auto name = entry.path().filename();
    ASSERT_EQ(slurp(entry.path()), slurp(b.path() / name)) << name;
  }
  EXPECT_GT(files, 20u);
  const TensorStore merged = TensorStore::open(a / "merged.safetensors");
  EXPECT_EQ(merged.metadata_value("kind"), "merged");
  EXPECT_EQ(ToyModel::from_store(merged).params.size(), kParameterCount);
  EXPECT_NO_THROW(import_mask(a / "mask_ability.safetensors"));
}

TEST(ToyExperiment, ConfigValidation) {
  ToyConfig config;
  config.k1 = 0.0;
  EXPECT_THROW(run_transfer_experiment(config, {}), InvalidArgument);
  config = {};
  config.target_language = 0;
  EXPECT_THROW(config.validate(), InvalidArgument);
  config = {};
  config.mixture = 1.5;
  EXPECT_THROW(config.validate(), InvalidArgument);
}
