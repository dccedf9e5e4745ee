#pragma once

// Declarative pipeline runs.
//
// A manifest is a JSON document:
//
//   {
//     "hyperparameters": {"alpha": 0.8, "beta": 0.2, "mu": {"lang1": 0.5},
//                         "gamma": 0.2, "eta": 1.0, "k1_percent": 5,
//                         "k2_percent": 80, "granularity": "scalar",
//                         "metric": "dot"},
//     "filters": {"include": ["*mlp*"], "exclude": []},
//     "stages": [
//       {"name": "ability", "op": "extract",
//        "inputs": {"ability_model": "a.safetensors", "language_model": "l.safetensors",
//                   "base": "base.safetensors"},
//        "output": "ability.safetensors"},
//       {"name": "merged", "op": "merge",
//        "inputs": {"base": "base.safetensors", "ability": "@ability", ...},
//        "params": {"gamma": 0.1},
//        "output": "merged.safetensors"}
//     ]
//   }
//
// An input is "@<stage>" (that stage's output) or a file path relative to the
// manifest. Outputs are relative to the run directory. Each artifact gets a
// "<output>.provenance.json" record with input digests and parameters.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maet/neuron_importance.hpp"
#include "maet/patterns.hpp"
#include "maet/tensor_select.hpp"

namespace maet {

struct Hyperparameters {
  double alpha = 0.8;
  double beta = 0.2;
  std::map<std::string, double> mu;  // missing languages share 1/n
  double gamma = 0.2;
  double eta = 1.0;
  double k1_percent = 5.0;
  double k2_percent = 80.0;
  Granularity granularity = Granularity::Scalar;
  Metric metric = Metric::Dot;
  SelectEnd select_end = SelectEnd::Lowest;
  bool eta_everywhere = false;
};

struct Stage {
  std::string name;
  std::string op;  // diff, importance, mask, mask-union, project, extract, combine, select, merge
  std::map<std::string, std::string> inputs;
  std::string output;
  Hyperparameters params;  // manifest values with this stage's overrides applied
  std::map<std::string, std::string> param_text;  // overrides as written, for provenance
};

struct Manifest {
  Hyperparameters hyperparameters;
  NamePatterns filters;
  std::vector<Stage> stages;
  std::filesystem::path base_dir;  // inputs resolve against this
};

/// Parses and validates. Errors are InvalidArgument naming the offending
/// field, e.g. "stages[2].inputs.base: ...". Cycles are reported here, before
/// anything runs.
Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir);
Manifest load_manifest(const std::filesystem::path& path);

/// Stage indices in a topological order; ties keep manifest order.
std::vector<std::size_t> execution_order(const Manifest& manifest);

struct Artifact {
  std::string stage;
  std::filesystem::path path;
  std::string digest;
};

/// Executes every stage in order into `run_dir`. Stops at the first failing
/// stage with an Error naming it; that stage's partial output is removed.
std::vector<Artifact> run_manifest(const Manifest& manifest, const std::filesystem::path& run_dir);

}  // namespace maet
