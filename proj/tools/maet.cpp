// maet: command-line front end. Every subcommand wraps one library operation.
//
// Exit codes: 0 success, 1 usage error, 2 data error. Errors are printed to
// stderr as a one-line JSON object.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maet/ability_extract.hpp"
#include "maet/delta_ops.hpp"
#include "maet/error.hpp"
#include "maet/inspect.hpp"
#include "maet/lingual_combine.hpp"
#include "maet/manifest.hpp"
#include "maet/neuron_importance.hpp"
#include "maet/numeric.hpp"
#include "maet/tensor_select.hpp"
#include "maet/toy_lab.hpp"
#include "maet/transfer_merge.hpp"

namespace {

using namespace maet;

std::string json_escape(std::string_view text) {
  std::string out;
  for (const char c : text) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  return out;
}

int report_error(std::string_view kind, std::string_view message, int code) {
  std::cerr << "{\"error\":\"" << json_escape(kind) << "\",\"message\":\"" << json_escape(message)
            << "\",\"exit\":" << code << "}\n";
  return code;
}

// "lang1=0.5,lang2=0.5"
std::map<std::string, double> parse_mu(const std::string& text) {
  std::map<std::string, double> mu;
  if (text.empty()) return mu;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    const std::string item = text.substr(start, comma - start);
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw InvalidArgument("--mu expects lang=value pairs, got '" + item + "'");
    }
    const std::string lang = item.substr(0, eq);
    if (!mu.emplace(lang, parse_real(item.substr(eq + 1), "--mu " + lang)).second) {
      throw InvalidArgument("--mu names '" + lang + "' twice");
    }
    start = comma + 1;
  }
  return mu;
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write '" + path + "'");
}

void announce(const TensorStore& store) {
  std::cout << store.label() << " " << store.digest() << "\n";
}

struct Flags {
  std::string base, trained, probe, lang, importance_file, ability, multilingual, selection;
  std::vector<std::string> masks, weights, include, exclude, files;
  std::string mask, mu, out, metric = "dot", granularity = "scalar";
  std::string ability_id = "ability", language_id = "language";
  double alpha = kDefaultAlpha, beta = kDefaultBeta, gamma = kDefaultGamma, eta = kDefaultEta;
  double k1 = 5.0, k2 = 80.0, lambda = 1.0;
  bool dry_run = false, highest = false, eta_everywhere = false, intersect = false;
  std::uint64_t seed = 1;
  int seeds = 1;
  int toy_ability = 0, target_language = 1, languages = 3;
  double mixture = 0.5, lr = 0.005;
  std::optional<std::uint64_t> pretrain_steps, probe_steps, cpt_steps, language_steps;
};

NamePatterns patterns(const Flags& f) { return {f.include, f.exclude}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ability transfer across languages by weight decomposition and merging"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "maet 0.1.0");
  Flags f;
  const auto existing = CLI::ExistingFile;

  auto* diff_cmd = app.add_subcommand("diff", "Delta store: trained - base");
  diff_cmd->add_option("--trained", f.trained, "Minuend checkpoint")->required()->check(existing);
  diff_cmd->add_option("--base", f.base, "Subtrahend checkpoint")->required()->check(existing);
  diff_cmd->add_option("--out", f.out, "Output delta file")->required();

  auto* importance_cmd = app.add_subcommand("importance", "Per-unit importance |probe - base|");
  importance_cmd->add_option("--base", f.base, "Backbone checkpoint")->required()->check(existing);
  importance_cmd->add_option("--probe", f.probe, "Probe-trained checkpoint")->required()->check(existing);
  importance_cmd->add_option("--granularity", f.granularity, "scalar or row")
      ->check(CLI::IsMember({"scalar", "row"}));
  importance_cmd->add_option("--lambda", f.lambda, "Recorded approximation scale");
  importance_cmd->add_option("--out", f.out, "Output importance file")->required();

  auto* mask_cmd = app.add_subcommand("mask", "Top-k1% key-neuron mask from an importance file");
  mask_cmd->add_option("--importance", f.importance_file, "Importance file")->required()->check(existing);
  mask_cmd->add_option("--k1", f.k1, "Percent of units to keep, in (0, 100]");
  mask_cmd->add_option("--include", f.include, "Eligible tensor glob (repeatable)");
  mask_cmd->add_option("--exclude", f.exclude, "Ineligible tensor glob (repeatable)");
  mask_cmd->add_option("--out", f.out, "Output mask file")->required();

  auto* union_cmd = app.add_subcommand("mask-union", "Union (or intersection) of masks");
  union_cmd->add_option("--mask", f.masks, "Mask file (repeatable)")->required()->check(existing);
  union_cmd->add_flag("--intersect", f.intersect, "Intersect instead of unite");
  union_cmd->add_option("--out", f.out, "Output mask file")->required();

  auto* project_cmd = app.add_subcommand("project", "Keep trained values only at masked indices");
  project_cmd->add_option("--base", f.base, "Backbone checkpoint")->required()->check(existing);
  project_cmd->add_option("--trained", f.trained, "Trained checkpoint")->required()->check(existing);
  project_cmd->add_option("--mask", f.mask, "Mask file")->required()->check(existing);
  project_cmd->add_option("--out", f.out, "Output checkpoint")->required();

  auto* extract_cmd = app.add_subcommand(
      "extract", "Ability weight alpha*(trained-base) - beta*(lang-base); without --lang, a language weight");
  extract_cmd->add_option("--trained", f.trained, "Ability+language trained checkpoint")->required()->check(existing);
  extract_cmd->add_option("--lang", f.lang, "Language-only trained checkpoint")->check(existing);
  extract_cmd->add_option("--base", f.base, "Backbone checkpoint")->required()->check(existing);
  extract_cmd->add_option("--alpha", f.alpha, "Ability coefficient (default 0.8)");
  extract_cmd->add_option("--beta", f.beta, "Language coefficient (default 0.2)");
  extract_cmd->add_option("--ability-id", f.ability_id, "Ability label recorded in metadata");
  extract_cmd->add_option("--language-id", f.language_id, "Language label for language weights");
  extract_cmd->add_option("--out", f.out, "Output weight file")->required();

  auto* combine_cmd = app.add_subcommand("combine", "Multi-lingual weight sum_i mu_i * R(L_i)");
  combine_cmd->add_option("--weight", f.weights, "lang=path (repeatable)")->required();
  combine_cmd->add_option("--mu", f.mu, "lang=value,... (default uniform)");
  combine_cmd->add_option("--out", f.out, "Output weight file")->required();

  auto* select_cmd = app.add_subcommand("select", "Rank tensors by similarity and select the tail");
  select_cmd->add_option("--ability", f.ability, "Ability weight")->required()->check(existing);
  select_cmd->add_option("--multilingual", f.multilingual, "Multi-lingual weight")->required()->check(existing);
  select_cmd->add_option("--k2", f.k2, "Percent of tensors to select, in (0, 100]");
  select_cmd->add_option("--metric", f.metric, "dot or cosine")->check(CLI::IsMember({"dot", "cosine"}));
  select_cmd->add_option("--include", f.include, "Eligible tensor glob (repeatable)");
  select_cmd->add_option("--exclude", f.exclude, "Ineligible tensor glob (repeatable)");
  select_cmd->add_flag("--highest", f.highest, "Select the most similar tensors instead");
  select_cmd->add_option("--out", f.out, "Selection file (default stdout)");

  auto* merge_cmd = app.add_subcommand("merge", "Assemble the transferred checkpoint");
  merge_cmd->add_option("--base", f.base, "Backbone checkpoint")->required()->check(existing);
  merge_cmd->add_option("--ability", f.ability, "Ability weight")->required()->check(existing);
  merge_cmd->add_option("--multilingual", f.multilingual, "Multi-lingual weight")->required()->check(existing);
  merge_cmd->add_option("--selection", f.selection, "Selection file from 'select'")->required()->check(existing);
  merge_cmd->add_option("--gamma", f.gamma, "Ability coefficient on selected tensors (default 0.2)");
  merge_cmd->add_option("--eta", f.eta, "Multi-lingual coefficient on selected tensors (default 1.0)");
  merge_cmd->add_flag("--eta-everywhere", f.eta_everywhere, "Apply eta to unselected tensors too");
  merge_cmd->add_flag("--dry-run", f.dry_run, "Print the per-tensor summary and write nothing");
  merge_cmd->add_option("--out", f.out, "Output checkpoint");

  auto* inspect_cmd = app.add_subcommand("inspect", "Per-tensor statistics, or per-layer comparison of two stores");
  inspect_cmd->add_option("files", f.files, "One store to summarise, or two to compare")
      ->required()->expected(1, 2)->check(existing);
  inspect_cmd->add_option("--out", f.out, "Report file (default stdout)");

  auto* toy_cmd = app.add_subcommand("toy", "Run the toy end-to-end transfer experiment");
  toy_cmd->add_option("--seed", f.seed, "Master seed (first seed with --seeds)");
  toy_cmd->add_option("--seeds", f.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--k1", f.k1, "Key-neuron percent");
  toy_cmd->add_option("--k2", f.k2, "Selected tensor percent");
  toy_cmd->add_option("--alpha", f.alpha);
  toy_cmd->add_option("--beta", f.beta);
  toy_cmd->add_option("--gamma", f.gamma);
  toy_cmd->add_option("--eta", f.eta);
  toy_cmd->add_option("--ability", f.toy_ability, "Ability trained in language 0 (0: sum of squares, 1: max)");
  toy_cmd->add_option("--target-language", f.target_language, "Held-out language for the headline comparison");
  toy_cmd->add_option("--languages", f.languages, "Number of languages, reference included");
  toy_cmd->add_option("--mixture", f.mixture, "Share of ability samples in the ability CPT stage");
  toy_cmd->add_option("--lr", f.lr, "SGD learning rate");
  toy_cmd->add_option("--pretrain-steps", f.pretrain_steps);
  toy_cmd->add_option("--probe-steps", f.probe_steps);
  toy_cmd->add_option("--cpt-steps", f.cpt_steps);
  toy_cmd->add_option("--language-steps", f.language_steps);
  toy_cmd->add_option("--out", f.out, "Run directory")->required();

  auto* run_cmd = app.add_subcommand("run", "Execute a pipeline manifest");
  run_cmd->add_option("manifest", f.files, "Manifest file")->required()->expected(1)->check(existing);
  run_cmd->add_option("--out", f.out, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), 1);
  }

  try {
    if (diff_cmd->parsed()) {
      announce(diff(TensorStore::open(f.trained), TensorStore::open(f.base), Destination::file(f.out)));
    } else if (importance_cmd->parsed()) {
      const ImportanceMap map = importance(TensorStore::open(f.base), TensorStore::open(f.probe),
                                           parse_granularity(f.granularity), f.lambda);
      announce(save_importance(map, Destination::file(f.out)));
    } else if (mask_cmd->parsed()) {
      check_percent(f.k1, "--k1");
      const NeuronMask mask = top_k_mask(TensorStore::open(f.importance_file), f.k1, patterns(f));
      announce(mask_to_store(mask, Destination::file(f.out)));
    } else if (union_cmd->parsed()) {
      NeuronMask acc = import_mask(f.masks.front());
      for (std::size_t i = 1; i < f.masks.size(); ++i) {
        const NeuronMask next = import_mask(f.masks[i]);
        acc = f.intersect ? mask_intersect(acc, next) : mask_union(acc, next);
      }
      announce(mask_to_store(acc, Destination::file(f.out)));
    } else if (project_cmd->parsed()) {
      announce(project_update(TensorStore::open(f.base), TensorStore::open(f.trained), import_mask(f.mask),
                              Destination::file(f.out)));
    } else if (extract_cmd->parsed()) {
      if (f.lang.empty()) {
        announce(extract_language(TensorStore::open(f.trained), TensorStore::open(f.base), f.language_id,
                                  Destination::file(f.out)));
      } else {
        announce(extract_ability(TensorStore::open(f.trained), TensorStore::open(f.lang),
                                 TensorStore::open(f.base), f.alpha, f.beta, f.ability_id,
                                 Destination::file(f.out)));
      }
    } else if (combine_cmd->parsed()) {
      const std::map<std::string, double> mu = parse_mu(f.mu);
      std::vector<LanguageWeight> items;
      for (const std::string& spec : f.weights) {
        const std::size_t eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) {
          throw InvalidArgument("--weight expects lang=path, got '" + spec + "'");
        }
        const std::string lang = spec.substr(0, eq);
        const std::string path = spec.substr(eq + 1);
        if (!std::filesystem::is_regular_file(path)) {
          throw InvalidArgument("--weight " + lang + ": file '" + path + "' not found");
        }
        std::optional<double> weight;
        if (const auto it = mu.find(lang); it != mu.end()) weight = it->second;
        items.push_back({lang, TensorStore::open(path), weight});
      }
      for (const auto& [lang, value] : mu) {
        if (std::none_of(items.begin(), items.end(), [&](const LanguageWeight& w) { return w.language == lang; })) {
          throw InvalidArgument("--mu names '" + lang + "' but no --weight has that language");
        }
      }
      announce(combine_languages(std::move(items), Destination::file(f.out)));
    } else if (select_cmd->parsed()) {
      check_percent(f.k2, "--k2");
      patterns(f).validate();
      const SimilarityReport report = similarity_report(TensorStore::open(f.ability),
                                                        TensorStore::open(f.multilingual), parse_metric(f.metric));
      const TensorSelection selection =
          select_last(report, f.k2, patterns(f), f.highest ? SelectEnd::Highest : SelectEnd::Lowest);
      write_output(f.out, selection_to_json(report, selection));
    } else if (merge_cmd->parsed()) {
      if (!f.dry_run && f.out.empty()) throw InvalidArgument("--out is required unless --dry-run is given");
      MergePlan plan{TensorStore::open(f.base), TensorStore::open(f.ability), TensorStore::open(f.multilingual),
                     read_selection(f.selection).names, f.gamma, f.eta, f.eta_everywhere};
      if (f.dry_run) {
        std::cout << summary_to_json(dry_run(plan));
      } else {
        announce(merge(plan, Destination::file(f.out)));
      }
    } else if (inspect_cmd->parsed()) {
      const TensorStore a = TensorStore::open(f.files[0]);
      write_output(f.out, f.files.size() == 1 ? stats_to_json(summarize(a))
                                              : layer_report_to_json(compare_layers(a, TensorStore::open(f.files[1]))));
    } else if (toy_cmd->parsed()) {
      for (int s = 0; s < f.seeds; ++s) {
        toy::ToyConfig config;
        config.seed = f.seed + static_cast<std::uint64_t>(s);
        config.ability = f.toy_ability;
        config.target_language = f.target_language;
        config.n_languages = f.languages;
        config.mixture = f.mixture;
        config.lr = f.lr;
        config.k1 = f.k1;
        config.k2 = f.k2;
        config.alpha = f.alpha;
        config.beta = f.beta;
        config.gamma = f.gamma;
        config.eta = f.eta;
        if (f.pretrain_steps) config.pretrain_steps = *f.pretrain_steps;
        if (f.probe_steps) config.probe_steps = *f.probe_steps;
        if (f.cpt_steps) config.cpt_steps = *f.cpt_steps;
        if (f.language_steps) config.language_steps = *f.language_steps;
        const std::filesystem::path dir =
            f.seeds == 1 ? std::filesystem::path(f.out)
                         : std::filesystem::path(f.out) / ("seed" + std::to_string(config.seed));
        const toy::ExperimentReport report = toy::run_transfer_experiment(config, dir);
        std::cout << "seed " << config.seed << ": heldout base " << report.heldout_base << " merged "
                  << report.heldout_merged << " ablation " << report.heldout_ablation << "\n";
      }
    } else if (run_cmd->parsed()) {
      const Manifest manifest = load_manifest(f.files.front());
      for (const Artifact& artifact : run_manifest(manifest, f.out)) {
        std::cout << artifact.stage << " " << artifact.path.string() << " " << artifact.digest << "\n";
      }
    }
  } catch (const InvalidArgument& e) {
    return report_error("usage", e.what(), 1);
  } catch (const Error& e) {
    return report_error("data", e.what(), 2);
  } catch (const std::exception& e) {
    return report_error("data", e.what(), 2);
  }
  return 0;
}
