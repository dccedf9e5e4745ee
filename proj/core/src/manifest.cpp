#include "maet/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "maet/ability_extract.hpp"
#include "maet/delta_ops.hpp"
#include "maet/digest.hpp"
#include "maet/error.hpp"
#include "maet/lingual_combine.hpp"
#include "maet/numeric.hpp"
#include "maet/transfer_merge.hpp"

namespace maet {

using json = nlohmann::json;

namespace {

enum class Kind { Store, Importance, Mask, Selection };

const char* kind_name(Kind kind) {
  switch (kind) {
    case Kind::Store: return "checkpoint";
    case Kind::Importance: return "importance map";
    case Kind::Mask: return "mask";
    case Kind::Selection: return "selection";
  }
  return "";
}

struct OpInfo {
  std::vector<std::string> required;  // empty: any non-empty set of keys
  Kind output;
};

const std::map<std::string, OpInfo>& ops() {
  static const std::map<std::string, OpInfo> table{
      {"diff", {{"minuend", "subtrahend"}, Kind::Store}},
      {"importance", {{"base", "probe"}, Kind::Importance}},
      {"mask", {{"importance"}, Kind::Mask}},
      {"mask-union", {{}, Kind::Mask}},
      {"project", {{"base", "trained", "mask"}, Kind::Store}},
      {"extract", {{"ability_model", "language_model", "base"}, Kind::Store}},
      {"combine", {{}, Kind::Store}},
      {"select", {{"ability", "multilingual"}, Kind::Selection}},
      {"merge", {{"base", "ability", "multilingual", "selection"}, Kind::Store}},
  };
  return table;
}

Kind input_kind(const std::string& op, const std::string& key) {
  if (op == "mask-union") return Kind::Mask;
  if (key == "importance") return Kind::Importance;
  if (key == "mask") return Kind::Mask;
  if (key == "selection") return Kind::Selection;
  return Kind::Store;
}

[[noreturn]] void field_error(const std::string& field, const std::string& message) {
  throw InvalidArgument(field + ": " + message);
}

double real_field(const json& value, const std::string& field) {
  if (!value.is_number()) field_error(field, "expected a number");
  const double v = value.get<double>();
  if (!std::isfinite(v)) field_error(field, "must be finite");
  return v;
}

std::string string_field(const json& value, const std::string& field) {
  if (!value.is_string()) field_error(field, "expected a string");
  return value.get<std::string>();
}

void apply_hyperparameters(const json& object, Hyperparameters& h, const std::string& prefix,
                           std::map<std::string, std::string>* text) {
  if (!object.is_object()) field_error(prefix, "expected an object");
  for (const auto& [key, value] : object.items()) {
    const std::string field = prefix + "." + key;
    if (key == "alpha") h.alpha = real_field(value, field);
    else if (key == "beta") h.beta = real_field(value, field);
    else if (key == "gamma") h.gamma = real_field(value, field);
    else if (key == "eta") h.eta = real_field(value, field);
    else if (key == "k1_percent" || key == "k2_percent") {
      const double v = real_field(value, field);
      if (!(v > 0.0 && v <= 100.0)) field_error(field, "must lie in (0, 100]");
      (key == "k1_percent" ? h.k1_percent : h.k2_percent) = v;
    } else if (key == "granularity") {
      try {
        h.granularity = parse_granularity(string_field(value, field));
      } catch (const InvalidArgument& e) {
        field_error(field, e.what());
      }
    } else if (key == "metric") {
      try {
        h.metric = parse_metric(string_field(value, field));
      } catch (const InvalidArgument& e) {
        field_error(field, e.what());
      }
    } else if (key == "select_end") {
      const std::string end = string_field(value, field);
      if (end != "lowest" && end != "highest") field_error(field, "must be 'lowest' or 'highest'");
      h.select_end = end == "lowest" ? SelectEnd::Lowest : SelectEnd::Highest;
    } else if (key == "eta_everywhere") {
      if (!value.is_boolean()) field_error(field, "expected true or false");
      h.eta_everywhere = value.get<bool>();
    } else if (key == "mu") {
      if (!value.is_object()) field_error(field, "expected an object of language -> weight");
      h.mu.clear();
      for (const auto& [lang, weight] : value.items()) h.mu[lang] = real_field(weight, field + "." + lang);
    } else {
      field_error(field, "unknown hyper-parameter");
    }
    if (text) (*text)[key] = value.dump();
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path partial = path;
  partial += ".partial";
  {
    std::ofstream out(partial, std::ios::binary | std::ios::trunc);
    out << text;
    out.close();
    if (!out) {
      std::filesystem::remove(partial);
      throw Error("cannot write '" + path.string() + "'");
    }
  }
  std::filesystem::rename(partial, path);
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  Sha256 hash;
  std::vector<char> chunk(1 << 16);
  while (in) {
    in.read(chunk.data(), static_cast<std::streamsize>(chunk.size()));
    hash.update(std::string_view(chunk.data(), static_cast<std::size_t>(in.gcount())));
  }
  return hash.hex_digest();
}

std::filesystem::path sidecar(const std::filesystem::path& output) {
  std::filesystem::path p = output;
  p += ".provenance.json";
  return p;
}

json params_json(const Stage& stage, const Manifest& manifest) {
  const Hyperparameters& h = stage.params;
  const std::string& op = stage.op;
  json p = json::object();
  if (op == "importance") p["granularity"] = std::string(to_string(h.granularity));
  if (op == "mask") p["k1_percent"] = h.k1_percent;
  if (op == "extract") {
    p["alpha"] = h.alpha;
    p["beta"] = h.beta;
  }
  if (op == "combine") {
    json mu = json::object();
    for (const auto& [lang, path] : stage.inputs) {
      const auto it = h.mu.find(lang);
      mu[lang] = it == h.mu.end() ? json("uniform") : json(it->second);
    }
    p["mu"] = mu;
  }
  if (op == "select") {
    p["k2_percent"] = h.k2_percent;
    p["metric"] = std::string(to_string(h.metric));
    p["select_end"] = h.select_end == SelectEnd::Lowest ? "lowest" : "highest";
    p["include"] = manifest.filters.include;
    p["exclude"] = manifest.filters.exclude;
  }
  if (op == "merge") {
    p["gamma"] = h.gamma;
    p["eta"] = h.eta;
    p["eta_everywhere"] = h.eta_everywhere;
  }
  return p;
}

}  // namespace

Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("manifest: not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) field_error("manifest", "top level must be an object");
  Manifest manifest;
  manifest.base_dir = base_dir;
  for (const auto& [key, value] : doc.items()) {
    if (key != "hyperparameters" && key != "filters" && key != "stages") {
      field_error(key, "unknown manifest field");
    }
  }
  if (doc.contains("hyperparameters")) {
    apply_hyperparameters(doc["hyperparameters"], manifest.hyperparameters, "hyperparameters", nullptr);
  }
  if (doc.contains("filters")) {
    const json& f = doc["filters"];
    if (!f.is_object()) field_error("filters", "expected an object");
    for (const auto& [key, value] : f.items()) {
      if (key != "include" && key != "exclude") field_error("filters." + key, "unknown filter field");
      if (!value.is_array()) field_error("filters." + key, "expected a list of patterns");
      std::vector<std::string>& list = key == "include" ? manifest.filters.include : manifest.filters.exclude;
      for (std::size_t i = 0; i < value.size(); ++i) {
        list.push_back(string_field(value[i], "filters." + key + "[" + std::to_string(i) + "]"));
      }
    }
    try {
      manifest.filters.validate();
    } catch (const InvalidArgument& e) {
      field_error("filters", e.what());
    }
  }
  if (!doc.contains("stages") || !doc["stages"].is_array() || doc["stages"].empty()) {
    field_error("stages", "expected a non-empty list");
  }

  std::map<std::string, std::size_t> by_name;
  std::set<std::string> outputs;
  const json& stages = doc["stages"];
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string prefix = "stages[" + std::to_string(i) + "]";
    const json& s = stages[i];
    if (!s.is_object()) field_error(prefix, "expected an object");
    Stage stage;
    stage.params = manifest.hyperparameters;
    for (const auto& [key, value] : s.items()) {
      const std::string field = prefix + "." + key;
      if (key == "name") stage.name = string_field(value, field);
      else if (key == "op") stage.op = string_field(value, field);
      else if (key == "output") stage.output = string_field(value, field);
      else if (key == "params") apply_hyperparameters(value, stage.params, field, &stage.param_text);
      else if (key == "inputs") {
        if (!value.is_object()) field_error(field, "expected an object");
        for (const auto& [ik, iv] : value.items()) stage.inputs[ik] = string_field(iv, field + "." + ik);
      } else {
        field_error(field, "unknown stage field");
      }
    }
    if (stage.name.empty()) field_error(prefix + ".name", "required");
    if (stage.name.find('@') != std::string::npos) field_error(prefix + ".name", "must not contain '@'");
    if (!by_name.emplace(stage.name, i).second) field_error(prefix + ".name", "duplicate stage '" + stage.name + "'");
    const auto op = ops().find(stage.op);
    if (op == ops().end()) field_error(prefix + ".op", "unknown operation '" + stage.op + "'");
    if (stage.output.empty()) field_error(prefix + ".output", "required");
    if (std::filesystem::path(stage.output).is_absolute()) {
      field_error(prefix + ".output", "must be relative to the run directory");
    }
    const std::string normal = std::filesystem::path(stage.output).lexically_normal().string();
    if (normal.starts_with("..")) field_error(prefix + ".output", "must stay inside the run directory");
    if (!outputs.insert(normal).second) field_error(prefix + ".output", "written by more than one stage");
    if (op->second.required.empty()) {
      if (stage.inputs.empty()) field_error(prefix + ".inputs", "needs at least one input");
    } else {
      for (const std::string& key : op->second.required) {
        if (!stage.inputs.contains(key)) field_error(prefix + ".inputs." + key, "required by '" + stage.op + "'");
      }
      for (const auto& [key, value] : stage.inputs) {
        if (std::find(op->second.required.begin(), op->second.required.end(), key) == op->second.required.end()) {
          field_error(prefix + ".inputs." + key, "not an input of '" + stage.op + "'");
        }
      }
    }
    manifest.stages.push_back(std::move(stage));
  }

  // References: prior-stage outputs of the right kind, or existing files.
  for (std::size_t i = 0; i < manifest.stages.size(); ++i) {
    const Stage& stage = manifest.stages[i];
    for (const auto& [key, value] : stage.inputs) {
      const std::string field = "stages[" + std::to_string(i) + "].inputs." + key;
      const Kind want = input_kind(stage.op, key);
      if (value.starts_with("@")) {
        const auto ref = by_name.find(value.substr(1));
        if (ref == by_name.end()) field_error(field, "unknown stage '" + value.substr(1) + "'");
        const Kind got = ops().at(manifest.stages[ref->second].op).output;
        if (got != want) {
          field_error(field, std::string("expects a ") + kind_name(want) + ", stage '" + ref->first +
                                 "' produces a " + kind_name(got));
        }
      } else if (!std::filesystem::is_regular_file(base_dir / value)) {
        field_error(field, "file '" + value + "' not found");
      }
    }
  }
  execution_order(manifest);
  return manifest;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error&) {
    throw InvalidArgument("cannot read manifest '" + path.string() + "'");
  }
  return parse_manifest(text, path.parent_path());
}

std::vector<std::size_t> execution_order(const Manifest& manifest) {
  const std::size_t n = manifest.stages.size();
  std::map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < n; ++i) by_name[manifest.stages[i].name] = i;
  std::vector<std::set<std::size_t>> deps(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& [key, value] : manifest.stages[i].inputs) {
      if (!value.starts_with("@")) continue;
      const auto ref = by_name.find(value.substr(1));
      if (ref != by_name.end()) deps[i].insert(ref->second);
    }
  }
  std::vector<std::size_t> order;
  std::vector<bool> done(n, false);
  while (order.size() < n) {
    bool progressed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (done[i]) continue;
      if (std::all_of(deps[i].begin(), deps[i].end(), [&](std::size_t d) { return done[d]; })) {
        done[i] = true;
        order.push_back(i);
        progressed = true;
        break;  // restart so ties keep manifest order
      }
    }
    if (!progressed) {
      std::string names;
      for (std::size_t i = 0; i < n; ++i) {
        if (!done[i]) names += (names.empty() ? "'" : ", '") + manifest.stages[i].name + "'";
      }
      throw InvalidArgument("stages: cyclic references among " + names);
    }
  }
  return order;
}

std::vector<Artifact> run_manifest(const Manifest& manifest, const std::filesystem::path& run_dir) {
  execution_order(manifest);  // re-checks a hand-built manifest
  std::map<std::string, std::filesystem::path> produced;
  std::vector<Artifact> artifacts;
  std::filesystem::create_directories(run_dir);

  for (const std::size_t index : execution_order(manifest)) {
    const Stage& stage = manifest.stages[index];
    const std::filesystem::path output = run_dir / stage.output;
    const auto resolve = [&](const std::string& key) {
      const std::string& value = stage.inputs.at(key);
      return value.starts_with("@") ? produced.at(value.substr(1)) : manifest.base_dir / value;
    };
    const auto store = [&](const std::string& key) { return TensorStore::open(resolve(key)); };
    const Hyperparameters& h = stage.params;
    try {
      if (output.has_parent_path()) std::filesystem::create_directories(output.parent_path());
      const Destination dest = Destination::file(output);
      const Metadata stage_meta{{"stage", stage.name}};
      if (stage.op == "diff") {
        diff(store("minuend"), store("subtrahend"), dest, stage_meta);
      } else if (stage.op == "importance") {
        save_importance(importance(store("base"), store("probe"), h.granularity), dest, stage_meta);
      } else if (stage.op == "mask") {
        mask_to_store(top_k_mask(store("importance"), h.k1_percent), dest);
      } else if (stage.op == "mask-union") {
        std::optional<NeuronMask> acc;
        for (const auto& [key, value] : stage.inputs) {
          NeuronMask next = mask_from_store(store(key));
          acc = acc ? mask_union(*acc, next) : std::move(next);
        }
        mask_to_store(*acc, dest);
      } else if (stage.op == "project") {
        project_update(store("base"), store("trained"), mask_from_store(store("mask")), dest, stage_meta);
      } else if (stage.op == "extract") {
        extract_ability(store("ability_model"), store("language_model"), store("base"), h.alpha, h.beta,
                        stage.name, dest);
      } else if (stage.op == "combine") {
        std::vector<LanguageWeight> items;
        for (const auto& [lang, value] : stage.inputs) {
          std::optional<double> mu;
          if (const auto it = h.mu.find(lang); it != h.mu.end()) mu = it->second;
          items.push_back({lang, store(lang), mu});
        }
        combine_languages(std::move(items), dest);
      } else if (stage.op == "select") {
        const SimilarityReport report = similarity_report(store("ability"), store("multilingual"), h.metric);
        const TensorSelection selection = select_last(report, h.k2_percent, manifest.filters, h.select_end);
        write_text(output, selection_to_json(report, selection, stage_meta));
      } else if (stage.op == "merge") {
        MergePlan plan{store("base"), store("ability"), store("multilingual"),
                       read_selection(resolve("selection")).names, h.gamma, h.eta, h.eta_everywhere};
        merge(plan, dest);
      }

      json record{{"stage", stage.name}, {"op", stage.op}, {"params", params_json(stage, manifest)}};
      json inputs = json::object();
      for (const auto& [key, value] : stage.inputs) {
        inputs[key] = {{"ref", value}, {"sha256", file_digest(resolve(key))}};
      }
      record["inputs"] = std::move(inputs);
      const std::string digest = file_digest(output);
      record["output"] = {{"path", stage.output}, {"sha256", digest}};
      write_text(sidecar(output), record.dump(2) + "\n");
      produced[stage.name] = output;
      artifacts.push_back({stage.name, output, digest});
    } catch (const std::exception& e) {
      std::error_code ignored;
      std::filesystem::path partial = output;
      partial += ".partial";
      std::filesystem::remove(partial, ignored);
      std::filesystem::remove(output, ignored);
      std::filesystem::remove(sidecar(output), ignored);
      throw Error("stage '" + stage.name + "' (" + stage.op + ") failed: " + e.what());
    }
  }
  return artifacts;
}

}  // namespace maet
