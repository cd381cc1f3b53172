// Copyright 2026 The SoSN Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "sosn/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>

#include "json.hpp"

namespace sosn {

namespace {

using nlohmann::json;

// Reads the keys of one JSON object and rejects any key left unread.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    const json* v = get(key);
    if (v == nullptr) return;
    out = convert<T>(*v, path_ + "." + key);
  }

  void read_double(const std::string& key, double& out, bool allow_inf = false) {
    const json* v = get(key);
    if (v == nullptr) return;
    if (allow_inf && v->is_string() && v->get<std::string>() == "inf") {
      out = pn::kHardMax;
      return;
    }
    out = convert<double>(*v, path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key \"" + it.key() + "\"");
    }
  }

  const std::string& path() const { return path_; }

 private:
  template <typename T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
      return v.get<double>();
    } else {
      static_assert(std::is_unsigned_v<T>);
      if (!v.is_number_unsigned()) throw ConfigError(where + ": expected a non-negative integer");
      return static_cast<T>(v.get<std::uint64_t>());
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json alpha_to_json(double a) {
  if (std::isinf(a)) return "inf";
  return a;
}

json model_json(const ModelConfig& m) {
  return json{{"image_size", m.image_size},
              {"channels_in", m.channels_in},
              {"encoder_filters", m.encoder_filters},
              {"encoder_padding", m.encoder_padding},
              {"similarity_filters", m.similarity_filters},
              {"similarity_hidden", m.similarity_hidden},
              {"operator", std::string(to_string(m.op))},
              {"permutations", m.perm.count},
              {"multi_stream", m.perm.multi_stream}};
}

json pn_json(const pn::PowerNormSpec& s) {
  return json{{"kind", std::string(pn::to_string(s.kind))},
              {"gamma", s.gamma},
              {"eta", s.eta},
              {"lambda", s.lambda},
              {"rho", s.rho},
              {"alpha_soft", alpha_to_json(s.alpha_soft)},
              {"beta_shift", s.beta_shift},
              {"gamma_grad_cap", s.gamma_grad_cap},
              {"trace_input", s.trace_input}};
}

void read_model(Section& s, ModelConfig& m) {
  s.read("image_size", m.image_size);
  s.read("channels_in", m.channels_in);
  s.read("encoder_filters", m.encoder_filters);
  s.read("encoder_padding", m.encoder_padding);
  s.read("similarity_filters", m.similarity_filters);
  s.read("similarity_hidden", m.similarity_hidden);
  std::string op(to_string(m.op));
  s.read("operator", op);
  try {
    m.op = parse_operator(op);
  } catch (const Error& e) {
    throw ConfigError(s.path() + ".operator: " + e.what());
  }
  s.read("permutations", m.perm.count);
  s.read("multi_stream", m.perm.multi_stream);
  s.finish();
}

// Kind first, then defaults for that kind, then explicit fields.
pn::PowerNormSpec read_pn(const json* j, std::size_t spatial_count) {
  if (j == nullptr) return pn::default_spec(pn::PnKind::kSigmE, spatial_count);
  Section s(*j, "pn");
  std::string kind = "SigmE";
  s.read("kind", kind);
  pn::PnKind k;
  try {
    k = pn::parse_kind(kind);
  } catch (const Error& e) {
    throw ConfigError(std::string("pn.kind: ") + e.what());
  }
  pn::PowerNormSpec spec = pn::default_spec(k, spatial_count);
  s.read_double("gamma", spec.gamma);
  s.read_double("eta", spec.eta);
  s.read_double("lambda", spec.lambda);
  s.read_double("rho", spec.rho);
  s.read_double("alpha_soft", spec.alpha_soft, true);
  s.read_double("beta_shift", spec.beta_shift);
  s.read_double("gamma_grad_cap", spec.gamma_grad_cap);
  s.read("trace_input", spec.trace_input);
  s.finish();
  return spec;
}

json protocol_json(const ProtocolSpec& p) {
  return json{{"name", p.name},
              {"ways", p.ways},
              {"shots", p.shots},
              {"train_queries", p.train_queries},
              {"test_queries", p.test_queries},
              {"train_episodes", p.train_episodes},
              {"eval_episodes", p.eval_episodes},
              {"augmentation", std::string(to_string(p.augmentation))}};
}

ProtocolSpec read_protocol(const json& j) {
  Section s(j, "protocol");
  ProtocolSpec p;
  std::string name = p.name;
  s.read("name", name);
  const auto builtins = builtin_protocol_names();
  if (std::find(builtins.begin(), builtins.end(), name) != builtins.end()) {
    p = builtin_protocol(name);
  }
  p.name = name;
  s.read("ways", p.ways);
  s.read("shots", p.shots);
  s.read("train_queries", p.train_queries);
  s.read("test_queries", p.test_queries);
  s.read("train_episodes", p.train_episodes);
  s.read("eval_episodes", p.eval_episodes);
  std::string aug(to_string(p.augmentation));
  s.read("augmentation", aug);
  try {
    p.augmentation = parse_augmentation(aug);
  } catch (const Error& e) {
    throw ConfigError(std::string("protocol.augmentation: ") + e.what());
  }
  s.finish();
  return p;
}

json dataset_json(const DatasetConfig& d) {
  if (d.kind == DatasetKind::kSynthetic) {
    return json{{"kind", "synthetic"},
                {"classes", d.synthetic.classes},
                {"train_classes", d.train_classes},
                {"images_per_class", d.synthetic.images_per_class},
                {"jitter", d.synthetic.jitter},
                {"noise", d.synthetic.noise},
                {"seed", d.synthetic.seed}};
  }
  return json{{"kind", "folder"},
              {"root", d.root},
              {"split_file", d.split_file},
              {"crop_ratio", d.crop_ratio},
              {"eval_split", std::string(to_string(d.eval_split))}};
}

DatasetConfig read_dataset(const json& j) {
  Section s(j, "dataset");
  DatasetConfig d;
  std::string kind = "synthetic";
  s.read("kind", kind);
  if (kind == "synthetic") {
    d.kind = DatasetKind::kSynthetic;
    s.read("classes", d.synthetic.classes);
    s.read("train_classes", d.train_classes);
    s.read("images_per_class", d.synthetic.images_per_class);
    s.read_double("jitter", d.synthetic.jitter);
    s.read_double("noise", d.synthetic.noise);
    s.read("seed", d.synthetic.seed);
  } else if (kind == "folder") {
    d.kind = DatasetKind::kFolder;
    s.read("root", d.root);
    s.read("split_file", d.split_file);
    s.read_double("crop_ratio", d.crop_ratio);
    std::string split(to_string(d.eval_split));
    s.read("eval_split", split);
    try {
      d.eval_split = parse_split(split);
    } catch (const Error& e) {
      throw ConfigError(std::string("dataset.eval_split: ") + e.what());
    }
  } else {
    throw ConfigError("dataset.kind: expected \"synthetic\" or \"folder\", got \"" + kind + "\"");
  }
  s.finish();
  return d;
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  protocol.validate();
  ModelConfig m = model;
  m.ways = protocol.ways;
  m.shots = protocol.shots;
  m.queries_per_class = protocol.train_queries;
  m.validate();
  if (optimizer.learning_rate <= 0.0 || !std::isfinite(optimizer.learning_rate)) {
    throw ConfigError("optimizer.learning_rate must be positive");
  }
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
      !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(optimizer.epsilon > 0.0)) throw ConfigError("optimizer.epsilon must be positive");
  if (log_interval == 0) throw ConfigError("log_interval must be positive");
  if (checkpoint_interval == 0) throw ConfigError("checkpoint_interval must be positive");
  if (workers == 0) throw ConfigError("workers must be positive");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (dataset.kind == DatasetKind::kSynthetic) {
    SyntheticSpec spec = dataset.synthetic;
    spec.image_size = model.image_size;
    spec.validate();
    if (model.channels_in != 1) throw ConfigError("dataset: synthetic images have 1 channel");
    if (dataset.train_classes == 0 || dataset.train_classes >= dataset.synthetic.classes) {
      throw ConfigError("dataset.train_classes must lie in [1, classes)");
    }
  } else {
    if (!(dataset.crop_ratio > 0.0 && dataset.crop_ratio <= 1.0)) {
      throw ConfigError("dataset.crop_ratio must lie in (0, 1]");
    }
    if (dataset.split_file.empty()) throw ConfigError("dataset.split_file must not be empty");
  }
}

RunConfig parse_run_config(const std::string& json_text) {
  const json doc = parse_json(json_text, "config");
  Section top(doc, "config");
  RunConfig c;
  top.read("seed", c.seed);
  top.read("output_dir", c.output_dir);
  top.read("log_interval", c.log_interval);
  top.read("checkpoint_interval", c.checkpoint_interval);
  top.read("workers", c.workers);
  if (const json* m = top.get("model")) {
    Section s(*m, "model");
    read_model(s, c.model);
  }
  c.model.pn = read_pn(top.get("pn"), c.model.spatial_count());
  if (const json* p = top.get("protocol")) c.protocol = read_protocol(*p);
  if (const json* o = top.get("optimizer")) {
    Section s(*o, "optimizer");
    s.read_double("learning_rate", c.optimizer.learning_rate);
    s.read_double("beta1", c.optimizer.beta1);
    s.read_double("beta2", c.optimizer.beta2);
    s.read_double("epsilon", c.optimizer.epsilon);
    s.finish();
  }
  if (const json* d = top.get("dataset")) c.dataset = read_dataset(*d);
  top.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& c) {
  json doc{{"seed", c.seed},
           {"output_dir", c.output_dir},
           {"log_interval", c.log_interval},
           {"checkpoint_interval", c.checkpoint_interval},
           {"workers", c.workers},
           {"model", model_json(c.model)},
           {"pn", pn_json(c.model.pn)},
           {"protocol", protocol_json(c.protocol)},
           {"optimizer",
            {{"learning_rate", c.optimizer.learning_rate},
             {"beta1", c.optimizer.beta1},
             {"beta2", c.optimizer.beta2},
             {"epsilon", c.optimizer.epsilon}}},
           {"dataset", dataset_json(c.dataset)}};
  return doc.dump(2) + "\n";
}

std::string model_config_to_json(const ModelConfig& m) {
  json doc = model_json(m);
  doc["pn"] = pn_json(m.pn);
  doc["ways"] = m.ways;
  doc["shots"] = m.shots;
  doc["queries_per_class"] = m.queries_per_class;
  return doc.dump();
}

ModelConfig model_config_from_json(const std::string& json_text) {
  const json doc = parse_json(json_text, "model config");
  ModelConfig m;
  Section s(doc, "model");
  s.read("ways", m.ways);
  s.read("shots", m.shots);
  s.read("queries_per_class", m.queries_per_class);
  const json* pn_section = s.get("pn");
  if (pn_section == nullptr) throw ConfigError("model: missing pn");
  read_model(s, m);
  m.pn = read_pn(pn_section, m.spatial_count());
  m.validate();
  return m;
}

std::string resolve_data_root(const DatasetConfig& dataset) {
  if (!dataset.root.empty()) return dataset.root;
  if (const char* env = std::getenv("SOSN_DATA_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  throw DataError("dataset root not set: give dataset.root or SOSN_DATA_ROOT");
}

ImageDataset load_run_dataset(const RunConfig& config, bool training,
                              DatasetManifest* manifest) {
  const DatasetConfig& d = config.dataset;
  if (d.kind == DatasetKind::kSynthetic) {
    SyntheticSpec spec = d.synthetic;
    spec.image_size = config.model.image_size;
    const ImageDataset all = generate_synthetic(spec);
    return training ? class_range(all, 0, d.train_classes)
                    : class_range(all, d.train_classes, all.class_count());
  }
  const std::string root = resolve_data_root(d);
  std::filesystem::path split = d.split_file;
  if (split.is_relative()) split = std::filesystem::path(root) / split;
  PreprocessSpec pre;
  pre.image_size = config.model.image_size;
  pre.channels = config.model.channels_in;
  pre.crop_ratio = d.crop_ratio;
  const DatasetManifest m = load_manifest(root, split.string(), pre);
  if (manifest != nullptr) *manifest = m;
  const Split which = training ? Split::kTrain : d.eval_split;
  ImageDataset data = load_split(m, which);
  if (data.class_count() == 0) {
    throw DataError("split " + std::string(to_string(which)) + " of " + root + " has no classes");
  }
  return data;
}

void sync_model_episode_shape(RunConfig& config, bool training) {
  config.model.ways = config.protocol.ways;
  config.model.shots = config.protocol.shots;
  config.model.queries_per_class =
      training ? config.protocol.train_queries : config.protocol.test_queries;
}

}  // namespace sosn
