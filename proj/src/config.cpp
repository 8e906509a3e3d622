#include "refml/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "refml/error.hpp"

namespace refml::config {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& text, char sep = ',') {
  std::vector<std::string> out;
  if (trim(text).empty()) return out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  if (text.back() == sep) out.emplace_back();
  return out;
}

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& items, auto&& show) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + show(items[i]);
  return out;
}

[[noreturn]] void bad(const std::string& key, const std::string& why) { throw ConfigError("config key '" + key + "': " + why); }

template <typename T>
T number(const std::string& key, const std::string& text) {
  T v{};
  const std::string t = trim(text);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) bad(key, "cannot parse '" + text + "' as a number");
  return v;
}

template <typename T>
std::vector<T> number_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) out.push_back(number<T>(key, item));
  return out;
}

bool boolean(const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  bad(key, "expected true or false, got '" + text + "'");
}

// `name:id` or `id`.
eval::ConditionRef condition_ref(const std::string& key, const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) return {"", number<std::int64_t>(key, text)};
  return {trim(text.substr(0, colon)), number<std::int64_t>(key, text.substr(colon + 1))};
}

std::vector<std::pair<std::size_t, std::size_t>> label_map(const std::string& key, const std::string& text) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::set<std::size_t> sources;
  for (const auto& item : split_list(text)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) bad(key, "expected source:target pairs, got '" + item + "'");
    const auto src = number<std::size_t>(key, item.substr(0, colon));
    if (!sources.insert(src).second) bad(key, "source label " + std::to_string(src) + " mapped twice");
    out.emplace_back(src, number<std::size_t>(key, item.substr(colon + 1)));
  }
  if (out.empty()) bad(key, "empty label map");
  return out;
}

const std::set<std::string>& fixed_keys() {
  static const std::set<std::string> keys{
      "data.source",          "data.csv",          "data.label_map",     "synthetic.seed",
      "synthetic.windows_per_class", "synthetic.base_frequency", "synthetic.class_spacing",
      "synthetic.impact_amplitude", "synthetic.speed", "synthetic.noise",   "synthetic.amplitude",
      "synthetic.resonance",  "model.input_length", "model.classes",      "model.conv",
      "model.hidden",         "queries",           "episode_mode",       "methods",
      "shots",                "seeds",             "folds",              "alpha",
      "beta",                 "gamma",             "delta",              "eta",
      "mu",                   "local_lr",          "encoder_steps",      "finetune_steps",
      "local_steps",          "rounds",            "grad_mode",          "output.checkpoints",
      "output.embeddings"};
  return keys;
}

bool known_key(const std::string& key) {
  if (fixed_keys().contains(key)) return true;
  if (key.starts_with("data.label_map.") && key.size() > 15) return true;
  if (key.starts_with("fold.")) {
    const std::string idx = key.substr(5);
    return !idx.empty() && std::all_of(idx.begin(), idx.end(), [](char c) { return c >= '0' && c <= '9'; });
  }
  return false;
}

}  // namespace

// ---- KeyValues ----

KeyValues KeyValues::parse(std::istream& in, const std::string& source) {
  KeyValues kv;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(row) + ": expected 'key = value', got '" + t + "'");
    }
    kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse(in, path.string());
}

void KeyValues::set_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + text + "'");
  set(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
}

void KeyValues::set(const std::string& key, const std::string& value) {
  if (key.empty()) throw ConfigError("empty config key");
  if (!known_key(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
}

void KeyValues::merge(const KeyValues& later) {
  for (const auto& [k, v] : later.values_) values_[k] = v;
}

const std::string& KeyValues::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

// ---- defaults ----

KeyValues defaults() {
  ExperimentConfig cfg;
  cfg.data.synthetic = data::SyntheticConfig{};
  cfg.arch.input_length = 256;
  cfg.arch.num_classes = 4;
  cfg.methods = fed::all_methods();
  cfg.shots = {1, 5};
  cfg.seeds = {0, 1, 2, 3, 4};
  return cfg.resolved();
}

// ---- build ----

ExperimentConfig build(const KeyValues& layered) {
  KeyValues kv = defaults();
  kv.merge(layered);
  const auto& v = kv.values();
  auto get = [&](const std::string& key) -> const std::string& { return kv.get(key); };

  ExperimentConfig cfg;

  // Model.
  cfg.arch.input_length = number<std::size_t>("model.input_length", get("model.input_length"));
  cfg.arch.num_classes = number<std::size_t>("model.classes", get("model.classes"));
  cfg.arch.hidden_dim = number<std::size_t>("model.hidden", get("model.hidden"));
  cfg.arch.conv_units.clear();
  for (const auto& unit : split_list(get("model.conv"))) {
    const auto parts = split_list(unit, ':');
    if (parts.size() != 3) bad("model.conv", "each unit is channels:kernel:pool, got '" + unit + "'");
    cfg.arch.conv_units.push_back({number<std::size_t>("model.conv", parts[0]), number<std::size_t>("model.conv", parts[1]),
                                   number<std::size_t>("model.conv", parts[2])});
  }
  try {
    cfg.arch.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }

  // Hyperparameters.
  auto rate = [&](const char* key) { return number<double>(key, get(key)); };
  cfg.hp.alpha = rate("alpha");
  cfg.hp.beta = rate("beta");
  cfg.hp.gamma = rate("gamma");
  cfg.hp.delta = rate("delta");
  cfg.hp.eta = rate("eta");
  cfg.hp.mu = rate("mu");
  cfg.hp.local_lr = rate("local_lr");
  cfg.hp.encoder_steps = number<std::size_t>("encoder_steps", get("encoder_steps"));
  cfg.hp.finetune_steps = number<std::size_t>("finetune_steps", get("finetune_steps"));
  cfg.hp.local_steps = number<std::size_t>("local_steps", get("local_steps"));
  cfg.hp.rounds = number<std::size_t>("rounds", get("rounds"));
  try {
    cfg.hp.grad_mode = ad::parse_grad_mode(get("grad_mode"));
  } catch (const Error& e) {
    bad("grad_mode", e.what());
  }
  cfg.hp.validate();

  // Protocol.
  cfg.queries = number<std::size_t>("queries", get("queries"));
  if (cfg.queries == 0) bad("queries", "must be at least 1");
  try {
    cfg.episode_mode = fed::parse_episode_mode(get("episode_mode"));
  } catch (const Error& e) {
    bad("episode_mode", e.what());
  }
  for (const auto& m : split_list(get("methods"))) {
    try {
      cfg.methods.push_back(fed::parse_method(m));
    } catch (const Error& e) {
      bad("methods", e.what());
    }
  }
  if (cfg.methods.empty()) bad("methods", "at least one method is required");
  if (std::set(cfg.methods.begin(), cfg.methods.end()).size() != cfg.methods.size()) bad("methods", "listed twice");
  cfg.shots = number_list<std::size_t>("shots", get("shots"));
  if (cfg.shots.empty()) bad("shots", "at least one shot count is required");
  for (auto k : cfg.shots)
    if (k == 0) bad("shots", "shot counts must be positive");
  if (std::set(cfg.shots.begin(), cfg.shots.end()).size() != cfg.shots.size()) bad("shots", "listed twice");
  cfg.seeds = number_list<std::uint64_t>("seeds", get("seeds"));
  if (cfg.seeds.empty()) bad("seeds", "at least one seed is required");
  if (std::set(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size()) bad("seeds", "listed twice");

  const std::string& folds = get("folds");
  std::map<std::size_t, std::string> fold_lines;
  for (const auto& [key, value] : v) {
    if (key.starts_with("fold.")) fold_lines[number<std::size_t>(key, key.substr(5))] = value;
  }
  if (folds == "auto") {
    cfg.auto_folds = true;
    if (!fold_lines.empty()) bad("folds", "fold.N entries need folds = explicit");
  } else if (folds == "explicit") {
    cfg.auto_folds = false;
    std::size_t expect = 0;
    for (const auto& [idx, line] : fold_lines) {
      const std::string key = "fold." + std::to_string(idx);
      if (idx != expect++) bad(key, "fold numbers must run 0, 1, 2, ... without gaps");
      const auto arrow = line.find("->");
      if (arrow == std::string::npos) bad(key, "expected 'train conditions -> test conditions'");
      eval::FoldSpec f;
      for (const auto& r : split_list(line.substr(0, arrow))) f.train.push_back(condition_ref(key, r));
      for (const auto& r : split_list(line.substr(arrow + 2))) f.test.push_back(condition_ref(key, r));
      cfg.folds.push_back(std::move(f));
    }
    if (cfg.folds.empty()) bad("folds", "explicit folds need at least one fold.N entry");
    cfg.folds = eval::kfold_protocol(std::move(cfg.folds));
  } else {
    bad("folds", "expected auto or explicit, got '" + folds + "'");
  }

  cfg.write_checkpoints = boolean("output.checkpoints", get("output.checkpoints"));
  cfg.write_embeddings = boolean("output.embeddings", get("output.embeddings"));

  // Data.
  const std::string& source = get("data.source");
  auto& sc = cfg.data.synthetic;
  sc.num_classes = cfg.arch.num_classes;
  sc.input_length = cfg.arch.input_length;
  sc.seed = number<std::uint64_t>("synthetic.seed", get("synthetic.seed"));
  sc.windows_per_class = number<std::size_t>("synthetic.windows_per_class", get("synthetic.windows_per_class"));
  sc.base_frequency = number<double>("synthetic.base_frequency", get("synthetic.base_frequency"));
  sc.class_spacing = number<double>("synthetic.class_spacing", get("synthetic.class_spacing"));
  sc.impact_amplitude = number<double>("synthetic.impact_amplitude", get("synthetic.impact_amplitude"));
  const auto speed = number_list<double>("synthetic.speed", get("synthetic.speed"));
  const auto noise = number_list<double>("synthetic.noise", get("synthetic.noise"));
  const auto amplitude = number_list<double>("synthetic.amplitude", get("synthetic.amplitude"));
  const auto resonance = number_list<double>("synthetic.resonance", get("synthetic.resonance"));
  if (noise.size() != speed.size() || amplitude.size() != speed.size() || resonance.size() != speed.size()) {
    bad("synthetic.speed", "synthetic.speed, .noise, .amplitude and .resonance must list the same number of conditions");
  }
  sc.conditions.clear();
  for (std::size_t i = 0; i < speed.size(); ++i) sc.conditions.push_back({speed[i], noise[i], amplitude[i], resonance[i]});

  if (source == "synthetic") {
    cfg.data.kind = DataSource::Kind::synthetic;
    sc.validate();
    std::size_t largest = *std::max_element(cfg.shots.begin(), cfg.shots.end());
    if (sc.windows_per_class < largest + cfg.queries) {
      bad("synthetic.windows_per_class", "must be at least max(shots) + queries = " + std::to_string(largest + cfg.queries));
    }
  } else if (source == "csv") {
    cfg.data.kind = DataSource::Kind::csv;
    for (const auto& item : split_list(get("data.csv"))) {
      const auto eq = item.find('=');
      std::string name;
      std::string path = item;
      if (eq != std::string::npos) {
        name = trim(item.substr(0, eq));
        path = trim(item.substr(eq + 1));
      }
      if (!std::filesystem::exists(path)) bad("data.csv", "file '" + path + "' does not exist");
      cfg.data.csv_files.emplace_back(name, path);
    }
    if (cfg.data.csv_files.empty()) bad("data.csv", "data.source = csv needs at least one file");
  } else {
    bad("data.source", "expected synthetic or csv, got '" + source + "'");
  }
  for (const auto& [key, value] : v) {
    if (key == "data.label_map") {
      if (!value.empty()) cfg.data.label_maps[""] = label_map(key, value);
    } else if (key.starts_with("data.label_map.")) {
      cfg.data.label_maps[key.substr(15)] = label_map(key, value);
    }
  }
  for (const auto& [name, mapping] : cfg.data.label_maps) {
    for (const auto& [src, dst] : mapping) {
      if (dst >= cfg.arch.num_classes) {
        bad(name.empty() ? "data.label_map" : "data.label_map." + name,
            "target label " + std::to_string(dst) + " is not below model.classes");
      }
    }
  }
  return cfg;
}

// ---- resolved ----

KeyValues ExperimentConfig::resolved() const {
  KeyValues kv;
  auto put = [&](const std::string& k, const std::string& val) { kv.set(k, val); };
  const auto show_size = [](std::size_t x) { return std::to_string(x); };
  const auto show_u64 = [](std::uint64_t x) { return std::to_string(x); };
  const auto show_double = [](double x) { return fmt(x); };

  put("data.source", data.kind == DataSource::Kind::synthetic ? "synthetic" : "csv");
  put("data.csv", join(data.csv_files, [](const auto& f) {
        return f.first.empty() ? f.second.string() : f.first + "=" + f.second.string();
      }));
  put("data.label_map", "");
  for (const auto& [name, mapping] : data.label_maps) {
    const std::string text = join(mapping, [](const auto& p) { return std::to_string(p.first) + ":" + std::to_string(p.second); });
    put(name.empty() ? "data.label_map" : "data.label_map." + name, text);
  }
  const auto& sc = data.synthetic;
  put("synthetic.seed", std::to_string(sc.seed));
  put("synthetic.windows_per_class", std::to_string(sc.windows_per_class));
  put("synthetic.base_frequency", fmt(sc.base_frequency));
  put("synthetic.class_spacing", fmt(sc.class_spacing));
  put("synthetic.impact_amplitude", fmt(sc.impact_amplitude));
  std::vector<double> speed, noise, amplitude, resonance;
  for (const auto& c : sc.conditions) {
    speed.push_back(c.speed_factor);
    noise.push_back(c.noise_std);
    amplitude.push_back(c.amplitude_scale);
    resonance.push_back(c.resonance);
  }
  put("synthetic.speed", join(speed, show_double));
  put("synthetic.noise", join(noise, show_double));
  put("synthetic.amplitude", join(amplitude, show_double));
  put("synthetic.resonance", join(resonance, show_double));

  put("model.input_length", std::to_string(arch.input_length));
  put("model.classes", std::to_string(arch.num_classes));
  put("model.hidden", std::to_string(arch.hidden_dim));
  put("model.conv", join(arch.conv_units, [](const model::ConvUnit& u) {
        return std::to_string(u.out_channels) + ":" + std::to_string(u.kernel_size) + ":" + std::to_string(u.pool_size);
      }));

  put("alpha", fmt(hp.alpha));
  put("beta", fmt(hp.beta));
  put("gamma", fmt(hp.gamma));
  put("delta", fmt(hp.delta));
  put("eta", fmt(hp.eta));
  put("mu", fmt(hp.mu));
  put("local_lr", fmt(hp.local_lr));
  put("encoder_steps", std::to_string(hp.encoder_steps));
  put("finetune_steps", std::to_string(hp.finetune_steps));
  put("local_steps", std::to_string(hp.local_steps));
  put("rounds", std::to_string(hp.rounds));
  put("grad_mode", std::string(ad::to_string(hp.grad_mode)));

  put("queries", std::to_string(queries));
  put("episode_mode", std::string(fed::to_string(episode_mode)));
  put("methods", join(methods, [](fed::Method m) { return std::string(fed::to_string(m)); }));
  put("shots", join(shots, show_size));
  put("seeds", join(seeds, show_u64));
  put("folds", auto_folds ? "auto" : "explicit");
  if (!auto_folds) {
    for (std::size_t i = 0; i < folds.size(); ++i) {
      const auto refs = [](const std::vector<eval::ConditionRef>& rs) {
        return join(rs, [](const eval::ConditionRef& r) { return eval::to_string(r); });
      };
      put("fold." + std::to_string(i), refs(folds[i].train) + " -> " + refs(folds[i].test));
    }
  }
  put("output.checkpoints", write_checkpoints ? "true" : "false");
  put("output.embeddings", write_embeddings ? "true" : "false");
  return kv;
}

// ---- data ----

eval::DataPool load_data(const ExperimentConfig& cfg) {
  eval::DataPool pool;
  auto add = [&](const std::string& name, data::ClientDataset ds, const std::string& where) {
    auto it = cfg.data.label_maps.find(name);
    if (it != cfg.data.label_maps.end()) ds = data::remap_labels(ds, it->second);
    for (const auto& w : ds.windows) {
      if (w.label >= cfg.arch.num_classes) {
        throw DataError(where + ": label " + std::to_string(w.label) + " is not below model.classes = " +
                        std::to_string(cfg.arch.num_classes) + " (set a label map?)");
      }
    }
    const eval::ConditionRef ref{name, ds.condition_id};
    if (!pool.emplace(ref, std::move(ds)).second) {
      throw DataError(where + ": condition " + eval::to_string(ref) + " is provided twice");
    }
  };
  if (cfg.data.kind == DataSource::Kind::synthetic) {
    for (auto& ds : data::generate_synthetic(cfg.data.synthetic)) add("", std::move(ds), "synthetic data");
  } else {
    for (const auto& [name, path] : cfg.data.csv_files) {
      add(name, data::ingest_csv(path, cfg.arch.input_length), path.string());
    }
  }
  return pool;
}

std::vector<eval::FoldSpec> resolve_folds(const ExperimentConfig& cfg, const eval::DataPool& pool) {
  if (!cfg.auto_folds) {
    for (const auto& f : cfg.folds) {
      for (const auto* side : {&f.train, &f.test})
        for (const auto& r : *side)
          if (!pool.contains(r)) throw ConfigError("fold refers to condition " + eval::to_string(r) + ", which is not loaded");
    }
    return cfg.folds;
  }
  std::set<std::string> names;
  for (const auto& [ref, ds] : pool) names.insert(ref.dataset);
  if (names.size() != 1) throw ConfigError("folds = auto needs a single dataset; use explicit folds");
  std::vector<std::int64_t> ids;
  for (const auto& [ref, ds] : pool) ids.push_back(ref.condition);
  return eval::kfold_protocol(ids, *names.begin());
}

eval::SuiteConfig suite_config(const ExperimentConfig& cfg, const eval::DataPool& pool, std::size_t jobs) {
  eval::SuiteConfig s;
  s.methods = cfg.methods;
  s.shots = cfg.shots;
  s.folds = resolve_folds(cfg, pool);
  s.seeds = cfg.seeds;
  s.base.arch = cfg.arch;
  s.base.hp = cfg.hp;
  s.base.num_classes = cfg.arch.num_classes;
  s.base.queries = cfg.queries;
  s.base.episode_mode = cfg.episode_mode;
  s.jobs = jobs;
  return s;
}

}  // namespace refml::config
