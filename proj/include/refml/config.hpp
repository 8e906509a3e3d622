#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "refml/data.hpp"
#include "refml/eval.hpp"
#include "refml/fedproto.hpp"
#include "refml/model.hpp"

namespace refml::config {

// Flat `key = value` settings. Later layers override earlier ones; every key
// must be known.
class KeyValues {
 public:
  // Lines of `key = value`; `#` starts a comment, blank lines are ignored.
  static KeyValues parse(std::istream& in, const std::string& source);
  static KeyValues load(const std::filesystem::path& path);

  // `key=value` as given to --set.
  void set_assignment(const std::string& text);
  void set(const std::string& key, const std::string& value);
  void merge(const KeyValues& later);

  bool contains(const std::string& key) const { return values_.contains(key); }
  const std::string& get(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct DataSource {
  enum class Kind { synthetic, csv } kind = Kind::synthetic;
  data::SyntheticConfig synthetic;
  // CSV: one file per condition, keyed by dataset name ("" for the default).
  std::vector<std::pair<std::string, std::filesystem::path>> csv_files;
  // Optional source -> task label mapping per dataset name.
  std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> label_maps;
};

struct ExperimentConfig {
  DataSource data;
  model::ArchitectureSpec arch;
  fed::HyperParams hp;
  std::size_t queries = 10;
  fed::EpisodeMode episode_mode = fed::EpisodeMode::resample;
  std::vector<fed::Method> methods;
  std::vector<std::size_t> shots;
  bool auto_folds = true;  // leave-one-condition-out over every loaded condition
  std::vector<eval::FoldSpec> folds;
  std::vector<std::uint64_t> seeds;
  bool write_checkpoints = true;
  bool write_embeddings = false;

  // The fully resolved settings, one key per line, sorted; parsing this text
  // yields the same configuration.
  KeyValues resolved() const;
};

// Built-in defaults (the desk-scale profile).
KeyValues defaults();

// Converts and validates. Unknown keys, malformed values and broken invariants
// throw ConfigError naming the key.
ExperimentConfig build(const KeyValues& kv);

// Loads every condition the configuration refers to (normalisation happens
// later, per client).
eval::DataPool load_data(const ExperimentConfig& cfg);

// Folds to run: explicit ones, or leave-one-out over the loaded conditions.
std::vector<eval::FoldSpec> resolve_folds(const ExperimentConfig& cfg, const eval::DataPool& pool);

eval::SuiteConfig suite_config(const ExperimentConfig& cfg, const eval::DataPool& pool, std::size_t jobs);

}  // namespace refml::config
