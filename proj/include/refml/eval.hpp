#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refml/data.hpp"
#include "refml/fedproto.hpp"
#include "refml/metrics.hpp"
#include "refml/model.hpp"

namespace refml::eval {

// A working condition of a named dataset ("" when there is only one).
struct ConditionRef {
  std::string dataset;
  std::int64_t condition = 0;
  friend auto operator<=>(const ConditionRef&, const ConditionRef&) = default;
};

std::string to_string(const ConditionRef& ref);

struct FoldSpec {
  std::vector<ConditionRef> train;
  std::vector<ConditionRef> test;
  friend bool operator==(const FoldSpec&, const FoldSpec&) = default;
};

// Leave-one-condition-out: fold i tests on condition_ids[i] and trains on the
// rest, in their given order.
std::vector<FoldSpec> kfold_protocol(std::span<const std::int64_t> condition_ids, const std::string& dataset = "");

// Explicit folds: checked for empty sides, duplicates and train/test overlap.
std::vector<FoldSpec> kfold_protocol(std::vector<FoldSpec> folds);

struct CellKey {
  fed::Method method = fed::Method::refml;
  std::size_t shots = 1;
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  friend auto operator<=>(const CellKey&, const CellKey&) = default;
};

struct Cell {
  CellKey key;
  std::optional<double> accuracy;  // empty when the cell failed
  std::string error;
};

struct SummaryRow {
  fed::Method method = fed::Method::refml;
  std::size_t shots = 1;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single cell
  std::size_t cells = 0;
  std::size_t failed = 0;
};

class ResultsTable {
 public:
  // Throws if the key is already present or the accuracy is outside [0, 100].
  void insert(Cell cell);

  std::size_t size() const { return cells_.size(); }
  const std::map<CellKey, Cell>& cells() const { return cells_; }
  const Cell& at(const CellKey& key) const;
  bool contains(const CellKey& key) const { return cells_.contains(key); }
  std::size_t failed() const;

  // Mean over folds and seeds of the successful cells, per (method, shots).
  std::vector<SummaryRow> summary() const;
  // Mean accuracy of one method over the given shots (all shots when empty).
  double mean(fed::Method method, std::span<const std::size_t> shots = {}) const;

  // method,shots,fold,seed,accuracy ("failed" for failed cells)
  void write_csv(std::ostream& out) const;
  // method,shots,mean,std
  void write_summary_csv(std::ostream& out) const;
  static ResultsTable parse_csv(std::istream& in);

 private:
  std::map<CellKey, Cell> cells_;
};

using DataPool = std::map<ConditionRef, data::ClientDataset>;

struct SuiteConfig {
  std::vector<fed::Method> methods;
  std::vector<std::size_t> shots;
  std::vector<FoldSpec> folds;
  std::vector<std::uint64_t> seeds;
  // Architecture, hyperparameters, N, Q and episode mode; method and shots are
  // set per cell.
  fed::RoundSettings base;
  std::size_t jobs = 1;

  void validate() const;
};

// Called once per finished cell with its result, possibly from a worker
// thread; calls are serialised.
using CellCallback = std::function<void(const CellKey&, const fed::ExperimentResult&)>;

// Runs the full methods x shots x folds x seeds cross product. Methods sharing
// training rounds are computed from one federation. A failing cell is recorded
// as failed and the others continue. The table does not depend on `jobs`.
ResultsTable run_suite(const SuiteConfig& cfg, const DataPool& pool, const CellCallback& on_cell = {});

struct EmbeddingRow {
  std::size_t client_id = 0;
  std::size_t label = 0;
  std::size_t prediction = 0;
  std::vector<double> embedding;  // output of the first FC layer
  friend bool operator==(const EmbeddingRow&, const EmbeddingRow&) = default;
};

// One row per window, computed as a single batch.
std::vector<EmbeddingRow> embeddings(const model::ArchitectureSpec& spec, const model::ParamSet& params,
                                     const std::vector<data::LabeledWindow>& windows, std::size_t client_id);

// Tab-separated: client_id, label, prediction, then the embedding values.
void write_embeddings(const std::vector<EmbeddingRow>& rows, std::ostream& out);
std::vector<EmbeddingRow> parse_embeddings(std::istream& in);
void export_embeddings(const model::ArchitectureSpec& spec, const model::ParamSet& params,
                       const std::vector<data::LabeledWindow>& windows, std::size_t client_id,
                       const std::filesystem::path& path);

}  // namespace refml::eval
