#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "refml/tensor.hpp"

namespace refml::data {

struct LabeledWindow {
  std::vector<double> signal;
  std::size_t label = 0;
  std::int64_t condition_id = 0;
  friend bool operator==(const LabeledWindow&, const LabeledWindow&) = default;
};

// All windows recorded under one working condition; one client owns one.
struct ClientDataset {
  std::int64_t condition_id = 0;
  std::vector<LabeledWindow> windows;

  std::size_t size() const { return windows.size(); }
  std::size_t count(std::size_t label) const;
  std::size_t num_classes() const;  // 1 + max label
  friend bool operator==(const ClientDataset&, const ClientDataset&) = default;
};

struct Episode {
  std::vector<LabeledWindow> support;  // N*K windows, K per class
  std::vector<LabeledWindow> query;    // N*Q windows, Q per class
  // Positions in the source dataset, parallel to support/query.
  std::vector<std::size_t> support_index;
  std::vector<std::size_t> query_index;
};

struct ConditionShift {
  double speed_factor = 1.0;
  double noise_std = 0.0;
  double amplitude_scale = 1.0;
  double resonance = 0.21;  // ringing frequency of the impacts, cycles per sample
};

// Stand-in for multi-condition bearing recordings. Class c is a shaft tone at
// frequency base_frequency * (1 + c * class_spacing), scaled by the condition's
// speed factor, plus a class-specific train of decaying impacts, plus noise.
struct SyntheticConfig {
  std::size_t num_classes = 4;
  std::vector<ConditionShift> conditions{{1.0, 0.3, 1.0, 0.21}, {1.15, 0.4, 1.2, 0.21}, {1.3, 0.5, 0.8, 0.21}, {1.45, 0.6, 1.1, 0.21}};
  std::size_t windows_per_class = 40;
  std::size_t input_length = 256;
  std::uint64_t seed = 1;
  // Frequencies in cycles per sample.
  double base_frequency = 0.03;
  double class_spacing = 0.35;
  double impact_amplitude = 1.0;

  void validate() const;
};

std::vector<ClientDataset> generate_synthetic(const SyntheticConfig& cfg);

// Rows of `label,condition_id,v1,...,vL`; every row must carry the same
// condition id.
ClientDataset ingest_csv(const std::filesystem::path& path, std::size_t input_length);
ClientDataset parse_csv(std::istream& in, std::size_t input_length, const std::string& source = "<stream>");
void export_csv(const ClientDataset& ds, const std::filesystem::path& path);
void write_csv(const ClientDataset& ds, std::ostream& out);

// Support and query are drawn without replacement from each class of
// 0..num_classes-1; the two are disjoint.
Episode sample_episode(const ClientDataset& ds, std::size_t num_classes, std::size_t shots, std::size_t queries,
                       std::uint64_t seed);

// Zero mean, unit (population) variance.
LabeledWindow normalize_window(const LabeledWindow& w);
ClientDataset normalize(const ClientDataset& ds);

// [B, L] tensor of the signals and the parallel label vector.
Tensor stack_signals(const std::vector<LabeledWindow>& windows);
std::vector<std::size_t> labels_of(const std::vector<LabeledWindow>& windows);

// Keeps windows whose label appears in `mapping` (source -> task label),
// relabelled. Windows with unmapped labels are dropped.
ClientDataset remap_labels(const ClientDataset& ds, const std::vector<std::pair<std::size_t, std::size_t>>& mapping);

}  // namespace refml::data
