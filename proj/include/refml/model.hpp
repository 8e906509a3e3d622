#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "refml/autodiff.hpp"
#include "refml/tensor.hpp"

namespace refml::model {

struct ConvUnit {
  std::size_t out_channels = 0;
  std::size_t kernel_size = 0;
  std::size_t pool_size = 0;
  friend bool operator==(const ConvUnit&, const ConvUnit&) = default;
};

// Encoder: conv units of conv1d -> batchnorm -> relu -> maxpool(pool, stride pool).
// Predictor: linear(flatten -> hidden) -> relu -> linear(hidden -> classes).
struct ArchitectureSpec {
  std::size_t input_length = 1024;
  std::size_t num_classes = 10;
  std::vector<ConvUnit> conv_units{{16, 3, 2}, {32, 3, 2}, {32, 3, 2}};
  std::size_t hidden_dim = 256;

  // 1024 samples, channels (16,32,32), kernel 3, pool 2, hidden 256:
  // flattens to 128 x 32 = 4096.
  static ArchitectureSpec paper_default(std::size_t num_classes = 10);

  void validate() const;
  std::size_t final_length() const;
  std::size_t flatten_length() const;
  std::string canonical() const;
  std::uint64_t hash() const;

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

enum class Segment { encoder, predictor };

struct ParamEntry {
  std::string name;
  Segment segment = Segment::encoder;
  Tensor value;
  friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

// Ordered, named parameter tensors, each tagged encoder or predictor. This is
// the unit clients and server exchange.
class ParamSet {
 public:
  void add(std::string name, Segment segment, Tensor value);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::span<ParamEntry> entries() { return entries_; }
  std::span<const ParamEntry> entries() const { return entries_; }
  ParamEntry& operator[](std::size_t i) { return entries_[i]; }
  const ParamEntry& operator[](std::size_t i) const { return entries_[i]; }

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const;

  std::vector<Tensor> tensors() const;
  std::vector<std::size_t> indices(Segment segment) const;
  std::size_t numel() const;
  std::size_t numel(Segment segment) const;

  // Same names, segments and shapes in the same order.
  bool same_layout(const ParamSet& other) const;
  void require_same_layout(const ParamSet& other, std::string_view context) const;
  bool all_finite() const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<ParamEntry> entries_;
};

// Returns a ParamSet whose tensors are replaced by `values` (same order).
ParamSet with_values(const ParamSet& layout, std::vector<Tensor> values);
ParamSet zeros_like(const ParamSet& layout, double fill = 0.0);

std::pair<ParamSet, ParamSet> split(const ParamSet& params);
ParamSet merge(const ParamSet& encoder, const ParamSet& predictor);

struct ParamShape {
  std::string name;
  Segment segment;
  Shape shape;
};

// Names, segments and shapes of the parameters `spec` needs, in order.
std::vector<ParamShape> layout(const ArchitectureSpec& spec);
void require_layout(const ArchitectureSpec& spec, const ParamSet& params, std::string_view context);

ParamSet build(const ArchitectureSpec& spec, std::uint64_t seed);

// Graph construction. `encoder` and `predictor` hold the nodes of the
// corresponding ParamSet entries in order.
ad::NodeId encode(ad::Graph& g, const ArchitectureSpec& spec, std::span<const ad::NodeId> encoder, ad::NodeId batch);

struct HeadNodes {
  ad::NodeId embedding;  // pre-activation output of the first dense layer
  ad::NodeId logits;
};
HeadNodes predict(ad::Graph& g, std::span<const ad::NodeId> predictor, ad::NodeId features);

// All parameter nodes in ParamSet order.
std::vector<ad::NodeId> add_inputs(ad::Graph& g, const ParamSet& params);

// Builds the full network on a [B, input_length] batch.
HeadNodes network(ad::Graph& g, const ArchitectureSpec& spec, std::span<const ad::NodeId> params, ad::NodeId batch);

struct ModelOutput {
  Tensor logits;     // [B, N]
  Tensor embedding;  // [B, hidden]
};

// B >= 2 because batch normalisation uses the batch statistics.
ModelOutput forward(const ArchitectureSpec& spec, const ParamSet& params, const Tensor& batch);

// Encoder output for a batch, as a constant [B, flatten_length] tensor.
Tensor features(const ArchitectureSpec& spec, const ParamSet& params, const Tensor& batch);

std::vector<std::size_t> predict_labels(const Tensor& logits);

// Binary checkpoint: magic, spec hash, entry count, then per entry the name,
// shape and little-endian doubles.
struct Checkpoint {
  std::uint64_t spec_hash = 0;
  ParamSet params;
};

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, std::uint64_t spec_hash);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params, std::uint64_t spec_hash);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace refml::model
