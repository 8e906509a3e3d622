#include "refml/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "refml/error.hpp"
#include "refml/rng.hpp"

namespace refml::model {

ArchitectureSpec ArchitectureSpec::paper_default(std::size_t num_classes) {
  ArchitectureSpec spec;
  spec.num_classes = num_classes;
  return spec;
}

void ArchitectureSpec::validate() const {
  if (input_length == 0) throw ShapeError("architecture: input_length must be positive");
  if (num_classes < 2) throw ShapeError("architecture: num_classes must be at least 2");
  if (hidden_dim == 0) throw ShapeError("architecture: hidden_dim must be positive");
  if (conv_units.empty()) throw ShapeError("architecture: at least one conv unit is required");
  std::size_t length = input_length;
  for (std::size_t i = 0; i < conv_units.size(); ++i) {
    const ConvUnit& u = conv_units[i];
    if (u.out_channels == 0 || u.kernel_size == 0 || u.pool_size == 0) {
      throw ShapeError("architecture: conv unit " + std::to_string(i + 1) + " has a zero-sized field");
    }
    if (length < u.pool_size) {
      throw ShapeError("architecture: conv unit " + std::to_string(i + 1) + " pools length " + std::to_string(length) +
                       " by " + std::to_string(u.pool_size) + ", leaving no samples");
    }
    length /= u.pool_size;
  }
}

std::size_t ArchitectureSpec::final_length() const {
  validate();
  std::size_t length = input_length;
  for (const ConvUnit& u : conv_units) length /= u.pool_size;
  return length;
}

std::size_t ArchitectureSpec::flatten_length() const { return final_length() * conv_units.back().out_channels; }

std::string ArchitectureSpec::canonical() const {
  std::ostringstream os;
  os << "input=" << input_length << ";classes=" << num_classes << ";conv=";
  for (std::size_t i = 0; i < conv_units.size(); ++i) {
    const ConvUnit& u = conv_units[i];
    os << (i ? "," : "") << u.out_channels << ':' << u.kernel_size << ':' << u.pool_size;
  }
  os << ";hidden=" << hidden_dim;
  return os.str();
}

std::uint64_t ArchitectureSpec::hash() const {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

void ParamSet::add(std::string name, Segment segment, Tensor value) {
  if (contains(name)) throw ShapeError("paramset: duplicate parameter '" + name + "'");
  entries_.push_back(ParamEntry{std::move(name), segment, std::move(value)});
}

const Tensor& ParamSet::at(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  throw ShapeError("paramset: no parameter named '" + name + "'");
}

Tensor& ParamSet::at(const std::string& name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const ParamEntry& e) { return e.name == name; });
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

std::vector<std::size_t> ParamSet::indices(Segment segment) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].segment == segment) out.push_back(i);
  return out;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

std::size_t ParamSet::numel(Segment segment) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.segment == segment) n += e.value.numel();
  return n;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.segment != b.segment || a.value.shape() != b.value.shape()) return false;
  }
  return true;
}

void ParamSet::require_same_layout(const ParamSet& other, std::string_view context) const {
  if (same_layout(other)) return;
  std::string detail;
  if (entries_.size() != other.entries_.size()) {
    detail = std::to_string(entries_.size()) + " vs " + std::to_string(other.entries_.size()) + " entries";
  } else {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.segment != b.segment || a.value.shape() != b.value.shape()) {
        detail = "entry '" + a.name + "' " + shape_str(a.value.shape()) + " vs '" + b.name + "' " +
                 shape_str(b.value.shape());
        break;
      }
    }
  }
  throw ShapeError(std::string(context) + ": parameter layouts differ (" + detail + ")");
}

bool ParamSet::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(), [](const ParamEntry& e) { return e.value.all_finite(); });
}

ParamSet with_values(const ParamSet& layout, std::vector<Tensor> values) {
  if (values.size() != layout.size()) throw ShapeError("paramset: value count does not match layout");
  ParamSet out;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (values[i].shape() != layout[i].value.shape()) {
      throw ShapeError("paramset: value for '" + layout[i].name + "' has shape " + shape_str(values[i].shape()) +
                       ", expected " + shape_str(layout[i].value.shape()));
    }
    out.add(layout[i].name, layout[i].segment, std::move(values[i]));
  }
  return out;
}

ParamSet zeros_like(const ParamSet& layout, double fill) {
  ParamSet out;
  for (const auto& e : layout.entries()) out.add(e.name, e.segment, Tensor(e.value.shape(), fill));
  return out;
}

std::pair<ParamSet, ParamSet> split(const ParamSet& params) {
  ParamSet enc, pred;
  for (const auto& e : params.entries()) (e.segment == Segment::encoder ? enc : pred).add(e.name, e.segment, e.value);
  return {std::move(enc), std::move(pred)};
}

ParamSet merge(const ParamSet& encoder, const ParamSet& predictor) {
  ParamSet out;
  for (const auto& e : encoder.entries()) {
    if (e.segment != Segment::encoder) throw ShapeError("merge: '" + e.name + "' is not an encoder parameter");
    out.add(e.name, e.segment, e.value);
  }
  for (const auto& e : predictor.entries()) {
    if (e.segment != Segment::predictor) throw ShapeError("merge: '" + e.name + "' is not a predictor parameter");
    out.add(e.name, e.segment, e.value);
  }
  return out;
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

std::string unit_name(std::string_view kind, std::size_t i, std::string_view field) {
  return "encoder." + std::string(kind) + std::to_string(i + 1) + "." + std::string(field);
}

}  // namespace

std::vector<ParamShape> layout(const ArchitectureSpec& spec) {
  spec.validate();
  std::vector<ParamShape> out;
  std::size_t in_channels = 1;
  for (std::size_t i = 0; i < spec.conv_units.size(); ++i) {
    const ConvUnit& u = spec.conv_units[i];
    // No conv bias: batch normalisation removes any per-channel offset.
    out.push_back({unit_name("conv", i, "weight"), Segment::encoder, {u.out_channels, in_channels, u.kernel_size}});
    out.push_back({unit_name("bn", i, "gamma"), Segment::encoder, {u.out_channels}});
    out.push_back({unit_name("bn", i, "beta"), Segment::encoder, {u.out_channels}});
    in_channels = u.out_channels;
  }
  const std::size_t flat = spec.flatten_length();
  out.push_back({"predictor.fc1.weight", Segment::predictor, {spec.hidden_dim, flat}});
  out.push_back({"predictor.fc1.bias", Segment::predictor, {spec.hidden_dim}});
  out.push_back({"predictor.fc2.weight", Segment::predictor, {spec.num_classes, spec.hidden_dim}});
  out.push_back({"predictor.fc2.bias", Segment::predictor, {spec.num_classes}});
  return out;
}

void require_layout(const ArchitectureSpec& spec, const ParamSet& params, std::string_view context) {
  const auto expected = layout(spec);
  if (expected.size() != params.size()) {
    throw ShapeError(std::string(context) + ": expected " + std::to_string(expected.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& e = params[i];
    if (e.name != expected[i].name || e.segment != expected[i].segment || e.value.shape() != expected[i].shape) {
      throw ShapeError(std::string(context) + ": parameter '" + e.name + "' " + shape_str(e.value.shape()) +
                       " does not match architecture entry '" + expected[i].name + "' " + shape_str(expected[i].shape));
    }
  }
}

ParamSet build(const ArchitectureSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  ParamSet p;
  for (auto& entry : layout(spec)) {
    Tensor t(entry.shape);
    if (entry.name.ends_with(".gamma")) {
      t = Tensor(entry.shape, 1.0);
    } else if (!entry.name.ends_with(".beta")) {
      // Scaled-uniform fan-in; biases share their weight's fan-in.
      const Shape& ws = entry.shape.size() > 1 ? entry.shape : p.entries().back().value.shape();
      const std::size_t fan_in = shape_numel(ws) / ws[0];
      t = uniform_tensor(entry.shape, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
    }
    p.add(std::move(entry.name), entry.segment, std::move(t));
  }
  return p;
}

ad::NodeId encode(ad::Graph& g, const ArchitectureSpec& spec, std::span<const ad::NodeId> encoder, ad::NodeId batch) {
  if (encoder.size() != 3 * spec.conv_units.size()) {
    throw ShapeError("encode: expected " + std::to_string(3 * spec.conv_units.size()) + " encoder parameters, got " +
                     std::to_string(encoder.size()));
  }
  const Tensor& x = g.value(batch);
  if (x.rank() != 2 || x.dim(1) != spec.input_length) {
    throw ShapeError("encode: batch must be [B, " + std::to_string(spec.input_length) + "], got " +
                     shape_str(x.shape()));
  }
  ad::NodeId h = g.reshape(batch, Shape{x.dim(0), 1, spec.input_length});
  for (std::size_t i = 0; i < spec.conv_units.size(); ++i) {
    const std::size_t pool = spec.conv_units[i].pool_size;
    h = g.conv1d(h, encoder[3 * i]);
    h = g.batchnorm1d(h, encoder[3 * i + 1], encoder[3 * i + 2]);
    h = g.relu(h);
    h = g.maxpool1d(h, pool, pool);
  }
  return g.flatten(h);
}

HeadNodes predict(ad::Graph& g, std::span<const ad::NodeId> predictor, ad::NodeId features) {
  if (predictor.size() != 4) {
    throw ShapeError("predict: expected 4 predictor parameters, got " + std::to_string(predictor.size()));
  }
  const ad::NodeId embedding = g.linear(features, predictor[0], predictor[1]);
  const ad::NodeId logits = g.linear(g.relu(embedding), predictor[2], predictor[3]);
  return {embedding, logits};
}

std::vector<ad::NodeId> add_inputs(ad::Graph& g, const ParamSet& params) {
  std::vector<ad::NodeId> ids;
  ids.reserve(params.size());
  for (const auto& e : params.entries()) ids.push_back(g.input(e.value));
  return ids;
}

HeadNodes network(ad::Graph& g, const ArchitectureSpec& spec, std::span<const ad::NodeId> params, ad::NodeId batch) {
  const std::size_t n_enc = 3 * spec.conv_units.size();
  if (params.size() != n_enc + 4) throw ShapeError("network: parameter count does not match architecture");
  const ad::NodeId feats = encode(g, spec, params.subspan(0, n_enc), batch);
  return predict(g, params.subspan(n_enc), feats);
}

namespace {

void check_batch(const ArchitectureSpec& spec, const ParamSet& params, const Tensor& batch) {
  if (batch.rank() != 2 || batch.dim(1) != spec.input_length) {
    throw ShapeError("forward: batch must be [B, " + std::to_string(spec.input_length) + "], got " +
                     shape_str(batch.shape()));
  }
  if (batch.dim(0) < 2) throw ShapeError("forward: batch statistics need B >= 2, got B = " + std::to_string(batch.dim(0)));
  require_layout(spec, params, "forward");
}

}  // namespace

ModelOutput forward(const ArchitectureSpec& spec, const ParamSet& params, const Tensor& batch) {
  check_batch(spec, params, batch);
  ad::Graph g;
  const auto ids = add_inputs(g, params);
  const HeadNodes head = network(g, spec, ids, g.input(batch));
  return {g.value(head.logits), g.value(head.embedding)};
}

Tensor features(const ArchitectureSpec& spec, const ParamSet& params, const Tensor& batch) {
  check_batch(spec, params, batch);
  ad::Graph g;
  const auto ids = add_inputs(g, params);
  const std::size_t n_enc = 3 * spec.conv_units.size();
  return g.value(encode(g, spec, std::span<const ad::NodeId>(ids).subspan(0, n_enc), g.input(batch)));
}

std::vector<std::size_t> predict_labels(const Tensor& logits) { return argmax_rows(logits); }

// ---- checkpoint format ----

namespace {

constexpr std::array<std::uint8_t, 8> kMagic{'R', 'E', 'F', 'M', 'L', 'P', 'S', 1};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t uint(std::size_t width, std::string_view what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += width;
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, std::string_view what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, std::string_view what) const {
    if (bytes_.size() - pos_ < n) throw FormatError("corrupt checkpoint: truncated while reading " + std::string(what));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

Segment segment_for(const std::string& name) {
  if (name.starts_with("encoder.")) return Segment::encoder;
  if (name.starts_with("predictor.")) return Segment::predictor;
  throw FormatError("corrupt checkpoint: parameter '" + name + "' has no encoder/predictor prefix");
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params, std::uint64_t spec_hash) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u64(out, spec_hash);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) put_u64(out, d);
    for (double v : e.value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw FormatError("not a parameter checkpoint: bad magic");
  }
  Reader r(bytes.subspan(kMagic.size()));
  Checkpoint ck;
  ck.spec_hash = r.uint(8, "spec hash");
  const auto count = r.uint(4, "entry count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.uint(4, "name length");
    if (name_len == 0 || name_len > 4096) throw FormatError("corrupt checkpoint: implausible name length");
    auto name_bytes = r.take(name_len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto rank = r.uint(4, "rank");
    if (rank > 8) throw FormatError("corrupt checkpoint: implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const auto dim = r.uint(8, "shape");
      if (dim == 0) throw FormatError("corrupt checkpoint: zero dimension in '" + name + "'");
      shape.push_back(dim);
    }
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / 8) throw FormatError("corrupt checkpoint: truncated data for '" + name + "'");
    std::vector<double> data(n);
    for (double& v : data) v = std::bit_cast<double>(r.uint(8, "data"));
    ck.params.add(name, segment_for(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError("corrupt checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, std::uint64_t spec_hash) {
  const auto bytes = encode_checkpoint(params, spec_hash);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace refml::model
