#include "refml/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string_view>

#include "refml/error.hpp"
#include "refml/rng.hpp"

namespace refml::data {

std::size_t ClientDataset::count(std::size_t label) const {
  return static_cast<std::size_t>(
      std::count_if(windows.begin(), windows.end(), [&](const LabeledWindow& w) { return w.label == label; }));
}

std::size_t ClientDataset::num_classes() const {
  std::size_t n = 0;
  for (const auto& w : windows) n = std::max(n, w.label + 1);
  return n;
}

void SyntheticConfig::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic: num_classes must be at least 2");
  if (conditions.empty()) throw ConfigError("synthetic: at least one condition is required");
  if (windows_per_class == 0) throw ConfigError("synthetic: windows_per_class must be positive");
  if (input_length < 2) throw ConfigError("synthetic: input_length must be at least 2");
  if (!(base_frequency > 0.0)) throw ConfigError("synthetic: base_frequency must be positive");
  if (!(class_spacing > 0.0)) throw ConfigError("synthetic: class_spacing must be positive");
  for (std::size_t v = 0; v < conditions.size(); ++v) {
    const auto& c = conditions[v];
    const std::string where = "synthetic: condition " + std::to_string(v);
    if (!(c.speed_factor > 0.0)) throw ConfigError(where + " speed_factor must be positive");
    if (!(c.noise_std >= 0.0)) throw ConfigError(where + " noise_std must be non-negative");
    if (!(c.amplitude_scale > 0.0)) throw ConfigError(where + " amplitude_scale must be positive");
    if (!(c.resonance > 0.0 && c.resonance < 0.5)) throw ConfigError(where + " resonance must lie in (0, 0.5)");
    const double top = base_frequency * (1.0 + static_cast<double>(num_classes - 1) * class_spacing) * c.speed_factor;
    if (top >= 0.5) throw ConfigError(where + " puts the highest class tone above the Nyquist frequency");
  }
}

namespace {

// Relative rate of the impact train per class; class 0 is the healthy state
// and has none.
double impact_ratio(std::size_t label) { return label == 0 ? 0.0 : 0.5 + 0.37 * static_cast<double>(label); }

constexpr double kImpactDecay = 3.0;     // samples
constexpr double kFrequencyJitter = 0.02;

std::vector<double> synth_window(const SyntheticConfig& cfg, const ConditionShift& cond, std::size_t label, Rng& rng) {
  const double two_pi = 2.0 * std::numbers::pi;
  const double jitter = 1.0 + kFrequencyJitter * rng.uniform(-1.0, 1.0);
  const double tone = cfg.base_frequency * (1.0 + static_cast<double>(label) * cfg.class_spacing) * cond.speed_factor * jitter;
  const double phase = rng.uniform(0.0, two_pi);
  const double rate = cfg.base_frequency * impact_ratio(label) * cond.speed_factor * jitter;
  const double offset = rng.uniform(0.0, 1.0);

  std::vector<double> s(cfg.input_length);
  for (std::size_t t = 0; t < s.size(); ++t) {
    const double tt = static_cast<double>(t);
    double v = std::sin(two_pi * tone * tt + phase);
    if (rate > 0.0) {
      // Time since the most recent impact.
      const double cycles = rate * tt + offset;
      const double since = (cycles - std::floor(cycles)) / rate;
      v += cfg.impact_amplitude * std::exp(-since / kImpactDecay) * std::sin(two_pi * cond.resonance * since);
    }
    s[t] = cond.amplitude_scale * v;
  }
  if (cond.noise_std > 0.0) {
    for (double& v : s) v += cond.noise_std * rng.normal();
  }
  return s;
}

}  // namespace

std::vector<ClientDataset> generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::vector<ClientDataset> out;
  for (std::size_t v = 0; v < cfg.conditions.size(); ++v) {
    Rng rng = Rng::derive({cfg.seed, v});
    ClientDataset ds;
    ds.condition_id = static_cast<std::int64_t>(v);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      for (std::size_t i = 0; i < cfg.windows_per_class; ++i) {
        ds.windows.push_back(LabeledWindow{synth_window(cfg, cfg.conditions[v], c, rng), c, ds.condition_id});
      }
    }
    out.push_back(std::move(ds));
  }
  return out;
}

// ---- CSV ----

namespace {

template <typename T>
T parse_field(std::string_view field, const std::string& source, std::size_t row, std::size_t column) {
  T value{};
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw DataError(source + ": row " + std::to_string(row) + ", column " + std::to_string(column) +
                    ": non-numeric field '" + std::string(field) + "'");
  }
  return value;
}

}  // namespace

ClientDataset parse_csv(std::istream& in, std::size_t input_length, const std::string& source) {
  ClientDataset ds;
  std::string line;
  std::size_t row = 0;
  bool have_condition = false;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() != input_length + 2) {
      throw DataError(source + ": row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                      " columns, expected " + std::to_string(input_length + 2));
    }
    LabeledWindow w;
    w.label = parse_field<std::size_t>(fields[0], source, row, 1);
    w.condition_id = parse_field<std::int64_t>(fields[1], source, row, 2);
    w.signal.reserve(input_length);
    for (std::size_t i = 0; i < input_length; ++i) {
      const double v = parse_field<double>(fields[i + 2], source, row, i + 3);
      if (!std::isfinite(v)) throw DataError(source + ": row " + std::to_string(row) + " has a non-finite sample");
      w.signal.push_back(v);
    }
    if (!have_condition) {
      ds.condition_id = w.condition_id;
      have_condition = true;
    } else if (w.condition_id != ds.condition_id) {
      throw DataError(source + ": row " + std::to_string(row) + " has condition_id " + std::to_string(w.condition_id) +
                      ", file started with " + std::to_string(ds.condition_id));
    }
    ds.windows.push_back(std::move(w));
  }
  if (ds.windows.empty()) throw DataError(source + ": no rows");
  return ds;
}

ClientDataset ingest_csv(const std::filesystem::path& path, std::size_t input_length) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_csv(in, input_length, path.string());
}

void write_csv(const ClientDataset& ds, std::ostream& out) {
  char buf[64];
  for (const auto& w : ds.windows) {
    out << w.label << ',' << w.condition_id;
    for (double v : w.signal) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
      out << ',' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
    }
    out << '\n';
  }
}

void export_csv(const ClientDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_csv(ds, out);
  if (!out) throw DataError("failed writing " + path.string());
}

// ---- episodes ----

Episode sample_episode(const ClientDataset& ds, std::size_t num_classes, std::size_t shots, std::size_t queries,
                       std::uint64_t seed) {
  if (shots == 0) throw DataError("sample_episode: shots must be positive");
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < ds.windows.size(); ++i) {
    if (ds.windows[i].label < num_classes) by_class[ds.windows[i].label].push_back(i);
  }
  Rng rng(seed);
  Episode ep;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < shots + queries) {
      throw DataError("sample_episode: class " + std::to_string(c) + " of condition " +
                      std::to_string(ds.condition_id) + " has " + std::to_string(idx.size()) + " windows, needs " +
                      std::to_string(shots + queries));
    }
    rng.shuffle(idx);
    for (std::size_t k = 0; k < shots; ++k) ep.support_index.push_back(idx[k]);
    for (std::size_t q = 0; q < queries; ++q) ep.query_index.push_back(idx[shots + q]);
  }
  for (std::size_t i : ep.support_index) ep.support.push_back(ds.windows[i]);
  for (std::size_t i : ep.query_index) ep.query.push_back(ds.windows[i]);
  return ep;
}

LabeledWindow normalize_window(const LabeledWindow& w) {
  const auto n = static_cast<double>(w.signal.size());
  if (w.signal.empty()) throw DataError("normalize_window: empty signal");
  double mean = 0.0;
  for (double v : w.signal) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : w.signal) var += (v - mean) * (v - mean);
  var /= n;
  if (!(var > 0.0) || !std::isfinite(var)) throw DataError("normalize_window: constant or non-finite signal");
  const double inv = 1.0 / std::sqrt(var);
  LabeledWindow out = w;
  for (double& v : out.signal) v = (v - mean) * inv;
  return out;
}

ClientDataset normalize(const ClientDataset& ds) {
  ClientDataset out;
  out.condition_id = ds.condition_id;
  out.windows.reserve(ds.windows.size());
  for (const auto& w : ds.windows) out.windows.push_back(normalize_window(w));
  return out;
}

Tensor stack_signals(const std::vector<LabeledWindow>& windows) {
  if (windows.empty()) throw ShapeError("stack_signals: no windows");
  const std::size_t L = windows.front().signal.size();
  std::vector<double> flat;
  flat.reserve(windows.size() * L);
  for (const auto& w : windows) {
    if (w.signal.size() != L) throw ShapeError("stack_signals: windows differ in length");
    flat.insert(flat.end(), w.signal.begin(), w.signal.end());
  }
  return Tensor(Shape{windows.size(), L}, std::move(flat));
}

std::vector<std::size_t> labels_of(const std::vector<LabeledWindow>& windows) {
  std::vector<std::size_t> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(w.label);
  return out;
}

ClientDataset remap_labels(const ClientDataset& ds, const std::vector<std::pair<std::size_t, std::size_t>>& mapping) {
  ClientDataset out;
  out.condition_id = ds.condition_id;
  for (const auto& w : ds.windows) {
    auto it = std::find_if(mapping.begin(), mapping.end(), [&](const auto& m) { return m.first == w.label; });
    if (it == mapping.end()) continue;
    LabeledWindow copy = w;
    copy.label = it->second;
    out.windows.push_back(std::move(copy));
  }
  return out;
}

}  // namespace refml::data
