#include "refml/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "refml/error.hpp"
#include "refml/parallel.hpp"

namespace refml::eval {

std::string to_string(const ConditionRef& ref) {
  const std::string id = std::to_string(ref.condition);
  return ref.dataset.empty() ? id : ref.dataset + ":" + id;
}

// ---- folds ----

std::vector<FoldSpec> kfold_protocol(std::span<const std::int64_t> condition_ids, const std::string& dataset) {
  if (condition_ids.size() < 2) throw ConfigError("leave-one-out needs at least 2 conditions");
  std::set<std::int64_t> seen;
  for (auto id : condition_ids) {
    if (!seen.insert(id).second) throw ConfigError("leave-one-out: condition " + std::to_string(id) + " listed twice");
  }
  std::vector<FoldSpec> folds;
  for (std::size_t i = 0; i < condition_ids.size(); ++i) {
    FoldSpec f;
    for (std::size_t j = 0; j < condition_ids.size(); ++j) {
      if (j != i) f.train.push_back({dataset, condition_ids[j]});
    }
    f.test.push_back({dataset, condition_ids[i]});
    folds.push_back(std::move(f));
  }
  return folds;
}

std::vector<FoldSpec> kfold_protocol(std::vector<FoldSpec> folds) {
  if (folds.empty()) throw ConfigError("no folds given");
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const auto& f = folds[i];
    const std::string where = "fold " + std::to_string(i);
    if (f.train.empty()) throw ConfigError(where + " has no training conditions");
    if (f.test.empty()) throw ConfigError(where + " has no testing conditions");
    std::set<ConditionRef> train(f.train.begin(), f.train.end());
    std::set<ConditionRef> test(f.test.begin(), f.test.end());
    if (train.size() != f.train.size() || test.size() != f.test.size()) {
      throw ConfigError(where + " lists a condition twice");
    }
    for (const auto& t : f.test) {
      if (train.contains(t)) throw ConfigError(where + ": condition " + to_string(t) + " is both trained and tested on");
    }
  }
  return folds;
}

// ---- results ----

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::string& what) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw FormatError(what + ": cannot parse '" + text + "'");
  }
  return v;
}

}  // namespace

void ResultsTable::insert(Cell cell) {
  if (cell.accuracy && !(*cell.accuracy >= 0.0 && *cell.accuracy <= 100.0)) {
    throw Error("results: accuracy " + format_double(*cell.accuracy) + " outside [0, 100]");
  }
  const CellKey key = cell.key;
  if (!cells_.emplace(key, std::move(cell)).second) {
    throw Error("results: duplicate cell " + std::string(fed::to_string(key.method)) + " shots=" +
                std::to_string(key.shots) + " fold=" + std::to_string(key.fold) + " seed=" + std::to_string(key.seed));
  }
}

const Cell& ResultsTable::at(const CellKey& key) const {
  auto it = cells_.find(key);
  if (it == cells_.end()) throw Error("results: no such cell");
  return it->second;
}

std::size_t ResultsTable::failed() const {
  std::size_t n = 0;
  for (const auto& [k, c] : cells_) n += c.accuracy ? 0 : 1;
  return n;
}

std::vector<SummaryRow> ResultsTable::summary() const {
  std::map<std::pair<fed::Method, std::size_t>, std::vector<double>> groups;
  std::map<std::pair<fed::Method, std::size_t>, std::size_t> failures;
  for (const auto& [k, c] : cells_) {
    auto& g = groups[{k.method, k.shots}];
    if (c.accuracy) {
      g.push_back(*c.accuracy);
    } else {
      ++failures[{k.method, k.shots}];
    }
  }
  std::vector<SummaryRow> rows;
  for (const auto& [key, values] : groups) {
    SummaryRow r;
    r.method = key.first;
    r.shots = key.second;
    r.cells = values.size();
    r.failed = failures[key];
    if (!values.empty()) {
      double s = 0.0;
      for (double v : values) s += v;
      r.mean = s / static_cast<double>(values.size());
      if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - r.mean) * (v - r.mean);
        r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
      }
    } else {
      r.mean = std::nan("");
      r.std = std::nan("");
    }
    rows.push_back(r);
  }
  return rows;
}

double ResultsTable::mean(fed::Method method, std::span<const std::size_t> shots) const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& [k, c] : cells_) {
    if (k.method != method || !c.accuracy) continue;
    if (!shots.empty() && std::find(shots.begin(), shots.end(), k.shots) == shots.end()) continue;
    s += *c.accuracy;
    ++n;
  }
  if (n == 0) throw Error("results: no successful cells for " + std::string(fed::to_string(method)));
  return s / static_cast<double>(n);
}

void ResultsTable::write_csv(std::ostream& out) const {
  out << "method,shots,fold,seed,accuracy\n";
  for (const auto& [k, c] : cells_) {
    out << fed::to_string(k.method) << ',' << k.shots << ',' << k.fold << ',' << k.seed << ','
        << (c.accuracy ? format_double(*c.accuracy) : std::string("failed")) << '\n';
  }
}

void ResultsTable::write_summary_csv(std::ostream& out) const {
  out << "method,shots,mean,std\n";
  for (const auto& r : summary()) {
    out << fed::to_string(r.method) << ',' << r.shots << ',' << (r.cells ? fixed4(r.mean) : "nan") << ','
        << (r.cells ? fixed4(r.std) : "nan") << '\n';
  }
}

ResultsTable ResultsTable::parse_csv(std::istream& in) {
  ResultsTable table;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (row == 1 && line == "method,shots,fold,seed,accuracy") continue;
    const auto f = split(line, ',');
    const std::string where = "results row " + std::to_string(row);
    if (f.size() != 5) throw FormatError(where + ": expected 5 fields, got " + std::to_string(f.size()));
    Cell c;
    c.key.method = fed::parse_method(f[0]);
    c.key.shots = parse_number<std::size_t>(f[1], where);
    c.key.fold = parse_number<std::size_t>(f[2], where);
    c.key.seed = parse_number<std::uint64_t>(f[3], where);
    if (f[4] != "failed") c.accuracy = parse_number<double>(f[4], where);
    table.insert(std::move(c));
  }
  return table;
}

// ---- suite ----

void SuiteConfig::validate() const {
  if (methods.empty()) throw ConfigError("suite: no methods");
  if (shots.empty()) throw ConfigError("suite: no shot counts");
  if (folds.empty()) throw ConfigError("suite: no folds");
  if (seeds.empty()) throw ConfigError("suite: no seeds");
  for (auto k : shots)
    if (k == 0) throw ConfigError("suite: shots must be positive");
  if (std::set(methods.begin(), methods.end()).size() != methods.size()) throw ConfigError("suite: duplicate method");
  if (std::set(shots.begin(), shots.end()).size() != shots.size()) throw ConfigError("suite: duplicate shot count");
  if (std::set(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("suite: duplicate seed");
  if (base.queries == 0) throw ConfigError("suite: queries must be at least 1");
  base.hp.validate();
  base.arch.validate();
  kfold_protocol(folds);
}

namespace {

struct Unit {
  std::vector<fed::Method> methods;  // one training family
  std::size_t shots;
  std::size_t fold;
  std::uint64_t seed;
};

std::vector<data::ClientDataset> lookup(const DataPool& pool, const std::vector<ConditionRef>& refs) {
  std::vector<data::ClientDataset> out;
  for (const auto& r : refs) {
    auto it = pool.find(r);
    if (it == pool.end()) throw DataError("no data for condition " + to_string(r));
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

ResultsTable run_suite(const SuiteConfig& cfg, const DataPool& pool, const CellCallback& on_cell) {
  cfg.validate();
  // Group methods by training family, keeping first-appearance order.
  std::vector<std::vector<fed::Method>> families;
  for (fed::Method m : cfg.methods) {
    auto it = std::find_if(families.begin(), families.end(),
                           [&](const auto& f) { return fed::training_family(f.front()) == fed::training_family(m); });
    if (it == families.end()) {
      families.push_back({m});
    } else {
      it->push_back(m);
    }
  }
  std::vector<Unit> units;
  for (const auto& fam : families)
    for (auto k : cfg.shots)
      for (std::size_t f = 0; f < cfg.folds.size(); ++f)
        for (auto seed : cfg.seeds) units.push_back({fam, k, f, seed});

  std::vector<std::vector<Cell>> slots(units.size());
  std::mutex callback_mutex;
  parallel_for(units.size(), cfg.jobs, [&](std::size_t i) {
    const Unit& u = units[i];
    auto& cells = slots[i];
    for (fed::Method m : u.methods) cells.push_back(Cell{CellKey{m, u.shots, u.fold, u.seed}, std::nullopt, {}});
    try {
      fed::FederationConfig fc;
      fc.round = cfg.base;
      fc.round.shots = u.shots;
      fc.round.method = u.methods.front();
      fc.round.jobs = 1;
      fc.seed = u.seed;
      const auto training = lookup(pool, cfg.folds[u.fold].train);
      const auto testing = lookup(pool, cfg.folds[u.fold].test);
      const auto results = fed::run_experiments(fc, training, testing, u.methods);
      for (std::size_t j = 0; j < results.size(); ++j) {
        double s = 0.0;
        for (double a : results[j].accuracy) s += a;
        cells[j].accuracy = s / static_cast<double>(results[j].accuracy.size());
        if (on_cell) {
          std::lock_guard lock(callback_mutex);
          on_cell(cells[j].key, results[j]);
        }
      }
    } catch (const std::exception& e) {
      for (auto& c : cells) {
        if (!c.accuracy) c.error = e.what();
      }
    }
  });
  ResultsTable table;
  for (auto& cells : slots)
    for (auto& c : cells) table.insert(std::move(c));
  return table;
}

// ---- embeddings ----

std::vector<EmbeddingRow> embeddings(const model::ArchitectureSpec& spec, const model::ParamSet& params,
                                     const std::vector<data::LabeledWindow>& windows, std::size_t client_id) {
  const auto out = model::forward(spec, params, data::stack_signals(windows));
  const auto predicted = argmax_rows(out.logits);
  const std::size_t width = out.embedding.dim(1);
  auto values = out.embedding.data();
  std::vector<EmbeddingRow> rows;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    EmbeddingRow r;
    r.client_id = client_id;
    r.label = windows[i].label;
    r.prediction = predicted[i];
    r.embedding.assign(values.begin() + static_cast<std::ptrdiff_t>(i * width),
                       values.begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_embeddings(const std::vector<EmbeddingRow>& rows, std::ostream& out) {
  for (const auto& r : rows) {
    out << r.client_id << '\t' << r.label << '\t' << r.prediction;
    for (double v : r.embedding) out << '\t' << format_double(v);
    out << '\n';
  }
}

std::vector<EmbeddingRow> parse_embeddings(std::istream& in) {
  std::vector<EmbeddingRow> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    const std::string where = "embedding row " + std::to_string(n);
    if (f.size() < 4) throw FormatError(where + ": too few fields");
    EmbeddingRow r;
    r.client_id = parse_number<std::size_t>(f[0], where);
    r.label = parse_number<std::size_t>(f[1], where);
    r.prediction = parse_number<std::size_t>(f[2], where);
    for (std::size_t i = 3; i < f.size(); ++i) r.embedding.push_back(parse_number<double>(f[i], where));
    if (!rows.empty() && r.embedding.size() != rows.front().embedding.size()) {
      throw FormatError(where + ": embedding width differs from the first row");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

void export_embeddings(const model::ArchitectureSpec& spec, const model::ParamSet& params,
                       const std::vector<data::LabeledWindow>& windows, std::size_t client_id,
                       const std::filesystem::path& path) {
  const auto rows = embeddings(spec, params, windows, client_id);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_embeddings(rows, out);
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace refml::eval
