#include "refml/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "refml/config.hpp"
#include "refml/error.hpp"
#include "refml/eval.hpp"
#include "refml/model.hpp"

#ifndef REFML_VERSION
#define REFML_VERSION "dev"
#endif

namespace refml::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::size_t jobs = 1;
  bool dry_run = false;
};

config::ExperimentConfig load_config(const Common& o) {
  config::KeyValues kv;
  if (!o.config_path.empty()) kv = config::KeyValues::load(o.config_path);
  for (const auto& s : o.sets) kv.set_assignment(s);
  return config::build(kv);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

void write_resolved(std::ostream& out, const config::KeyValues& kv) {
  for (const auto& [k, v] : kv.values()) out << k << " = " << v << '\n';
}

// Header comments, the resolved configuration, then the artifact list. Being
// a valid config file, it reruns the experiment on its own.
void write_manifest(const fs::path& path, const std::string& command, const config::KeyValues& resolved,
                    std::size_t jobs, const std::vector<std::string>& artifacts) {
  std::ostringstream m;
  m << "# refml run manifest\n";
  m << "# command: " << command << '\n';
  m << "# version: " << REFML_VERSION << '\n';
  m << "# started: " << utc_now() << '\n';
  m << "# jobs: " << jobs << " (does not affect results)\n";
  m << "# master seeds: " << resolved.get("seeds") << '\n';
  m << "# rerun with: refml " << command << " --config <this file>\n";
  write_resolved(m, resolved);
  for (const auto& a : artifacts) m << "# artifact: " << a << '\n';
  write_text(path, m.str());
}

std::string cell_name(const eval::CellKey& k) {
  return std::string(fed::to_string(k.method)) + "_k" + std::to_string(k.shots) + "_fold" + std::to_string(k.fold) +
         "_seed" + std::to_string(k.seed);
}

std::string double_text(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- generate ----

int cmd_generate(const Common& o, std::ostream& out) {
  const auto cfg = load_config(o);
  if (cfg.data.kind != config::DataSource::Kind::synthetic) {
    throw ConfigError("config key 'data.source': generate needs synthetic data");
  }
  const auto resolved = cfg.resolved();
  const fs::path dir = o.out_dir.empty() ? fs::path("data") : fs::path(o.out_dir);
  std::vector<std::string> artifacts;
  for (std::size_t v = 0; v < cfg.data.synthetic.conditions.size(); ++v) {
    artifacts.push_back("condition_" + std::to_string(v) + ".csv");
  }
  if (o.dry_run) {
    write_resolved(out, resolved);
    return kOk;
  }
  fs::create_directories(dir);
  write_manifest(dir / "manifest.cfg", "generate", resolved, 1, artifacts);
  const auto datasets = data::generate_synthetic(cfg.data.synthetic);
  for (std::size_t v = 0; v < datasets.size(); ++v) {
    data::export_csv(datasets[v], dir / artifacts[v]);
    out << "wrote " << (dir / artifacts[v]).string() << " (" << datasets[v].size() << " rows)\n";
  }
  return kOk;
}

// ---- run ----

int cmd_run(const Common& o, std::ostream& out, std::ostream& err) {
  if (o.jobs == 0) throw ConfigError("--jobs must be at least 1");
  const auto cfg = load_config(o);
  const auto resolved = cfg.resolved();
  if (o.dry_run) {
    write_resolved(out, resolved);
    return kOk;
  }
  const auto pool = config::load_data(cfg);
  const auto suite = config::suite_config(cfg, pool, o.jobs);
  suite.validate();

  const fs::path dir = o.out_dir.empty() ? fs::path("results") : fs::path(o.out_dir);
  std::vector<std::string> artifacts{"results.csv", "summary.csv", "failures.csv"};
  for (auto m : suite.methods)
    for (auto k : suite.shots)
      for (std::size_t f = 0; f < suite.folds.size(); ++f)
        for (auto seed : suite.seeds)
          for (std::size_t c = 0; c < suite.folds[f].test.size(); ++c) {
            const std::string base = cell_name({m, k, f, seed}) + "_test" + std::to_string(c);
            if (cfg.write_checkpoints) {
              artifacts.push_back("checkpoints/" + base + ".params");
              artifacts.push_back("checkpoints/" + base + ".meta");
            }
            if (cfg.write_embeddings) artifacts.push_back("embeddings/" + base + ".tsv");
          }
  fs::create_directories(dir);
  if (cfg.write_checkpoints) fs::create_directories(dir / "checkpoints");
  if (cfg.write_embeddings) fs::create_directories(dir / "embeddings");
  write_manifest(dir / "manifest.cfg", "run", resolved, o.jobs, artifacts);

  const std::uint64_t spec_hash = cfg.arch.hash();
  auto on_cell = [&](const eval::CellKey& key, const fed::ExperimentResult& r) {
    for (std::size_t c = 0; c < r.testing_models.size(); ++c) {
      const std::string base = cell_name(key) + "_test" + std::to_string(c);
      if (cfg.write_checkpoints) {
        model::save_checkpoint(dir / "checkpoints" / (base + ".params"), r.testing_models[c], spec_hash);
        std::ostringstream meta;
        meta << "method = " << fed::to_string(key.method) << '\n'
             << "shots = " << key.shots << '\n'
             << "fold = " << key.fold << '\n'
             << "seed = " << key.seed << '\n'
             << "test_condition = " << eval::to_string(suite.folds[key.fold].test[c]) << '\n'
             << "round = " << cfg.hp.rounds << '\n'
             << "accuracy = " << double_text(r.accuracy[c]) << '\n'
             << "spec_hash = " << spec_hash << '\n';
        for (const char* k : {"alpha", "beta", "gamma", "delta", "eta", "mu", "local_lr", "encoder_steps",
                              "finetune_steps", "local_steps", "grad_mode", "queries", "episode_mode"}) {
          meta << k << " = " << resolved.get(k) << '\n';
        }
        write_text(dir / "checkpoints" / (base + ".meta"), meta.str());
      }
      if (cfg.write_embeddings) {
        eval::export_embeddings(cfg.arch, r.testing_models[c], r.testing_queries[c], c,
                                dir / "embeddings" / (base + ".tsv"));
      }
    }
  };
  const auto table = eval::run_suite(suite, pool, on_cell);

  std::ostringstream results, summary, failures;
  table.write_csv(results);
  table.write_summary_csv(summary);
  failures << "method,shots,fold,seed,error\n";
  for (const auto& [k, c] : table.cells()) {
    if (c.accuracy) continue;
    std::string msg = c.error;
    for (char& ch : msg)
      if (ch == ',' || ch == '\n') ch = ' ';
    failures << fed::to_string(k.method) << ',' << k.shots << ',' << k.fold << ',' << k.seed << ',' << msg << '\n';
  }
  write_text(dir / "results.csv", results.str());
  write_text(dir / "summary.csv", summary.str());
  write_text(dir / "failures.csv", failures.str());

  out << summary.str();
  if (table.failed() > 0) {
    err << "refml: " << table.failed() << " of " << table.size() << " cells failed; see "
        << (dir / "failures.csv").string() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

// ---- inspect ----

int cmd_inspect(const std::string& path, std::ostream& out) {
  const auto ck = model::load_checkpoint(path);
  const auto& p = ck.params;
  out << "checkpoint: " << path << '\n';
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(ck.spec_hash));
  out << "spec hash: " << hash << '\n';
  out << "parameters: " << p.size() << " tensors, " << p.numel() << " values\n";
  for (const auto& e : p.entries()) {
    double ss = 0.0;
    for (double v : e.value.data()) ss += v * v;
    out << "  " << std::left << std::setw(28) << e.name << std::setw(16) << shape_str(e.value.shape())
        << " norm " << std::setprecision(6) << std::sqrt(ss) << '\n';
  }
  out << "partition encoder: " << p.indices(model::Segment::encoder).size() << " tensors, "
      << p.numel(model::Segment::encoder) << " values\n";
  out << "partition predictor: " << p.indices(model::Segment::predictor).size() << " tensors, "
      << p.numel(model::Segment::predictor) << " values\n";
  if (p.contains("predictor.fc1.weight") && p.contains("predictor.fc2.weight")) {
    const auto& fc1 = p.at("predictor.fc1.weight");
    const auto& fc2 = p.at("predictor.fc2.weight");
    out << "flatten length: " << fc1.dim(1) << '\n';
    out << "embedding width: " << fc1.dim(0) << '\n';
    out << "predictor: " << fc1.dim(1) << " -> " << fc1.dim(0) << " -> " << fc2.dim(0) << '\n';
  }
  return kOk;
}

}  // namespace

int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated meta-learning simulator for few-shot fault diagnosis", "refml"};
  app.require_subcommand(1);
  app.set_version_flag("--version", REFML_VERSION);

  Common gen_opts, run_opts;
  auto add_common = [](CLI::App* sub, Common& o, bool jobs) {
    sub->add_option("--config", o.config_path, "Configuration file (key = value lines)");
    sub->add_option("--set", o.sets, "Override one key, key=value (repeatable)");
    sub->add_option("--out", o.out_dir, "Output directory");
    sub->add_flag("--dry-run", o.dry_run, "Print the resolved configuration and exit");
    if (jobs) sub->add_option("--jobs", o.jobs, "Parallel suite cells (results do not depend on it)");
  };
  auto* gen = app.add_subcommand("generate", "Write one CSV per synthetic working condition");
  add_common(gen, gen_opts, false);
  auto* run = app.add_subcommand("run", "Run the experiment suite");
  add_common(run, run_opts, true);
  std::string checkpoint;
  auto* inspect = app.add_subcommand("inspect", "Describe a parameter checkpoint");
  inspect->add_option("checkpoint", checkpoint, "Checkpoint file")->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << REFML_VERSION << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "refml: " << e.what() << '\n';
    return kValidationError;
  }

  try {
    if (*gen) return cmd_generate(gen_opts, out);
    if (*run) return cmd_run(run_opts, out, err);
    return cmd_inspect(checkpoint, out);
  } catch (const ConfigError& e) {
    err << "refml: invalid configuration: " << e.what() << '\n';
    return kValidationError;
  } catch (const std::exception& e) {
    err << "refml: " << e.what() << '\n';
    return kRuntimeError;
  }
}

}  // namespace refml::cli
