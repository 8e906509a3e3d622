#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "refml/cli.hpp"
#include "refml/config.hpp"
#include "refml/error.hpp"
#include "refml/model.hpp"

using namespace refml;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::main(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("refml_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

const char* kTinyConfig = R"(# a tiny experiment
model.input_length = 64
model.conv = 4:3:2, 4:3:2
model.hidden = 8
synthetic.windows_per_class = 6
synthetic.speed = 1.0, 1.2
synthetic.noise = 0.2, 0.3
synthetic.amplitude = 1.0, 1.0
synthetic.resonance = 0.21, 0.21
queries = 3
rounds = 3
encoder_steps = 1
finetune_steps = 2
local_steps = 1
methods = REFML, FedAvg-FT, Local
shots = 1, 2
seeds = 7
)";

fs::path write_config(const TempDir& dir, const std::string& text, const std::string& name = "tiny.cfg") {
  const auto p = dir / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

// ---- config layer ----

TEST(Config, UnknownKeyIsNamed) {
  config::KeyValues kv;
  try {
    kv.set("rounds_typo", "3");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("rounds_typo"), std::string::npos);
  }
  const auto r = run_cli({"run", "--dry-run", "--set", "bogus.key=1"});
  EXPECT_EQ(r.code, cli::kValidationError);
  EXPECT_NE(r.err.find("bogus.key"), std::string::npos) << r.err;
}

TEST(Config, MalformedValueNamesTheKey) {
  const auto r = run_cli({"run", "--dry-run", "--set", "alpha=fast"});
  EXPECT_EQ(r.code, cli::kValidationError);
  EXPECT_NE(r.err.find("alpha"), std::string::npos) << r.err;
  EXPECT_EQ(run_cli({"run", "--dry-run", "--set", "alpha=2"}).code, cli::kValidationError);
  EXPECT_EQ(run_cli({"run", "--dry-run", "--set", "queries=0"}).code, cli::kValidationError);
  EXPECT_EQ(run_cli({"run", "--dry-run", "--set", "synthetic.windows_per_class=5"}).code, cli::kValidationError);
  EXPECT_EQ(run_cli({"run", "--dry-run", "--set", "data.source=csv", "--set", "data.csv=/nonexistent.csv"}).code,
            cli::kValidationError);
}

TEST(Config, ParseCommentsAndLayers) {
  std::istringstream in("# comment\n\nrounds = 7   # trailing\nalpha=0.2\n");
  auto kv = config::KeyValues::parse(in, "test");
  EXPECT_EQ(kv.get("rounds"), "7");
  kv.set_assignment("rounds=9");
  const auto cfg = config::build(kv);
  EXPECT_EQ(cfg.hp.rounds, 9u);
  EXPECT_EQ(cfg.hp.alpha, 0.2);
  std::istringstream broken("rounds 7\n");
  EXPECT_THROW(config::KeyValues::parse(broken, "test"), ConfigError);
}

TEST(Config, ResolvedConfigRebuildsIdentically) {
  std::istringstream in(kTinyConfig);
  const auto cfg = config::build(config::KeyValues::parse(in, "tiny"));
  const auto again = config::build(cfg.resolved());
  EXPECT_EQ(again.resolved().values(), cfg.resolved().values());
  EXPECT_EQ(again.arch, cfg.arch);
}

TEST(Config, ExplicitFoldsAcrossDatasets) {
  TempDir dir;
  ASSERT_EQ(run_cli({"generate", "--config", write_config(dir, kTinyConfig).string(), "--out", (dir / "a").string()}).code, 0);
  std::string text = kTinyConfig;
  text += "data.source = csv\n";
  text += "data.csv = rig=" + (dir / "a" / "condition_1.csv").string() + ", rig=" +
          (dir / "a" / "condition_1.csv").string() + "\n";
  EXPECT_THROW(config::load_data(config::build([&] {
                 std::istringstream in(text);
                 return config::KeyValues::parse(in, "x");
               }())),
               Error);  // rig lists condition 1 twice

  text = kTinyConfig;
  text += "data.source = csv\n";
  text += "data.csv = rig=" + (dir / "a" / "condition_0.csv").string() + ", bench=" +
          (dir / "a" / "condition_1.csv").string() + "\n";
  text += "folds = explicit\nfold.0 = rig:0 -> bench:1\n";
  std::istringstream in(text);
  const auto cfg = config::build(config::KeyValues::parse(in, "x"));
  const auto pool = config::load_data(cfg);
  const auto folds = config::resolve_folds(cfg, pool);
  ASSERT_EQ(folds.size(), 1u);
  EXPECT_EQ(folds[0].test, (std::vector<eval::ConditionRef>{{"bench", 1}}));
}

// ---- generate ----

TEST(Generate, OneCsvPerConditionAndByteIdenticalRerun) {
  TempDir dir;
  std::string text = kTinyConfig;
  text += "synthetic.speed = 1.0, 1.2, 1.4\nsynthetic.noise = 0.2, 0.3, 0.4\n";
  text += "synthetic.amplitude = 1, 1, 1\nsynthetic.resonance = 0.2, 0.21, 0.22\n";
  const auto cfg = write_config(dir, text);
  ASSERT_EQ(run_cli({"generate", "--config", cfg.string(), "--out", (dir / "a").string()}).code, 0);
  ASSERT_EQ(run_cli({"generate", "--config", cfg.string(), "--out", (dir / "b").string()}).code, 0);
  for (int v = 0; v < 3; ++v) {
    const std::string name = "condition_" + std::to_string(v) + ".csv";
    ASSERT_TRUE(fs::exists(dir / "a" / name));
    const auto a = slurp(dir / "a" / name);
    EXPECT_EQ(a, slurp(dir / "b" / name));
    EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 4 * 6);
  }
  EXPECT_FALSE(fs::exists(dir / "a" / "condition_3.csv"));
  EXPECT_TRUE(fs::exists(dir / "a" / "manifest.cfg"));
}

TEST(Generate, RejectsCsvSource) {
  TempDir dir;
  std::ofstream(dir / "x.csv") << "0,0,1\n";
  EXPECT_EQ(run_cli({"generate", "--set", "data.source=csv", "--set", "data.csv=" + (dir / "x.csv").string()}).code,
            cli::kValidationError);
}

// ---- run ----

TEST(Run, DryRunPrintsResolvedConfigOnly) {
  TempDir dir;
  const auto r = run_cli({"run", "--config", write_config(dir, kTinyConfig).string(), "--dry-run", "--out",
                          (dir / "out").string()});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("rounds = 3\n"), std::string::npos);
  EXPECT_NE(r.out.find("methods = REFML,FedAvg-FT,Local\n"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Run, TinyRunEmitsEveryManifestArtifact) {
  TempDir dir;
  std::string text = kTinyConfig;
  text += "output.embeddings = true\n";
  const auto out = dir / "out";
  const auto r = run_cli({"run", "--config", write_config(dir, text).string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto manifest = slurp(out / "manifest.cfg");
  std::istringstream lines(manifest);
  std::string line;
  std::size_t artifacts = 0;
  while (std::getline(lines, line)) {
    const std::string tag = "# artifact: ";
    if (line.rfind(tag, 0) != 0) continue;
    ++artifacts;
    EXPECT_TRUE(fs::exists(out / line.substr(tag.size()))) << line;
  }
  // 3 tables + 3 methods x 2 shots x 2 folds x 1 seed x (params, meta, tsv).
  EXPECT_EQ(artifacts, 3u + 3 * 2 * 2 * 3);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(out))
    if (e.is_regular_file()) ++files;
  EXPECT_EQ(files, artifacts + 1);  // plus the manifest itself

  const auto results = slurp(out / "results.csv");
  EXPECT_EQ(std::count(results.begin(), results.end(), '\n'), 1 + 3 * 2 * 2);
  EXPECT_EQ(slurp(out / "failures.csv"), "method,shots,fold,seed,error\n");
  EXPECT_NE(r.out.find("method,shots,mean,std"), std::string::npos);
  const auto meta = slurp(out / "checkpoints" / "REFML_k2_fold1_seed7_test0.meta");
  EXPECT_NE(meta.find("test_condition = 1\n"), std::string::npos) << meta;
  EXPECT_NE(meta.find("round = 3\n"), std::string::npos);
}

TEST(Run, ManifestReproducesTheSummary) {
  TempDir dir;
  const auto first = dir / "first";
  ASSERT_EQ(run_cli({"run", "--config", write_config(dir, kTinyConfig).string(), "--out", first.string()}).code, 0);
  const auto second = dir / "second";
  ASSERT_EQ(run_cli({"run", "--config", (first / "manifest.cfg").string(), "--out", second.string(), "--jobs", "2"}).code,
            0);
  EXPECT_EQ(slurp(first / "summary.csv"), slurp(second / "summary.csv"));
  EXPECT_EQ(slurp(first / "results.csv"), slurp(second / "results.csv"));
  EXPECT_EQ(slurp(first / "checkpoints" / "Local_k1_fold0_seed7_test0.params"),
            slurp(second / "checkpoints" / "Local_k1_fold0_seed7_test0.params"));
}

TEST(Run, FailedCellsExitWithRuntimeError) {
  TempDir dir;
  std::string text = kTinyConfig;
  text += "data.source = csv\n";
  ASSERT_EQ(run_cli({"generate", "--config", write_config(dir, kTinyConfig).string(), "--out", (dir / "d").string()}).code,
            0);
  // Condition 1 keeps only two windows of class 3, so any episode there fails.
  {
    std::ifstream in(dir / "d" / "condition_1.csv");
    std::ofstream trimmed(dir / "d" / "short.csv");
    std::string row;
    int class3 = 0;
    while (std::getline(in, row)) {
      if (row.rfind("3,", 0) == 0 && ++class3 > 2) continue;
      trimmed << row << '\n';
    }
  }
  text += "data.csv = " + (dir / "d" / "condition_0.csv").string() + ", " + (dir / "d" / "short.csv").string() + "\n";
  text += "methods = FedAvg\nshots = 1\n";
  const auto r = run_cli({"run", "--config", write_config(dir, text, "csv.cfg").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, cli::kRuntimeError);
  EXPECT_NE(r.err.find("2 of 2 cells failed"), std::string::npos) << r.err;
  EXPECT_NE(slurp(dir / "o" / "results.csv").find("failed"), std::string::npos);
  EXPECT_NE(slurp(dir / "o" / "failures.csv").find("class 3"), std::string::npos);
}

// ---- inspect ----

TEST(Inspect, PaperDefaultCheckpointReportsTheShapeContract) {
  TempDir dir;
  const auto spec = model::ArchitectureSpec::paper_default();
  model::save_checkpoint(dir / "w.params", model::build(spec, 1), spec.hash());
  const auto r = run_cli({"inspect", (dir / "w.params").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("flatten length: 4096\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("embedding width: 256\n"), std::string::npos);
  EXPECT_NE(r.out.find("predictor: 4096 -> 256 -> 10\n"), std::string::npos);
  EXPECT_NE(r.out.find("partition predictor: 4 tensors"), std::string::npos);
  EXPECT_NE(r.out.find("encoder.conv1.weight"), std::string::npos);
}

TEST(Inspect, CorruptFiles) {
  TempDir dir;
  const auto bytes = model::encode_checkpoint(model::build(model::ArchitectureSpec::paper_default(4), 1), 0);
  {
    std::ofstream out(dir / "cut.params", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() / 3));
  }
  auto r = run_cli({"inspect", (dir / "cut.params").string()});
  EXPECT_EQ(r.code, cli::kRuntimeError);
  EXPECT_NE(r.err.find("corrupt checkpoint"), std::string::npos) << r.err;

  std::ofstream(dir / "text.params") << "hello, not a checkpoint";
  r = run_cli({"inspect", (dir / "text.params").string()});
  EXPECT_EQ(r.code, cli::kRuntimeError);
  EXPECT_NE(r.err.find("bad magic"), std::string::npos) << r.err;

  EXPECT_EQ(run_cli({"inspect", (dir / "missing.params").string()}).code, cli::kRuntimeError);
}

// ---- argument handling ----

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, cli::kValidationError);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kValidationError);
  EXPECT_EQ(run_cli({"run", "--jobs", "0", "--dry-run"}).code, cli::kValidationError);
  EXPECT_EQ(run_cli({"inspect"}).code, cli::kValidationError);
  EXPECT_EQ(run_cli({"run", "--config", "/nonexistent.cfg"}).code, cli::kValidationError);
  EXPECT_EQ(run_cli({"--help"}).code, cli::kOk);
}
