#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "refml/data.hpp"
#include "refml/error.hpp"
#include "refml/rng.hpp"

using namespace refml;
using data::ClientDataset;
using data::LabeledWindow;

namespace {

// Frequency (cycles per sample) of the largest bin of the class-averaged
// power spectrum, by a naive DFT over bins 1..L/2.
double peak_frequency(const ClientDataset& ds, std::size_t label) {
  std::size_t len = 0;
  std::vector<double> power;
  for (const auto& w : ds.windows) {
    if (w.label != label) continue;
    len = w.signal.size();
    power.resize(len / 2 + 1, 0.0);
    for (std::size_t k = 1; k <= len / 2; ++k) {
      double re = 0, im = 0;
      for (std::size_t t = 0; t < len; ++t) {
        const double a = 2.0 * std::numbers::pi * static_cast<double>(k * t) / static_cast<double>(len);
        re += w.signal[t] * std::cos(a);
        im -= w.signal[t] * std::sin(a);
      }
      power[k] += re * re + im * im;
    }
  }
  const auto best = std::max_element(power.begin() + 1, power.end()) - power.begin();
  return static_cast<double>(best) / static_cast<double>(len);
}

data::SyntheticConfig quiet(std::size_t length = 1024) {
  data::SyntheticConfig cfg;
  cfg.input_length = length;
  cfg.windows_per_class = 6;
  cfg.conditions = {{1.0, 0.0, 1.0, 0.21}};
  return cfg;
}

ClientDataset balanced(std::size_t classes, std::size_t per_class, std::int64_t condition = 0) {
  ClientDataset ds;
  ds.condition_id = condition;
  Rng rng(99);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      LabeledWindow w;
      w.label = c;
      w.condition_id = condition;
      w.signal = {rng.normal(), rng.normal(), rng.normal()};
      ds.windows.push_back(w);
    }
  return ds;
}

}  // namespace

// ---- synthetic generator ----

TEST(Synthetic, Deterministic) {
  data::SyntheticConfig cfg;
  cfg.windows_per_class = 5;
  EXPECT_EQ(data::generate_synthetic(cfg), data::generate_synthetic(cfg));
  auto other = cfg;
  other.seed = 2;
  EXPECT_NE(data::generate_synthetic(cfg), data::generate_synthetic(other));
}

TEST(Synthetic, ShapeAndBalance) {
  data::SyntheticConfig cfg;
  cfg.windows_per_class = 7;
  const auto all = data::generate_synthetic(cfg);
  ASSERT_EQ(all.size(), cfg.conditions.size());
  for (std::size_t v = 0; v < all.size(); ++v) {
    EXPECT_EQ(all[v].condition_id, static_cast<std::int64_t>(v));
    EXPECT_EQ(all[v].size(), 4u * 7);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(all[v].count(c), 7u);
    for (const auto& w : all[v].windows) {
      EXPECT_EQ(w.signal.size(), cfg.input_length);
      EXPECT_EQ(w.condition_id, all[v].condition_id);
    }
  }
}

TEST(Synthetic, ClassesHaveDifferentSpectralPeaks) {
  const auto ds = data::generate_synthetic(quiet()).front();
  std::set<double> peaks;
  for (std::size_t c = 0; c < 4; ++c) peaks.insert(peak_frequency(ds, c));
  EXPECT_EQ(peaks.size(), 4u);
  // Class 0 is a pure tone at the base frequency.
  EXPECT_NEAR(peak_frequency(ds, 0), 0.03, 2.0 / 1024);
}

TEST(Synthetic, SpeedFactorScalesThePeak) {
  auto slow = quiet(), fast = quiet();
  fast.conditions = {{1.5, 0.0, 1.0, 0.21}};
  const auto a = data::generate_synthetic(slow).front(), b = data::generate_synthetic(fast).front();
  for (std::size_t c = 0; c < 4; ++c) {
    const double ratio = peak_frequency(b, c) / peak_frequency(a, c);
    EXPECT_NEAR(ratio, 1.5, 0.06) << "class " << c;
  }
}

TEST(Synthetic, NoIdenticalWindowsAcrossConditions) {
  data::SyntheticConfig cfg;
  cfg.windows_per_class = 10;
  std::set<std::vector<double>> seen;
  std::size_t n = 0;
  for (const auto& ds : data::generate_synthetic(cfg))
    for (const auto& w : ds.windows) {
      seen.insert(w.signal);
      ++n;
    }
  EXPECT_EQ(seen.size(), n);
}

TEST(Synthetic, InvalidConfig) {
  auto cfg = quiet();
  cfg.conditions = {{0.0, 0.1, 1.0, 0.21}};
  EXPECT_THROW(data::generate_synthetic(cfg), Error);
  cfg.conditions = {{1.0, -0.1, 1.0, 0.21}};
  EXPECT_THROW(data::generate_synthetic(cfg), Error);
}

// ---- CSV ----

TEST(Csv, TwoRows) {
  std::istringstream in("1,3,0.5,0.25,-1\n0,3,1,2,3\n");
  const auto ds = data::parse_csv(in, 3);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.condition_id, 3);
  EXPECT_EQ(ds.windows[0].label, 1u);
  EXPECT_EQ(ds.windows[1].label, 0u);
  EXPECT_EQ(ds.windows[0].signal, (std::vector<double>{0.5, 0.25, -1}));
}

TEST(Csv, ShortRowNamesTheRow) {
  std::istringstream in("1,3,0.5,0.25,-1\n0,3,1,2\n");
  try {
    data::parse_csv(in, 3, "f.csv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
}

TEST(Csv, EmptyInput) {
  std::istringstream in("");
  try {
    data::parse_csv(in, 3);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("no rows"), std::string::npos) << e.what();
  }
}

TEST(Csv, NonNumericAndMixedConditions) {
  std::istringstream bad("1,3,0.5,x,-1\n");
  EXPECT_THROW(data::parse_csv(bad, 3), DataError);
  std::istringstream mixed("1,3,0.5,0.1,-1\n1,4,0.5,0.1,-1\n");
  EXPECT_THROW(data::parse_csv(mixed, 3), DataError);
}

TEST(Csv, RoundTripIsBitExact) {
  data::SyntheticConfig cfg;
  cfg.windows_per_class = 5;
  auto ds = data::generate_synthetic(cfg)[2];
  // Values that stress shortest round-trip formatting.
  ds.windows[0].signal[0] = 0.1;
  ds.windows[0].signal[1] = 1.0 / 3.0;
  ds.windows[0].signal[2] = -5e-324;
  ds.windows[0].signal[3] = 1.7976931348623157e308;
  std::stringstream buf;
  data::write_csv(ds, buf);
  EXPECT_EQ(data::parse_csv(buf, cfg.input_length), ds);

  const auto path = std::filesystem::temp_directory_path() / "refml_data_test.csv";
  data::export_csv(ds, path);
  EXPECT_EQ(data::ingest_csv(path, cfg.input_length), ds);
  std::filesystem::remove(path);
}

TEST(Csv, MissingFile) {
  EXPECT_THROW(data::ingest_csv("/nonexistent/refml.csv", 3), Error);
}

// ---- episodes ----

TEST(Episode, PaperSizes) {
  const auto ds = balanced(4, 20);
  const auto ep = data::sample_episode(ds, 4, 3, 10, 1);
  EXPECT_EQ(ep.support.size(), 12u);
  EXPECT_EQ(ep.query.size(), 40u);
  std::set<std::size_t> s(ep.support_index.begin(), ep.support_index.end());
  for (auto q : ep.query_index) EXPECT_EQ(s.count(q), 0u);
}

TEST(Episode, OneShot) {
  const auto ep = data::sample_episode(balanced(4, 20), 4, 1, 5, 3);
  std::vector<std::size_t> per(4, 0);
  for (const auto& w : ep.support) ++per[w.label];
  EXPECT_EQ(per, (std::vector<std::size_t>{1, 1, 1, 1}));
}

TEST(Episode, InsufficientClassIsNamed) {
  auto ds = balanced(4, 10);
  ds.windows.erase(ds.windows.begin() + 20, ds.windows.begin() + 25);  // class 2 keeps 5
  try {
    data::sample_episode(ds, 4, 3, 3, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("class 2"), std::string::npos) << e.what();
  }
}

TEST(Episode, SeedsGiveDifferentSupports) {
  const auto ds = balanced(4, 100);
  int collisions = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = data::sample_episode(ds, 4, 5, 10, 2 * s);
    const auto b = data::sample_episode(ds, 4, 5, 10, 2 * s + 1);
    collisions += a.support_index == b.support_index;
  }
  EXPECT_EQ(collisions, 0);
}

TEST(Episode, PropertyCountsAndDisjointness) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(5), k = 1 + rng.below(5), q = 1 + rng.below(10);
    const std::size_t per = k + q + rng.below(5);
    const auto ds = balanced(n, per);
    const std::uint64_t seed = rng.next();
    const auto ep = data::sample_episode(ds, n, k, q, seed);
    ASSERT_EQ(ep.support.size(), n * k);
    ASSERT_EQ(ep.query.size(), n * q);
    std::vector<std::size_t> sc(n, 0), qc(n, 0);
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      ++sc[ep.support[i].label];
      ASSERT_EQ(ds.windows[ep.support_index[i]], ep.support[i]);
    }
    for (std::size_t i = 0; i < ep.query.size(); ++i) {
      ++qc[ep.query[i].label];
      ASSERT_EQ(ds.windows[ep.query_index[i]], ep.query[i]);
    }
    ASSERT_EQ(sc, std::vector<std::size_t>(n, k));
    ASSERT_EQ(qc, std::vector<std::size_t>(n, q));
    std::set<std::size_t> all(ep.support_index.begin(), ep.support_index.end());
    all.insert(ep.query_index.begin(), ep.query_index.end());
    ASSERT_EQ(all.size(), n * (k + q)) << "trial " << trial;
    const auto again = data::sample_episode(ds, n, k, q, seed);
    ASSERT_EQ(again.support_index, ep.support_index);
    ASSERT_EQ(again.query_index, ep.query_index);
  }
}

// ---- normalisation ----

TEST(Normalize, Arithmetic) {
  const auto w = data::normalize_window(LabeledWindow{{1, 2, 3, 4}, 0, 0});
  // Mean 2.5, population variance 1.25.
  const double s = std::sqrt(1.25);
  const std::vector<double> expect{-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w.signal[i], expect[i], 1e-12);
}

TEST(Normalize, MomentsAndIdempotence) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    LabeledWindow w{std::vector<double>(64), 1, 0};
    for (double& v : w.signal) v = rng.uniform(-3, 10);
    const auto n = data::normalize_window(w);
    double mean = 0, var = 0;
    for (double v : n.signal) mean += v / 64;
    for (double v : n.signal) var += (v - mean) * (v - mean) / 64;
    EXPECT_LT(std::abs(mean), 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-9);
    const auto twice = data::normalize_window(n);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(twice.signal[i], n.signal[i], 1e-9);
  }
}

TEST(Normalize, ConstantWindowThrows) {
  EXPECT_THROW(data::normalize_window(LabeledWindow{{2, 2, 2}, 0, 0}), DataError);
}

// ---- helpers ----

TEST(Helpers, StackAndRemap) {
  const auto ds = balanced(3, 2);
  const Tensor t = data::stack_signals(ds.windows);
  EXPECT_EQ(t.shape(), (Shape{6, 3}));
  EXPECT_EQ(t[3], ds.windows[1].signal[0]);
  EXPECT_EQ(data::labels_of(ds.windows), (std::vector<std::size_t>{0, 0, 1, 1, 2, 2}));
  const auto r = data::remap_labels(ds, {{2, 0}, {0, 1}});
  EXPECT_EQ(r.size(), 4u);
  EXPECT_EQ(r.count(0), 2u);
  EXPECT_EQ(r.count(1), 2u);
  EXPECT_EQ(r.windows[0].signal, ds.windows[0].signal);
  EXPECT_EQ(r.windows[0].label, 1u);
}
