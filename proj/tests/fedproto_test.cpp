#include <gtest/gtest.h>

#include <cmath>

#include "refml/error.hpp"
#include "refml/fedproto.hpp"
#include "refml/metrics.hpp"
#include "refml/rng.hpp"

using namespace refml;
using fed::HyperParams;
using fed::InterpolationWeights;
using fed::Method;
using model::ParamSet;
using model::Segment;

namespace {

ParamSet scalar_set(double v, Segment seg = Segment::predictor) {
  ParamSet p;
  p.add("w", seg, Tensor::scalar(v));
  return p;
}

ParamSet random_set(std::uint64_t seed) {
  Rng rng(seed);
  ParamSet p;
  Tensor a(Shape{2, 3}), b(Shape{4});
  for (double& v : a.data()) v = rng.uniform(-2, 2);
  for (double& v : b.data()) v = rng.uniform(-2, 2);
  p.add("enc", Segment::encoder, a);
  p.add("pred", Segment::predictor, b);
  return p;
}

// L = c/2 (w - m)^2 summed over the one scalar entry.
fed::ParamLoss quadratic(double c, double m) {
  return [c, m](ad::Graph& g, std::span<const ad::NodeId> p) {
    const auto d = g.sub(p[0], g.input(Tensor::scalar(m)));
    return g.scale(g.mul(d, d), 0.5 * c);
  };
}

model::ArchitectureSpec tiny_arch() {
  model::ArchitectureSpec s;
  s.input_length = 64;
  s.num_classes = 4;
  s.conv_units = {{4, 3, 2}, {4, 3, 2}};
  s.hidden_dim = 8;
  return s;
}

std::vector<data::ClientDataset> tiny_pools(std::size_t conditions, std::uint64_t seed = 3) {
  data::SyntheticConfig cfg;
  cfg.input_length = 64;
  cfg.windows_per_class = 8;
  cfg.seed = seed;
  cfg.conditions.resize(conditions);
  for (std::size_t v = 0; v < conditions; ++v) cfg.conditions[v] = {1.0 + 0.1 * v, 0.2, 1.0, 0.21};
  return data::generate_synthetic(cfg);
}

fed::FederationConfig tiny_federation(Method m, std::size_t rounds = 2) {
  fed::FederationConfig cfg;
  cfg.round.arch = tiny_arch();
  cfg.round.method = m;
  cfg.round.shots = 2;
  cfg.round.queries = 3;
  cfg.round.hp.rounds = rounds;
  cfg.round.hp.encoder_steps = 2;
  cfg.round.hp.finetune_steps = 2;
  cfg.round.hp.local_steps = 2;
  cfg.round.hp.delta = 10.0;
  cfg.seed = 11;
  return cfg;
}

HyperParams all_zero_rates(HyperParams hp) {
  hp.alpha = hp.beta = hp.gamma = hp.delta = hp.eta = hp.mu = hp.local_lr = 0.0;
  return hp;
}

}  // namespace

// ---- interpolation ----

TEST(Interpolate, ScalarBlend) {
  InterpolationWeights a{scalar_set(0.25)};
  EXPECT_EQ(fed::interpolate(a, scalar_set(2.0), scalar_set(0.0))[0].value.item(), 0.5);
}

TEST(Interpolate, OnesAndZerosAreExact) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = random_set(seed), l = random_set(seed + 100);
    EXPECT_EQ(fed::interpolate(InterpolationWeights::ones(g), g, l), g);
    EXPECT_EQ(fed::interpolate(InterpolationWeights{model::zeros_like(g)}, g, l), l);
  }
}

TEST(Interpolate, HandChainRule) {
  // L = w^2/2, global 2, local 0, a = 0.5: W' = 1, dL/dW' = 1, dW'/da = 2,
  // so a <- 0.5 - 0.1 * 2 = 0.3 and the returned blend is 0.6.
  const auto r = fed::adaptive_interpolate(scalar_set(0.0), InterpolationWeights{scalar_set(0.5)}, scalar_set(2.0),
                                           quadratic(1.0, 0.0), 0.1);
  EXPECT_NEAR(r.weights.weights[0].value.item(), 0.3, 1e-15);
  EXPECT_NEAR(r.params[0].value.item(), 0.6, 1e-15);
}

TEST(Interpolate, OnesStayGlobalWhenModelsAgree) {
  const auto g = scalar_set(0.4);
  const auto r = fed::adaptive_interpolate(g, InterpolationWeights::ones(g), g, quadratic(1.0, 0.3), 5.0);
  EXPECT_EQ(r.weights.weights, InterpolationWeights::ones(g).weights);
  EXPECT_EQ(r.params, g);
}

TEST(Interpolate, WeightsStayInUnitIntervalForHugeDelta) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto g = random_set(rng.next()), l = random_set(rng.next());
    InterpolationWeights a{model::zeros_like(g)};
    for (auto& e : a.weights.entries())
      for (double& v : e.value.data()) v = rng.uniform();
    const double delta = std::pow(10.0, rng.uniform(-2, 12));
    const fed::ParamLoss loss = [](ad::Graph& gr, std::span<const ad::NodeId> p) {
      return gr.add(gr.sum(gr.mul(p[0], p[0])), gr.scale(gr.sum(p[1]), 3.0));
    };
    const auto r = fed::adaptive_interpolate(l, a, g, loss, delta);
    ASSERT_TRUE(r.weights.in_unit_interval()) << "delta " << delta;
    // The returned model is the blend with the returned weights.
    ASSERT_EQ(r.params, fed::interpolate(r.weights, g, l));
  }
}

TEST(Interpolate, ShapeMismatch) {
  EXPECT_THROW(fed::interpolate(InterpolationWeights{scalar_set(1)}, scalar_set(1), random_set(1)), Error);
}

TEST(Interpolate, NonFiniteLoss) {
  const fed::ParamLoss bad = [](ad::Graph& g, std::span<const ad::NodeId> p) {
    return g.scale(g.sum(p[0]), std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(fed::adaptive_interpolate(scalar_set(0), InterpolationWeights{scalar_set(0.5)}, scalar_set(1), bad, 0.1),
               NumericError);
}

// ---- partial updates ----

TEST(Descend, EncoderOnlyHandGradient) {
  // L = (e0 - 1)^2 + 3 e1^2 + sum(pred)^2 ; grad_e = (2(e0-1), 6 e1).
  ParamSet p;
  p.add("enc", Segment::encoder, Tensor::vector({0.5, 2.0}));
  p.add("pred", Segment::predictor, Tensor::vector({1.0, -4.0}));
  const fed::ParamLoss loss = [](ad::Graph& g, std::span<const ad::NodeId> ids) {
    const auto d = g.sub(ids[0], g.input(Tensor::vector({1.0, 0.0})));
    const auto w = g.mul(d, g.mul(d, g.input(Tensor::vector({1.0, 3.0}))));
    const auto s = g.sum(ids[1]);
    return g.add(g.sum(w), g.mul(s, s));
  };
  const Segment enc[] = {Segment::encoder};
  const auto out = fed::descend(p, loss, 0.1, 1, enc);
  EXPECT_NEAR(out[0].value[0], 0.5 - 0.1 * 2 * (0.5 - 1), 1e-15);
  EXPECT_NEAR(out[0].value[1], 2.0 - 0.1 * 6 * 2.0, 1e-15);
  EXPECT_EQ(out[1], p[1]);
}

TEST(Descend, ZeroGradientLeavesParamsUnchanged) {
  const auto p = scalar_set(0.7);
  EXPECT_EQ(fed::descend(p, quadratic(2.0, 0.7), 0.5, 3), p);
}

TEST(Descend, LinearSoftmaxHandStep) {
  // Zero weights, x = (1, 0), label 0: p = (1/2, 1/2), dL/dz = (-1/2, 1/2),
  // dL/dW = dL/dz x^T, dL/db = dL/dz.
  ParamSet p;
  p.add("w", Segment::predictor, Tensor(Shape{2, 2}));
  p.add("b", Segment::predictor, Tensor(Shape{2}));
  const Tensor x = Tensor::matrix(1, 2, {1, 0});
  const fed::ParamLoss loss = [&](ad::Graph& g, std::span<const ad::NodeId> ids) {
    return g.softmax_cross_entropy(g.linear(g.input(x), ids[0], ids[1]), {0});
  };
  const auto out = fed::descend(p, loss, 0.2, 1);
  EXPECT_EQ(out[0].value.values(), (std::vector<double>{0.1, 0, -0.1, 0}));
  EXPECT_EQ(out[1].value.values(), (std::vector<double>{0.1, -0.1}));
}

TEST(Descend, ConvexLossNeverIncreases) {
  // Logistic regression on two separable points.
  ParamSet p;
  p.add("w", Segment::predictor, Tensor::matrix(2, 1, {0.3, -0.2}));
  p.add("b", Segment::predictor, Tensor::vector({0, 0}));
  const Tensor x = Tensor::matrix(2, 1, {-1, 1});
  const fed::ParamLoss loss = [&](ad::Graph& g, std::span<const ad::NodeId> ids) {
    return g.softmax_cross_entropy(g.linear(g.input(x), ids[0], ids[1]), {0, 1});
  };
  double prev = ad::evaluate(loss, p.tensors());
  for (int s = 0; s < 50; ++s) {
    p = fed::descend(p, loss, 0.1, 1);
    const double cur = ad::evaluate(loss, p.tensors());
    ASSERT_LE(cur, prev);
    prev = cur;
  }
}

TEST(Proximal, HandStep) {
  // L = 0, mu = 2, W = 1, W_g = 0, lr = 0.1: 1 - 0.1 * 2 * 1 = 0.8.
  const fed::ParamLoss zero = [](ad::Graph& g, std::span<const ad::NodeId> ids) { return g.scale(g.sum(ids[0]), 0.0); };
  EXPECT_NEAR(fed::proximal_descend(scalar_set(1), scalar_set(0), zero, 0.1, 2.0, 1)[0].value.item(), 0.8, 1e-15);
}

TEST(Proximal, AtAnchorTheTermVanishes) {
  const auto p = scalar_set(0.4);
  EXPECT_EQ(fed::proximal_descend(p, p, quadratic(1.0, 2.0), 0.1, 5.0, 1)[0].value.item(),
            fed::descend(p, quadratic(1.0, 2.0), 0.1, 1)[0].value.item());
}

TEST(Proximal, MuZeroIsFedAvg) {
  const auto spec = tiny_arch();
  const auto w = tiny_pools(1).front().windows;
  std::vector<data::LabeledWindow> batch(w.begin(), w.begin() + 12);
  for (auto& x : batch) x = data::normalize_window(x);
  const auto p = model::build(spec, 1), g = model::build(spec, 2);
  EXPECT_EQ(fed::fedprox_local(spec, p, g, batch, 0.05, 0.0, 2), fed::fedavg_local(spec, p, batch, 0.05, 2));
  EXPECT_EQ(fed::fedavg_local(spec, p, batch, 0.05, 2), fed::fine_tune(spec, p, batch, 0.05, 2));
}

TEST(Network, EncoderAndPredictorUpdatesRespectThePartition) {
  const auto spec = tiny_arch();
  auto pool = tiny_pools(1).front();
  for (auto& x : pool.windows) x = data::normalize_window(x);
  const auto p = model::build(spec, 4);
  const auto enc = fed::update_encoder(spec, p, pool.windows, 0.1, 3);
  const auto ep = data::sample_episode(pool, 4, 2, 3, 1);
  const auto pred = fed::meta_update_predictor(spec, p, ep, 0.1, 0.1, ad::GradMode::second);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].segment == Segment::predictor) {
      EXPECT_EQ(enc[i], p[i]) << p[i].name;
      EXPECT_NE(pred[i], p[i]) << p[i].name;
    } else {
      EXPECT_EQ(pred[i], p[i]) << p[i].name;
      EXPECT_NE(enc[i], p[i]) << p[i].name;
    }
  }
}

TEST(Network, MetaUpdateWithoutAdaptationIsAQueryStep) {
  const auto spec = tiny_arch();
  auto pool = tiny_pools(1).front();
  for (auto& x : pool.windows) x = data::normalize_window(x);
  const auto p = model::build(spec, 4);
  const auto ep = data::sample_episode(pool, 4, 2, 3, 1);
  const auto meta = fed::meta_update_predictor(spec, p, ep, 0.0, 0.2, ad::GradMode::second);
  const Tensor fq = model::features(spec, p, data::stack_signals(ep.query));
  const auto [e, pred] = model::split(p);
  const auto plain = fed::descend(pred, fed::head_loss(fq, data::labels_of(ep.query)), 0.2, 1);
  const auto [e2, pred2] = model::split(meta);
  for (std::size_t i = 0; i < plain.size(); ++i)
    for (std::size_t k = 0; k < plain[i].value.numel(); ++k) EXPECT_NEAR(pred2[i].value[k], plain[i].value[k], 1e-15);
}

// ---- MAML on the scalar quadratic ----

TEST(Maml, ClosedFormMetaGradient) {
  Rng rng(77);
  for (int i = 0; i < 100; ++i) {
    const double c = rng.uniform(0.1, 3.0), m = rng.uniform(-2, 2), alpha = rng.uniform(0.0, 0.5),
                 w = rng.uniform(-2, 2);
    const double adapted = w - alpha * c * (w - m);
    const auto second = fed::maml_step(scalar_set(w), quadratic(c, m), quadratic(c, m), alpha, 1.0, ad::GradMode::second);
    const auto first = fed::maml_step(scalar_set(w), quadratic(c, m), quadratic(c, m), alpha, 1.0, ad::GradMode::first);
    EXPECT_NEAR(w - second[0].value.item(), c * (adapted - m) * (1 - alpha * c), 1e-10);
    EXPECT_NEAR(w - first[0].value.item(), c * (adapted - m), 1e-10);
    if (alpha * c != 0.0 && adapted != m) {
      EXPECT_NE(second, first);
    }
  }
}

// ---- aggregation ----

TEST(Aggregate, Examples) {
  std::vector<std::pair<ParamSet, std::size_t>> two{{scalar_set(0), 5}, {scalar_set(2), 5}};
  EXPECT_EQ(fed::aggregate(two)[0].value.item(), 1.0);
  std::vector<std::pair<ParamSet, std::size_t>> weighted{{scalar_set(0), 1}, {scalar_set(4), 3}};
  EXPECT_EQ(fed::aggregate(weighted)[0].value.item(), 3.0);
  const auto p = random_set(3);
  std::vector<std::pair<ParamSet, std::size_t>> one{{p, 7}};
  EXPECT_EQ(fed::aggregate(one), p);
  std::vector<std::pair<ParamSet, std::size_t>> same{{p, 2}, {p, 2}, {p, 2}};
  EXPECT_EQ(fed::aggregate(same), p);
}

TEST(Aggregate, EqualWeightsGiveTheMeanWithinTheHull) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.below(6);
    std::vector<std::pair<ParamSet, std::size_t>> models;
    for (std::size_t u = 0; u < k; ++u) models.emplace_back(random_set(rng.next()), 10);
    const auto out = fed::aggregate(models);
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t e = 0; e < out[i].value.numel(); ++e) {
        double mean = 0, lo = INFINITY, hi = -INFINITY;
        for (const auto& [m, c] : models) {
          mean += m[i].value[e] / static_cast<double>(k);
          lo = std::min(lo, m[i].value[e]);
          hi = std::max(hi, m[i].value[e]);
        }
        ASSERT_NEAR(out[i].value[e], mean, 1e-12);
        ASSERT_GE(out[i].value[e], lo);
        ASSERT_LE(out[i].value[e], hi);
      }
  }
}

TEST(Aggregate, Errors) {
  EXPECT_THROW(fed::aggregate({}), Error);
  std::vector<std::pair<ParamSet, std::size_t>> mixed{{scalar_set(0), 1}, {random_set(1), 1}};
  EXPECT_THROW(fed::aggregate(mixed), Error);
  std::vector<std::pair<ParamSet, std::size_t>> empty_count{{scalar_set(0), 0}};
  EXPECT_THROW(fed::aggregate(empty_count), Error);
}

// ---- hyperparameters ----

TEST(HyperParams, Validation) {
  HyperParams hp;
  EXPECT_NO_THROW(hp.validate());
  EXPECT_NO_THROW(all_zero_rates(hp).validate());
  hp.delta = 1e6;
  EXPECT_NO_THROW(hp.validate());
  for (double HyperParams::*field : {&HyperParams::alpha, &HyperParams::beta, &HyperParams::gamma, &HyperParams::eta,
                                     &HyperParams::mu, &HyperParams::local_lr}) {
    HyperParams bad;
    bad.*field = 1.5;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad.*field = -0.1;
    EXPECT_THROW(bad.validate(), ConfigError);
  }
  HyperParams bad;
  bad.delta = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = HyperParams{};
  bad.encoder_steps = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Methods, NamesRoundTrip) {
  for (Method m : fed::all_methods()) EXPECT_EQ(fed::parse_method(fed::to_string(m)), m);
  EXPECT_THROW(fed::parse_method("FedSGD"), ConfigError);
  EXPECT_EQ(fed::training_family(Method::fedprox_ft), Method::fedprox);
}

// ---- rounds ----

TEST(Rounds, ZeroRatesKeepTheGlobalModel) {
  for (Method m : fed::all_methods()) {
    auto cfg = tiny_federation(m);
    cfg.round.hp = all_zero_rates(cfg.round.hp);
    auto clients = fed::make_clients(cfg, tiny_pools(3), tiny_pools(1, 9));
    const fed::GlobalState s0{0, fed::initial_model(cfg)};
    const auto s1 = fed::run_round(s0, clients, cfg.round);
    EXPECT_EQ(s1.global_params, s0.global_params) << fed::to_string(m);
    EXPECT_EQ(s1.round, 1u);
  }
}

TEST(Rounds, SingleTrainingClientIsTheAggregate) {
  auto cfg = tiny_federation(Method::refml_no_ai);
  cfg.round.hp = all_zero_rates(cfg.round.hp);
  cfg.round.hp.eta = 0.1;
  auto clients = fed::make_clients(cfg, tiny_pools(1), {});
  const fed::GlobalState s0{0, fed::initial_model(cfg)};
  const auto s1 = fed::run_round(s0, clients, cfg.round);
  EXPECT_EQ(s1.global_params, clients[0].local_params);
  EXPECT_NE(s1.global_params, s0.global_params);
}

TEST(Rounds, TestingClientsNeverReachTheGlobalModel) {
  for (Method m : {Method::refml, Method::refml_no_ai, Method::fedavg, Method::fedprox}) {
    const auto cfg = tiny_federation(m, 3);
    auto with = fed::make_clients(cfg, tiny_pools(3), tiny_pools(2, 9));
    auto without = fed::make_clients(cfg, tiny_pools(3), {});
    fed::GlobalState a{0, fed::initial_model(cfg)}, b = a;
    for (int t = 0; t < 3; ++t) {
      a = fed::run_round(a, with, cfg.round);
      b = fed::run_round(b, without, cfg.round);
    }
    EXPECT_EQ(a.global_params, b.global_params) << fed::to_string(m);
    EXPECT_NE(a.global_params, fed::initial_model(cfg));
  }
}

TEST(Rounds, ParallelClientsAreBitIdentical) {
  for (Method m : {Method::refml, Method::fedprox, Method::local}) {
    auto serial = tiny_federation(m, 2), parallel = serial;
    parallel.round.jobs = 4;
    const auto a = fed::run_experiment(serial, tiny_pools(3), tiny_pools(2, 9));
    const auto b = fed::run_experiment(parallel, tiny_pools(3), tiny_pools(2, 9));
    EXPECT_EQ(a.global_params, b.global_params);
    EXPECT_EQ(a.testing_models, b.testing_models);
    EXPECT_EQ(a.accuracy, b.accuracy);
  }
}

TEST(Rounds, InterpolationWeightsStayInRangeDuringTraining) {
  auto cfg = tiny_federation(Method::refml, 1);
  cfg.round.hp.delta = 1e9;
  auto clients = fed::make_clients(cfg, tiny_pools(2), tiny_pools(1, 9));
  fed::GlobalState s{0, fed::initial_model(cfg)};
  for (int t = 0; t < 3; ++t) {
    s = fed::run_round(s, clients, cfg.round);
    for (const auto& c : clients) ASSERT_TRUE(c.interp.in_unit_interval());
  }
}

// ---- experiments ----

TEST(Experiment, NoRoundsEvaluatesTheInitialModel) {
  const auto testing = tiny_pools(2, 9);
  for (Method m : fed::all_methods()) {
    const auto cfg = tiny_federation(m, 0);
    const auto r = fed::run_experiment(cfg, tiny_pools(2), testing);
    const auto w0 = fed::initial_model(cfg);
    const auto clients = fed::make_clients(cfg, tiny_pools(2), testing);
    ASSERT_EQ(r.accuracy.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_EQ(r.testing_models[i], w0);
      EXPECT_EQ(r.accuracy[i], eval::accuracy(cfg.round.arch, w0, clients[2 + i].query));
    }
  }
}

TEST(Experiment, Deterministic) {
  const auto cfg = tiny_federation(Method::refml, 2);
  const auto a = fed::run_experiment(cfg, tiny_pools(2), tiny_pools(1, 9));
  const auto b = fed::run_experiment(cfg, tiny_pools(2), tiny_pools(1, 9));
  EXPECT_EQ(a.global_params, b.global_params);
  EXPECT_EQ(a.accuracy, b.accuracy);
}

TEST(Experiment, SharedFamilyMatchesSeparateRuns) {
  const auto cfg = tiny_federation(Method::fedavg, 2);
  const Method both[] = {Method::fedavg, Method::fedavg_ft};
  const auto shared = fed::run_experiments(cfg, tiny_pools(2), tiny_pools(1, 9), both);
  auto ft = cfg;
  ft.round.method = Method::fedavg_ft;
  EXPECT_EQ(shared[0].accuracy, fed::run_experiment(cfg, tiny_pools(2), tiny_pools(1, 9)).accuracy);
  EXPECT_EQ(shared[1].testing_models, fed::run_experiment(ft, tiny_pools(2), tiny_pools(1, 9)).testing_models);
  const Method mixed[] = {Method::fedavg, Method::refml};
  EXPECT_THROW(fed::run_experiments(cfg, tiny_pools(2), tiny_pools(1, 9), mixed), ConfigError);
}

TEST(Experiment, FineTunedBaselinesDifferFromPlainOnes) {
  const auto cfg = tiny_federation(Method::fedprox, 2);
  const Method both[] = {Method::fedprox, Method::fedprox_ft};
  const auto r = fed::run_experiments(cfg, tiny_pools(2), tiny_pools(1, 9), both);
  EXPECT_EQ(r[0].testing_models[0], r[0].global_params);
  EXPECT_NE(r[1].testing_models[0], r[1].global_params);
}

TEST(Experiment, ClientsGetKPlusQWindowsPerClass) {
  const auto cfg = tiny_federation(Method::refml, 1);
  const auto clients = fed::make_clients(cfg, tiny_pools(2), tiny_pools(1, 9));
  ASSERT_EQ(clients.size(), 3u);
  for (const auto& c : clients)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(c.dataset.count(k), 5u);
  EXPECT_EQ(clients[2].support.size(), 8u);
  EXPECT_EQ(clients[2].query.size(), 12u);
  EXPECT_TRUE(clients[0].support.empty());
}

TEST(Experiment, ConfigErrors) {
  auto cfg = tiny_federation(Method::refml, 1);
  EXPECT_THROW(fed::run_experiment(cfg, tiny_pools(2), {}), ConfigError);
  EXPECT_THROW(fed::run_experiment(cfg, {}, tiny_pools(1)), ConfigError);
  cfg.round.hp.alpha = 2;
  EXPECT_THROW(fed::run_experiment(cfg, tiny_pools(2), tiny_pools(1)), ConfigError);
}
