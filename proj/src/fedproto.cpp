#include "refml/fedproto.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "refml/error.hpp"
#include "refml/metrics.hpp"
#include "refml/parallel.hpp"
#include "refml/rng.hpp"

namespace refml::fed {

using model::Segment;

void HyperParams::validate() const {
  const std::pair<const char*, double> rates[] = {{"alpha", alpha}, {"beta", beta}, {"gamma", gamma},
                                                  {"eta", eta},     {"mu", mu},     {"local_lr", local_lr}};
  for (const auto& [name, v] : rates) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ConfigError(std::string("hyperparameter ") + name + " must lie in [0, 1], got " + std::to_string(v));
    }
  }
  // Per-element interpolation gradients are tiny, so delta is not capped; the
  // weights are clamped to [0, 1] after every step anyway.
  if (!(delta >= 0.0 && std::isfinite(delta))) {
    throw ConfigError("hyperparameter delta must be finite and non-negative, got " + std::to_string(delta));
  }
  if (encoder_steps == 0) throw ConfigError("hyperparameter encoder_steps must be positive");
  if (finetune_steps == 0) throw ConfigError("hyperparameter finetune_steps must be positive");
  if (local_steps == 0) throw ConfigError("hyperparameter local_steps must be positive");
}

std::string_view to_string(Method m) {
  switch (m) {
    case Method::refml: return "REFML";
    case Method::refml_no_ai: return "REFML-no-AI";
    case Method::fedavg: return "FedAvg";
    case Method::fedavg_ft: return "FedAvg-FT";
    case Method::fedprox: return "FedProx";
    case Method::fedprox_ft: return "FedProx-FT";
    case Method::local: return "Local";
  }
  return "?";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods{Method::fedavg,  Method::fedavg_ft,   Method::fedprox, Method::fedprox_ft,
                                           Method::refml,   Method::refml_no_ai, Method::local};
  return methods;
}

Method parse_method(std::string_view text) {
  for (Method m : all_methods())
    if (to_string(m) == text) return m;
  throw ConfigError("unknown method '" + std::string(text) +
                    "' (expected FedAvg, FedAvg-FT, FedProx, FedProx-FT, REFML, REFML-no-AI or Local)");
}

EpisodeMode parse_episode_mode(std::string_view text) {
  if (text == "resample") return EpisodeMode::resample;
  if (text == "fixed") return EpisodeMode::fixed;
  throw ConfigError("episode mode must be 'resample' or 'fixed', got '" + std::string(text) + "'");
}

std::string_view to_string(EpisodeMode mode) { return mode == EpisodeMode::resample ? "resample" : "fixed"; }

InterpolationWeights InterpolationWeights::ones(const ParamSet& layout) {
  return InterpolationWeights{model::zeros_like(layout, 1.0)};
}

bool InterpolationWeights::in_unit_interval() const {
  for (const auto& e : weights.entries())
    for (double v : e.value.data())
      if (!(v >= 0.0 && v <= 1.0)) return false;
  return true;
}

ParamSet interpolate(const InterpolationWeights& a, const ParamSet& global, const ParamSet& local) {
  global.require_same_layout(local, "interpolate");
  global.require_same_layout(a.weights, "interpolate");
  ParamSet out = global;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto o = out[i].value.data();
    auto w = a.weights[i].value.data();
    auto g = global[i].value.data();
    auto l = local[i].value.data();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = w[k] * g[k] + (1.0 - w[k]) * l[k];
  }
  return out;
}

ParamLoss cross_entropy_loss(const model::ArchitectureSpec& spec, const std::vector<data::LabeledWindow>& windows) {
  return [spec, batch = data::stack_signals(windows), labels = data::labels_of(windows)](
             ad::Graph& g, std::span<const ad::NodeId> params) {
    const auto head = model::network(g, spec, params, g.input(batch));
    return g.softmax_cross_entropy(head.logits, labels);
  };
}

ParamLoss head_loss(const Tensor& features, const std::vector<std::size_t>& labels) {
  return [features, labels](ad::Graph& g, std::span<const ad::NodeId> params) {
    const auto head = model::predict(g, params, g.input(features));
    return g.softmax_cross_entropy(head.logits, labels);
  };
}

namespace {

void require_finite(const ad::Graph& g, ad::NodeId loss, std::string_view where) {
  if (!std::isfinite(g.value(loss).item())) throw NumericError(std::string(where) + ": non-finite loss");
}

void apply_step(Tensor& target, const Tensor& grad, double lr) {
  auto t = target.data();
  auto d = grad.data();
  for (std::size_t k = 0; k < t.size(); ++k) t[k] -= lr * d[k];
}

}  // namespace

ParamSet descend(const ParamSet& params, const ParamLoss& loss, double lr, std::size_t steps,
                 std::span<const Segment> segments) {
  ParamSet p = params;
  if (lr == 0.0) return p;
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (segments.empty() || std::find(segments.begin(), segments.end(), p[i].segment) != segments.end()) {
      chosen.push_back(i);
    }
  }
  if (chosen.empty()) return p;
  for (std::size_t s = 0; s < steps; ++s) {
    ad::Graph g;
    const auto ids = model::add_inputs(g, p);
    const ad::NodeId l = loss(g, ids);
    require_finite(g, l, "descend");
    std::vector<ad::NodeId> wrt;
    for (std::size_t i : chosen) wrt.push_back(ids[i]);
    const auto grads = g.backward(l, wrt);
    for (std::size_t j = 0; j < chosen.size(); ++j) apply_step(p[chosen[j]].value, grads[j], lr);
  }
  return p;
}

ParamSet proximal_descend(const ParamSet& params, const ParamSet& anchor, const ParamLoss& loss, double lr, double mu,
                          std::size_t steps) {
  if (mu < 0.0) throw ConfigError("proximal_descend: mu must be non-negative");
  params.require_same_layout(anchor, "proximal_descend");
  if (mu == 0.0) return descend(params, loss, lr, steps);
  const ParamLoss prox = [&](ad::Graph& g, std::span<const ad::NodeId> ids) {
    ad::NodeId total = loss(g, ids);
    std::optional<ad::NodeId> penalty;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const ad::NodeId d = g.sub(ids[i], g.input(anchor[i].value));
      const ad::NodeId sq = g.sum(g.mul(d, d));
      penalty = penalty ? g.add(*penalty, sq) : sq;
    }
    return g.add(total, g.scale(*penalty, 0.5 * mu));
  };
  return descend(params, prox, lr, steps);
}

ParamSet maml_step(const ParamSet& params, const ParamLoss& support, const ParamLoss& query, double alpha,
                   double beta, ad::GradMode mode) {
  if (beta == 0.0) return params;
  ad::Graph g;
  const auto ids = model::add_inputs(g, params);
  const ad::NodeId ls = support(g, ids);
  require_finite(g, ls, "maml_step (support)");
  const auto inner = g.grad(ls, ids, mode);
  std::vector<ad::NodeId> adapted;
  adapted.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) adapted.push_back(g.sub(ids[i], g.scale(inner[i], alpha)));
  const ad::NodeId lq = query(g, adapted);
  require_finite(g, lq, "maml_step (query)");
  const auto meta = g.backward(lq, ids);
  ParamSet out = params;
  for (std::size_t i = 0; i < out.size(); ++i) apply_step(out[i].value, meta[i], beta);
  return out;
}

Interpolated adaptive_interpolate(const ParamSet& local, const InterpolationWeights& previous, const ParamSet& global,
                                  const ParamLoss& loss, double delta) {
  InterpolationWeights a = previous;
  if (delta != 0.0) {
    const ParamSet trial = interpolate(previous, global, local);
    ad::Graph g;
    const auto ids = model::add_inputs(g, trial);
    const ad::NodeId l = loss(g, ids);
    require_finite(g, l, "adaptive_interpolate");
    const auto grads = g.backward(l, ids);
    // d trial / d a = global - local, elementwise.
    for (std::size_t i = 0; i < a.weights.size(); ++i) {
      auto w = a.weights[i].value.data();
      auto gw = grads[i].data();
      auto gv = global[i].value.data();
      auto lv = local[i].value.data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        w[k] = std::clamp(w[k] - delta * gw[k] * (gv[k] - lv[k]), 0.0, 1.0);
      }
    }
  }
  ParamSet blended = interpolate(a, global, local);
  return {std::move(blended), std::move(a)};
}

Interpolated adaptive_interpolate(const model::ArchitectureSpec& spec, const ParamSet& local,
                                  const InterpolationWeights& previous, const ParamSet& global,
                                  const std::vector<data::LabeledWindow>& loss_data, double delta) {
  return adaptive_interpolate(local, previous, global, cross_entropy_loss(spec, loss_data), delta);
}

ParamSet update_encoder(const model::ArchitectureSpec& spec, const ParamSet& params,
                        const std::vector<data::LabeledWindow>& windows, double eta, std::size_t steps) {
  if (steps == 0) throw ConfigError("update_encoder: steps must be positive");
  const Segment encoder[] = {Segment::encoder};
  return descend(params, cross_entropy_loss(spec, windows), eta, steps, encoder);
}

ParamSet meta_update_predictor(const model::ArchitectureSpec& spec, const ParamSet& params,
                               const data::Episode& episode, double alpha, double beta, ad::GradMode mode) {
  if (beta == 0.0) return params;
  auto [encoder, predictor] = model::split(params);
  if (predictor.empty()) throw ShapeError("meta_update_predictor: no predictor parameters");
  const Tensor fs = model::features(spec, params, data::stack_signals(episode.support));
  const Tensor fq = model::features(spec, params, data::stack_signals(episode.query));
  ParamSet updated = maml_step(predictor, head_loss(fs, data::labels_of(episode.support)),
                               head_loss(fq, data::labels_of(episode.query)), alpha, beta, mode);
  return model::merge(encoder, updated);
}

ParamSet fine_tune(const model::ArchitectureSpec& spec, const ParamSet& params,
                   const std::vector<data::LabeledWindow>& support, double gamma, std::size_t steps) {
  if (steps == 0) throw ConfigError("fine_tune: steps must be positive");
  return descend(params, cross_entropy_loss(spec, support), gamma, steps);
}

ParamSet fedavg_local(const model::ArchitectureSpec& spec, const ParamSet& params,
                      const std::vector<data::LabeledWindow>& windows, double lr, std::size_t steps) {
  return descend(params, cross_entropy_loss(spec, windows), lr, steps);
}

ParamSet fedprox_local(const model::ArchitectureSpec& spec, const ParamSet& params, const ParamSet& global,
                       const std::vector<data::LabeledWindow>& windows, double lr, double mu, std::size_t steps) {
  return proximal_descend(params, global, cross_entropy_loss(spec, windows), lr, mu, steps);
}

ParamSet aggregate(std::span<const std::pair<ParamSet, std::size_t>> models) {
  if (models.empty()) throw Error("aggregate: no client models");
  std::size_t total = 0;
  for (const auto& [params, count] : models) {
    if (count == 0) throw Error("aggregate: client sample count must be positive");
    params.require_same_layout(models.front().first, "aggregate");
    total += count;
  }
  // W_1 + sum_{u>1} (c_u / n) (W_u - W_1) equals the weighted mean, but is
  // exact when every upload is identical (e.g. all rates zero). Clamping to
  // the clients' elementwise range keeps rounding inside the convex hull.
  const double n = static_cast<double>(total);
  ParamSet out = models.front().first;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto o = out[i].value.data();
    const auto first = models.front().first[i].value.data();
    for (std::size_t m = 1; m < models.size(); ++m) {
      const double w = static_cast<double>(models[m].second) / n;
      const auto x = models[m].first[i].value.data();
      for (std::size_t k = 0; k < o.size(); ++k) o[k] += w * (x[k] - first[k]);
    }
    for (std::size_t k = 0; k < o.size(); ++k) {
      double lo = first[k], hi = first[k];
      for (std::size_t m = 1; m < models.size(); ++m) {
        lo = std::min(lo, models[m].first[i].value[k]);
        hi = std::max(hi, models[m].first[i].value[k]);
      }
      o[k] = std::clamp(o[k], lo, hi);
    }
  }
  return out;
}

// ---- rounds ----

namespace {

data::Episode training_episode(const ClientState& c, const RoundSettings& s, std::size_t round) {
  const std::uint64_t seed =
      s.episode_mode == EpisodeMode::resample ? Rng::derive({c.seed, round}).next() : Rng::derive({c.seed}).next();
  return data::sample_episode(c.dataset, s.num_classes, s.shots, s.queries, seed);
}

void training_step(ClientState& c, const ParamSet& global, const RoundSettings& s, std::size_t round) {
  const auto& hp = s.hp;
  switch (s.method) {
    case Method::refml:
    case Method::refml_no_ai: {
      ParamSet p = global;
      if (s.method == Method::refml) {
        auto blended = adaptive_interpolate(s.arch, c.local_params, c.interp, global, c.dataset.windows, hp.delta);
        c.interp = std::move(blended.weights);
        p = std::move(blended.params);
      }
      p = update_encoder(s.arch, p, c.dataset.windows, hp.eta, hp.encoder_steps);
      p = meta_update_predictor(s.arch, p, training_episode(c, s, round), hp.alpha, hp.beta, hp.grad_mode);
      c.local_params = std::move(p);
      break;
    }
    case Method::fedavg:
    case Method::fedavg_ft:
      c.local_params = fedavg_local(s.arch, global, c.dataset.windows, hp.local_lr, hp.local_steps);
      break;
    case Method::fedprox:
    case Method::fedprox_ft:
      c.local_params = fedprox_local(s.arch, global, global, c.dataset.windows, hp.local_lr, hp.mu, hp.local_steps);
      break;
    case Method::local:
      break;
  }
}

void testing_step(ClientState& c, const ParamSet& global, const RoundSettings& s) {
  const auto& hp = s.hp;
  switch (s.method) {
    case Method::refml: {
      auto blended = adaptive_interpolate(s.arch, c.local_params, c.interp, global, c.support, hp.delta);
      c.interp = std::move(blended.weights);
      c.local_params = fine_tune(s.arch, blended.params, c.support, hp.gamma, hp.finetune_steps);
      break;
    }
    case Method::refml_no_ai:
      c.local_params = fine_tune(s.arch, global, c.support, hp.gamma, hp.finetune_steps);
      break;
    case Method::local:
      c.local_params = fine_tune(s.arch, c.local_params, c.support, hp.gamma, hp.finetune_steps);
      break;
    default:
      // Baselines only fine-tune once, after the last round.
      break;
  }
}

}  // namespace

GlobalState run_round(const GlobalState& state, std::vector<ClientState>& clients, const RoundSettings& settings) {
  const std::size_t round = state.round + 1;
  const ParamSet& global = state.global_params;
  parallel_for(clients.size(), settings.jobs, [&](std::size_t i) {
    ClientState& c = clients[i];
    if (c.role == Role::training) {
      training_step(c, global, settings, round);
    } else {
      testing_step(c, global, settings);
    }
  });

  GlobalState next{round, global};
  if (settings.method == Method::local) return next;
  std::vector<const ClientState*> uploads;
  for (const auto& c : clients)
    if (c.role == Role::training) uploads.push_back(&c);
  std::sort(uploads.begin(), uploads.end(), [](const ClientState* a, const ClientState* b) { return a->id < b->id; });
  if (uploads.empty()) return next;
  std::vector<std::pair<ParamSet, std::size_t>> models;
  models.reserve(uploads.size());
  for (const ClientState* c : uploads) models.emplace_back(c->local_params, c->dataset.size());
  next.global_params = aggregate(models);
  return next;
}

ParamSet initial_model(const FederationConfig& cfg) {
  return model::build(cfg.round.arch, Rng::derive({cfg.seed, 0x1417}).next());
}

std::vector<ClientState> make_clients(const FederationConfig& cfg, const std::vector<data::ClientDataset>& training,
                                      const std::vector<data::ClientDataset>& testing) {
  const RoundSettings& s = cfg.round;
  const ParamSet w0 = initial_model(cfg);
  std::vector<ClientState> clients;
  std::size_t id = 0;
  auto make = [&](const data::ClientDataset& pool, Role role) {
    ClientState c;
    c.id = id++;
    c.role = role;
    c.seed = Rng::derive({cfg.seed, c.id, 0x5eed}).next();
    const auto ep =
        data::sample_episode(pool, s.num_classes, s.shots, s.queries, Rng::derive({cfg.seed, c.id, 0xda7a}).next());
    c.dataset.condition_id = pool.condition_id;
    for (const auto& w : ep.support) c.dataset.windows.push_back(data::normalize_window(w));
    for (const auto& w : ep.query) c.dataset.windows.push_back(data::normalize_window(w));
    if (role == Role::testing) {
      const std::size_t ns = ep.support.size();
      c.support.assign(c.dataset.windows.begin(), c.dataset.windows.begin() + static_cast<std::ptrdiff_t>(ns));
      c.query.assign(c.dataset.windows.begin() + static_cast<std::ptrdiff_t>(ns), c.dataset.windows.end());
    }
    c.local_params = w0;
    c.interp = InterpolationWeights::ones(w0);
    clients.push_back(std::move(c));
  };
  for (const auto& pool : training) make(pool, Role::training);
  for (const auto& pool : testing) make(pool, Role::testing);
  return clients;
}

ParamSet evaluation_model(const RoundSettings& settings, const GlobalState& state, const ClientState& client) {
  // Without rounds there is nothing to fine-tune after: everyone evaluates W_0.
  if (state.round == 0) return state.global_params;
  switch (settings.method) {
    case Method::refml:
    case Method::refml_no_ai:
    case Method::local:
      return client.local_params;
    case Method::fedavg:
    case Method::fedprox:
      return state.global_params;
    case Method::fedavg_ft:
    case Method::fedprox_ft:
      return fine_tune(settings.arch, state.global_params, client.support, settings.hp.gamma,
                       settings.hp.finetune_steps);
  }
  return state.global_params;
}

Method training_family(Method m) {
  switch (m) {
    case Method::fedavg_ft:
      return Method::fedavg;
    case Method::fedprox_ft:
      return Method::fedprox;
    default:
      return m;
  }
}

std::vector<ExperimentResult> run_experiments(const FederationConfig& cfg,
                                              const std::vector<data::ClientDataset>& training,
                                              const std::vector<data::ClientDataset>& testing,
                                              std::span<const Method> methods) {
  if (methods.empty()) throw ConfigError("run_experiments: no methods given");
  const Method family = training_family(methods.front());
  for (Method m : methods) {
    if (training_family(m) != family) {
      throw ConfigError("run_experiments: " + std::string(to_string(m)) + " does not share training with " +
                        std::string(to_string(methods.front())));
    }
  }
  RoundSettings s = cfg.round;
  s.method = family;
  s.hp.validate();
  s.arch.validate();
  if (testing.empty()) throw ConfigError("run_experiment: at least one testing client is required");
  if (training.empty() && family != Method::local) {
    throw ConfigError("run_experiment: federated methods need at least one training client");
  }
  FederationConfig fc = cfg;
  fc.round = s;
  std::vector<ClientState> clients = make_clients(fc, training, testing);
  GlobalState state{0, initial_model(fc)};
  for (std::size_t t = 0; t < s.hp.rounds; ++t) state = run_round(state, clients, s);

  std::vector<const ClientState*> testers;
  for (const auto& c : clients)
    if (c.role == Role::testing) testers.push_back(&c);
  std::vector<ExperimentResult> results;
  for (Method m : methods) {
    RoundSettings es = s;
    es.method = m;
    ExperimentResult result;
    result.global_params = state.global_params;
    result.testing_models.resize(testers.size());
    result.accuracy.resize(testers.size());
    parallel_for(testers.size(), s.jobs, [&](std::size_t i) {
      result.testing_models[i] = evaluation_model(es, state, *testers[i]);
      result.accuracy[i] = eval::accuracy(s.arch, result.testing_models[i], testers[i]->query);
    });
    for (const ClientState* c : testers) result.testing_queries.push_back(c->query);
    results.push_back(std::move(result));
  }
  return results;
}

ExperimentResult run_experiment(const FederationConfig& cfg, const std::vector<data::ClientDataset>& training,
                                const std::vector<data::ClientDataset>& testing) {
  const Method m = cfg.round.method;
  return std::move(run_experiments(cfg, training, testing, std::span<const Method>(&m, 1)).front());
}

}  // namespace refml::fed
