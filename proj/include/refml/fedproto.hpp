#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "refml/autodiff.hpp"
#include "refml/data.hpp"
#include "refml/model.hpp"

namespace refml::fed {

using model::ParamSet;

struct HyperParams {
  double alpha = 0.1;   // fast adaptation on the support set
  double beta = 0.05;   // meta update of the predictor
  double gamma = 0.05;  // testing-client fine-tuning
  double delta = 0.01;  // interpolation weights
  double eta = 0.05;    // encoder update
  double mu = 0.01;     // FedProx proximal coefficient
  double local_lr = 0.05;  // FedAvg / FedProx local training
  std::size_t encoder_steps = 5;
  std::size_t finetune_steps = 10;
  std::size_t local_steps = 5;
  std::size_t rounds = 50;
  ad::GradMode grad_mode = ad::GradMode::second;

  // Rates must lie in [0, 1]; zero switches a stage off.
  void validate() const;
};

enum class Method { refml, refml_no_ai, fedavg, fedavg_ft, fedprox, fedprox_ft, local };

std::string_view to_string(Method m);
Method parse_method(std::string_view text);
const std::vector<Method>& all_methods();

// Per-element blend weight of the global model; 1 - a goes to the local one.
// Every element stays in [0, 1].
struct InterpolationWeights {
  ParamSet weights;

  static InterpolationWeights ones(const ParamSet& layout);
  bool in_unit_interval() const;
};

// W = A * global + (1 - A) * local, elementwise.
ParamSet interpolate(const InterpolationWeights& a, const ParamSet& global, const ParamSet& local);

// Scalar loss from parameter nodes given in ParamSet order.
using ParamLoss = std::function<ad::NodeId(ad::Graph&, std::span<const ad::NodeId>)>;

// Mean cross entropy of the full network on `windows`.
ParamLoss cross_entropy_loss(const model::ArchitectureSpec& spec, const std::vector<data::LabeledWindow>& windows);

// Mean cross entropy of the predictor head on fixed encoder features.
ParamLoss head_loss(const Tensor& features, const std::vector<std::size_t>& labels);

// Plain full-batch gradient descent; only entries whose segment is listed are
// updated, the rest are carried over bit-for-bit.
ParamSet descend(const ParamSet& params, const ParamLoss& loss, double lr, std::size_t steps,
                 std::span<const model::Segment> segments = {});

// Gradient descent on loss + mu/2 * |W - anchor|^2.
ParamSet proximal_descend(const ParamSet& params, const ParamSet& anchor, const ParamLoss& loss, double lr, double mu,
                          std::size_t steps);

// One MAML step on every entry of `params`:
//   adapted = P - alpha * grad L_support(P)
//   P      <- P - beta  * grad_P L_query(adapted)
// In GradMode::second the outer gradient flows through the inner step.
ParamSet maml_step(const ParamSet& params, const ParamLoss& support, const ParamLoss& query, double alpha,
                   double beta, ad::GradMode mode);

struct Interpolated {
  ParamSet params;
  InterpolationWeights weights;
};

// One gradient step on the interpolation weights, evaluated at the blend with
// the previous weights, then the blend with the updated (clamped) weights.
Interpolated adaptive_interpolate(const ParamSet& local, const InterpolationWeights& previous, const ParamSet& global,
                                  const ParamLoss& loss, double delta);
Interpolated adaptive_interpolate(const model::ArchitectureSpec& spec, const ParamSet& local,
                                  const InterpolationWeights& previous, const ParamSet& global,
                                  const std::vector<data::LabeledWindow>& loss_data, double delta);

ParamSet update_encoder(const model::ArchitectureSpec& spec, const ParamSet& params,
                        const std::vector<data::LabeledWindow>& windows, double eta, std::size_t steps);

ParamSet meta_update_predictor(const model::ArchitectureSpec& spec, const ParamSet& params,
                               const data::Episode& episode, double alpha, double beta, ad::GradMode mode);

ParamSet fine_tune(const model::ArchitectureSpec& spec, const ParamSet& params,
                   const std::vector<data::LabeledWindow>& support, double gamma, std::size_t steps);

ParamSet fedavg_local(const model::ArchitectureSpec& spec, const ParamSet& params,
                      const std::vector<data::LabeledWindow>& windows, double lr, std::size_t steps);

ParamSet fedprox_local(const model::ArchitectureSpec& spec, const ParamSet& params, const ParamSet& global,
                       const std::vector<data::LabeledWindow>& windows, double lr, double mu, std::size_t steps);

// Sum of (count / total) * params in list order.
ParamSet aggregate(std::span<const std::pair<ParamSet, std::size_t>> models);

enum class Role { training, testing };

// Per-round support/query split for training clients: redrawn every round, or
// drawn once.
enum class EpisodeMode { resample, fixed };
EpisodeMode parse_episode_mode(std::string_view text);
std::string_view to_string(EpisodeMode mode);

struct ClientState {
  std::size_t id = 0;
  Role role = Role::training;
  // Training clients: the local dataset D_u (K+Q windows per class).
  // Testing clients: support followed by query.
  data::ClientDataset dataset;
  std::vector<data::LabeledWindow> support;  // testing clients only
  std::vector<data::LabeledWindow> query;    // testing clients only
  ParamSet local_params;
  InterpolationWeights interp;
  std::uint64_t seed = 0;
};

struct GlobalState {
  std::size_t round = 0;
  ParamSet global_params;
};

struct RoundSettings {
  model::ArchitectureSpec arch;
  HyperParams hp;
  Method method = Method::refml;
  std::size_t num_classes = 4;
  std::size_t shots = 1;
  std::size_t queries = 10;
  EpisodeMode episode_mode = EpisodeMode::resample;
  std::size_t jobs = 1;
};

// One communication round. Training clients update (in parallel, isolated
// RNG streams) and upload; testing clients update their local models; the
// server aggregates the training uploads in client-id order.
GlobalState run_round(const GlobalState& state, std::vector<ClientState>& clients, const RoundSettings& settings);

struct FederationConfig {
  RoundSettings round;
  std::uint64_t seed = 0;
};

// Sets up clients from per-condition pools: each training client keeps a
// fixed K+Q-per-class subset, each testing client a fixed support/query
// episode. Windows are z-scored. All clients start from W_0.
std::vector<ClientState> make_clients(const FederationConfig& cfg, const std::vector<data::ClientDataset>& training,
                                      const std::vector<data::ClientDataset>& testing);

ParamSet initial_model(const FederationConfig& cfg);

struct ExperimentResult {
  ParamSet global_params;                  // after the final aggregation
  std::vector<ParamSet> testing_models;    // the evaluated model per testing client
  std::vector<std::vector<data::LabeledWindow>> testing_queries;
  std::vector<double> accuracy;            // percent, per testing client
};

// The final model a testing client is evaluated with, given the finished
// federation (fine-tunes for the -FT baselines).
ParamSet evaluation_model(const RoundSettings& settings, const GlobalState& state, const ClientState& client);

// Runs hp.rounds rounds and evaluates every testing client on its query set.
ExperimentResult run_experiment(const FederationConfig& cfg, const std::vector<data::ClientDataset>& training,
                                const std::vector<data::ClientDataset>& testing);

// Methods whose rounds are identical and differ only in the final evaluation
// (X and X-FT) share a family.
Method training_family(Method m);

// One federation per call, evaluated under each of `methods`, which must all
// belong to the same training family; cfg.round.method is ignored. Results are
// identical to separate run_experiment calls.
std::vector<ExperimentResult> run_experiments(const FederationConfig& cfg,
                                              const std::vector<data::ClientDataset>& training,
                                              const std::vector<data::ClientDataset>& testing,
                                              std::span<const Method> methods);

}  // namespace refml::fed
