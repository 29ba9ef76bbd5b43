#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gridlearn/autodiff.hpp"
#include "gridlearn/dataset.hpp"
#include "gridlearn/model.hpp"

namespace gridlearn::train {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double alpha = 1.0;  // supervised OPF
  double beta = 1.0;  // supervised UC
  double gamma = 0.1;  // physics OPF
  double delta = 0.1;  // physics UC
  double lambda_opf = 10.0;  // UC-ACOPF fine-tuning
  double lambda_uc = 10.0;

  void validate() const;
};

struct TrainConfig {
  double learning_rate = 5e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 32;
  double grad_clip = 1.0;
  std::size_t epochs = 50;
  bool gradnorm_enabled = false;
  double gradnorm_alpha = 1.5;
  double gradnorm_lr = 0.025;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  /// Evaluate training-set metrics every n epochs (0 = never).
  std::size_t snapshot_every = 0;

  void validate() const;
};

struct LossTerms {
  double sup_opf = 0.0;
  double sup_uc = 0.0;
  double phys_opf = 0.0;
  double phys_uc = 0.0;
  std::size_t n_opf = 0;
  std::size_t n_uc = 0;
};

struct LossValue {
  double total = 0.0;
  LossTerms terms;
};

/// alpha·sup_opf + beta·sup_uc + gamma·phys_opf + delta·phys_uc. Each term
/// is the mean over the batch instances of its task; `task_weights` scale
/// the OPF and UC halves (GradNorm weights, 1 when unused).
ad::Var total_loss(model::Binder& b, const std::vector<const data::Instance*>& batch, const LossWeights& w,
                   LossTerms* terms = nullptr, const std::array<double, 2>& task_weights = {1.0, 1.0});
LossValue total_loss(const std::vector<const data::Instance*>& batch, const model::ParamStore& params,
                     const LossWeights& w);

struct GradNormState {
  std::vector<double> weights = {1.0, 1.0};
  std::vector<double> initial_losses;  // empty until recorded
};

/// One GradNorm step. `grad_norms[k]` is ||∇_W L_k|| on the shared layer W
/// (unweighted). Targets are held constant; weights are renormalized to sum
/// to the task count.
void gradnorm_update(const std::vector<double>& task_losses, const std::vector<double>& grad_norms,
                     GradNormState& state, double alpha, double lr);

/// Parameters GradNorm measures gradients on: the output projections of
/// the last message-passing layer.
std::vector<std::string> shared_last_layer(const model::ParamStore& p);

struct EpochRecord {
  std::size_t epoch = 0;
  double total = 0.0;
  LossTerms terms;
  double w_opf = 1.0;
  double w_uc = 1.0;
  double grad_norm_mean = 0.0;  // before clipping
  double grad_norm_max = 0.0;
  double clipped_norm_max = 0.0;
  std::size_t steps = 0;
  std::map<std::string, double> snapshot;  // training-set metrics when taken
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::string csv() const;
};

struct TrainResult {
  model::ParamStore params;
  TrainLog log;
  bool aborted = false;
  std::string message;
};

/// Adam (0.9, 0.999, 1e-8) with decoupled weight decay scaled by the learning
/// rate and global L2 clipping. Frozen groups are never touched. On a
/// non-finite loss training stops and the last finite parameters are returned.
TrainResult train(const std::vector<data::Instance>& dataset, model::ParamStore params, const TrainConfig& config,
                  const LossWeights& weights);

/// Round-robin OPF/UC interleaving of a per-epoch shuffle, cut into batches.
std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<data::Instance>& dataset, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch);

/// Training-set metric means: acc, mse_bus and friends.
std::map<std::string, double> snapshot_metrics(const std::vector<data::Instance>& dataset,
                                               const model::ParamStore& params);

/// Global L2 norm of a gradient map.
double grad_norm(const ad::Gradients& g);

}  // namespace gridlearn::train
