#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridlearn/acopf.hpp"
#include "gridlearn/model.hpp"
#include "gridlearn/trainer.hpp"

// Decoder-only UC-ACOPF fine-tuning with hard commitment coupling, and the
// checks that go with it (feasibility scaling in the penalty weight and the
// constructed-multiplier stationarity identity).
namespace gridlearn::consensus {

using ad::Tensor;
using ad::Var;

/// A caller broke a precondition that is part of the method, e.g. asked to
/// fine-tune with a trainable encoder.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// p_eff = u ⊙ p_ac. Exact zero wherever u is zero.
Var couple(Var u_hat, Var p_ac);
Tensor couple(const Tensor& u_hat, const Tensor& p_ac);

/// Σ (p_uc - p_eff)².
Var consensus_loss(Var p_uc, Var p_eff);
double consensus_loss(const Tensor& p_uc, const Tensor& p_eff);

/// Frozen embeddings for one case and demand trajectory. The encoder is run
/// once; fine-tuning only ever touches the decoders.
struct Problem {
  std::shared_ptr<const grid::GridCase> grid;
  std::shared_ptr<const grid::Admittance> admittance;
  grid::DemandSeries demand;
  Tensor h_opf;
  Tensor h_uc;
};
Problem make_problem(const grid::GridCase& c, const grid::DemandSeries& demand, const model::ParamStore& params);

struct CoupledVars {
  Var u_hat, p_uc, p_ac, p_eff;  // T x G
  std::vector<acopf::PointVars> points;  // per t; pg is replaced by p_eff[t]
};

struct CoupledOutput {
  Tensor u_hat, p_uc, p_ac, p_eff;
  std::vector<acopf::OperatingPoint> points;  // per t, pg = p_eff[t]
};

/// UC head and OPF head on the frozen embeddings. The OPF head sees one
/// embedding, so its point is the same at every t; p_ac repeats its pg.
CoupledVars forward(model::Binder& b, const Problem& pr);
CoupledOutput predict(const Problem& pr, const model::ParamStore& params);

/// Constraint residuals written as c <= 0, flattened into column vectors.
/// Equalities appear twice (h and -h) so Σ max(0, c)² counts them as h².
struct Family {
  std::string name;
  std::size_t begin = 0;
  std::size_t count = 0;
};
struct ConstraintVars {
  Var r;  // consensus residual p_uc - p_eff, flattened
  Var c_uc;
  Var c_opf;
  std::vector<Family> uc_families;  // capacity, ramp
  std::vector<Family> opf_families;  // balance_p, balance_q, thermal
};
ConstraintVars constraints(ad::Tape& t, const grid::GridCase& c, const grid::Admittance& y,
                           const grid::DemandSeries& demand, const CoupledVars& x);

struct Breakdown {
  double total = 0.0;
  double consensus = 0.0;
  double phys_uc = 0.0;  // Σ max(0, c_uc)²
  double phys_opf = 0.0;  // Σ max(0, c_opf)²
  std::map<std::string, double> hinge_sq;  // per family
  double consensus_residual_norm = 0.0;
  double hinge_violation_sq() const { return phys_uc + phys_opf; }
};

/// consensus + λ_opf·phys_opf + λ_uc·phys_uc on the coupled dispatch.
Var ucacopf_objective(const ConstraintVars& cv, const train::LossWeights& w);
Breakdown ucacopf_objective(const grid::GridCase& c, const grid::Admittance& y, const grid::DemandSeries& demand,
                            const CoupledOutput& out, const train::LossWeights& w);
Breakdown ucacopf_objective(const Problem& pr, const model::ParamStore& params, const train::LossWeights& w);

/// Objective gradient with respect to the trainable (decoder) parameters.
struct Evaluation {
  Breakdown parts;
  ad::Gradients grads;
  double grad_norm = 0.0;
};
Evaluation evaluate(const Problem& pr, const model::ParamStore& params, const train::LossWeights& w);

struct StationarityReport {
  double eps = 0.0;
  double objective_grad_norm = 0.0;
  double eta_tilde = 0.0;  // objective_grad_norm + 1e-8
  double alignment_residual = 0.0;  // ||r||
  double stationarity_residual = 0.0;  // ||∇rᵀν + ∇c_ucᵀμ_uc + ∇c_opfᵀμ_opf||
  double complementarity = 0.0;  // Σ μ·max(0, c)
  bool alignment_ok = false;
  bool stationarity_ok = false;
  bool complementarity_ok = false;

  bool passed() const { return alignment_ok && stationarity_ok && complementarity_ok; }
  /// |stationarity_residual - objective_grad_norm|; zero up to rounding.
  double identity_gap() const;
};

/// Builds ν = 2r, μ = 2λ·max(0, c) and checks the three conditions.
StationarityReport consensus_stationarity_check(const Problem& pr, const model::ParamStore& params,
                                                const train::LossWeights& w, double eps);

enum class Optimizer { Adam, GradientDescent, Lbfgs };

struct FinetuneConfig {
  double learning_rate = 5e-5;
  std::size_t max_epochs = 1000;
  double eta_stop = 1e-3;
  /// Adam at the reduced training rate by default. Plain gradient steps are
  /// kept for comparison; L-BFGS reaches small gradient norms quickly in the
  /// theory runs.
  Optimizer optimizer = Optimizer::Adam;
  double consensus_eps = 1e-2;

  void validate() const;
};

struct TheoryReport {
  double lambda_opf = 0.0;
  double lambda_uc = 0.0;
  double eta_stop = 0.0;
  double eta = 0.0;  // achieved decoder-gradient norm
  bool reached = false;
  std::size_t steps = 0;
  Breakdown objective;
  StationarityReport stationarity;
};

struct FinetuneResult {
  model::ParamStore params;
  TheoryReport report;
  std::vector<double> trace;  // objective before each step
};

/// Throws ContractError unless the encoder groups are frozen.
FinetuneResult finetune(const grid::GridCase& c, const grid::DemandSeries& demand, const model::ParamStore& params,
                        const train::LossWeights& w, const FinetuneConfig& config);

struct SweepRow {
  double lambda = 0.0;
  TheoryReport report;
  bool flagged = false;  // did not reach eta_stop; excluded from the fit
};
struct SweepResult {
  std::vector<SweepRow> rows;
  double slope = 0.0;  // of log violation against log(1/λ); NaN if fewer than two usable rows
  std::size_t fitted = 0;
};

/// Fine-tunes once per λ (λ_uc = λ_opf = λ) from the same parameters.
SweepResult verify_feasibility_bound(const grid::GridCase& c, const grid::DemandSeries& demand,
                                     const model::ParamStore& params, const std::vector<double>& lambdas,
                                     const FinetuneConfig& config, std::size_t threads = 1);

std::string theory_report_csv(const std::vector<TheoryReport>& reports);
std::string sweep_csv(const SweepResult& s);
/// Provenance object stored with fine-tuned checkpoints.
std::string provenance_json(const model::ParamStore& parent, const TheoryReport& r);

}  // namespace gridlearn::consensus
