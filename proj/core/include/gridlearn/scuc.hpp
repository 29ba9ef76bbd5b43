#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "gridlearn/autodiff.hpp"
#include "gridlearn/grid.hpp"

namespace gridlearn::scuc {

using Matrix = std::vector<std::vector<double>>;  // [t][g]

/// Commitment and dispatch over a horizon. Dispatch is per-unit.
struct Schedule {
  std::size_t horizon = 0;
  Matrix u;
  Matrix p;
  Matrix v;  // optional startup indicators (empty when absent)
  Matrix w;  // optional shutdown indicators
  bool hard_binary = false;
};

void validate_schedule(const grid::GridCase& c, const Schedule& s);

/// Rounds u at 0.5 (ties up), marks the schedule hard-binary and derives v, w.
Schedule round_schedule(const grid::GridCase& c, const Schedule& s);

/// Startup/shutdown indicators implied by u and each unit's initial status.
void derive_transitions(const grid::GridCase& c, Schedule& s);

bool initially_on(const grid::Generator& g);

/// Shortfall (hours) of every run of `state` (1 = on, 0 = off) against the
/// required length, indexed by the run's first hour. Runs still open at the
/// horizon end count only when `strict_horizon` is set.
std::vector<double> min_run_violations(const grid::Generator& g, const std::vector<double>& u, double state,
                                       bool strict_horizon = false);

/// Squared ramp and capacity hinges; u and p are T x G.
ad::Var phys_loss_uc(ad::Tape& t, const grid::GridCase& c, ad::Var u, ad::Var p);
double phys_loss_uc(const grid::GridCase& c, const Schedule& s);

inline constexpr double kBceClamp = 1e-7;

/// Clamped binary cross-entropy on u plus squared dispatch error.
ad::Var sup_loss_uc(ad::Tape& t, ad::Var u, ad::Var p, const Schedule& label);
double sup_loss_uc(const Schedule& s, const Schedule& label);

enum class Family : std::size_t {
  Capacity,
  RampUp,
  RampDown,
  MinUptime,
  MinDowntime,
  CommitmentLogic,
  DcBalance,
  LineFlow,
};
inline constexpr std::size_t kFamilyCount = 8;
const char* family_name(Family f);

struct FamilyReport {
  std::vector<double> violation;  // one slot per constraint, >= 0
  std::size_t violated = 0;
  double max = 0.0;
  double mean = 0.0;
};

struct UcResidualReport {
  std::array<FamilyReport, kFamilyCount> families;
  std::size_t total_constraints = 0;
  std::size_t violated_constraints = 0;
  double pct_viol = 0.0;
  double cost = 0.0;
  bool rounded = false;

  const FamilyReport& family(Family f) const { return families[static_cast<std::size_t>(f)]; }
};

inline constexpr double kViolTolerance = 1e-3;

/// DC power-flow sensitivities with the REF bus as the balancing point.
struct DcModel {
  std::size_t n_buses = 0;
  std::size_t n_branches = 0;
  std::vector<double> ptdf;  // n_branches x n_buses, REF and isolated columns zero
  std::vector<double> shift_flow;  // flow contribution of phase shifters
  std::vector<double> rate;  // rate_a per branch

  /// Branch flows for a nodal injection vector (length n_buses).
  std::vector<double> flows(const std::vector<double>& injection) const;
};

/// Throws std::runtime_error when the reduced susceptance matrix is singular.
DcModel build_dc_model(const grid::GridCase& c);

std::size_t audit_constraint_count(const grid::GridCase& c, std::size_t horizon);

UcResidualReport audit_schedule(const grid::GridCase& c, const grid::DemandSeries& demand, const Schedule& s,
                                double tolerance = kViolTolerance);

/// Energy cost of committed units plus startup and shutdown costs, in $.
double scuc_cost(const grid::GridCase& c, const Schedule& s);

struct UcMetrics {
  double acc = 0.0;
  double rmse_pg = 0.0;
};
UcMetrics uc_metrics(const Schedule& s, const Schedule& label);

std::string audit_csv(const UcResidualReport& r);

std::string serialize_schedule(const Schedule& s);
Schedule parse_schedule(std::string_view text);

ad::Tensor to_tensor(const Matrix& m);
Matrix to_matrix(const ad::Tensor& t);

}  // namespace gridlearn::scuc
