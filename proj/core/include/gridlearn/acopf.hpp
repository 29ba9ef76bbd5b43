#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "gridlearn/autodiff.hpp"
#include "gridlearn/grid.hpp"

namespace gridlearn::acopf {

/// ACOPF decision variables. Powers per-unit, angles in radians.
struct OperatingPoint {
  std::vector<double> vm;  // per bus index
  std::vector<double> va;
  std::vector<double> pg;  // per generator index
  std::vector<double> qg;
};

void validate_point(const grid::GridCase& c, const OperatingPoint& p);

/// vm = 1, va = 0, pg and qg at their box midpoints.
OperatingPoint flat_start(const grid::GridCase& c);

/// Column-vector handles: vm, va are n_buses x 1; pg, qg are n_gens x 1.
struct PointVars {
  ad::Var vm, va, pg, qg;
};

PointVars constant_point(ad::Tape& t, const OperatingPoint& p);

/// Active and reactive mismatch at the non-isolated buses, in
/// GridCase::active_buses() order (n_active x 1 each).
struct MismatchVars {
  ad::Var dp, dq;
};

MismatchVars ac_mismatch(ad::Tape& t, const grid::GridCase& c, const grid::Admittance& y, const PointVars& x,
                         const grid::BusDemand& demand);

/// Per-branch flows, n_branches x 1 each.
struct FlowVars {
  ad::Var p_fr, q_fr, p_to, q_to, s_fr, s_to;
};

FlowVars branch_flow(ad::Tape& t, const grid::GridCase& c, const grid::Admittance& y, ad::Var vm, ad::Var va);

/// max(0, S - rate_a) on the from and to side (n_branches x 1 each).
std::pair<ad::Var, ad::Var> line_overload(ad::Tape& t, const grid::GridCase& c, const FlowVars& f);

/// sum |dp| + |dq| over active buses plus thermal overload on both branch ends.
ad::Var phys_loss_opf(ad::Tape& t, const grid::GridCase& c, const grid::Admittance& y, const PointVars& x,
                      const grid::BusDemand& demand);

/// Squared error summed over buses (vm, va) and generators (pg, qg).
ad::Var sup_loss_opf(ad::Tape& t, const PointVars& x, const OperatingPoint& label);

/// Quadratic generation cost in $, with pg converted to MW.
ad::Var acopf_cost(ad::Tape& t, const grid::GridCase& c, ad::Var pg);

// Plain-value evaluations of the expressions above.
struct Mismatch {
  std::vector<double> dp, dq;
};
Mismatch ac_mismatch(const grid::GridCase& c, const grid::Admittance& y, const OperatingPoint& p,
                     const grid::BusDemand& demand);

struct BranchFlows {
  std::vector<double> p_fr, q_fr, p_to, q_to, s_fr, s_to;
};
BranchFlows branch_flow(const grid::GridCase& c, const grid::Admittance& y, const OperatingPoint& p);

double phys_loss_opf(const grid::GridCase& c, const grid::Admittance& y, const OperatingPoint& p,
                     const grid::BusDemand& demand);
double sup_loss_opf(const OperatingPoint& p, const OperatingPoint& label);
double acopf_cost(const grid::GridCase& c, const OperatingPoint& p);

struct AcResidualReport {
  std::vector<double> dp, dq;  // per active bus
  std::vector<double> overload_fr, overload_to;  // per branch
  std::vector<double> angle_violation;  // per branch, reported only
  double pf_viol = 0.0;
  double viol_norm = 0.0;
  double cost = 0.0;
  double max_mismatch = 0.0;
  double max_overload = 0.0;
};

AcResidualReport residual_report(const grid::GridCase& c, const grid::Admittance& y, const OperatingPoint& p,
                                 const grid::BusDemand& demand);

struct AcMetrics {
  double pf_viol = 0.0;
  double viol_norm = 0.0;
};

/// pf_viol = RMSE of (dp, dq); viol_norm = ||(dp, dq, overloads)|| / sqrt(n_buses).
AcMetrics ac_metrics(const AcResidualReport& report, std::size_t n_buses);

std::string residual_csv(const grid::GridCase& c, const AcResidualReport& report);

std::string serialize_point(const OperatingPoint& p);
OperatingPoint parse_point(std::string_view text);

}  // namespace gridlearn::acopf
