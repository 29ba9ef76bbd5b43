#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridlearn/acopf.hpp"
#include "gridlearn/grid.hpp"
#include "gridlearn/scuc.hpp"

namespace gridlearn::oracle {

enum class Problem { ACOPF, SCUC };

struct Diagnostics {
  std::size_t iterations = 0;
  double final_penalty = 0.0;
  std::size_t restarts = 0;
  std::size_t commitments_enumerated = 0;
  std::size_t dispatches_solved = 0;
  std::vector<double> restart_costs;  // ACOPF, NaN for starts that did not converge
};

struct ResidualSummary {
  double max_mismatch = 0.0;  // ACOPF
  double max_limit_violation = 0.0;  // ACOPF boxes and thermal
  double pct_viol = 0.0;  // SCUC
  double max_violation = 0.0;  // SCUC, over all families
};

struct OracleSolution {
  Problem problem = Problem::ACOPF;
  bool feasible = true;
  acopf::OperatingPoint point;  // ACOPF payload
  scuc::Schedule schedule;  // SCUC payload
  double objective = 0.0;
  ResidualSummary residual;
  Diagnostics diagnostics;
};

class OracleError : public std::runtime_error {
 public:
  OracleError(const std::string& what, Diagnostics d) : std::runtime_error(what), diagnostics(d) {}
  Diagnostics diagnostics;
};

struct AcopfConfig {
  double penalty_init = 10.0;
  double penalty_growth = 10.0;
  double penalty_max = 1e7;
  double inner_tol = 1e-7;
  std::size_t inner_iterations = 400;
  double mismatch_tol = 1e-4;
  std::size_t restarts = 2;
  std::uint64_t seed = 0;
};

/// Quadratic-penalty ACOPF followed by a minimum-norm Newton correction of
/// the balance equations. Throws OracleError when no restart converges.
OracleSolution solve_acopf(const grid::GridCase& c, const grid::BusDemand& demand, const AcopfConfig& config = {});

/// Largest box or thermal violation of an operating point (per-unit).
double acopf_limit_violation(const grid::GridCase& c, const grid::Admittance& y, const acopf::OperatingPoint& p);

struct ScucConfig {
  std::size_t max_gens = 5;
  std::size_t max_T = 8;
  double dispatch_tol = 1e-8;
  std::size_t dispatch_iterations = 20000;
};

/// Exhaustive commitment search with convex dispatch per candidate.
OracleSolution solve_scuc_enum(const grid::GridCase& c, const grid::DemandSeries& demand,
                               const ScucConfig& config = {});

/// Economic dispatch for a fixed binary commitment. Returns std::nullopt
/// when the dispatch constraints are infeasible.
struct DispatchResult {
  scuc::Matrix p;
  double energy_cost = 0.0;
  std::size_t iterations = 0;
};
std::optional<DispatchResult> solve_dispatch(const grid::GridCase& c, const grid::DemandSeries& demand,
                                             const scuc::Matrix& u, const scuc::DcModel& dc,
                                             const ScucConfig& config = {});

/// Signed percentage 100 (model - oracle) / oracle.
double opt_gap(double model_cost, double oracle_cost);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 14695981039346656037ULL);
std::string hex64(std::uint64_t v);

std::string serialize_solution(const OracleSolution& s);
OracleSolution parse_solution(std::string_view text);

/// One file per instance in a directory, keyed by content hashes.
class LabelCache {
 public:
  explicit LabelCache(std::filesystem::path dir);
  std::string key(const grid::GridCase& c, const std::string& demand_doc, const std::string& config_doc) const;
  std::optional<OracleSolution> get(const std::string& key) const;
  void put(const std::string& key, const OracleSolution& s, const std::string& provenance) const;
  std::filesystem::path path(const std::string& key) const;

 private:
  std::filesystem::path dir_;
};

std::string config_doc(const AcopfConfig& c);
std::string config_doc(const ScucConfig& c);

}  // namespace gridlearn::oracle
