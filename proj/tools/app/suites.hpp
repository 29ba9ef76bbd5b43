#pragma once

#include <string>
#include <vector>

#include "gridlearn/consensus.hpp"
#include "gridlearn/grid.hpp"
#include "gridlearn/model.hpp"

// Verification suites shared by the grad-check and theory-check commands and
// the acceptance runner.
namespace gridlearn::app {

struct NamedCase {
  std::string name;
  grid::GridCase grid;
};

struct GradOptions {
  std::size_t samples = 100;  // random inputs per loss and case
  std::size_t components = 6;  // 0 = every component
  double step = 1e-6;
  double tol = 1e-5;
  std::uint64_t seed = 0;
  std::size_t horizon = 3;
};

struct GradRow {
  std::string loss;
  std::string case_name;
  std::size_t samples = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // kink components
  double max_rel_error = 0.0;
  bool passed = true;
};

const std::vector<std::string>& gradient_losses();

/// Central differences against reverse mode for every loss on every case.
std::vector<GradRow> gradient_suite(const std::vector<NamedCase>& cases, const GradOptions& options);
std::string grad_csv(const std::vector<GradRow>& rows);

struct LemmaResult {
  std::size_t draws = 0;
  std::size_t zero_failures = 0;  // couple(0, x) != 0
  std::size_t capacity_failures = 0;  // couple(u, p) > u·Pmax
  bool passed() const { return draws > 0 && zero_failures == 0 && capacity_failures == 0; }
};

LemmaResult lemma_check(std::size_t draws, std::uint64_t seed);

struct TheoryResult {
  LemmaResult lemma;
  consensus::SweepResult sweep;
  double max_identity_gap = 0.0;
  bool all_reached = false;
  bool strictly_decreasing = false;
  double ratio = 0.0;  // violation at the smallest λ over the largest
  bool slope_in_range = false;

  bool identity_ok() const { return max_identity_gap <= 1e-8; }
  bool scaling_ok() const { return all_reached && strictly_decreasing && ratio >= 10.0 && slope_in_range; }
  bool passed() const { return lemma.passed() && identity_ok() && scaling_ok(); }
};

TheoryResult theory_suite(const grid::GridCase& c, const grid::DemandSeries& demand, const model::ParamStore& params,
                          const std::vector<double>& lambdas, const consensus::FinetuneConfig& config,
                          std::size_t lemma_draws, std::uint64_t seed, std::size_t threads);
std::string theory_summary_json(const TheoryResult& r);

}  // namespace gridlearn::app
