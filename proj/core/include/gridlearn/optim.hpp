#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace gridlearn::optim {

/// Objective returning f(x) and writing the gradient into `grad`.
using Objective = std::function<double(const std::vector<double>& x, std::vector<double>& grad)>;

struct LbfgsOptions {
  std::size_t memory = 10;
  std::size_t max_iterations = 500;
  /// Stop when the gradient 2-norm falls below this value.
  double grad_tol = 1e-8;
  /// Stop when the relative decrease of f over one iteration is below this.
  double rel_tol = 1e-14;
  double armijo = 1e-4;
  std::size_t max_backtracks = 40;
};

struct LbfgsResult {
  std::vector<double> x;
  double f = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  bool converged = false;  // gradient tolerance reached
};

/// Limited-memory BFGS with backtracking (Armijo) line search.
LbfgsResult lbfgs(const Objective& fn, std::vector<double> x0, const LbfgsOptions& options = {});

double norm2(const std::vector<double>& v);

}  // namespace gridlearn::optim
