#include "gridlearn/optim.hpp"

#include <cmath>
#include <deque>

namespace gridlearn::optim {

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

LbfgsResult lbfgs(const Objective& fn, std::vector<double> x0, const LbfgsOptions& options) {
  LbfgsResult r;
  const std::size_t n = x0.size();
  std::vector<double> g(n), g_new(n), x_new(n), d(n);
  r.x = std::move(x0);
  r.f = fn(r.x, g);
  r.evaluations = 1;
  r.grad_norm = norm2(g);

  struct Pair {
    std::vector<double> s, y;
    double rho;
  };
  std::deque<Pair> mem;
  std::vector<double> alpha;

  while (r.iterations < options.max_iterations) {
    if (r.grad_norm <= options.grad_tol) {
      r.converged = true;
      break;
    }
    // two-loop recursion
    d = g;
    alpha.assign(mem.size(), 0.0);
    for (std::size_t k = mem.size(); k-- > 0;) {
      alpha[k] = mem[k].rho * dot(mem[k].s, d);
      for (std::size_t i = 0; i < n; ++i) d[i] -= alpha[k] * mem[k].y[i];
    }
    double gamma = 1.0;
    if (!mem.empty()) {
      const auto& last = mem.back();
      gamma = dot(last.s, last.y) / dot(last.y, last.y);
    } else {
      gamma = 1.0 / std::max(1.0, r.grad_norm);
    }
    for (auto& v : d) v *= gamma;
    for (std::size_t k = 0; k < mem.size(); ++k) {
      const double beta = mem[k].rho * dot(mem[k].y, d);
      for (std::size_t i = 0; i < n; ++i) d[i] += (alpha[k] - beta) * mem[k].s[i];
    }
    for (auto& v : d) v = -v;
    double slope = dot(g, d);
    if (!(slope < 0.0)) {
      // not a descent direction: restart from steepest descent
      mem.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i] / std::max(1.0, r.grad_norm);
      slope = dot(g, d);
    }

    double step = 1.0;
    double f_new = 0.0;
    bool accepted = false;
    for (std::size_t bt = 0; bt <= options.max_backtracks; ++bt) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = r.x[i] + step * d[i];
      f_new = fn(x_new, g_new);
      ++r.evaluations;
      if (std::isfinite(f_new) && f_new <= r.f + options.armijo * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    ++r.iterations;
    if (!accepted) {
      if (mem.empty()) break;
      mem.clear();
      continue;
    }
    Pair p{std::vector<double>(n), std::vector<double>(n), 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      p.s[i] = x_new[i] - r.x[i];
      p.y[i] = g_new[i] - g[i];
    }
    const double sy = dot(p.s, p.y);
    const double f_old = r.f;
    r.x.swap(x_new);
    g.swap(g_new);
    r.f = f_new;
    r.grad_norm = norm2(g);
    if (sy > 1e-300) {
      p.rho = 1.0 / sy;
      mem.push_back(std::move(p));
      if (mem.size() > options.memory) mem.pop_front();
    }
    if (std::abs(f_old - r.f) <= options.rel_tol * std::max(1.0, std::abs(r.f))) {
      if (r.grad_norm <= options.grad_tol) r.converged = true;
      break;
    }
  }
  if (r.grad_norm <= options.grad_tol) r.converged = true;
  return r;
}

}  // namespace gridlearn::optim
