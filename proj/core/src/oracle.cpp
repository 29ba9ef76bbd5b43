#include "gridlearn/oracle.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "gridlearn/optim.hpp"
#include "json.hpp"

namespace gridlearn::oracle {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using nlohmann::json;

namespace {

Tensor col(const std::vector<double>& v) { return Tensor({v.size(), 1}, v); }

// ---------------------------------------------------------------- ACOPF

// Flat layout of the decision vector: vm | va | pg | qg.
struct Layout {
  std::size_t n, ng;
  std::size_t size() const { return 2 * n + 2 * ng; }
  std::size_t vm(std::size_t i) const { return i; }
  std::size_t va(std::size_t i) const { return n + i; }
  std::size_t pg(std::size_t g) const { return 2 * n + g; }
  std::size_t qg(std::size_t g) const { return 2 * n + ng + g; }
};

struct Boxes {
  std::vector<double> lo, hi;
};

Boxes variable_boxes(const grid::GridCase& c, const Layout& L) {
  Boxes b;
  const double inf = std::numeric_limits<double>::infinity();
  b.lo.assign(L.size(), -inf);
  b.hi.assign(L.size(), inf);
  for (std::size_t i = 0; i < L.n; ++i) {
    b.lo[L.vm(i)] = c.buses()[i].vmin;
    b.hi[L.vm(i)] = c.buses()[i].vmax;
  }
  b.lo[L.va(c.ref_bus())] = 0.0;
  b.hi[L.va(c.ref_bus())] = 0.0;
  for (std::size_t g = 0; g < L.ng; ++g) {
    const auto& gen = c.generators()[g];
    b.lo[L.pg(g)] = gen.pmin;
    b.hi[L.pg(g)] = gen.pmax;
    b.lo[L.qg(g)] = gen.qmin;
    b.hi[L.qg(g)] = gen.qmax;
  }
  return b;
}

acopf::PointVars split(Var x, const Layout& L) {
  return {ad::slice_rows(x, 0, L.n), ad::slice_rows(x, L.n, L.n), ad::slice_rows(x, 2 * L.n, L.ng),
          ad::slice_rows(x, 2 * L.n + L.ng, L.ng)};
}

acopf::OperatingPoint to_point(const std::vector<double>& x, const Layout& L) {
  acopf::OperatingPoint p;
  p.vm.assign(x.begin(), x.begin() + L.n);
  p.va.assign(x.begin() + L.n, x.begin() + 2 * L.n);
  p.pg.assign(x.begin() + 2 * L.n, x.begin() + 2 * L.n + L.ng);
  p.qg.assign(x.begin() + 2 * L.n + L.ng, x.end());
  return p;
}

std::vector<double> to_vector(const acopf::OperatingPoint& p) {
  std::vector<double> x = p.vm;
  x.insert(x.end(), p.va.begin(), p.va.end());
  x.insert(x.end(), p.pg.begin(), p.pg.end());
  x.insert(x.end(), p.qg.begin(), p.qg.end());
  return x;
}

Var box_penalty(Tape& t, Var v, const std::vector<double>& lo, const std::vector<double>& hi) {
  return ad::sum(ad::square(ad::relu(v - t.constant(col(hi))))) + ad::sum(ad::square(ad::relu(t.constant(col(lo)) - v)));
}

struct PenaltyProblem {
  const grid::GridCase& c;
  const grid::Admittance& y;
  const grid::BusDemand& demand;
  Layout L;
  double cost_scale;

  double eval(const std::vector<double>& x, std::vector<double>& grad, double rho) const {
    Tape t;
    Var xv = t.input("x", col(x));
    auto pv = split(xv, L);
    Var obj = acopf::acopf_cost(t, c, pv.pg) * (1.0 / cost_scale);
    auto mm = acopf::ac_mismatch(t, c, y, pv, demand);
    Var pen = ad::sum(ad::square(mm.dp)) + ad::sum(ad::square(mm.dq));
    std::vector<double> vmin, vmax, pmin, pmax, qmin, qmax;
    for (const auto& b : c.buses()) {
      vmin.push_back(b.vmin);
      vmax.push_back(b.vmax);
    }
    for (const auto& g : c.generators()) {
      pmin.push_back(g.pmin);
      pmax.push_back(g.pmax);
      qmin.push_back(g.qmin);
      qmax.push_back(g.qmax);
    }
    pen = pen + box_penalty(t, pv.vm, vmin, vmax) + box_penalty(t, pv.pg, pmin, pmax) +
          box_penalty(t, pv.qg, qmin, qmax);
    if (c.n_branches() > 0) {
      auto flows = acopf::branch_flow(t, c, y, pv.vm, pv.va);
      auto [over_fr, over_to] = acopf::line_overload(t, c, flows);
      pen = pen + ad::sum(ad::square(over_fr)) + ad::sum(ad::square(over_to));
    }
    Var f = obj + pen * rho;
    const double value = f.value().item();
    auto g = t.backward(f);
    const auto& gx = g.at("x");
    grad.assign(gx.values().begin(), gx.values().end());
    grad[L.va(c.ref_bus())] = 0.0;
    return value;
  }
};

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double max_mismatch(const grid::GridCase& c, const grid::Admittance& y, const std::vector<double>& x, const Layout& L,
                    const grid::BusDemand& d) {
  auto mm = acopf::ac_mismatch(c, y, to_point(x, L), d);
  return std::max(max_abs(mm.dp), max_abs(mm.dq));
}

// Residual vector (dp, dq) at x and, when `jac` is set, its Jacobian with
// respect to the listed free columns (one reverse pass per row).
std::vector<double> residual(const PenaltyProblem& P, const std::vector<double>& x,
                             const std::vector<std::size_t>* free_cols, Eigen::MatrixXd* jac) {
  auto build = [&](Tape& t) {
    Var xv = t.input("x", col(x));
    auto mm = acopf::ac_mismatch(t, P.c, P.y, split(xv, P.L), P.demand);
    std::vector<Var> parts{mm.dp, mm.dq};
    return ad::concat_rows(parts);
  };
  Tape t0;
  Var r0 = build(t0);
  std::vector<double> r(r0.value().values().begin(), r0.value().values().end());
  if (jac) {
    jac->resize(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(free_cols->size()));
    for (std::size_t i = 0; i < r.size(); ++i) {
      Tape t;
      Var ri = build(t);
      Tensor seed(ri.value().shape(), 0.0);
      seed[i] = 1.0;
      auto g = t.backward(ri, seed);
      const auto& gx = g.at("x");
      for (std::size_t k = 0; k < free_cols->size(); ++k) {
        (*jac)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = gx[(*free_cols)[k]];
      }
    }
  }
  return r;
}

void clamp(std::vector<double>& x, const Boxes& b) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::min(std::max(x[i], b.lo[i]), b.hi[i]);
}

// Minimum-norm Gauss-Newton steps on the balance equations, holding
// variables that sit at a bound fixed.
std::size_t newton_polish(const PenaltyProblem& P, std::vector<double>& x, const Boxes& boxes) {
  std::size_t it = 0;
  for (; it < 30; ++it) {
    std::vector<std::size_t> free_cols;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (boxes.lo[i] == boxes.hi[i]) continue;
      if (x[i] <= boxes.lo[i] + 1e-12 || x[i] >= boxes.hi[i] - 1e-12) continue;
      free_cols.push_back(i);
    }
    for (std::size_t i = 0; i < P.L.n; ++i)
      if (!P.c.is_active(i)) std::erase(free_cols, P.L.vm(i)), std::erase(free_cols, P.L.va(i));
    Eigen::MatrixXd J;
    auto r = residual(P, x, &free_cols, &J);
    if (max_abs(r) <= 1e-11 || free_cols.empty()) break;
    Eigen::VectorXd rv = Eigen::Map<Eigen::VectorXd>(r.data(), static_cast<Eigen::Index>(r.size()));
    Eigen::VectorXd dx = J.completeOrthogonalDecomposition().solve(-rv);
    if (!dx.allFinite()) break;
    // damp until the residual decreases
    const double r0 = rv.norm();
    double step = 1.0;
    std::vector<double> trial;
    bool improved = false;
    for (int bt = 0; bt < 20; ++bt, step *= 0.5) {
      trial = x;
      for (std::size_t k = 0; k < free_cols.size(); ++k) trial[free_cols[k]] += step * dx(static_cast<Eigen::Index>(k));
      clamp(trial, boxes);
      auto rt = residual(P, trial, nullptr, nullptr);
      double n2 = 0.0;
      for (double v : rt) n2 += v * v;
      if (std::sqrt(n2) < r0) {
        improved = true;
        break;
      }
    }
    if (!improved) break;
    x = std::move(trial);
  }
  return it;
}

}  // namespace

double acopf_limit_violation(const grid::GridCase& c, const grid::Admittance& y, const acopf::OperatingPoint& p) {
  double v = 0.0;
  for (std::size_t i = 0; i < c.n_buses(); ++i) {
    if (!c.is_active(i)) continue;
    v = std::max({v, p.vm[i] - c.buses()[i].vmax, c.buses()[i].vmin - p.vm[i]});
  }
  for (std::size_t g = 0; g < c.n_gens(); ++g) {
    const auto& gen = c.generators()[g];
    v = std::max({v, p.pg[g] - gen.pmax, gen.pmin - p.pg[g], p.qg[g] - gen.qmax, gen.qmin - p.qg[g]});
  }
  if (c.n_branches() > 0) {
    auto f = acopf::branch_flow(c, y, p);
    for (std::size_t k = 0; k < c.n_branches(); ++k) {
      const double rate = c.branches()[k].rate_a;
      v = std::max({v, f.s_fr[k] - rate, f.s_to[k] - rate});
    }
  }
  return v;
}

OracleSolution solve_acopf(const grid::GridCase& c, const grid::BusDemand& demand, const AcopfConfig& cfg) {
  if (demand.pd.size() != c.n_buses() || demand.qd.size() != c.n_buses()) {
    throw std::invalid_argument("solve_acopf: demand length does not match bus count");
  }
  const auto y = grid::build_admittance(c);
  const Layout L{c.n_buses(), c.n_gens()};
  const Boxes boxes = variable_boxes(c, L);
  const auto start = acopf::flat_start(c);
  const double scale = std::max(1.0, std::abs(acopf::acopf_cost(c, start)));
  const PenaltyProblem P{c, y, demand, L, scale};

  Diagnostics diag;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::optional<std::vector<double>> best;
  double best_cost = std::numeric_limits<double>::infinity();

  for (std::size_t r = 0; r <= cfg.restarts; ++r) {
    std::vector<double> x = to_vector(start);
    if (r > 0) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::isfinite(boxes.lo[i]) && std::isfinite(boxes.hi[i])) {
          x[i] = boxes.lo[i] + (boxes.hi[i] - boxes.lo[i]) * unit(rng);
        } else {
          x[i] = 0.2 * (unit(rng) - 0.5);  // angles
        }
      }
      x[L.va(c.ref_bus())] = 0.0;
    }
    double rho = cfg.penalty_init;
    while (true) {
      optim::LbfgsOptions opt;
      opt.max_iterations = cfg.inner_iterations;
      opt.grad_tol = cfg.inner_tol * (1.0 + rho);
      opt.memory = 20;
      auto res = optim::lbfgs([&](const std::vector<double>& z, std::vector<double>& g) { return P.eval(z, g, rho); },
                              x, opt);
      x = std::move(res.x);
      diag.iterations += res.iterations;
      diag.final_penalty = rho;
      const double viol = std::max(max_mismatch(c, y, x, L, demand), acopf_limit_violation(c, y, to_point(x, L)));
      if (viol <= 1e-6 || rho >= cfg.penalty_max) break;
      rho = std::min(rho * cfg.penalty_growth, cfg.penalty_max);
    }
    clamp(x, boxes);
    diag.iterations += newton_polish(P, x, boxes);
    const auto point = to_point(x, L);
    const double mm = max_mismatch(c, y, x, L, demand);
    const double lv = acopf_limit_violation(c, y, point);
    diag.restarts = r + 1;
    if (mm > cfg.mismatch_tol || lv > cfg.mismatch_tol) {
      diag.restart_costs.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double cost = acopf::acopf_cost(c, point);
    diag.restart_costs.push_back(cost);
    if (cost < best_cost) {
      best_cost = cost;
      best = x;
    }
  }
  if (!best) throw OracleError("ACOPF oracle did not converge from any start", diag);

  OracleSolution s;
  s.problem = Problem::ACOPF;
  s.point = to_point(*best, L);
  s.objective = best_cost;
  s.residual.max_mismatch = max_mismatch(c, y, *best, L, demand);
  s.residual.max_limit_violation = std::max(0.0, acopf_limit_violation(c, y, s.point));
  s.diagnostics = diag;
  return s;
}

// ---------------------------------------------------------------- SCUC

namespace {

struct Sets {
  // box per variable
  std::vector<double> lo, hi;
  // slabs lo <= a.x <= hi with sparse a
  struct Slab {
    std::vector<std::size_t> idx;
    std::vector<double> a;
    double lo, hi, norm2;
  };
  std::vector<Slab> slabs;
};

void project_slab(const Sets::Slab& s, std::vector<double>& x) {
  double v = 0.0;
  for (std::size_t k = 0; k < s.idx.size(); ++k) v += s.a[k] * x[s.idx[k]];
  double shift = 0.0;
  if (v > s.hi) shift = (v - s.hi) / s.norm2;
  else if (v < s.lo) shift = (v - s.lo) / s.norm2;
  else return;
  for (std::size_t k = 0; k < s.idx.size(); ++k) x[s.idx[k]] -= shift * s.a[k];
}

double violation(const Sets& sets, const std::vector<double>& x) {
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max({m, sets.lo[i] - x[i], x[i] - sets.hi[i]});
  for (const auto& s : sets.slabs) {
    double v = 0.0;
    for (std::size_t k = 0; k < s.idx.size(); ++k) v += s.a[k] * x[s.idx[k]];
    m = std::max({m, v - s.hi, s.lo - v});
  }
  return m;
}

// Dykstra's alternating projections onto box and slabs.
std::vector<double> project(const Sets& sets, const std::vector<double>& z, double tol, std::size_t max_cycles) {
  const std::size_t n = z.size();
  const std::size_t m = sets.slabs.size() + 1;
  std::vector<std::vector<double>> inc(m, std::vector<double>(n, 0.0));
  std::vector<double> x = z, prev(n), before(n);
  for (std::size_t cycle = 0; cycle < max_cycles; ++cycle) {
    prev = x;
    // The cycle-end iterate can sit still while the corrections keep
    // growing, so their movement counts towards convergence too.
    double change = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < n; ++i) before[i] = x[i] + inc[j][i];
      x = before;
      if (j == 0) {
        for (std::size_t i = 0; i < n; ++i) x[i] = std::min(std::max(x[i], sets.lo[i]), sets.hi[i]);
      } else {
        project_slab(sets.slabs[j - 1], x);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double d = before[i] - x[i];
        change = std::max(change, std::abs(d - inc[j][i]));
        inc[j][i] = d;
      }
    }
    for (std::size_t i = 0; i < n; ++i) change = std::max(change, std::abs(x[i] - prev[i]));
    if (change <= tol && violation(sets, x) <= tol) break;
  }
  return x;
}

void add_slab(Sets& sets, std::vector<std::size_t> idx, std::vector<double> a, double lo, double hi) {
  double n2 = 0.0;
  for (double v : a) n2 += v * v;
  if (n2 < 1e-24) return;
  sets.slabs.push_back({std::move(idx), std::move(a), lo, hi, n2});
}

double total_demand(const grid::GridCase& c, const grid::DemandSeries& d, std::size_t t) {
  double s = 0.0;
  for (auto i : c.active_buses()) s += d.pd[t][i];
  return s;
}

// Lagrangian bound of the single-period dispatch without ramps or lines.
double period_bound(const grid::GridCase& c, const std::vector<double>& u_t, double demand_pu) {
  const double base = c.base_mva();
  const auto& gens = c.generators();
  auto best_p = [&](std::size_t g, double lambda) {
    const auto& gen = gens[g];
    const double c2 = gen.cost_c2 * base * base, c1 = gen.cost_c1 * base;
    if (c2 > 0.0) return std::min(std::max((lambda - c1) / (2.0 * c2), gen.pmin), gen.pmax);
    return lambda > c1 ? gen.pmax : gen.pmin;
  };
  auto total = [&](double lambda) {
    double s = 0.0;
    for (std::size_t g = 0; g < gens.size(); ++g)
      if (u_t[g] != 0.0) s += best_p(g, lambda);
    return s;
  };
  double lo = -1e7, hi = 1e7;
  for (int k = 0; k < 200; ++k) {
    const double mid = 0.5 * (lo + hi);
    (total(mid) < demand_pu ? lo : hi) = mid;
  }
  const double lambda = 0.5 * (lo + hi);
  double value = lambda * demand_pu;
  for (std::size_t g = 0; g < gens.size(); ++g) {
    if (u_t[g] == 0.0) continue;
    const auto& gen = gens[g];
    const double c2 = gen.cost_c2 * base * base, c1 = gen.cost_c1 * base;
    const double p = best_p(g, lambda);
    value += c2 * p * p + c1 * p + gen.cost_c0 - lambda * p;
  }
  return value;
}

}  // namespace

std::optional<DispatchResult> solve_dispatch(const grid::GridCase& c, const grid::DemandSeries& demand,
                                             const scuc::Matrix& u, const scuc::DcModel& dc, const ScucConfig& cfg) {
  const std::size_t T = demand.horizon;
  const std::size_t G = c.n_gens();
  const std::size_t n = T * G;
  const double base = c.base_mva();
  auto id = [G](std::size_t t, std::size_t g) { return t * G + g; };

  scuc::Schedule sched;
  sched.horizon = T;
  sched.u = u;
  sched.p.assign(T, std::vector<double>(G, 0.0));
  scuc::derive_transitions(c, sched);

  Sets sets;
  sets.lo.assign(n, 0.0);
  sets.hi.assign(n, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t g = 0; g < G; ++g) {
      const auto& gen = c.generators()[g];
      if (u[t][g] != 0.0) {
        sets.lo[id(t, g)] = gen.pmin;
        sets.hi[id(t, g)] = gen.pmax;
      }
    }
  }
  // ramps; the first hour ramps from the initial power
  for (std::size_t g = 0; g < G; ++g) {
    const auto& gen = c.generators()[g];
    const double u_init = scuc::initially_on(gen) ? 1.0 : 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const double u_prev = t == 0 ? u_init : u[t - 1][g];
      const double hi = gen.ramp_up * u_prev + gen.startup_limit * sched.v[t][g];
      const double lo = -(gen.ramp_down * u[t][g] + gen.shutdown_limit * sched.w[t][g]);
      if (t == 0) {
        sets.lo[id(0, g)] = std::max(sets.lo[id(0, g)], gen.initial_power + lo);
        sets.hi[id(0, g)] = std::min(sets.hi[id(0, g)], gen.initial_power + hi);
      } else {
        add_slab(sets, {id(t, g), id(t - 1, g)}, {1.0, -1.0}, lo, hi);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (sets.lo[i] > sets.hi[i] + 1e-9) return std::nullopt;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::size_t> idx;
    std::vector<double> a;
    for (std::size_t g = 0; g < G; ++g) {
      idx.push_back(id(t, g));
      a.push_back(1.0);
    }
    const double d = total_demand(c, demand, t);
    add_slab(sets, idx, a, d, d);
  }
  for (std::size_t t = 0; t < T; ++t) {
    // flows = ptdf (A p - pd) + shift
    std::vector<double> load(c.n_buses(), 0.0);
    for (auto i : c.active_buses()) load[i] = -demand.pd[t][i];
    const auto base_flow = dc.flows(load);
    for (std::size_t k = 0; k < dc.n_branches; ++k) {
      std::vector<std::size_t> idx;
      std::vector<double> a;
      for (std::size_t g = 0; g < G; ++g) {
        idx.push_back(id(t, g));
        a.push_back(dc.ptdf[k * dc.n_buses + c.gen_bus(g)]);
      }
      add_slab(sets, idx, a, -dc.rate[k] - base_flow[k], dc.rate[k] - base_flow[k]);
    }
  }

  // feasibility first: project the box midpoint
  std::vector<double> mid(n);
  for (std::size_t i = 0; i < n; ++i) mid[i] = 0.5 * (sets.lo[i] + sets.hi[i]);
  std::vector<double> x = project(sets, mid, 1e-12, 20000);
  if (violation(sets, x) > 1e-6) return std::nullopt;

  // FISTA with adaptive restart on the quadratic energy cost
  std::vector<double> q(n, 0.0), lin(n, 0.0);
  double lip = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t g = 0; g < G; ++g) {
      if (u[t][g] == 0.0) continue;
      const auto& gen = c.generators()[g];
      q[id(t, g)] = 2.0 * gen.cost_c2 * base * base;
      lin[id(t, g)] = gen.cost_c1 * base;
      lip = std::max(lip, q[id(t, g)]);
    }
  }
  if (lip <= 0.0) lip = 1.0;
  std::vector<double> yv = x, grad(n), x_new(n), step(n);
  double theta = 1.0;
  DispatchResult out;
  for (std::size_t k = 0; k < cfg.dispatch_iterations; ++k) {
    for (std::size_t i = 0; i < n; ++i) step[i] = yv[i] - (q[i] * yv[i] + lin[i]) / lip;
    x_new = project(sets, step, cfg.dispatch_tol * 1e-3, 5000);
    double change = 0.0, restart_test = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      change = std::max(change, std::abs(x_new[i] - x[i]));
      restart_test += (yv[i] - x_new[i]) * (x_new[i] - x[i]);
    }
    const double theta_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * theta * theta));
    if (restart_test > 0.0) {
      theta = 1.0;
      yv = x_new;
    } else {
      const double beta = (theta - 1.0) / theta_new;
      for (std::size_t i = 0; i < n; ++i) yv[i] = x_new[i] + beta * (x_new[i] - x[i]);
      theta = theta_new;
    }
    x.swap(x_new);
    out.iterations = k + 1;
    if (change <= cfg.dispatch_tol) break;
  }
  x = project(sets, x, 1e-13, 20000);
  if (violation(sets, x) > 1e-6) return std::nullopt;

  out.p.assign(T, std::vector<double>(G, 0.0));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t g = 0; g < G; ++g) out.p[t][g] = u[t][g] == 0.0 ? 0.0 : x[id(t, g)];
  sched.p = out.p;
  out.energy_cost = scuc::scuc_cost(c, sched);
  return out;
}

OracleSolution solve_scuc_enum(const grid::GridCase& c, const grid::DemandSeries& demand, const ScucConfig& cfg) {
  grid::validate_demand(c, demand);
  const std::size_t T = demand.horizon;
  const std::size_t G = c.n_gens();
  if (G > cfg.max_gens || T > cfg.max_T) {
    throw std::invalid_argument("solve_scuc_enum: instance exceeds enumeration limits (" + std::to_string(G) +
                                " gens, T=" + std::to_string(T) + ")");
  }
  const auto dc = scuc::build_dc_model(c);
  Diagnostics diag;

  // per-generator sequences that respect minimum up and down times
  std::vector<std::vector<std::vector<double>>> seqs(G);
  for (std::size_t g = 0; g < G; ++g) {
    const auto& gen = c.generators()[g];
    for (std::size_t bits = 0; bits < (std::size_t{1} << T); ++bits) {
      std::vector<double> s(T);
      for (std::size_t t = 0; t < T; ++t) s[t] = (bits >> (T - 1 - t)) & 1U ? 1.0 : 0.0;
      const auto up = scuc::min_run_violations(gen, s, 1.0, true);
      const auto down = scuc::min_run_violations(gen, s, 0.0, true);
      if (max_abs(up) > 0.0 || max_abs(down) > 0.0) continue;
      seqs[g].push_back(std::move(s));
    }
  }

  struct Candidate {
    double bound;
    scuc::Matrix u;
  };
  std::vector<Candidate> cands;
  std::vector<std::size_t> pick(G, 0);
  bool any = true;
  for (std::size_t g = 0; g < G; ++g) any = any && !seqs[g].empty();
  while (any) {
    ++diag.commitments_enumerated;
    scuc::Matrix u(T, std::vector<double>(G, 0.0));
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t t = 0; t < T; ++t) u[t][g] = seqs[g][pick[g]][t];
    bool ok = true;
    double bound = 0.0;
    for (std::size_t t = 0; t < T && ok; ++t) {
      double lo = 0.0, hi = 0.0;
      for (std::size_t g = 0; g < G; ++g) {
        if (u[t][g] == 0.0) continue;
        lo += c.generators()[g].pmin;
        hi += c.generators()[g].pmax;
      }
      const double d = total_demand(c, demand, t);
      if (d > hi + 1e-12 || d < lo - 1e-12) ok = false;
      else bound += period_bound(c, u[t], d);
    }
    if (ok) {
      scuc::Schedule s;
      s.horizon = T;
      s.u = u;
      s.p.assign(T, std::vector<double>(G, 0.0));
      scuc::derive_transitions(c, s);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t g = 0; g < G; ++g)
          bound += c.generators()[g].startup_cost * s.v[t][g] + c.generators()[g].shutdown_cost * s.w[t][g];
      cands.push_back({bound, std::move(u)});
    }
    // odometer
    std::size_t g = 0;
    while (g < G && ++pick[g] == seqs[g].size()) pick[g++] = 0;
    if (g == G) break;
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.bound != b.bound) return a.bound < b.bound;
    return a.u < b.u;
  });

  OracleSolution best;
  best.problem = Problem::SCUC;
  best.feasible = false;
  double best_cost = std::numeric_limits<double>::infinity();
  for (const auto& cand : cands) {
    if (best.feasible && cand.bound > best_cost + 1e-9 * std::max(1.0, std::abs(best_cost))) break;
    ++diag.dispatches_solved;
    auto r = solve_dispatch(c, demand, cand.u, dc, cfg);
    if (!r) continue;
    diag.iterations += r->iterations;
    const double tie = best.feasible ? 1e-9 * std::max(1.0, std::abs(best_cost)) : 0.0;
    const bool better = !best.feasible || r->energy_cost < best_cost - tie ||
                        (std::abs(r->energy_cost - best_cost) <= tie && cand.u < best.schedule.u);
    if (better) {
      best_cost = r->energy_cost;
      best.feasible = true;
      best.schedule.horizon = T;
      best.schedule.u = cand.u;
      best.schedule.p = r->p;
      best.schedule.hard_binary = true;
    }
  }
  best.diagnostics = diag;
  if (!best.feasible) {
    best.objective = std::numeric_limits<double>::quiet_NaN();
    return best;
  }
  scuc::derive_transitions(c, best.schedule);
  best.objective = best_cost;
  auto audit = scuc::audit_schedule(c, demand, best.schedule);
  best.residual.pct_viol = audit.pct_viol;
  for (const auto& f : audit.families) best.residual.max_violation = std::max(best.residual.max_violation, f.max);
  return best;
}

double opt_gap(double model_cost, double oracle_cost) {
  if (!(oracle_cost > 0.0)) throw std::invalid_argument("opt_gap: oracle cost must be positive");
  return 100.0 * (model_cost - oracle_cost) / oracle_cost;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string serialize_solution(const OracleSolution& s) {
  json j;
  j["problem"] = s.problem == Problem::ACOPF ? "acopf" : "scuc";
  j["feasible"] = s.feasible;
  j["objective"] = s.feasible ? json(s.objective) : json(nullptr);
  j["residual"] = {{"max_mismatch", s.residual.max_mismatch},
                   {"max_limit_violation", s.residual.max_limit_violation},
                   {"pct_viol", s.residual.pct_viol},
                   {"max_violation", s.residual.max_violation}};
  j["diagnostics"] = {{"iterations", s.diagnostics.iterations},
                      {"final_penalty", s.diagnostics.final_penalty},
                      {"restarts", s.diagnostics.restarts},
                      {"commitments_enumerated", s.diagnostics.commitments_enumerated},
                      {"dispatches_solved", s.diagnostics.dispatches_solved}};
  json costs = json::array();
  for (double v : s.diagnostics.restart_costs) costs.push_back(std::isfinite(v) ? json(v) : json(nullptr));
  j["diagnostics"]["restart_costs"] = costs;
  if (s.feasible) {
    if (s.problem == Problem::ACOPF) {
      j["point"] = json::parse(acopf::serialize_point(s.point));
    } else {
      j["schedule"] = json::parse(scuc::serialize_schedule(s.schedule));
    }
  }
  return j.dump(2);
}

OracleSolution parse_solution(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw grid::CaseError(grid::CaseErrorKind::Syntax, std::string("solution: ") + e.what());
  }
  try {
    OracleSolution s;
    const auto problem = j.at("problem").get<std::string>();
    if (problem == "acopf") s.problem = Problem::ACOPF;
    else if (problem == "scuc") s.problem = Problem::SCUC;
    else throw grid::CaseError(grid::CaseErrorKind::InvalidValue, "solution: unknown problem '" + problem + "'");
    s.feasible = j.at("feasible").get<bool>();
    s.objective = j.at("objective").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                              : j.at("objective").get<double>();
    const auto& r = j.at("residual");
    s.residual.max_mismatch = r.at("max_mismatch").get<double>();
    s.residual.max_limit_violation = r.at("max_limit_violation").get<double>();
    s.residual.pct_viol = r.at("pct_viol").get<double>();
    s.residual.max_violation = r.at("max_violation").get<double>();
    const auto& d = j.at("diagnostics");
    s.diagnostics.iterations = d.at("iterations").get<std::size_t>();
    s.diagnostics.final_penalty = d.at("final_penalty").get<double>();
    s.diagnostics.restarts = d.at("restarts").get<std::size_t>();
    s.diagnostics.commitments_enumerated = d.at("commitments_enumerated").get<std::size_t>();
    s.diagnostics.dispatches_solved = d.at("dispatches_solved").get<std::size_t>();
    if (d.contains("restart_costs")) {
      for (const auto& v : d.at("restart_costs"))
        s.diagnostics.restart_costs.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
    }
    if (s.feasible) {
      if (s.problem == Problem::ACOPF) s.point = acopf::parse_point(j.at("point").dump());
      else s.schedule = scuc::parse_schedule(j.at("schedule").dump());
    }
    return s;
  } catch (const json::exception& e) {
    throw grid::CaseError(grid::CaseErrorKind::MissingField, std::string("solution: ") + e.what());
  }
}

LabelCache::LabelCache(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

std::string LabelCache::key(const grid::GridCase& c, const std::string& demand_doc,
                            const std::string& config_doc) const {
  std::uint64_t h = fnv1a(grid::serialize_case(c));
  h = fnv1a(demand_doc, h);
  h = fnv1a(config_doc, h);
  return hex64(h);
}

std::filesystem::path LabelCache::path(const std::string& key) const { return dir_ / (key + ".json"); }

std::optional<OracleSolution> LabelCache::get(const std::string& key) const {
  const auto p = path(key);
  if (!std::filesystem::exists(p)) return std::nullopt;
  const auto doc = json::parse(grid::read_text_file(p.string()));
  return parse_solution(doc.at("solution").dump());
}

void LabelCache::put(const std::string& key, const OracleSolution& s, const std::string& provenance) const {
  json doc;
  doc["provenance"] = provenance;
  doc["solution"] = json::parse(serialize_solution(s));
  const auto p = path(key);
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << doc.dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, p);
}

std::string config_doc(const AcopfConfig& c) {
  json j = {{"penalty_init", c.penalty_init}, {"penalty_growth", c.penalty_growth}, {"penalty_max", c.penalty_max},
            {"inner_tol", c.inner_tol},       {"inner_iterations", c.inner_iterations},
            {"mismatch_tol", c.mismatch_tol}, {"restarts", c.restarts},           {"seed", c.seed}};
  return j.dump();
}

std::string config_doc(const ScucConfig& c) {
  json j = {{"max_gens", c.max_gens},
            {"max_T", c.max_T},
            {"dispatch_tol", c.dispatch_tol},
            {"dispatch_iterations", c.dispatch_iterations}};
  return j.dump();
}

}  // namespace gridlearn::oracle
