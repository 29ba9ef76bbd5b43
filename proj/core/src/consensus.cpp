#include "gridlearn/consensus.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "gridlearn/optim.hpp"
#include "gridlearn/scuc.hpp"

namespace gridlearn::consensus {

namespace {

using ad::Tape;
using model::Binder;
using model::ParamStore;

Var column(Var v) { return ad::reshape(v, {v.value().size(), 1}); }

Tensor row_tensor(const std::vector<double>& v) { return Tensor({1, v.size()}, v); }

double sq_hinge(std::span<const double> c, std::size_t begin, std::size_t count) {
  double s = 0.0;
  for (std::size_t i = begin; i < begin + count; ++i) {
    const double v = std::max(0.0, c[i]);
    s += v * v;
  }
  return s;
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Breakdown breakdown(const ConstraintVars& cv, double total) {
  Breakdown b;
  b.total = total;
  const auto r = cv.r.value().data();
  b.consensus_residual_norm = norm(r);
  b.consensus = b.consensus_residual_norm * b.consensus_residual_norm;
  const auto cu = cv.c_uc.value().data();
  const auto co = cv.c_opf.value().data();
  for (const auto& f : cv.uc_families) {
    const double v = sq_hinge(cu, f.begin, f.count);
    b.hinge_sq[f.name] += v;
    b.phys_uc += v;
  }
  for (const auto& f : cv.opf_families) {
    const double v = sq_hinge(co, f.begin, f.count);
    b.hinge_sq[f.name] += v;
    b.phys_opf += v;
  }
  return b;
}

void check_shapes(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) throw ad::ShapeError(std::string(what) + ": shape mismatch");
}

std::vector<std::string> decoder_names(const ParamStore& ps) {
  std::vector<std::string> out;
  for (const auto& p : ps.params())
    if (ps.trainable(p)) out.push_back(p.name);
  return out;
}

}  // namespace

Var couple(Var u_hat, Var p_ac) {
  check_shapes(u_hat.value(), p_ac.value(), "couple");
  return u_hat * p_ac;
}

Tensor couple(const Tensor& u_hat, const Tensor& p_ac) {
  check_shapes(u_hat, p_ac, "couple");
  Tensor out(u_hat.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = u_hat[i] * p_ac[i];
  return out;
}

Var consensus_loss(Var p_uc, Var p_eff) {
  check_shapes(p_uc.value(), p_eff.value(), "consensus_loss");
  return ad::sum(ad::square(p_uc - p_eff));
}

double consensus_loss(const Tensor& p_uc, const Tensor& p_eff) {
  check_shapes(p_uc, p_eff, "consensus_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < p_uc.size(); ++i) {
    const double d = p_uc[i] - p_eff[i];
    s += d * d;
  }
  return s;
}

Problem make_problem(const grid::GridCase& c, const grid::DemandSeries& demand, const ParamStore& params) {
  grid::validate_demand(c, demand);
  if (demand.horizon == 0) throw std::invalid_argument("make_problem: empty demand trajectory");
  Problem pr;
  pr.grid = std::make_shared<const grid::GridCase>(c);
  pr.admittance = std::make_shared<const grid::Admittance>(grid::build_admittance(c));
  pr.demand = demand;
  pr.h_opf = model::embed(c, model::Task::Opf, params);
  pr.h_uc = model::embed(c, model::Task::Uc, params);
  return pr;
}

CoupledVars forward(Binder& b, const Problem& pr) {
  Tape& t = b.tape();
  const auto& c = *pr.grid;
  const std::size_t T = pr.demand.horizon;
  const std::size_t G = c.n_gens();
  auto uc = model::decode_uc(b, c, t.constant(pr.h_uc), pr.demand);
  auto x = model::decode_opf(b, c, t.constant(pr.h_opf));
  CoupledVars v;
  v.u_hat = uc.u;
  v.p_uc = uc.p;
  v.p_ac = ad::add_row(t.constant(Tensor({T, G}, 0.0)), ad::reshape(x.pg, {1, G}));
  v.p_eff = couple(v.u_hat, v.p_ac);
  v.points.assign(T, x);
  return v;
}

CoupledOutput predict(const Problem& pr, const ParamStore& params) {
  Tape t;
  Binder b(t, params, Binder::Track::None);
  auto v = forward(b, pr);
  CoupledOutput out;
  out.u_hat = v.u_hat.value();
  out.p_uc = v.p_uc.value();
  out.p_ac = v.p_ac.value();
  out.p_eff = v.p_eff.value();
  const std::size_t G = out.p_eff.cols();
  for (std::size_t k = 0; k < v.points.size(); ++k) {
    auto p = model::to_point(v.points[k]);
    for (std::size_t g = 0; g < G; ++g) p.pg[g] = out.p_eff.at(k, g);
    out.points.push_back(std::move(p));
  }
  return out;
}

ConstraintVars constraints(Tape& t, const grid::GridCase& c, const grid::Admittance& y,
                           const grid::DemandSeries& demand, const CoupledVars& x) {
  const std::size_t T = demand.horizon;
  const std::size_t G = c.n_gens();
  if (x.p_eff.rows() != T || x.p_eff.cols() != G || x.points.size() != T)
    throw ad::ShapeError("constraints: outputs do not match the horizon");
  check_shapes(x.p_uc.value(), x.p_eff.value(), "constraints");
  check_shapes(x.u_hat.value(), x.p_eff.value(), "constraints");

  ConstraintVars cv;
  cv.r = column(x.p_uc - x.p_eff);

  std::vector<double> pmax(G), pmin(G), neg_ru(G), neg_rd(G);
  for (std::size_t g = 0; g < G; ++g) {
    const auto& gen = c.generators()[g];
    pmax[g] = gen.pmax;
    pmin[g] = gen.pmin;
    neg_ru[g] = -gen.ramp_up;
    neg_rd[g] = -gen.ramp_down;
  }
  std::vector<Var> uc;
  Var hi = x.p_eff - ad::mul_row(x.u_hat, t.constant(row_tensor(pmax)));
  Var lo = ad::mul_row(x.u_hat, t.constant(row_tensor(pmin))) - x.p_eff;
  uc.push_back(column(hi));
  uc.push_back(column(lo));
  cv.uc_families.push_back({"uc_capacity", 0, 2 * T * G});
  if (T >= 2) {
    Var step = ad::slice_rows(x.p_eff, 1, T - 1) - ad::slice_rows(x.p_eff, 0, T - 1);
    uc.push_back(column(ad::add_row(step, t.constant(row_tensor(neg_ru)))));
    uc.push_back(column(ad::add_row(-step, t.constant(row_tensor(neg_rd)))));
    cv.uc_families.push_back({"uc_ramp", 2 * T * G, 2 * (T - 1) * G});
  }
  cv.c_uc = ad::concat_rows(uc);

  std::vector<double> rate(c.n_branches());
  for (std::size_t k = 0; k < rate.size(); ++k) rate[k] = c.branches()[k].rate_a;
  std::vector<Var> opf;
  std::size_t at = 0;
  auto add = [&](const char* name, Var v) {
    const std::size_t n = v.value().size();
    if (n == 0) return;
    if (!cv.opf_families.empty() && cv.opf_families.back().name == name &&
        cv.opf_families.back().begin + cv.opf_families.back().count == at) {
      cv.opf_families.back().count += n;
    } else {
      cv.opf_families.push_back({name, at, n});
    }
    opf.push_back(column(v));
    at += n;
  };
  for (std::size_t k = 0; k < T; ++k) {
    acopf::PointVars pt = x.points[k];
    pt.pg = ad::reshape(ad::slice_rows(x.p_eff, k, 1), {G, 1});
    auto mm = acopf::ac_mismatch(t, c, y, pt, demand.at(k));
    // equalities as a pair of inequalities, so Σ max(0, c)² sees dp²
    add("opf_balance_p", mm.dp);
    add("opf_balance_p", -mm.dp);
    add("opf_balance_q", mm.dq);
    add("opf_balance_q", -mm.dq);
    if (c.n_branches() > 0) {
      auto f = acopf::branch_flow(t, c, y, pt.vm, pt.va);
      Var r = t.constant(Tensor({rate.size(), 1}, rate));
      add("opf_thermal", f.s_fr - r);
      add("opf_thermal", f.s_to - r);
    }
  }
  // families repeat per t; breakdown() sums them by name
  cv.c_opf = ad::concat_rows(opf);
  return cv;
}

Var ucacopf_objective(const ConstraintVars& cv, const train::LossWeights& w) {
  Var l = ad::sum(ad::square(cv.r));
  if (w.lambda_uc != 0.0) l = l + w.lambda_uc * ad::sum(ad::square(ad::relu(cv.c_uc)));
  if (w.lambda_opf != 0.0) l = l + w.lambda_opf * ad::sum(ad::square(ad::relu(cv.c_opf)));
  return l;
}

Breakdown ucacopf_objective(const grid::GridCase& c, const grid::Admittance& y, const grid::DemandSeries& demand,
                            const CoupledOutput& out, const train::LossWeights& w) {
  w.validate();
  if (out.points.size() != demand.horizon) throw ad::ShapeError("ucacopf_objective: one point per hour expected");
  Tape t;
  CoupledVars v;
  v.u_hat = t.constant(out.u_hat);
  v.p_uc = t.constant(out.p_uc);
  v.p_ac = t.constant(out.p_ac);
  v.p_eff = t.constant(out.p_eff);
  for (const auto& p : out.points) {
    acopf::validate_point(c, p);
    v.points.push_back(acopf::constant_point(t, p));
  }
  auto cv = constraints(t, c, y, demand, v);
  return breakdown(cv, ucacopf_objective(cv, w).value().item());
}

Breakdown ucacopf_objective(const Problem& pr, const ParamStore& params, const train::LossWeights& w) {
  w.validate();
  Tape t;
  Binder b(t, params, Binder::Track::None);
  auto cv = constraints(t, *pr.grid, *pr.admittance, pr.demand, forward(b, pr));
  return breakdown(cv, ucacopf_objective(cv, w).value().item());
}

Evaluation evaluate(const Problem& pr, const ParamStore& params, const train::LossWeights& w) {
  w.validate();
  Tape t;
  Binder b(t, params, Binder::Track::Trainable);
  auto cv = constraints(t, *pr.grid, *pr.admittance, pr.demand, forward(b, pr));
  Var l = ucacopf_objective(cv, w);
  Evaluation e;
  e.parts = breakdown(cv, l.value().item());
  e.grads = t.backward(l);
  e.grad_norm = train::grad_norm(e.grads);
  return e;
}

double StationarityReport::identity_gap() const { return std::abs(stationarity_residual - objective_grad_norm); }

StationarityReport consensus_stationarity_check(const Problem& pr, const ParamStore& params,
                                                const train::LossWeights& w, double eps) {
  if (!(eps >= 0.0)) throw std::invalid_argument("consensus_stationarity_check: eps must be >= 0");
  StationarityReport rep;
  rep.eps = eps;
  rep.objective_grad_norm = evaluate(pr, params, w).grad_norm;
  rep.eta_tilde = rep.objective_grad_norm + 1e-8;

  Tape t;
  Binder b(t, params, Binder::Track::Trainable);
  auto cv = constraints(t, *pr.grid, *pr.admittance, pr.demand, forward(b, pr));
  const Tensor& r = cv.r.value();
  const Tensor& cu = cv.c_uc.value();
  const Tensor& co = cv.c_opf.value();
  Tensor nu(r.shape()), mu_uc(cu.shape()), mu_opf(co.shape());
  for (std::size_t i = 0; i < r.size(); ++i) nu[i] = 2.0 * r[i];
  double comp = 0.0;
  for (std::size_t i = 0; i < cu.size(); ++i) {
    mu_uc[i] = 2.0 * w.lambda_uc * std::max(0.0, cu[i]);
    comp += mu_uc[i] * std::max(0.0, cu[i]);
  }
  for (std::size_t i = 0; i < co.size(); ++i) {
    mu_opf[i] = 2.0 * w.lambda_opf * std::max(0.0, co[i]);
    comp += mu_opf[i] * std::max(0.0, co[i]);
  }
  rep.alignment_residual = norm(r.data());
  rep.complementarity = comp;
  const std::vector<ad::Seed> seeds = {{cv.r, nu}, {cv.c_uc, mu_uc}, {cv.c_opf, mu_opf}};
  rep.stationarity_residual = train::grad_norm(t.backward(seeds));

  rep.alignment_ok = rep.alignment_residual <= eps;
  rep.stationarity_ok = rep.stationarity_residual <= rep.eta_tilde;
  rep.complementarity_ok = rep.complementarity <= rep.eta_tilde;
  return rep;
}

void FinetuneConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("finetune: learning_rate must be finite and >= 0");
  if (!(eta_stop > 0.0)) throw std::invalid_argument("finetune: eta_stop must be > 0");
  if (!(consensus_eps >= 0.0)) throw std::invalid_argument("finetune: consensus_eps must be >= 0");
}

namespace {

std::vector<double> flatten(const ParamStore& ps, const std::vector<std::string>& names) {
  std::vector<double> x;
  for (const auto& n : names) {
    const auto& v = ps.value(n).values();
    x.insert(x.end(), v.begin(), v.end());
  }
  return x;
}

void unflatten(ParamStore& ps, const std::vector<std::string>& names, std::span<const double> x) {
  std::size_t at = 0;
  for (const auto& n : names) {
    Tensor v = ps.value(n);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[at++];
    ps.set(n, std::move(v));
  }
}

std::vector<double> flatten(const ad::Gradients& g, const ParamStore& ps, const std::vector<std::string>& names) {
  std::vector<double> x;
  for (const auto& n : names) {
    auto it = g.find(n);
    if (it == g.end()) {
      x.insert(x.end(), ps.value(n).size(), 0.0);
    } else {
      const auto& v = it->second.values();
      x.insert(x.end(), v.begin(), v.end());
    }
  }
  return x;
}

}  // namespace

FinetuneResult finetune(const grid::GridCase& c, const grid::DemandSeries& demand, const ParamStore& params,
                        const train::LossWeights& w, const FinetuneConfig& config) {
  if (!params.encoder_frozen()) throw ContractError("finetune: the encoder must be frozen");
  w.validate();
  config.validate();
  const Problem pr = make_problem(c, demand, params);
  FinetuneResult res;
  res.params = params;
  const auto names = decoder_names(params);
  if (names.empty()) throw ContractError("finetune: no trainable decoder parameters");

  if (config.optimizer != Optimizer::Lbfgs) {
    // Adam moments as in the trainer, without weight decay or clipping
    constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> mom;
    const bool adam = config.optimizer == Optimizer::Adam;
    for (std::size_t step = 0;; ++step) {
      auto e = evaluate(pr, res.params, w);
      res.trace.push_back(e.parts.total);
      if (!std::isfinite(e.parts.total) || !std::isfinite(e.grad_norm))
        throw ad::NonFiniteError("finetune: objective became non-finite at step " + std::to_string(step));
      if (e.grad_norm <= config.eta_stop || step == config.max_epochs || config.learning_rate == 0.0) break;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
      for (const auto& n : names) {
        auto it = e.grads.find(n);
        if (it == e.grads.end()) continue;
        Tensor v = res.params.value(n);
        if (adam) {
          auto& [m, s2] = mom[n];
          m.resize(v.size(), 0.0);
          s2.resize(v.size(), 0.0);
          for (std::size_t i = 0; i < v.size(); ++i) {
            const double gi = it->second[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            s2[i] = b2 * s2[i] + (1.0 - b2) * gi * gi;
            v[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(s2[i] / c2) + adam_eps);
          }
        } else {
          for (std::size_t i = 0; i < v.size(); ++i) v[i] -= config.learning_rate * it->second[i];
        }
        res.params.set(n, std::move(v));
      }
      res.report.steps = step + 1;
    }
  } else {
    ParamStore work = res.params;
    auto objective = [&](const std::vector<double>& x, std::vector<double>& grad) {
      unflatten(work, names, x);
      auto e = evaluate(pr, work, w);
      grad = flatten(e.grads, work, names);
      res.trace.push_back(e.parts.total);
      return e.parts.total;
    };
    optim::LbfgsOptions opt;
    opt.max_iterations = config.max_epochs;
    opt.grad_tol = config.eta_stop;
    auto r = optim::lbfgs(objective, flatten(res.params, names), opt);
    unflatten(res.params, names, r.x);
    res.report.steps = r.iterations;
  }

  auto fin = evaluate(pr, res.params, w);
  auto& rep = res.report;
  rep.lambda_opf = w.lambda_opf;
  rep.lambda_uc = w.lambda_uc;
  rep.eta_stop = config.eta_stop;
  rep.eta = fin.grad_norm;
  rep.reached = fin.grad_norm <= config.eta_stop;
  rep.objective = fin.parts;
  rep.stationarity = consensus_stationarity_check(pr, res.params, w, config.consensus_eps);
  return res;
}

SweepResult verify_feasibility_bound(const grid::GridCase& c, const grid::DemandSeries& demand,
                                     const ParamStore& params, const std::vector<double>& lambdas,
                                     const FinetuneConfig& config, std::size_t threads) {
  if (lambdas.size() < 3) throw std::invalid_argument("verify_feasibility_bound: need at least three lambda values");
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (!(lambdas[i] > 0.0) || !std::isfinite(lambdas[i]))
      throw std::invalid_argument("verify_feasibility_bound: lambda values must be positive");
    if (i > 0 && !(lambdas[i] > lambdas[i - 1]))
      throw std::invalid_argument("verify_feasibility_bound: lambda values must be strictly increasing");
  }
  SweepResult s;
  s.rows.resize(lambdas.size());
  auto run = [&](std::size_t i) {
    train::LossWeights w;
    w.lambda_opf = w.lambda_uc = lambdas[i];
    s.rows[i].lambda = lambdas[i];
    s.rows[i].report = finetune(c, demand, params, w, config).report;
    s.rows[i].flagged = !s.rows[i].report.reached;
  };
  threads = std::max<std::size_t>(1, std::min(threads, lambdas.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < lambdas.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t k = 0; k < threads; ++k)
      pool.emplace_back([&, k] {
        try {
          for (std::size_t i = k; i < lambdas.size(); i += threads) run(i);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  // least squares of log v against log(1/λ); zero violations carry no slope
  std::vector<double> xs, ys;
  for (const auto& row : s.rows) {
    const double v = row.report.objective.hinge_violation_sq();
    if (row.flagged || !(v > 0.0)) continue;
    xs.push_back(-std::log(row.lambda));
    ys.push_back(std::log(v));
  }
  s.fitted = xs.size();
  if (xs.size() < 2) {
    s.slope = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= xs.size();
  my /= ys.size();
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  s.slope = sxy / sxx;
  return s;
}

namespace {

std::string num(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

const std::vector<std::string>& family_names() {
  static const std::vector<std::string> f = {"uc_capacity", "uc_ramp", "opf_balance_p", "opf_balance_q",
                                             "opf_thermal"};
  return f;
}

std::string report_fields(const TheoryReport& r) {
  std::string s = num(r.lambda_opf) + "," + num(r.lambda_uc) + "," + num(r.eta_stop) + "," + num(r.eta) + "," +
                  (r.reached ? "1" : "0") + "," + std::to_string(r.steps) + "," + num(r.objective.total) + "," +
                  num(r.objective.consensus_residual_norm) + "," + num(r.objective.hinge_violation_sq());
  for (const auto& f : family_names()) {
    auto it = r.objective.hinge_sq.find(f);
    s += "," + num(it == r.objective.hinge_sq.end() ? 0.0 : it->second);
  }
  const auto& st = r.stationarity;
  s += "," + num(st.stationarity_residual) + "," + num(st.complementarity) + "," + num(st.identity_gap()) + "," +
       (st.passed() ? "1" : "0");
  return s;
}

std::string report_header() {
  std::string h = "lambda_opf,lambda_uc,eta_stop,eta,reached,steps,objective,consensus_residual,hinge_violation_sq";
  for (const auto& f : family_names()) h += ",hinge_" + f;
  return h + ",stationarity_residual,complementarity,identity_gap,kkt_passed";
}

}  // namespace

std::string theory_report_csv(const std::vector<TheoryReport>& reports) {
  std::string out = report_header() + "\n";
  for (const auto& r : reports) out += report_fields(r) + "\n";
  return out;
}

std::string sweep_csv(const SweepResult& s) {
  std::string out = "lambda,flagged," + report_header() + "\n";
  for (const auto& row : s.rows)
    out += num(row.lambda) + "," + (row.flagged ? "1" : "0") + "," + report_fields(row.report) + "\n";
  out += "# slope," + num(s.slope) + ",fitted," + std::to_string(s.fitted) + "\n";
  return out;
}

std::string provenance_json(const ParamStore& parent, const TheoryReport& r) {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(model::param_hash(parent)));
  nlohmann::ordered_json j;
  j["parent"] = hash;
  j["lambda_opf"] = r.lambda_opf;
  j["lambda_uc"] = r.lambda_uc;
  j["eta_stop"] = r.eta_stop;
  j["eta"] = r.eta;
  j["reached"] = r.reached;
  j["steps"] = r.steps;
  return j.dump();
}

}  // namespace gridlearn::consensus
