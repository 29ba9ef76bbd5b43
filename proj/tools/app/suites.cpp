#include "app/suites.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "app/config.hpp"
#include "gridlearn/acopf.hpp"
#include "gridlearn/dataset.hpp"
#include "gridlearn/scuc.hpp"
#include "gridlearn/trainer.hpp"

namespace gridlearn::app {

namespace {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Var piece(Var x, std::size_t& at, std::size_t rows, std::size_t cols = 1) {
  Var v = ad::reshape(ad::slice_rows(x, at, rows * cols), {rows, cols});
  at += rows * cols;
  return v;
}

acopf::OperatingPoint random_point(const grid::GridCase& c, Rng& rng) {
  acopf::OperatingPoint p = acopf::flat_start(c);
  for (std::size_t i = 0; i < p.vm.size(); ++i) {
    p.vm[i] = uniform(rng, c.buses()[i].vmin, c.buses()[i].vmax);
    p.va[i] = uniform(rng, -0.3, 0.3);
  }
  for (std::size_t g = 0; g < p.pg.size(); ++g) {
    const auto& gen = c.generators()[g];
    p.pg[g] = uniform(rng, gen.pmin, gen.pmax);
    p.qg[g] = uniform(rng, gen.qmin, gen.qmax);
  }
  return p;
}

std::vector<double> point_values(const acopf::OperatingPoint& p) {
  std::vector<double> v = p.vm;
  v.insert(v.end(), p.va.begin(), p.va.end());
  v.insert(v.end(), p.pg.begin(), p.pg.end());
  v.insert(v.end(), p.qg.begin(), p.qg.end());
  return v;
}

acopf::PointVars point_vars(const grid::GridCase& c, Var x) {
  std::size_t at = 0;
  acopf::PointVars p;
  p.vm = piece(x, at, c.n_buses());
  p.va = piece(x, at, c.n_buses());
  p.pg = piece(x, at, c.n_gens());
  p.qg = piece(x, at, c.n_gens());
  return p;
}

grid::BusDemand random_demand(const grid::GridCase& c, Rng& rng) {
  auto d = grid::base_demand(c);
  for (std::size_t i = 0; i < d.pd.size(); ++i) {
    const double f = uniform(rng, 0.8, 1.2);
    d.pd[i] *= f;
    d.qd[i] *= f;
  }
  return d;
}

grid::DemandSeries random_series(const grid::GridCase& c, std::size_t T, Rng& rng) {
  std::vector<double> profile;
  for (std::size_t t = 0; t < T; ++t) profile.push_back(uniform(rng, 0.5, 1.0));
  return grid::gen_demand_series(c, profile, 1.0);
}

model::ModelConfig tiny_model(std::size_t horizon) {
  model::ModelConfig m;
  m.hidden_dim = 8;
  m.layers = 2;
  m.heads = 2;
  m.temporal_dim = 16;
  m.temporal_layers = 1;
  m.temporal_heads = 2;
  m.horizon = horizon;
  m.dropout = 0.0;
  return m;
}

scuc::Schedule random_schedule(const grid::GridCase& c, std::size_t T, Rng& rng) {
  scuc::Schedule s;
  s.horizon = T;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> u, p;
    for (const auto& g : c.generators()) {
      const bool on = uniform(rng, 0.0, 1.0) < 0.6;
      u.push_back(on ? 1.0 : 0.0);
      p.push_back(on ? uniform(rng, g.pmin, g.pmax) : 0.0);
    }
    s.u.push_back(u);
    s.p.push_back(p);
  }
  return s;
}

Tensor flat(const std::vector<double>& v) { return Tensor::vector(v); }

struct Sample {
  ad::ScalarLoss loss;
  Tensor point;
};

std::vector<const model::Param*> pick(const model::ParamStore& ps, bool decoders_only) {
  std::vector<const model::Param*> out;
  for (const auto& p : ps.params())
    if (!decoders_only || !model::is_encoder_group(p.group)) out.push_back(&p);
  return out;
}

Tensor flatten(const std::vector<const model::Param*>& order) {
  std::vector<double> v;
  for (const auto* p : order) v.insert(v.end(), p->value.values().begin(), p->value.values().end());
  return flat(v);
}

void bind_flat(model::Binder& b, Var x, const std::vector<const model::Param*>& order) {
  std::size_t at = 0;
  for (const auto* p : order) {
    b.bind(p->name, ad::reshape(ad::slice_rows(x, at, p->value.size()), p->value.shape()));
    at += p->value.size();
  }
}

// Builds one random input for `loss`. Everything the closure needs is held
// by shared pointers so the sample outlives this call.
Sample make_sample(const std::string& loss, const grid::GridCase& c, std::size_t T, Rng& rng) {
  auto gc = std::make_shared<const grid::GridCase>(c);
  auto y = std::make_shared<const grid::Admittance>(grid::build_admittance(c));
  const std::size_t G = c.n_gens();
  if (loss == "phys_loss_opf") {
    auto d = std::make_shared<grid::BusDemand>(random_demand(c, rng));
    return {[gc, y, d](Tape& t, Var x) { return acopf::phys_loss_opf(t, *gc, *y, point_vars(*gc, x), *d); },
            flat(point_values(random_point(c, rng)))};
  }
  if (loss == "sup_loss_opf") {
    auto label = std::make_shared<acopf::OperatingPoint>(random_point(c, rng));
    return {[gc, label](Tape& t, Var x) { return acopf::sup_loss_opf(t, point_vars(*gc, x), *label); },
            flat(point_values(random_point(c, rng)))};
  }
  if (loss == "phys_loss_uc" || loss == "sup_loss_uc" || loss == "consensus_loss") {
    std::vector<double> v;
    for (std::size_t i = 0; i < T * G; ++i) v.push_back(uniform(rng, 0.02, 0.98));
    for (std::size_t t = 0; t < T; ++t)
      for (const auto& g : c.generators()) v.push_back(uniform(rng, 0.0, 1.2 * g.pmax));
    auto split = [T, G](Var x) {
      std::size_t at = 0;
      Var a = piece(x, at, T, G);
      return std::pair{a, piece(x, at, T, G)};
    };
    if (loss == "phys_loss_uc")
      return {[gc, split](Tape& t, Var x) {
                auto [u, p] = split(x);
                return scuc::phys_loss_uc(t, *gc, u, p);
              },
              flat(v)};
    if (loss == "sup_loss_uc") {
      auto label = std::make_shared<scuc::Schedule>(random_schedule(c, T, rng));
      return {[label, split](Tape& t, Var x) {
                auto [u, p] = split(x);
                return scuc::sup_loss_uc(t, u, p, *label);
              },
              flat(v)};
    }
    return {[split](Tape&, Var x) {
              auto [a, b] = split(x);
              return consensus::consensus_loss(a, b);
            },
            flat(v)};
  }
  const std::uint64_t seed = rng();
  auto ps = std::make_shared<model::ParamStore>(model::init_params(c, tiny_model(T), seed));
  if (loss == "ucacopf_objective") {
    ps->freeze_encoder();
    auto pr = std::make_shared<consensus::Problem>(consensus::make_problem(c, random_series(c, T, rng), *ps));
    train::LossWeights w;
    w.lambda_opf = uniform(rng, 1.0, 10.0);
    w.lambda_uc = uniform(rng, 1.0, 10.0);
    auto order = std::make_shared<std::vector<const model::Param*>>(pick(*ps, true));
    return {[ps, pr, w, order](Tape& t, Var x) {
              model::Binder b(t, *ps, model::Binder::Track::None);
              bind_flat(b, x, *order);
              return consensus::ucacopf_objective(
                  consensus::constraints(t, *pr->grid, *pr->admittance, pr->demand, consensus::forward(b, *pr)), w);
            },
            flatten(*order)};
  }
  if (loss == "total_loss") {
    auto batch = std::make_shared<std::vector<data::Instance>>();
    auto opf = data::make_opf_instance("g-opf", c);
    oracle::OracleSolution lo;
    lo.point = random_point(c, rng);
    opf.label = lo;
    auto uc = data::make_uc_instance("g-uc", c, random_series(c, T, rng));
    oracle::OracleSolution lu;
    lu.problem = oracle::Problem::SCUC;
    lu.schedule = random_schedule(c, T, rng);
    uc.label = lu;
    batch->push_back(std::move(opf));
    batch->push_back(std::move(uc));
    auto order = std::make_shared<std::vector<const model::Param*>>(pick(*ps, false));
    return {[ps, batch, order](Tape& t, Var x) {
              model::Binder b(t, *ps, model::Binder::Track::None);
              bind_flat(b, x, *order);
              return train::total_loss(b, {&(*batch)[0], &(*batch)[1]}, train::LossWeights{});
            },
            flatten(*order)};
  }
  throw std::invalid_argument("unknown loss " + loss);
}

std::string num(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

}  // namespace

const std::vector<std::string>& gradient_losses() {
  static const std::vector<std::string> l = {"phys_loss_opf", "phys_loss_uc",      "sup_loss_opf", "sup_loss_uc",
                                             "consensus_loss", "ucacopf_objective", "total_loss"};
  return l;
}

std::vector<GradRow> gradient_suite(const std::vector<NamedCase>& cases, const GradOptions& options) {
  if (options.samples == 0) throw std::invalid_argument("gradient_suite: samples must be positive");
  std::vector<GradRow> rows;
  for (std::size_t li = 0; li < gradient_losses().size(); ++li) {
    const auto& loss = gradient_losses()[li];
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
      const auto& nc = cases[ci];
      GradRow row;
      row.loss = loss;
      row.case_name = nc.name;
      Rng rng(options.seed * 1000003ULL + li * 7919ULL + ci);
      for (std::size_t s = 0; s < options.samples; ++s) {
        const auto sample = make_sample(loss, nc.grid, options.horizon, rng);
        ad::FdOptions fo;
        fo.step = options.step;
        fo.tol = options.tol;
        fo.max_components = options.components;
        fo.seed = rng();
        const auto rep = ad::finite_diff_check(sample.loss, sample.point, fo);
        row.samples += 1;
        row.checked += rep.checked;
        row.skipped += rep.skipped.size();
        row.max_rel_error = std::max(row.max_rel_error, rep.max_rel_error);
        row.passed = row.passed && rep.passed;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

std::string grad_csv(const std::vector<GradRow>& rows) {
  std::string out = "loss,case,samples,checked,skipped,max_rel_error,passed\n";
  for (const auto& r : rows)
    out += r.loss + "," + r.case_name + "," + std::to_string(r.samples) + "," + std::to_string(r.checked) + "," +
           std::to_string(r.skipped) + "," + num(r.max_rel_error) + "," + (r.passed ? "1" : "0") + "\n";
  return out;
}

LemmaResult lemma_check(std::size_t draws, std::uint64_t seed) {
  Rng rng(seed);
  LemmaResult r;
  r.draws = draws;
  Tensor zeros({draws, 1}, 0.0), x({draws, 1}), u({draws, 1}), p({draws, 1}), pmax({draws, 1});
  for (std::size_t i = 0; i < draws; ++i) {
    // x spans many magnitudes and both signs
    x[i] = std::ldexp(uniform(rng, -1.0, 1.0), static_cast<int>(uniform(rng, -60.0, 60.0)));
    u[i] = uniform(rng, 0.0, 1.0);
    pmax[i] = uniform(rng, 0.0, 10.0);
    p[i] = uniform(rng, 0.0, 1.0) * pmax[i];
  }
  if (draws > 0) {
    u[0] = 1.0;
    p[0] = pmax[0];
  }
  const Tensor z = consensus::couple(zeros, x);
  const Tensor e = consensus::couple(u, p);
  for (std::size_t i = 0; i < draws; ++i) {
    if (z[i] != 0.0) ++r.zero_failures;
    if (!(e[i] <= u[i] * pmax[i])) ++r.capacity_failures;
  }
  return r;
}

TheoryResult theory_suite(const grid::GridCase& c, const grid::DemandSeries& demand, const model::ParamStore& params,
                          const std::vector<double>& lambdas, const consensus::FinetuneConfig& config,
                          std::size_t lemma_draws, std::uint64_t seed, std::size_t threads) {
  TheoryResult r;
  r.lemma = lemma_check(lemma_draws, seed);
  r.sweep = consensus::verify_feasibility_bound(c, demand, params, lambdas, config, threads);
  r.all_reached = true;
  r.strictly_decreasing = true;
  const auto& rows = r.sweep.rows;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    r.max_identity_gap = std::max(r.max_identity_gap, rows[i].report.stationarity.identity_gap());
    r.all_reached = r.all_reached && rows[i].report.reached;
    if (i > 0 && !(rows[i].report.objective.hinge_violation_sq() < rows[i - 1].report.objective.hinge_violation_sq()))
      r.strictly_decreasing = false;
  }
  const double last = rows.back().report.objective.hinge_violation_sq();
  r.ratio = last > 0.0 ? rows.front().report.objective.hinge_violation_sq() / last
                       : std::numeric_limits<double>::infinity();
  r.slope_in_range = std::isfinite(r.sweep.slope) && r.sweep.slope >= 0.5 && r.sweep.slope <= 1.5;
  return r;
}

std::string theory_summary_json(const TheoryResult& r) {
  Json j;
  j["lemma"] = {{"draws", r.lemma.draws},
                {"zero_failures", r.lemma.zero_failures},
                {"capacity_failures", r.lemma.capacity_failures},
                {"passed", r.lemma.passed()}};
  Json rows = Json::array();
  for (const auto& row : r.sweep.rows)
    rows.push_back({{"lambda", row.lambda},
                    {"eta", row.report.eta},
                    {"reached", row.report.reached},
                    {"steps", row.report.steps},
                    {"hinge_violation_sq", row.report.objective.hinge_violation_sq()},
                    {"consensus_residual", row.report.objective.consensus_residual_norm},
                    {"identity_gap", row.report.stationarity.identity_gap()}});
  j["sweep"] = rows;
  j["slope"] = std::isfinite(r.sweep.slope) ? Json(r.sweep.slope) : Json(nullptr);
  j["ratio"] = std::isfinite(r.ratio) ? Json(r.ratio) : Json(nullptr);
  j["all_reached"] = r.all_reached;
  j["strictly_decreasing"] = r.strictly_decreasing;
  j["slope_in_range"] = r.slope_in_range;
  j["max_identity_gap"] = r.max_identity_gap;
  j["identity_ok"] = r.identity_ok();
  j["passed"] = r.passed();
  return j.dump(1) + "\n";
}

}  // namespace gridlearn::app
