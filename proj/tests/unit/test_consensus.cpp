#include <cmath>
#include <random>

#include "doctest.h"
#include "gridlearn/consensus.hpp"
#include "gridlearn/oracle.hpp"
#include "gridlearn/scuc.hpp"
#include "test_util.hpp"

using namespace gridlearn;
using consensus::ContractError;
using model::Binder;
using model::ParamStore;
using testutil::fixture;
using testutil::small_config;

namespace {

constexpr std::size_t kT = 4;

struct Setup {
  grid::GridCase c;
  grid::DemandSeries d;
  ParamStore ps;
};

Setup setup(std::uint64_t seed = 7) {
  auto c = grid::load_case(fixture("case3_ucacopf.json"));
  const auto profile = grid::parse_profile(grid::read_text_file(fixture("profile36.json")));
  auto d = grid::gen_demand_series(c, {profile.begin(), profile.begin() + kT}, 0.7);
  auto ps = model::init_params(c, small_config(kT), seed);
  ps.freeze_encoder();
  return {std::move(c), std::move(d), std::move(ps)};
}

train::LossWeights lambdas(double opf, double uc) {
  train::LossWeights w;
  w.lambda_opf = opf;
  w.lambda_uc = uc;
  return w;
}

// Σ max(0, c)² per family from the plain-double residual routines.
std::map<std::string, double> hinge_oracle(const grid::GridCase& c, const grid::DemandSeries& d,
                                           const consensus::CoupledOutput& o) {
  std::map<std::string, double> h;
  auto sq = [](double v) { return v > 0.0 ? v * v : 0.0; };
  const auto y = grid::build_admittance(c);
  const std::size_t G = c.n_gens();
  for (std::size_t t = 0; t < d.horizon; ++t) {
    for (std::size_t g = 0; g < G; ++g) {
      const auto& gen = c.generators()[g];
      const double p = o.p_eff.at(t, g), u = o.u_hat.at(t, g);
      h["uc_capacity"] += sq(p - u * gen.pmax) + sq(u * gen.pmin - p);
      if (t > 0) {
        const double step = p - o.p_eff.at(t - 1, g);
        h["uc_ramp"] += sq(step - gen.ramp_up) + sq(-step - gen.ramp_down);
      }
    }
    const auto mm = acopf::ac_mismatch(c, y, o.points[t], d.at(t));
    for (double v : mm.dp) h["opf_balance_p"] += v * v;
    for (double v : mm.dq) h["opf_balance_q"] += v * v;
    const auto f = acopf::branch_flow(c, y, o.points[t]);
    for (std::size_t k = 0; k < c.n_branches(); ++k)
      h["opf_thermal"] += sq(f.s_fr[k] - c.branches()[k].rate_a) + sq(f.s_to[k] - c.branches()[k].rate_a);
  }
  return h;
}

}  // namespace

TEST_CASE("coupling keeps the effective dispatch inside the committed box") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 10000; ++i) {
    const double pmin = unit(rng) * 0.5, pmax = pmin + unit(rng) * 2.0;
    const double u = i % 10 == 0 ? 0.0 : unit(rng);
    const double p = pmin + (pmax - pmin) * unit(rng);
    const auto e = consensus::couple(ad::Tensor({1, 1}, u), ad::Tensor({1, 1}, p))[0];
    CHECK(e <= u * pmax);
    CHECK(e >= u * pmin);
    if (u == 0.0) CHECK(e == 0.0);
  }
  CHECK_THROWS_AS(consensus::couple(ad::Tensor({2, 1}, 1.0), ad::Tensor({1, 2}, 1.0)), ad::ShapeError);
}

TEST_CASE("consensus loss") {
  CHECK(consensus::consensus_loss(ad::Tensor({1, 1}, 0.3), ad::Tensor({1, 1}, 0.0)) == doctest::Approx(0.09));
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  ad::Tensor a({4, 3}), b({4, 3});
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = n(rng);
    b[i] = n(rng);
  }
  double ref = 0.0;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t g = 0; g < 3; ++g) ref += (a.at(t, g) - b.at(t, g)) * (a.at(t, g) - b.at(t, g));
  CHECK(consensus::consensus_loss(a, b) == doctest::Approx(ref).epsilon(1e-14));
  ad::Tape t;
  CHECK(consensus::consensus_loss(t.constant(a), t.constant(b)).value().item() ==
        doctest::Approx(ref).epsilon(1e-14));
}

TEST_CASE("objective terms match independent residual routines") {
  auto s = setup();
  const auto pr = consensus::make_problem(s.c, s.d, s.ps);
  const auto out = consensus::predict(pr, s.ps);
  REQUIRE(out.points.size() == kT);
  for (std::size_t t = 1; t < kT; ++t) CHECK(out.points[t].vm == out.points[0].vm);

  const auto w = lambdas(3.0, 7.0);
  const auto b = consensus::ucacopf_objective(pr, s.ps, w);
  const auto h = hinge_oracle(s.c, s.d, out);
  for (const auto& [name, v] : h) CHECK(b.hinge_sq.at(name) == doctest::Approx(v).epsilon(1e-10));
  CHECK(b.consensus == doctest::Approx(consensus::consensus_loss(out.p_uc, out.p_eff)).epsilon(1e-12));
  CHECK(b.total == doctest::Approx(b.consensus + 3.0 * b.phys_opf + 7.0 * b.phys_uc).epsilon(1e-12));

  // same UC penalty as the training physics term on (u, p_eff)
  scuc::Schedule sch;
  sch.horizon = kT;
  sch.u = scuc::to_matrix(out.u_hat);
  sch.p = scuc::to_matrix(out.p_eff);
  CHECK(b.phys_uc == doctest::Approx(scuc::phys_loss_uc(s.c, sch)).epsilon(1e-12));
  // capacity can never bind once p_ac sits inside its box
  CHECK(b.hinge_sq.at("uc_capacity") == 0.0);

  const auto b0 = consensus::ucacopf_objective(pr, s.ps, lambdas(0.0, 0.0));
  CHECK(b0.total == b0.consensus);
  CHECK(b0.phys_opf == b.phys_opf);
}

TEST_CASE("aligned, feasible per-hour points have zero objective") {
  auto s = setup();
  const auto y = grid::build_admittance(s.c);
  consensus::CoupledOutput o;
  const std::size_t G = s.c.n_gens();
  o.u_hat = ad::Tensor({kT, G}, 1.0);
  o.p_ac = ad::Tensor({kT, G});
  for (std::size_t t = 0; t < kT; ++t) {
    const auto sol = oracle::solve_acopf(s.c, s.d.at(t));
    REQUIRE(sol.feasible);
    o.points.push_back(sol.point);
    for (std::size_t g = 0; g < G; ++g) o.p_ac.at(t, g) = sol.point.pg[g];
  }
  o.p_eff = consensus::couple(o.u_hat, o.p_ac);
  o.p_uc = o.p_eff;
  const auto b = consensus::ucacopf_objective(s.c, y, s.d, o, lambdas(10.0, 10.0));
  CHECK(b.consensus == 0.0);
  CHECK(b.total < 1e-12);

  o.p_uc.at(1, 0) += 0.3;
  const auto b2 = consensus::ucacopf_objective(s.c, y, s.d, o, lambdas(10.0, 10.0));
  CHECK(b2.consensus == doctest::Approx(0.09).epsilon(1e-12));
}

TEST_CASE("objective gradient matches finite differences over the decoders") {
  auto s = setup(3);
  const auto pr = consensus::make_problem(s.c, s.d, s.ps);
  std::vector<const model::Param*> order;
  const auto flat = testutil::flatten_params(s.ps, [&](const model::Param& p) { return s.ps.trainable(p); }, order);
  REQUIRE(flat.size() > 0);
  const auto w = lambdas(2.0, 5.0);
  auto loss = [&](ad::Tape& t, ad::Var x) {
    Binder b(t, s.ps, Binder::Track::None);
    testutil::bind_flat(b, x, order);
    return consensus::ucacopf_objective(consensus::constraints(t, s.c, *pr.admittance, s.d, consensus::forward(b, pr)),
                                        w);
  };
  ad::FdOptions opt;
  opt.step = 1e-6;
  opt.tol = 1e-5;
  opt.max_components = 300;
  opt.seed = 4;
  const auto rep = ad::finite_diff_check(loss, flat, opt);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("stationarity identity from constructed multipliers") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto s = setup(seed);
    const auto pr = consensus::make_problem(s.c, s.d, s.ps);
    const auto w = lambdas(10.0 * seed, 1.0 + seed);
    const auto rep = consensus::consensus_stationarity_check(pr, s.ps, w, 1e-2);
    CHECK(rep.objective_grad_norm > 0.0);
    CHECK(rep.identity_gap() <= 1e-8);
    CHECK(rep.stationarity_ok);
    CHECK(rep.eta_tilde == rep.objective_grad_norm + 1e-8);
    CHECK(rep.complementarity >= 0.0);
  }
}

TEST_CASE("fine-tuning contract") {
  auto s = setup();
  consensus::FinetuneConfig cfg;
  cfg.max_epochs = 2;
  SUBCASE("unfrozen encoder") {
    s.ps.freeze_encoder(false);
    CHECK_THROWS_AS(consensus::finetune(s.c, s.d, s.ps, {}, cfg), ContractError);
  }
  SUBCASE("infinite eta takes no step") {
    cfg.eta_stop = std::numeric_limits<double>::infinity();
    const auto r = consensus::finetune(s.c, s.d, s.ps, {}, cfg);
    CHECK(r.report.steps == 0);
    CHECK(r.report.reached);
    CHECK(model::identical(r.params, s.ps));
  }
  SUBCASE("bad settings") {
    cfg.eta_stop = 0.0;
    CHECK_THROWS_AS(consensus::finetune(s.c, s.d, s.ps, {}, cfg), std::invalid_argument);
  }
}

TEST_CASE("gradient steps descend and leave the encoder alone") {
  auto s = setup();
  consensus::FinetuneConfig cfg;
  cfg.max_epochs = 10;
  SUBCASE("adam at the default rate") { cfg.optimizer = consensus::Optimizer::Adam; }
  SUBCASE("plain gradient steps") {
    cfg.optimizer = consensus::Optimizer::GradientDescent;
    cfg.learning_rate = 1e-3;
  }
  const auto r = consensus::finetune(s.c, s.d, s.ps, {}, cfg);
  CHECK(r.report.steps == 10);
  REQUIRE(r.trace.size() == 11);
  CHECK(r.trace.back() < r.trace.front());
  bool decoder_moved = false;
  for (std::size_t i = 0; i < s.ps.params().size(); ++i) {
    const auto& a = s.ps.params()[i];
    const auto& b = r.params.params()[i];
    if (model::is_encoder_group(a.group))
      CHECK(ad::bit_identical(a.value, b.value));
    else if (!ad::bit_identical(a.value, b.value))
      decoder_moved = true;
  }
  CHECK(decoder_moved);
  CHECK(r.report.objective.total == doctest::Approx(consensus::ucacopf_objective(
                                                        consensus::make_problem(s.c, s.d, r.params), r.params, {})
                                                        .total)
                                        .epsilon(1e-12));
  // deterministic
  CHECK(model::identical(consensus::finetune(s.c, s.d, s.ps, {}, cfg).params, r.params));
}

TEST_CASE("first adam step is lr * g / (|g| + eps)") {
  auto s = setup();
  consensus::FinetuneConfig cfg;
  cfg.max_epochs = 1;
  cfg.learning_rate = 1e-3;
  const auto e = consensus::evaluate(consensus::make_problem(s.c, s.d, s.ps), s.ps, {});
  const auto r = consensus::finetune(s.c, s.d, s.ps, {}, cfg);
  REQUIRE(r.report.steps == 1);
  double worst = 0.0;
  for (const auto& [name, g] : e.grads) {
    const auto& before = s.ps.value(name);
    const auto& after = r.params.value(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double expect = before[i] - 1e-3 * g[i] / (std::abs(g[i]) + 1e-8);
      worst = std::max(worst, std::abs(after[i] - expect));
    }
  }
  CHECK(worst < 1e-15);
}

TEST_CASE("L-BFGS fine-tuning reaches the stopping tolerance") {
  auto s = setup();
  consensus::FinetuneConfig cfg;
  cfg.optimizer = consensus::Optimizer::Lbfgs;
  cfg.max_epochs = 400;
  cfg.eta_stop = 1e-3;
  const auto r = consensus::finetune(s.c, s.d, s.ps, {}, cfg);
  CHECK(r.report.reached);
  CHECK(r.report.eta <= 1e-3);
  CHECK(r.report.objective.total < r.trace.front());
  CHECK(r.report.stationarity.identity_gap() <= 1e-8);
  CHECK(r.report.stationarity.stationarity_ok);
}

TEST_CASE("feasibility sweep arguments and exports") {
  auto s = setup();
  consensus::FinetuneConfig cfg;
  cfg.max_epochs = 1;
  CHECK_THROWS_AS(consensus::verify_feasibility_bound(s.c, s.d, s.ps, {1.0, 10.0}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(consensus::verify_feasibility_bound(s.c, s.d, s.ps, {1.0, 10.0, 10.0}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(consensus::verify_feasibility_bound(s.c, s.d, s.ps, {0.0, 1.0, 2.0}, cfg), std::invalid_argument);

  const auto a = consensus::verify_feasibility_bound(s.c, s.d, s.ps, {1.0, 10.0, 100.0}, cfg, 1);
  const auto b = consensus::verify_feasibility_bound(s.c, s.d, s.ps, {1.0, 10.0, 100.0}, cfg, 3);
  REQUIRE(a.rows.size() == 3);
  CHECK(consensus::sweep_csv(a) == consensus::sweep_csv(b));
  for (const auto& row : a.rows) {
    CHECK(row.flagged == !row.report.reached);
    CHECK(row.report.lambda_opf == row.lambda);
    CHECK(row.report.lambda_uc == row.lambda);
  }
  const std::string csv = consensus::theory_report_csv({a.rows[0].report});
  CHECK(csv.rfind("lambda_opf,lambda_uc,eta_stop,eta,reached,steps,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);

  const std::string prov = consensus::provenance_json(s.ps, a.rows[0].report);
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(model::param_hash(s.ps)));
  CHECK(prov.find(hash) != std::string::npos);
  CHECK(prov.find("\"lambda_opf\":1.0") != std::string::npos);
}
