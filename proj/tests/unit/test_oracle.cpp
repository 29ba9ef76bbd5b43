#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "brute_force.hpp"
#include "gridlearn/oracle.hpp"

using namespace gridlearn;
using bruteforce::brute_force_two;

namespace {

std::string fixture(const char* name) { return std::string(GRIDLEARN_DATA_DIR) + "/" + name; }

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

grid::GridCase one_unit_case(double min_uptime) {
  grid::CaseData d;
  d.name = "one";
  d.buses = {{1, 100.0, 0.9, 1.1, grid::BusKind::REF}, {2, 100.0, 0.9, 1.1, grid::BusKind::PQ}};
  grid::Branch b;
  b.from_bus = 1;
  b.to_bus = 2;
  b.x = 0.1;
  b.rate_a = 10.0;
  d.branches = {b};
  grid::Generator g;
  g.id = 1;
  g.bus = 1;
  g.pmin = 0.1;
  g.pmax = 1.0;
  g.qmin = -1.0;
  g.qmax = 1.0;
  g.cost_c2 = 0.01;
  g.cost_c1 = 20.0;
  g.cost_c0 = 5.0;
  g.ramp_up = 1.0;
  g.ramp_down = 1.0;
  g.startup_limit = 1.0;
  g.shutdown_limit = 1.0;
  g.min_uptime = min_uptime;
  g.min_downtime = 1.0;
  g.initial_status = -3.0;
  d.generators = {g};
  d.loads = {{2, 0.5, 0.0}};
  return grid::GridCase(d);
}

}  // namespace

TEST_CASE("lossless 2-bus: dispatch equals load") {
  auto c = grid::load_case(fixture("case2.json"));
  auto d = grid::base_demand(c);
  auto s = oracle::solve_acopf(c, d);
  double load = 0.0;
  for (double v : d.pd) load += v;
  double gen = 0.0;
  for (double v : s.point.pg) gen += v;
  CHECK(gen == doctest::Approx(load).epsilon(1e-6));
  CHECK(s.residual.max_mismatch < 1e-6);
}

TEST_CASE("3-bus ACOPF converges and its report is reproducible") {
  auto c = grid::load_case(fixture("case3.json"));
  auto d = grid::base_demand(c);
  auto y = grid::build_admittance(c);
  auto s = oracle::solve_acopf(c, d);
  CHECK(s.residual.max_mismatch < 1e-4);
  auto mm = acopf::ac_mismatch(c, y, s.point, d);
  CHECK(std::abs(std::max(max_abs(mm.dp), max_abs(mm.dq)) - s.residual.max_mismatch) < 1e-9);
  CHECK(std::abs(std::max(0.0, oracle::acopf_limit_violation(c, y, s.point)) - s.residual.max_limit_violation) < 1e-9);
  CHECK(s.residual.max_limit_violation <= 1e-6);
  CHECK(std::abs(acopf::acopf_cost(c, s.point) - s.objective) < 1e-9);
}

TEST_CASE("ACOPF with demand above capacity fails") {
  auto c = grid::load_case(fixture("case3.json"));
  auto d = grid::base_demand(c);
  double cap = 0.0;
  for (const auto& g : c.generators()) cap += g.pmax;
  d.pd[2] = cap + 0.5;
  oracle::AcopfConfig cfg;
  cfg.restarts = 1;
  CHECK_THROWS_AS(oracle::solve_acopf(c, d, cfg), oracle::OracleError);
}

TEST_CASE("ACOPF restarts agree on cost") {
  auto c = grid::load_case(fixture("case3.json"));
  oracle::AcopfConfig cfg;
  cfg.restarts = 5;
  cfg.seed = 3;
  auto s = oracle::solve_acopf(c, grid::base_demand(c), cfg);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  int converged = 0;
  for (double v : s.diagnostics.restart_costs) {
    if (!std::isfinite(v)) continue;
    ++converged;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(s.diagnostics.restart_costs.size() == 6);
  CHECK(converged >= 2);
  CHECK((hi - lo) / lo <= 0.01);
}

TEST_CASE("single unit is forced on") {
  auto c = one_unit_case(1.0);
  auto d = grid::gen_demand_series(c, {1.0, 1.4}, 1.0);
  auto s = oracle::solve_scuc_enum(c, d);
  REQUIRE(s.feasible);
  double expect = 0.0;
  const auto& g = c.generators()[0];
  for (std::size_t t = 0; t < 2; ++t) {
    CHECK(s.schedule.u[t][0] == 1.0);
    CHECK(s.schedule.p[t][0] == doctest::Approx(d.pd[t][1]).epsilon(1e-9));
    const double mw = d.pd[t][1] * 100.0;
    expect += g.cost_c2 * mw * mw + g.cost_c1 * mw + g.cost_c0;
  }
  CHECK(s.objective == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("two units over three hours match a grid-search brute force") {
  auto c = grid::load_case(fixture("case3.json"));
  REQUIRE(c.n_gens() == 2);
  // demand on the 1e-3 grid so the grid search can hit it exactly
  grid::DemandSeries d = grid::gen_demand_series(c, {0.6, 0.9, 1.0}, 1.0);
  for (auto& row : d.pd)
    for (auto& v : row) v = std::round(v * 1000.0) / 1000.0;
  auto s = oracle::solve_scuc_enum(c, d);
  REQUIRE(s.feasible);
  auto b = brute_force_two(c, d, 1e-3);
  REQUIRE(std::isfinite(b.cost));
  CHECK(std::abs(s.objective - b.cost) <= 1e-2);
  // the brute-force optimum is feasible for the full audit, including lines
  scuc::Schedule bs;
  bs.horizon = 3;
  bs.u = b.u;
  bs.p = b.p;
  bs.hard_binary = true;
  CHECK(scuc::audit_schedule(c, d, bs, 1e-6).pct_viol == 0.0);
}

TEST_CASE("dispatch above the cheap unit's capacity matches the brute force") {
  // both units needed every hour; the cheap one saturates
  auto c = grid::load_case(fixture("case3.json"));
  grid::DemandSeries d = grid::gen_demand_series(c, {0.72, 0.8, 0.9}, 1.0);
  for (auto& row : d.pd)
    for (auto& v : row) v = std::round(v * 1000.0) / 1000.0;
  auto s = oracle::solve_scuc_enum(c, d);
  REQUIRE(s.feasible);
  auto b = brute_force_two(c, d, 1e-3);
  REQUIRE(std::isfinite(b.cost));
  CHECK(std::abs(s.objective - b.cost) <= 1e-2);
  for (std::size_t t = 0; t < 3; ++t) CHECK(std::abs(s.schedule.p[t][0] - c.generators()[0].pmax) < 1e-6);
}

TEST_CASE("a unit that cannot finish its minimum up time stays off") {
  auto c = grid::load_case(fixture("case3.json"));
  grid::CaseData data = c.data();
  const std::size_t T = 4;
  // make the initially-off unit the cheap one so it would otherwise start
  REQUIRE(data.generators[1].initial_status < 0);
  data.generators[1].cost_c1 = 1.0;
  data.generators[1].startup_cost = 0.0;
  grid::GridCase cheap(data);
  auto d = grid::gen_demand_series(cheap, std::vector<double>(T, 0.6), 1.0);
  auto free_run = oracle::solve_scuc_enum(cheap, d);
  REQUIRE(free_run.feasible);
  double on_hours = 0.0;
  for (const auto& row : free_run.schedule.u) on_hours += row[1];
  REQUIRE(on_hours > 0.0);

  data.generators[1].min_uptime = T + 1;
  grid::GridCase locked(data);
  auto s = oracle::solve_scuc_enum(locked, d);
  REQUIRE(s.feasible);
  for (const auto& row : s.schedule.u) CHECK(row[1] == 0.0);
}

TEST_CASE("relabeling generators relabels the optimum") {
  auto c = grid::load_case(fixture("case5.json"));
  auto d = grid::gen_demand_series(c, {0.7, 0.9, 1.0}, 1.0);
  auto s = oracle::solve_scuc_enum(c, d);
  REQUIRE(s.feasible);
  grid::CaseData data = c.data();
  std::reverse(data.generators.begin(), data.generators.end());
  grid::GridCase rev(data);
  auto r = oracle::solve_scuc_enum(rev, d);
  REQUIRE(r.feasible);
  CHECK(std::abs(r.objective - s.objective) <= 1e-9 * s.objective);
  const std::size_t G = c.n_gens();
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t g = 0; g < G; ++g) {
      CHECK(r.schedule.u[t][G - 1 - g] == s.schedule.u[t][g]);
      CHECK(std::abs(r.schedule.p[t][G - 1 - g] - s.schedule.p[t][g]) < 1e-6);
    }
  }
}

TEST_CASE("SCUC oracle solutions re-audit clean") {
  auto c = grid::load_case(fixture("case5.json"));
  auto d = grid::gen_demand_series(c, {0.6, 0.8, 1.0, 0.9, 0.7}, 1.0);
  auto s = oracle::solve_scuc_enum(c, d);
  REQUIRE(s.feasible);
  auto r = scuc::audit_schedule(c, d, s.schedule, 1e-6);
  CHECK(r.violated_constraints == 0);
  CHECK(std::abs(r.pct_viol - s.residual.pct_viol) < 1e-9);
  double mx = 0.0;
  for (const auto& f : r.families) mx = std::max(mx, f.max);
  CHECK(std::abs(mx - s.residual.max_violation) < 1e-9);
  CHECK(std::abs(r.cost - s.objective) < 1e-9 * s.objective);
}

TEST_CASE("SCUC infeasibility and limits") {
  auto c = grid::load_case(fixture("case3.json"));
  double cap = 0.0;
  for (const auto& g : c.generators()) cap += g.pmax;
  grid::DemandSeries d = grid::gen_demand_series(c, {1.0, 1.0}, 1.0);
  d.pd[1][2] = cap + 0.1;
  auto s = oracle::solve_scuc_enum(c, d);
  CHECK_FALSE(s.feasible);
  CHECK(std::isnan(s.objective));

  oracle::ScucConfig small;
  small.max_T = 1;
  CHECK_THROWS_AS(oracle::solve_scuc_enum(c, d, small), std::invalid_argument);
}

TEST_CASE("optimality gap") {
  CHECK(oracle::opt_gap(100.0, 100.0) == 0.0);
  CHECK(oracle::opt_gap(110.0, 100.0) == doctest::Approx(10.0));
  CHECK(oracle::opt_gap(96.53, 100.0) == doctest::Approx(-3.47));
  CHECK_THROWS(oracle::opt_gap(1.0, 0.0));
  CHECK_THROWS(oracle::opt_gap(1.0, -5.0));
}

TEST_CASE("hashing") {
  CHECK(oracle::fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(oracle::fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(oracle::hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("solution documents and label cache") {
  auto c = grid::load_case(fixture("case3.json"));
  auto d = grid::base_demand(c);
  auto ac = oracle::solve_acopf(c, d);
  auto back = oracle::parse_solution(oracle::serialize_solution(ac));
  CHECK(back.problem == oracle::Problem::ACOPF);
  CHECK(back.point.vm == ac.point.vm);
  CHECK(back.point.pg == ac.point.pg);
  CHECK(back.objective == ac.objective);
  CHECK(back.diagnostics.restart_costs.size() == ac.diagnostics.restart_costs.size());

  auto series = grid::gen_demand_series(c, {0.8, 0.9}, 1.0);
  auto uc = oracle::solve_scuc_enum(c, series);
  auto ub = oracle::parse_solution(oracle::serialize_solution(uc));
  CHECK(ub.problem == oracle::Problem::SCUC);
  CHECK(ub.schedule.u == uc.schedule.u);
  CHECK(ub.schedule.p == uc.schedule.p);

  const auto dir = std::filesystem::temp_directory_path() / "gridlearn_test_cache";
  std::filesystem::remove_all(dir);
  oracle::LabelCache cache(dir);
  const auto key = cache.key(c, grid::serialize_demand(series), oracle::config_doc(oracle::ScucConfig{}));
  CHECK(key.size() == 16);
  CHECK(key == cache.key(c, grid::serialize_demand(series), oracle::config_doc(oracle::ScucConfig{})));
  oracle::ScucConfig other;
  other.max_T = 6;
  CHECK(key != cache.key(c, grid::serialize_demand(series), oracle::config_doc(other)));
  CHECK_FALSE(cache.get(key).has_value());
  cache.put(key, uc, "test");
  auto got = cache.get(key);
  REQUIRE(got.has_value());
  CHECK(got->objective == uc.objective);
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(oracle::parse_solution("{"), grid::CaseError);
  CHECK_THROWS_AS(oracle::parse_solution("{\"problem\":\"x\"}"), grid::CaseError);
}
