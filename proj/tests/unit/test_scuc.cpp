#include <cmath>
#include <random>

#include "doctest.h"
#include "gridlearn/oracle.hpp"
#include "gridlearn/scuc.hpp"

using namespace gridlearn;
using scuc::Family;
using scuc::Schedule;

namespace {

std::string fixture(const char* name) { return std::string(GRIDLEARN_DATA_DIR) + "/" + name; }

// Two buses, one unit at the REF bus, load at bus 2.
grid::GridCase single_unit(double pmin, double pmax, double ramp, double min_up) {
  grid::CaseData d;
  d.name = "single";
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
  g.pmin = pmin;
  g.pmax = pmax;
  g.qmin = -1.0;
  g.qmax = 1.0;
  g.cost_c2 = 0.01;
  g.cost_c1 = 20.0;
  g.cost_c0 = 5.0;
  g.ramp_up = ramp;
  g.ramp_down = ramp;
  g.startup_limit = ramp;
  g.shutdown_limit = ramp;
  g.min_uptime = min_up;
  g.min_downtime = 1.0;
  g.initial_status = -5.0;
  d.generators = {g};
  d.loads = {{2, 0.5, 0.0}};
  return grid::GridCase(d);
}

Schedule make(std::size_t horizon, std::size_t ng, double u, double p) {
  Schedule s;
  s.horizon = horizon;
  s.u.assign(horizon, std::vector<double>(ng, u));
  s.p.assign(horizon, std::vector<double>(ng, p));
  return s;
}

grid::DemandSeries demand_for(const grid::GridCase& c, std::vector<double> profile) {
  return grid::gen_demand_series(c, profile, 1.0);
}

struct Fixture3 {
  grid::GridCase c;
  grid::DemandSeries d;
  oracle::OracleSolution s;
};

const Fixture3& case5_solved() {
  static const Fixture3 f = [] {
    auto c = grid::load_case(fixture("case5.json"));
    auto d = demand_for(c, {0.7, 0.85, 1.0, 0.9});
    auto s = oracle::solve_scuc_enum(c, d);
    return Fixture3{c, d, s};
  }();
  return f;
}

}  // namespace

TEST_CASE("feasible oracle schedule has zero physics loss and clean audit") {
  const auto& f = case5_solved();
  REQUIRE(f.s.feasible);
  CHECK(scuc::phys_loss_uc(f.c, f.s.schedule) < 1e-10);
  auto r = scuc::audit_schedule(f.c, f.d, f.s.schedule);
  CHECK(r.pct_viol == 0.0);
  CHECK(scuc::scuc_cost(f.c, f.s.schedule) == doctest::Approx(f.s.objective).epsilon(1e-12));
}

TEST_CASE("capacity term closed form") {
  auto c = single_unit(0.1, 1.0, 1.0, 1.0);
  auto s = make(1, 1, 1.0, 1.2);
  CHECK(scuc::phys_loss_uc(c, s) == doctest::Approx(0.04).epsilon(1e-12));
}

TEST_CASE("physics loss gradient matches finite differences on random relaxed schedules") {
  auto c = grid::load_case(fixture("case5.json"));
  const std::size_t T = 4, G = c.n_gens();
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    std::vector<double> flat(2 * T * G);
    for (std::size_t i = 0; i < T * G; ++i) flat[i] = u01(rng);
    for (std::size_t i = T * G; i < 2 * T * G; ++i) flat[i] = 2.0 * u01(rng);
    auto loss = [&](ad::Tape& t, ad::Var x) {
      ad::Var u = ad::reshape(ad::slice_rows(x, 0, T * G), {T, G});
      ad::Var p = ad::reshape(ad::slice_rows(x, T * G, T * G), {T, G});
      return scuc::phys_loss_uc(t, c, u, p);
    };
    auto rep = ad::finite_diff_check(loss, ad::Tensor({flat.size(), 1}, flat), 1e-6, 1e-5);
    CHECK(rep.passed);
  }
}

TEST_CASE("supervised loss closed forms") {
  const std::size_t T = 3, G = 2;
  auto label = make(T, G, 1.0, 0.5);
  label.u[1][0] = 0.0;
  label.hard_binary = true;
  double per_term = -std::log(1.0 - scuc::kBceClamp);
  CHECK(per_term < 1e-6);
  CHECK(scuc::sup_loss_uc(label, label) == doctest::Approx(T * G * per_term).epsilon(1e-9));

  auto half = make(T, G, 0.5, 0.5);
  CHECK(scuc::sup_loss_uc(half, label) == doctest::Approx(T * G * std::log(2.0)).epsilon(1e-12));

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto r = make(T, G, 0.0, 0.0);
  double expect = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t g = 0; g < G; ++g) {
      r.u[t][g] = u01(rng);
      r.p[t][g] = u01(rng);
      const double y = label.u[t][g];
      expect += -(y * std::log(r.u[t][g]) + (1 - y) * std::log(1 - r.u[t][g]));
      expect += (r.p[t][g] - label.p[t][g]) * (r.p[t][g] - label.p[t][g]);
    }
  }
  CHECK(scuc::sup_loss_uc(r, label) == doctest::Approx(expect).epsilon(1e-12));

  // the differentiable form agrees with the plain one
  ad::Tape tape;
  auto v = scuc::sup_loss_uc(tape, tape.constant(scuc::to_tensor(r.u)), tape.constant(scuc::to_tensor(r.p)), label);
  CHECK(v.value().item() == doctest::Approx(expect).epsilon(1e-12));

  auto short_label = label;
  short_label.u.pop_back();
  short_label.p.pop_back();
  CHECK_THROWS(scuc::sup_loss_uc(r, short_label));
}

TEST_CASE("min uptime violation magnitude") {
  auto c = single_unit(0.1, 1.0, 1.0, 3.0);
  auto d = demand_for(c, {1.0, 1.0, 1.0, 1.0});
  auto s = make(4, 1, 0.0, 0.0);
  s.u[1][0] = 1.0;
  s.p[1][0] = 0.5;
  s.hard_binary = true;
  auto r = scuc::audit_schedule(c, d, s);
  CHECK(r.family(Family::MinUptime).max == doctest::Approx(2.0));
  CHECK(r.family(Family::MinUptime).violated == 1);
}

TEST_CASE("over-generation shows up as balance violation at the slack") {
  const auto& f = case5_solved();
  auto s = f.s.schedule;
  // raise the first online unit; the surplus is absorbed at the REF bus
  std::size_t g = 0;
  while (s.u[0][g] == 0.0) ++g;
  s.p[0][g] += 0.5;
  auto r = scuc::audit_schedule(f.c, f.d, s, 1e-3);
  const auto& bal = r.family(Family::DcBalance);
  std::size_t ref_pos = 0;
  const auto& act = f.c.active_buses();
  while (act[ref_pos] != f.c.ref_bus()) ++ref_pos;
  CHECK(bal.violation[ref_pos] == doctest::Approx(0.5).epsilon(1e-9));
  for (std::size_t k = 0; k < bal.violation.size(); ++k)
    if (k != ref_pos) CHECK(bal.violation[k] < 1e-9);
}

TEST_CASE("scuc cost closed forms") {
  auto c = single_unit(0.1, 1.0, 1.0, 1.0);
  auto off = make(4, 1, 0.0, 0.0);
  off.hard_binary = true;
  CHECK(scuc::scuc_cost(c, off) == 0.0);

  grid::CaseData d = c.data();
  d.generators[0].initial_status = 3.0;
  grid::GridCase on_case(d);
  auto on = make(4, 1, 1.0, 0.6);
  on.hard_binary = true;
  const double mw = 60.0;
  const auto& g = on_case.generators()[0];
  CHECK(scuc::scuc_cost(on_case, on) == doctest::Approx(4 * (g.cost_c2 * mw * mw + g.cost_c1 * mw + g.cost_c0)));
}

TEST_CASE("commitment metrics") {
  auto label = make(3, 2, 1.0, 0.4);
  label.u[0][1] = 0.0;
  auto m = scuc::uc_metrics(label, label);
  CHECK(m.acc == 100.0);
  CHECK(m.rmse_pg == 0.0);

  auto flipped = label;
  for (auto& row : flipped.u)
    for (auto& x : row) x = 1.0 - x;
  CHECK(scuc::uc_metrics(flipped, label).acc == 0.0);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto r = label;
  double correct = 0.0, sq = 0.0;
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t g = 0; g < 2; ++g) {
      r.u[t][g] = u01(rng);
      r.p[t][g] = u01(rng);
      correct += ((r.u[t][g] >= 0.5 ? 1.0 : 0.0) == label.u[t][g]) ? 1.0 : 0.0;
      sq += (r.p[t][g] - label.p[t][g]) * (r.p[t][g] - label.p[t][g]);
    }
  }
  auto mr = scuc::uc_metrics(r, label);
  CHECK(mr.acc == doctest::Approx(100.0 * correct / 6.0));
  CHECK(mr.rmse_pg == doctest::Approx(std::sqrt(sq / 6.0)));
}

TEST_CASE("physics loss is zero exactly when capacity and ramps hold") {
  auto c = grid::load_case(fixture("case5.json"));
  auto d = demand_for(c, {0.8, 0.8, 0.8});
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  int zero_seen = 0, positive_seen = 0;
  for (int k = 0; k < 200; ++k) {
    auto s = make(3, c.n_gens(), 0.0, 0.0);
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t g = 0; g < c.n_gens(); ++g) {
        const auto& gen = c.generators()[g];
        s.u[t][g] = u01(rng) < 0.8 ? 1.0 : 0.0;
        s.p[t][g] = s.u[t][g] * (gen.pmin + (gen.pmax - gen.pmin) * u01(rng) * 1.05);
      }
    }
    s.hard_binary = true;
    auto r = scuc::audit_schedule(c, d, s, 1e-6);
    // the loss skips the first-hour ramp against initial power
    double worst = std::max(r.family(Family::Capacity).max, 0.0);
    for (std::size_t t = 1; t < 3; ++t) {
      for (std::size_t g = 0; g < c.n_gens(); ++g) {
        const auto& gen = c.generators()[g];
        worst = std::max({worst, s.p[t][g] - s.p[t - 1][g] - gen.ramp_up, s.p[t - 1][g] - s.p[t][g] - gen.ramp_down});
      }
    }
    const double loss = scuc::phys_loss_uc(c, s);
    if (worst <= 0.0) {
      CHECK(loss == 0.0);
      ++zero_seen;
    } else if (worst > 1e-6) {
      CHECK(loss > 0.0);
      ++positive_seen;
    }
  }
  CHECK(zero_seen > 0);
  CHECK(positive_seen > 0);
}

TEST_CASE("time reversal symmetry with equal ramp limits") {
  auto c = grid::load_case(fixture("case5.json"));
  for (const auto& g : c.generators()) REQUIRE(g.ramp_up == g.ramp_down);
  std::mt19937_64 rng(30);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto s = make(5, c.n_gens(), 0.0, 0.0);
  for (auto& row : s.u)
    for (auto& x : row) x = u01(rng);
  for (auto& row : s.p)
    for (auto& x : row) x = 2.0 * u01(rng);
  auto rev = s;
  std::reverse(rev.u.begin(), rev.u.end());
  std::reverse(rev.p.begin(), rev.p.end());
  CHECK(scuc::phys_loss_uc(c, rev) == doctest::Approx(scuc::phys_loss_uc(c, s)).epsilon(1e-12));
}

TEST_CASE("constraint count is a closed form") {
  for (const char* name : {"case3.json", "case5.json", "case14.json"}) {
    auto c = grid::load_case(fixture(name));
    for (std::size_t T : {1u, 3u, 6u}) {
      auto d = demand_for(c, std::vector<double>(T, 0.9));
      auto s = make(T, c.n_gens(), 1.0, 0.0);
      s.hard_binary = true;
      auto r = scuc::audit_schedule(c, d, s);
      const std::size_t expect =
          8 * c.n_gens() * T + c.active_buses().size() * T + c.n_branches() * T;
      CHECK(r.total_constraints == expect);
      CHECK(scuc::audit_constraint_count(c, T) == expect);
    }
  }
}

TEST_CASE("offline units: loss decreases as dispatch shrinks to zero") {
  auto c = single_unit(0.1, 1.0, 5.0, 1.0);
  double prev = std::numeric_limits<double>::infinity();
  for (double p : {0.8, 0.4, 0.2, 0.1, 0.01, 0.0}) {
    auto s = make(1, 1, 0.0, p);
    const double loss = scuc::phys_loss_uc(c, s);
    CHECK(loss < prev);
    prev = loss;
  }
  CHECK(prev == 0.0);
  auto neg = make(1, 1, 0.0, -0.1);
  CHECK(scuc::phys_loss_uc(c, neg) > 0.0);
}

TEST_CASE("rounding, transitions and commitment logic") {
  auto c = grid::load_case(fixture("case3.json"));
  auto s = make(3, 2, 0.5, 0.5);
  s.u[1][0] = 0.49;
  auto r = scuc::round_schedule(c, s);
  CHECK(r.hard_binary);
  CHECK(r.u[0][0] == 1.0);
  CHECK(r.u[1][0] == 0.0);
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t g = 0; g < 2; ++g) {
      const double prev = t == 0 ? (scuc::initially_on(c.generators()[g]) ? 1.0 : 0.0) : r.u[t - 1][g];
      CHECK(r.u[t][g] - prev == r.v[t][g] - r.w[t][g]);
      CHECK(r.v[t][g] + r.w[t][g] <= 1.0);
    }
  }
  auto d = demand_for(c, {0.5, 0.5, 0.5});
  auto bad = r;
  bad.v[0][0] = 1.0;  // inconsistent with u
  auto rep = scuc::audit_schedule(c, d, bad);
  CHECK(rep.family(Family::CommitmentLogic).violated > 0);
  auto relaxed = scuc::audit_schedule(c, d, s);
  CHECK(relaxed.rounded);
}

TEST_CASE("line limits are audited") {
  auto c = grid::load_case(fixture("case5.json"));
  grid::CaseData data = c.data();
  for (auto& b : data.branches) b.rate_a = 0.05;
  grid::GridCase tight(data);
  const auto& f = case5_solved();
  auto r = scuc::audit_schedule(tight, f.d, f.s.schedule);
  CHECK(r.family(Family::LineFlow).violated > 0);
}

TEST_CASE("schedule validation and serialization") {
  auto c = grid::load_case(fixture("case3.json"));
  auto s = make(2, 2, 1.0, 0.5);
  s.hard_binary = true;
  auto back = scuc::parse_schedule(scuc::serialize_schedule(s));
  CHECK(back.horizon == 2);
  CHECK(back.u == s.u);
  CHECK(back.p == s.p);
  auto bad = s;
  bad.u[0][0] = 1.5;
  CHECK_THROWS(scuc::validate_schedule(c, bad));
  bad = s;
  bad.u[0][0] = 0.5;
  CHECK_THROWS(scuc::validate_schedule(c, bad));
  bad = s;
  bad.p.pop_back();
  CHECK_THROWS(scuc::validate_schedule(c, bad));
  const auto& f = case5_solved();
  auto csv = scuc::audit_csv(scuc::audit_schedule(f.c, f.d, f.s.schedule));
  CHECK(csv.rfind("family,count,violated,max,mean", 0) == 0);
}
