#include <cmath>
#include <random>

#include "doctest.h"
#include "gridlearn/acopf.hpp"
#include "gridlearn/oracle.hpp"

using namespace gridlearn;
using acopf::OperatingPoint;

namespace {

std::string fixture(const char* name) { return std::string(GRIDLEARN_DATA_DIR) + "/" + name; }

grid::GridCase two_bus_reactance(double x) {
  grid::CaseData d;
  d.name = "two";
  d.buses = {{1, 100.0, 0.9, 1.1, grid::BusKind::REF}, {2, 100.0, 0.9, 1.1, grid::BusKind::PQ}};
  grid::Branch b;
  b.from_bus = 1;
  b.to_bus = 2;
  b.x = x;
  b.rate_a = 10.0;
  d.branches = {b};
  grid::Generator g;
  g.id = 1;
  g.bus = 1;
  g.pmax = 2.0;
  g.qmin = -1.0;
  g.qmax = 1.0;
  g.cost_c1 = 10.0;
  d.generators = {g};
  return grid::GridCase(d);
}

OperatingPoint zero_point(const grid::GridCase& c) {
  OperatingPoint p;
  p.vm.assign(c.n_buses(), 1.0);
  p.va.assign(c.n_buses(), 0.0);
  p.pg.assign(c.n_gens(), 0.0);
  p.qg.assign(c.n_gens(), 0.0);
  return p;
}

OperatingPoint random_point(const grid::GridCase& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  OperatingPoint p;
  for (const auto& b : c.buses()) p.vm.push_back(b.vmin + (b.vmax - b.vmin) * u(rng));
  for (std::size_t i = 0; i < c.n_buses(); ++i) p.va.push_back(0.6 * (u(rng) - 0.5));
  for (const auto& g : c.generators()) {
    p.pg.push_back(g.pmin + (g.pmax - g.pmin) * u(rng));
    p.qg.push_back(g.qmin + (g.qmax - g.qmin) * u(rng));
  }
  return p;
}

struct Solved {
  grid::GridCase c;
  grid::Admittance y;
  grid::BusDemand d;
  oracle::OracleSolution s;
};

const Solved& solved3() {
  static const Solved s = [] {
    auto c = grid::load_case(fixture("case3.json"));
    auto y = grid::build_admittance(c);
    auto d = grid::base_demand(c);
    auto sol = oracle::solve_acopf(c, d);
    return Solved{c, y, d, sol};
  }();
  return s;
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Direct polar-form injection, written independently of the engine.
std::pair<double, double> injection(const grid::Admittance& y, const OperatingPoint& p, std::size_t i) {
  double pi = 0.0, qi = 0.0;
  for (std::size_t j = 0; j < y.n; ++j) {
    const double th = p.va[i] - p.va[j];
    pi += p.vm[i] * p.vm[j] * (y.G(i, j) * std::cos(th) + y.B(i, j) * std::sin(th));
    qi += p.vm[i] * p.vm[j] * (y.G(i, j) * std::sin(th) - y.B(i, j) * std::cos(th));
  }
  return {pi, qi};
}

}  // namespace

TEST_CASE("flat start on a pure reactance with no injections has zero mismatch") {
  auto c = two_bus_reactance(1.0);
  auto y = grid::build_admittance(c);
  grid::BusDemand d{{0.0, 0.0}, {0.0, 0.0}};
  auto mm = acopf::ac_mismatch(c, y, zero_point(c), d);
  CHECK(max_abs(mm.dp) == 0.0);
  CHECK(max_abs(mm.dq) == 0.0);
}

TEST_CASE("mismatch matches a direct polar evaluation on case14") {
  auto c = grid::load_case(fixture("case14.json"));
  auto y = grid::build_admittance(c);
  auto d = grid::base_demand(c);
  std::mt19937_64 rng(7);
  auto p = random_point(c, rng);
  auto mm = acopf::ac_mismatch(c, y, p, d);
  for (std::size_t k = 0; k < c.active_buses().size(); ++k) {
    const auto i = c.active_buses()[k];
    auto [pi, qi] = injection(y, p, i);
    double pg = 0.0, qg = 0.0;
    for (auto g : c.gens_at(i)) {
      pg += p.pg[g];
      qg += p.qg[g];
    }
    CHECK(mm.dp[k] == doctest::Approx(pg - d.pd[i] - pi).epsilon(1e-12));
    CHECK(mm.dq[k] == doctest::Approx(qg - d.qd[i] - qi).epsilon(1e-12));
  }
}

TEST_CASE("oracle-solved 3-bus point balances and has zero physics loss") {
  const auto& s = solved3();
  auto mm = acopf::ac_mismatch(s.c, s.y, s.s.point, s.d);
  CHECK(max_abs(mm.dp) < 1e-4);
  CHECK(max_abs(mm.dq) < 1e-4);
  CHECK(acopf::phys_loss_opf(s.c, s.y, s.s.point, s.d) < 1e-8);
  CHECK(acopf::acopf_cost(s.c, s.s.point) == doctest::Approx(s.s.objective).epsilon(1e-6));
}

TEST_CASE("injection linearity at the solved point") {
  const auto& s = solved3();
  auto base = acopf::ac_mismatch(s.c, s.y, s.s.point, s.d);
  for (std::size_t g = 0; g < s.c.n_gens(); ++g) {
    auto p = s.s.point;
    p.pg[g] += 0.1;
    auto mm = acopf::ac_mismatch(s.c, s.y, p, s.d);
    const auto bus = s.c.gen_bus(g);
    for (std::size_t k = 0; k < s.c.active_buses().size(); ++k) {
      const double expect = s.c.active_buses()[k] == bus ? 0.1 : 0.0;
      CHECK(mm.dp[k] - base.dp[k] == doctest::Approx(expect).epsilon(1e-12));
      CHECK(mm.dq[k] == base.dq[k]);
    }
  }
}

TEST_CASE("branch flow closed forms") {
  auto c = two_bus_reactance(1.0);
  auto y = grid::build_admittance(c);
  auto p = zero_point(c);
  auto f0 = acopf::branch_flow(c, y, p);
  CHECK(f0.p_fr[0] == 0.0);
  CHECK(f0.s_fr[0] == 0.0);
  p.va[0] = 0.1;
  auto f = acopf::branch_flow(c, y, p);
  CHECK(f.p_fr[0] == doctest::Approx(std::sin(0.1)).epsilon(1e-12));
  CHECK(f.p_to[0] == doctest::Approx(-std::sin(0.1)).epsilon(1e-12));
}

TEST_CASE("line losses are non-negative at the solved point") {
  const auto& s = solved3();
  auto f = acopf::branch_flow(s.c, s.y, s.s.point);
  for (std::size_t k = 0; k < s.c.n_branches(); ++k) CHECK(f.p_fr[k] + f.p_to[k] >= -1e-12);
}

TEST_CASE("physics loss lower bound with no generation") {
  auto c = two_bus_reactance(1.0);
  auto y = grid::build_admittance(c);
  grid::BusDemand d{{0.0, 1.0}, {0.0, 0.0}};
  CHECK(acopf::phys_loss_opf(c, y, zero_point(c), d) >= 1.0);
}

TEST_CASE("physics loss equals the hand-summed residuals") {
  auto c = grid::load_case(fixture("case5.json"));
  auto y = grid::build_admittance(c);
  auto d = grid::base_demand(c);
  std::mt19937_64 rng(3);
  auto p = random_point(c, rng);
  auto mm = acopf::ac_mismatch(c, y, p, d);
  auto f = acopf::branch_flow(c, y, p);
  double expect = 0.0;
  for (double v : mm.dp) expect += std::abs(v);
  for (double v : mm.dq) expect += std::abs(v);
  for (std::size_t k = 0; k < c.n_branches(); ++k) {
    expect += std::max(0.0, f.s_fr[k] - c.branches()[k].rate_a) + std::max(0.0, f.s_to[k] - c.branches()[k].rate_a);
  }
  CHECK(acopf::phys_loss_opf(c, y, p, d) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("physics loss gradient matches finite differences on random points") {
  for (const char* name : {"case2.json", "case3.json", "case5.json", "case14.json"}) {
    CAPTURE(name);
    auto c = grid::load_case(fixture(name));
    auto y = grid::build_admittance(c);
    auto d = grid::base_demand(c);
    const std::size_t n = c.n_buses(), ng = c.n_gens();
    std::mt19937_64 rng(11);
    const int points = 100;
    for (int k = 0; k < points; ++k) {
      auto p = random_point(c, rng);
      std::vector<double> flat = p.vm;
      flat.insert(flat.end(), p.va.begin(), p.va.end());
      flat.insert(flat.end(), p.pg.begin(), p.pg.end());
      flat.insert(flat.end(), p.qg.begin(), p.qg.end());
      auto loss = [&](ad::Tape& t, ad::Var x) {
        acopf::PointVars v{ad::slice_rows(x, 0, n), ad::slice_rows(x, n, n), ad::slice_rows(x, 2 * n, ng),
                           ad::slice_rows(x, 2 * n + ng, ng)};
        return acopf::phys_loss_opf(t, c, y, v, d);
      };
      auto rep = ad::finite_diff_check(loss, ad::Tensor({flat.size(), 1}, flat), 1e-6, 1e-5);
      CHECK(rep.passed);
      if (!rep.passed) break;
    }
  }
}

TEST_CASE("supervised loss") {
  auto c = grid::load_case(fixture("case3.json"));
  std::mt19937_64 rng(5);
  auto a = random_point(c, rng);
  CHECK(acopf::sup_loss_opf(a, a) == 0.0);
  auto b = a;
  b.vm[1] += 0.1;
  CHECK(acopf::sup_loss_opf(b, a) == doctest::Approx(0.01).epsilon(1e-12));
  auto r = random_point(c, rng);
  double expect = 0.0;
  for (std::size_t i = 0; i < c.n_buses(); ++i) {
    expect += (r.vm[i] - a.vm[i]) * (r.vm[i] - a.vm[i]) + (r.va[i] - a.va[i]) * (r.va[i] - a.va[i]);
  }
  for (std::size_t g = 0; g < c.n_gens(); ++g) {
    expect += (r.pg[g] - a.pg[g]) * (r.pg[g] - a.pg[g]) + (r.qg[g] - a.qg[g]) * (r.qg[g] - a.qg[g]);
  }
  CHECK(acopf::sup_loss_opf(r, a) == doctest::Approx(expect).epsilon(1e-12));
  auto short_label = a;
  short_label.vm.pop_back();
  CHECK_THROWS(acopf::sup_loss_opf(r, short_label));
}

TEST_CASE("generation cost") {
  auto c = grid::load_case(fixture("case3.json"));
  auto p = zero_point(c);
  double c0 = 0.0;
  for (const auto& g : c.generators()) c0 += g.cost_c0;
  CHECK(acopf::acopf_cost(c, p) == doctest::Approx(c0));

  auto two = two_bus_reactance(1.0);
  auto q = zero_point(two);
  q.pg[0] = 0.5;  // 50 MW
  CHECK(acopf::acopf_cost(two, q) == doctest::Approx(500.0).epsilon(1e-12));
}

TEST_CASE("metrics closed forms") {
  acopf::AcResidualReport r;
  const std::size_t n = 6;
  r.dp.assign(n, 1.0);
  r.dq.assign(n, 1.0);
  r.overload_fr.assign(3, 0.0);
  r.overload_to.assign(3, 0.0);
  auto m = acopf::ac_metrics(r, n);
  CHECK(m.pf_viol == doctest::Approx(1.0));
  CHECK(m.viol_norm == doctest::Approx(std::sqrt(2.0)));
  for (std::size_t buses : {1u, 3u, 5u, 14u, 118u, 1000u}) {
    acopf::AcResidualReport ones;
    ones.dp.assign(buses, 1.0);
    ones.dq.assign(buses, 1.0);
    CHECK(acopf::ac_metrics(ones, buses).viol_norm == std::sqrt(2.0));
  }

  acopf::AcResidualReport z;
  z.dp.assign(n, 0.0);
  z.dq.assign(n, 0.0);
  z.overload_fr.assign(3, 0.0);
  z.overload_to.assign(3, 0.0);
  auto mz = acopf::ac_metrics(z, n);
  CHECK(mz.pf_viol == 0.0);
  CHECK(mz.viol_norm == 0.0);
  CHECK_THROWS(acopf::ac_metrics(z, 0));

  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  acopf::AcResidualReport q;
  for (std::size_t i = 0; i < n; ++i) {
    q.dp.push_back(nd(rng));
    q.dq.push_back(nd(rng));
  }
  for (int k = 0; k < 3; ++k) {
    q.overload_fr.push_back(std::abs(nd(rng)));
    q.overload_to.push_back(std::abs(nd(rng)));
  }
  double ss = 0.0, so = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += q.dp[i] * q.dp[i] + q.dq[i] * q.dq[i];
  for (int k = 0; k < 3; ++k) so += q.overload_fr[k] * q.overload_fr[k] + q.overload_to[k] * q.overload_to[k];
  auto mq = acopf::ac_metrics(q, n);
  CHECK(mq.pf_viol == doctest::Approx(std::sqrt(ss / (2.0 * n))));
  CHECK(mq.viol_norm == doctest::Approx(std::sqrt(ss + so) / std::sqrt(double(n))));
}

TEST_CASE("angle translation invariance and demand linearity") {
  auto c = grid::load_case(fixture("case14.json"));
  auto y = grid::build_admittance(c);
  auto d = grid::base_demand(c);
  std::mt19937_64 rng(21);
  auto p = random_point(c, rng);
  auto base = acopf::ac_mismatch(c, y, p, d);
  auto shifted = p;
  for (auto& a : shifted.va) a += 0.37;
  auto mm = acopf::ac_mismatch(c, y, shifted, d);
  for (std::size_t k = 0; k < base.dp.size(); ++k) {
    CHECK(std::abs(mm.dp[k] - base.dp[k]) < 1e-10);
    CHECK(std::abs(mm.dq[k] - base.dq[k]) < 1e-10);
  }
  for (std::size_t k = 0; k < c.active_buses().size(); ++k) {
    const auto i = c.active_buses()[k];
    if (d.pd[i] == 0.0) continue;
    auto d2 = d;
    d2.pd[i] *= 2.0;
    auto m2 = acopf::ac_mismatch(c, y, p, d2);
    for (std::size_t j = 0; j < base.dp.size(); ++j) {
      const double expect = j == k ? -d.pd[i] : 0.0;
      CHECK(m2.dp[j] - base.dp[j] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("zero physics loss iff balanced and within limits") {
  const auto& s = solved3();
  CHECK(acopf::phys_loss_opf(s.c, s.y, s.s.point, s.d) < 1e-8);
  auto p = s.s.point;
  p.qg[0] += 1e-3;
  CHECK(acopf::phys_loss_opf(s.c, s.y, p, s.d) > 1e-8);
}

TEST_CASE("residual report, csv and point round trip") {
  const auto& s = solved3();
  auto r = acopf::residual_report(s.c, s.y, s.s.point, s.d);
  CHECK(r.pf_viol >= 0.0);
  CHECK(r.viol_norm >= 0.0);
  for (double v : r.overload_fr) CHECK(v >= 0.0);
  CHECK(r.cost == doctest::Approx(s.s.objective));
  auto csv = acopf::residual_csv(s.c, r);
  CHECK(csv.rfind("element,id,dp,dq,overload_fr,overload_to", 0) == 0);
  auto back = acopf::parse_point(acopf::serialize_point(s.s.point));
  CHECK(back.vm == s.s.point.vm);
  CHECK(back.va == s.s.point.va);
  CHECK(back.pg == s.s.point.pg);
  CHECK(back.qg == s.s.point.qg);
}

TEST_CASE("dimension mismatches throw") {
  auto c = grid::load_case(fixture("case3.json"));
  auto y = grid::build_admittance(c);
  auto p = zero_point(c);
  grid::BusDemand d{{0.0}, {0.0}};
  CHECK_THROWS(acopf::ac_mismatch(c, y, p, d));
  p.pg.pop_back();
  CHECK_THROWS(acopf::ac_mismatch(c, y, p, grid::base_demand(c)));
}
