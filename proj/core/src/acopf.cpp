#include "gridlearn/acopf.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"

namespace gridlearn::acopf {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor col(const std::vector<double>& v) { return Tensor({v.size(), 1}, v); }

std::vector<double> values(Var v) { return v.value().values(); }

ad::IndexList gen_bus_index(const grid::GridCase& c) {
  std::vector<std::size_t> idx(c.n_gens());
  for (std::size_t g = 0; g < c.n_gens(); ++g) idx[g] = c.gen_bus(g);
  return ad::make_index(std::move(idx));
}

Var injection(Tape& t, const grid::GridCase& c, Var per_gen) {
  if (c.n_gens() == 0) return t.constant(Tensor({c.n_buses(), 1}, 0.0));
  return ad::scatter_add_rows(per_gen, gen_bus_index(c), c.n_buses());
}

void check_len(const std::vector<double>& v, std::size_t n, const char* what) {
  if (v.size() != n) {
    throw std::invalid_argument(std::string("operating point ") + what + " has " + std::to_string(v.size()) +
                                " entries, expected " + std::to_string(n));
  }
}

}  // namespace

void validate_point(const grid::GridCase& c, const OperatingPoint& p) {
  check_len(p.vm, c.n_buses(), "vm");
  check_len(p.va, c.n_buses(), "va");
  check_len(p.pg, c.n_gens(), "pg");
  check_len(p.qg, c.n_gens(), "qg");
  for (const auto* v : {&p.vm, &p.va, &p.pg, &p.qg})
    for (double x : *v)
      if (!std::isfinite(x)) throw std::invalid_argument("operating point has a non-finite entry");
}

OperatingPoint flat_start(const grid::GridCase& c) {
  OperatingPoint p;
  p.vm.assign(c.n_buses(), 1.0);
  p.va.assign(c.n_buses(), 0.0);
  for (const auto& g : c.generators()) {
    p.pg.push_back(0.5 * (g.pmin + g.pmax));
    p.qg.push_back(0.5 * (g.qmin + g.qmax));
  }
  return p;
}

PointVars constant_point(Tape& t, const OperatingPoint& p) {
  return {t.constant(col(p.vm)), t.constant(col(p.va)), t.constant(col(p.pg)), t.constant(col(p.qg))};
}

MismatchVars ac_mismatch(Tape& t, const grid::GridCase& c, const grid::Admittance& y, const PointVars& x,
                         const grid::BusDemand& demand) {
  const std::size_t n = c.n_buses();
  if (x.vm.rows() != n || x.va.rows() != n || x.pg.rows() != c.n_gens() || x.qg.rows() != c.n_gens()) {
    throw ad::ShapeError("ac_mismatch: point dimensions do not match the case");
  }
  if (demand.pd.size() != n || demand.qd.size() != n) {
    throw ad::ShapeError("ac_mismatch: demand must have one entry per bus");
  }
  Var gm = t.constant(Tensor({n, n}, y.g));
  Var bm = t.constant(Tensor({n, n}, y.b));
  // Rectangular voltage e + jf; I = Y V; S = V conj(I).
  Var e = x.vm * ad::cos(x.va);
  Var f = x.vm * ad::sin(x.va);
  Var ir = ad::matmul(gm, e) - ad::matmul(bm, f);
  Var ii = ad::matmul(gm, f) + ad::matmul(bm, e);
  Var p = e * ir + f * ii;
  Var q = f * ir - e * ii;
  Var dp = injection(t, c, x.pg) - t.constant(col(demand.pd)) - p;
  Var dq = injection(t, c, x.qg) - t.constant(col(demand.qd)) - q;
  if (c.active_buses().size() != n) {
    auto act = ad::make_index(c.active_buses());
    dp = ad::gather_rows(dp, act);
    dq = ad::gather_rows(dq, act);
  }
  return {dp, dq};
}

FlowVars branch_flow(Tape& t, const grid::GridCase& c, const grid::Admittance& y, Var vm, Var va) {
  const std::size_t nb = c.n_branches();
  if (nb == 0) throw ad::ShapeError("branch_flow: case has no branches");
  std::vector<std::size_t> fi(nb), ti(nb);
  std::vector<double> gff(nb), bff(nb), gft(nb), bft(nb), gtf(nb), btf(nb), gtt(nb), btt(nb);
  for (std::size_t k = 0; k < nb; ++k) {
    fi[k] = c.branch_from(k);
    ti[k] = c.branch_to(k);
    const auto& b = y.branch[k];
    gff[k] = b.gff;
    bff[k] = b.bff;
    gft[k] = b.gft;
    bft[k] = b.bft;
    gtf[k] = b.gtf;
    btf[k] = b.btf;
    gtt[k] = b.gtt;
    btt[k] = b.btt;
  }
  auto fidx = ad::make_index(fi);
  auto tidx = ad::make_index(ti);
  Var vf = ad::gather_rows(vm, fidx);
  Var vt = ad::gather_rows(vm, tidx);
  Var th = ad::gather_rows(va, fidx) - ad::gather_rows(va, tidx);
  Var cs = ad::cos(th);
  Var sn = ad::sin(th);
  Var vv = vf * vt;
  auto k = [&](const std::vector<double>& v) { return t.constant(col(v)); };
  FlowVars out;
  out.p_fr = ad::square(vf) * k(gff) + vv * (k(gft) * cs + k(bft) * sn);
  out.q_fr = -(ad::square(vf) * k(bff)) + vv * (k(gft) * sn - k(bft) * cs);
  // to side: angle difference is -th
  out.p_to = ad::square(vt) * k(gtt) + vv * (k(gtf) * cs - k(btf) * sn);
  out.q_to = -(ad::square(vt) * k(btt)) + vv * (-(k(gtf) * sn) - k(btf) * cs);
  out.s_fr = ad::sqrt(ad::square(out.p_fr) + ad::square(out.q_fr));
  out.s_to = ad::sqrt(ad::square(out.p_to) + ad::square(out.q_to));
  return out;
}

std::pair<Var, Var> line_overload(Tape& t, const grid::GridCase& c, const FlowVars& f) {
  std::vector<double> rate(c.n_branches());
  for (std::size_t k = 0; k < rate.size(); ++k) rate[k] = c.branches()[k].rate_a;
  Var r = t.constant(col(rate));
  return {ad::relu(f.s_fr - r), ad::relu(f.s_to - r)};
}

Var phys_loss_opf(Tape& t, const grid::GridCase& c, const grid::Admittance& y, const PointVars& x,
                  const grid::BusDemand& demand) {
  auto mm = ac_mismatch(t, c, y, x, demand);
  Var loss = ad::sum(ad::abs_hinge(mm.dp)) + ad::sum(ad::abs_hinge(mm.dq));
  if (c.n_branches() > 0) {
    auto flows = branch_flow(t, c, y, x.vm, x.va);
    auto [ofr, oto] = line_overload(t, c, flows);
    loss = loss + ad::sum(ofr) + ad::sum(oto);
  }
  return loss;
}

Var sup_loss_opf(Tape& t, const PointVars& x, const OperatingPoint& label) {
  auto term = [&](Var v, const std::vector<double>& l, const char* what) {
    if (v.rows() != l.size()) throw ad::ShapeError(std::string("sup_loss_opf: ") + what + " dimension mismatch");
    return ad::sum(ad::square(v - t.constant(col(l))));
  };
  Var loss = term(x.vm, label.vm, "vm") + term(x.va, label.va, "va");
  if (!label.pg.empty()) loss = loss + term(x.pg, label.pg, "pg") + term(x.qg, label.qg, "qg");
  return loss;
}

Var acopf_cost(Tape& t, const grid::GridCase& c, Var pg) {
  std::vector<double> c2, c1;
  double c0 = 0.0;
  for (const auto& g : c.generators()) {
    c2.push_back(g.cost_c2);
    c1.push_back(g.cost_c1);
    c0 += g.cost_c0;
  }
  Var mw = pg * c.base_mva();
  return ad::sum(ad::square(mw) * t.constant(col(c2)) + mw * t.constant(col(c1))) + c0;
}

Mismatch ac_mismatch(const grid::GridCase& c, const grid::Admittance& y, const OperatingPoint& p,
                     const grid::BusDemand& demand) {
  validate_point(c, p);
  Tape t;
  auto mm = ac_mismatch(t, c, y, constant_point(t, p), demand);
  return {values(mm.dp), values(mm.dq)};
}

BranchFlows branch_flow(const grid::GridCase& c, const grid::Admittance& y, const OperatingPoint& p) {
  validate_point(c, p);
  Tape t;
  auto x = constant_point(t, p);
  auto f = branch_flow(t, c, y, x.vm, x.va);
  return {values(f.p_fr), values(f.q_fr), values(f.p_to), values(f.q_to), values(f.s_fr), values(f.s_to)};
}

double phys_loss_opf(const grid::GridCase& c, const grid::Admittance& y, const OperatingPoint& p,
                     const grid::BusDemand& demand) {
  validate_point(c, p);
  Tape t;
  return phys_loss_opf(t, c, y, constant_point(t, p), demand).value().item();
}

double sup_loss_opf(const OperatingPoint& p, const OperatingPoint& label) {
  if (p.vm.size() != label.vm.size() || p.va.size() != label.va.size() || p.pg.size() != label.pg.size() ||
      p.qg.size() != label.qg.size()) {
    throw std::invalid_argument("sup_loss_opf: dimension mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < p.vm.size(); ++i) {
    s += (p.vm[i] - label.vm[i]) * (p.vm[i] - label.vm[i]);
    s += (p.va[i] - label.va[i]) * (p.va[i] - label.va[i]);
  }
  for (std::size_t g = 0; g < p.pg.size(); ++g) {
    s += (p.pg[g] - label.pg[g]) * (p.pg[g] - label.pg[g]);
    s += (p.qg[g] - label.qg[g]) * (p.qg[g] - label.qg[g]);
  }
  return s;
}

double acopf_cost(const grid::GridCase& c, const OperatingPoint& p) {
  double cost = 0.0;
  for (std::size_t g = 0; g < c.n_gens(); ++g) {
    const auto& gen = c.generators()[g];
    const double mw = p.pg.at(g) * c.base_mva();
    cost += gen.cost_c2 * mw * mw + gen.cost_c1 * mw + gen.cost_c0;
  }
  return cost;
}

AcResidualReport residual_report(const grid::GridCase& c, const grid::Admittance& y, const OperatingPoint& p,
                                 const grid::BusDemand& demand) {
  AcResidualReport r;
  auto mm = ac_mismatch(c, y, p, demand);
  r.dp = std::move(mm.dp);
  r.dq = std::move(mm.dq);
  if (c.n_branches() > 0) {
    auto f = branch_flow(c, y, p);
    for (std::size_t k = 0; k < c.n_branches(); ++k) {
      const auto& br = c.branches()[k];
      r.overload_fr.push_back(std::max(0.0, f.s_fr[k] - br.rate_a));
      r.overload_to.push_back(std::max(0.0, f.s_to[k] - br.rate_a));
      const double th = p.va[c.branch_from(k)] - p.va[c.branch_to(k)];
      r.angle_violation.push_back(std::max(0.0, br.angmin - th) + std::max(0.0, th - br.angmax));
      r.max_overload = std::max({r.max_overload, r.overload_fr.back(), r.overload_to.back()});
    }
  }
  for (std::size_t i = 0; i < r.dp.size(); ++i) {
    r.max_mismatch = std::max({r.max_mismatch, std::abs(r.dp[i]), std::abs(r.dq[i])});
  }
  r.cost = acopf_cost(c, p);
  auto m = ac_metrics(r, c.active_buses().size());
  r.pf_viol = m.pf_viol;
  r.viol_norm = m.viol_norm;
  return r;
}

AcMetrics ac_metrics(const AcResidualReport& report, std::size_t n_buses) {
  if (n_buses == 0) throw std::invalid_argument("ac_metrics: n_buses must be positive");
  double sq = 0.0;
  for (double v : report.dp) sq += v * v;
  for (double v : report.dq) sq += v * v;
  const std::size_t n_mis = report.dp.size() + report.dq.size();
  double total = sq;
  for (double v : report.overload_fr) total += v * v;
  for (double v : report.overload_to) total += v * v;
  AcMetrics m;
  m.pf_viol = n_mis == 0 ? 0.0 : std::sqrt(sq / static_cast<double>(n_mis));
  // sqrt of the ratio rather than a ratio of roots: all-ones mismatch gives sqrt(2) exactly
  m.viol_norm = std::sqrt(total / static_cast<double>(n_buses));
  return m;
}

std::string residual_csv(const grid::GridCase& c, const AcResidualReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "element,id,dp,dq,overload_fr,overload_to\n";
  for (std::size_t a = 0; a < report.dp.size(); ++a) {
    os << "bus," << c.buses()[c.active_buses()[a]].id << ',' << report.dp[a] << ',' << report.dq[a] << ",,\n";
  }
  for (std::size_t k = 0; k < report.overload_fr.size(); ++k) {
    os << "branch," << k << ",,," << report.overload_fr[k] << ',' << report.overload_to[k] << '\n';
  }
  return os.str();
}

std::string serialize_point(const OperatingPoint& p) {
  nlohmann::json doc;
  doc["vm"] = p.vm;
  doc["va"] = p.va;
  doc["pg"] = p.pg;
  doc["qg"] = p.qg;
  return doc.dump();
}

OperatingPoint parse_point(std::string_view text) {
  auto doc = nlohmann::json::parse(text.begin(), text.end());
  OperatingPoint p;
  p.vm = doc.at("vm").get<std::vector<double>>();
  p.va = doc.at("va").get<std::vector<double>>();
  p.pg = doc.at("pg").get<std::vector<double>>();
  p.qg = doc.at("qg").get<std::vector<double>>();
  return p;
}

}  // namespace gridlearn::acopf
