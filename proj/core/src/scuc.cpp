#include "gridlearn/scuc.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace gridlearn::scuc {

using ad::Tape;
using ad::Tensor;
using ad::Var;

const char* family_name(Family f) {
  switch (f) {
    case Family::Capacity: return "capacity";
    case Family::RampUp: return "ramp_up";
    case Family::RampDown: return "ramp_down";
    case Family::MinUptime: return "min_uptime";
    case Family::MinDowntime: return "min_downtime";
    case Family::CommitmentLogic: return "commitment_logic";
    case Family::DcBalance: return "dc_balance";
    case Family::LineFlow: return "line_flow";
  }
  return "unknown";
}

bool initially_on(const grid::Generator& g) { return g.initial_status > 0.0; }

std::vector<double> min_run_violations(const grid::Generator& gen, const std::vector<double>& u, double state,
                                       bool strict_horizon) {
  const double required = state == 1.0 ? gen.min_uptime : gen.min_downtime;
  const bool init_match = (state == 1.0) == initially_on(gen);
  const double init_hours = std::abs(gen.initial_status);
  const std::size_t horizon = u.size();
  std::vector<double> out(horizon, 0.0);
  std::size_t t = 0;
  while (t < horizon) {
    if (u[t] != state) {
      ++t;
      continue;
    }
    std::size_t end = t;
    while (end < horizon && u[end] == state) ++end;
    double length = static_cast<double>(end - t);
    const bool carried = t == 0 && init_match;
    if (carried) length += init_hours;
    if ((end < horizon || (strict_horizon && !carried)) && length < required) out[t] = required - length;
    t = end;
  }
  // a carried-over run cut at the first hour
  if (init_match && horizon > 0 && u[0] != state && init_hours < required) {
    out[0] = std::max(out[0], required - init_hours);
  }
  return out;
}

namespace {

void check_matrix(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.size() != rows) throw std::invalid_argument(std::string("schedule ") + what + " does not match horizon");
  for (const auto& r : m) {
    if (r.size() != cols) throw std::invalid_argument(std::string("schedule ") + what + " row width != generator count");
    for (double x : r)
      if (!std::isfinite(x)) throw std::invalid_argument(std::string("schedule ") + what + " has a non-finite entry");
  }
}

}  // namespace

void validate_schedule(const grid::GridCase& c, const Schedule& s) {
  if (s.horizon == 0) throw std::invalid_argument("schedule horizon must be at least 1");
  check_matrix(s.u, s.horizon, c.n_gens(), "u");
  check_matrix(s.p, s.horizon, c.n_gens(), "p");
  if (!s.v.empty()) check_matrix(s.v, s.horizon, c.n_gens(), "v");
  if (!s.w.empty()) check_matrix(s.w, s.horizon, c.n_gens(), "w");
  for (const auto& r : s.u) {
    for (double x : r) {
      if (x < 0.0 || x > 1.0) throw std::invalid_argument("schedule u must lie in [0,1]");
      if (s.hard_binary && x != 0.0 && x != 1.0) throw std::invalid_argument("hard-binary schedule has fractional u");
    }
  }
}

void derive_transitions(const grid::GridCase& c, Schedule& s) {
  const std::size_t ng = c.n_gens();
  s.v.assign(s.horizon, std::vector<double>(ng, 0.0));
  s.w.assign(s.horizon, std::vector<double>(ng, 0.0));
  for (std::size_t g = 0; g < ng; ++g) {
    double prev = initially_on(c.generators()[g]) ? 1.0 : 0.0;
    for (std::size_t t = 0; t < s.horizon; ++t) {
      s.v[t][g] = std::max(0.0, s.u[t][g] - prev);
      s.w[t][g] = std::max(0.0, prev - s.u[t][g]);
      prev = s.u[t][g];
    }
  }
}

Schedule round_schedule(const grid::GridCase& c, const Schedule& s) {
  Schedule r = s;
  for (auto& row : r.u)
    for (auto& x : row) x = x >= 0.5 ? 1.0 : 0.0;
  r.hard_binary = true;
  derive_transitions(c, r);
  return r;
}

Tensor to_tensor(const Matrix& m) {
  if (m.empty() || m[0].empty()) throw ad::ShapeError("to_tensor: empty matrix");
  std::vector<double> flat;
  for (const auto& r : m) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor({m.size(), m[0].size()}, std::move(flat));
}

Matrix to_matrix(const Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

Var phys_loss_uc(Tape& t, const grid::GridCase& c, Var u, Var p) {
  const std::size_t ng = c.n_gens();
  if (u.shape() != p.shape() || u.cols() != ng) throw ad::ShapeError("phys_loss_uc: u and p must be T x n_gens");
  const std::size_t horizon = p.rows();
  std::vector<double> pmax(ng), pmin(ng), ru(ng), rd(ng);
  for (std::size_t g = 0; g < ng; ++g) {
    const auto& gen = c.generators()[g];
    pmax[g] = gen.pmax;
    pmin[g] = gen.pmin;
    ru[g] = gen.ramp_up;
    rd[g] = gen.ramp_down;
  }
  auto row = [&](const std::vector<double>& v) { return t.constant(Tensor({1, ng}, v)); };
  Var loss = ad::sum(ad::square(ad::relu(p - ad::mul_row(u, row(pmax))))) +
             ad::sum(ad::square(ad::relu(ad::mul_row(u, row(pmin)) - p)));
  if (horizon >= 2) {
    Var step = ad::slice_rows(p, 1, horizon - 1) - ad::slice_rows(p, 0, horizon - 1);
    std::vector<double> neg_ru(ng), neg_rd(ng);
    for (std::size_t g = 0; g < ng; ++g) {
      neg_ru[g] = -ru[g];
      neg_rd[g] = -rd[g];
    }
    loss = loss + ad::sum(ad::square(ad::relu(ad::add_row(step, row(neg_ru))))) +
           ad::sum(ad::square(ad::relu(ad::add_row(-step, row(neg_rd)))));
  }
  return loss;
}

double phys_loss_uc(const grid::GridCase& c, const Schedule& s) {
  validate_schedule(c, s);
  Tape t;
  return phys_loss_uc(t, c, t.constant(to_tensor(s.u)), t.constant(to_tensor(s.p))).value().item();
}

Var sup_loss_uc(Tape& t, Var u, Var p, const Schedule& label) {
  Tensor y = to_tensor(label.u);
  Tensor pl = to_tensor(label.p);
  if (u.shape() != y.shape() || p.shape() != pl.shape()) throw ad::ShapeError("sup_loss_uc: dimension mismatch");
  const double eps = kBceClamp;
  Var uc = ad::relu(u - eps) - ad::relu(u - (1.0 - eps)) + eps;
  Var yv = t.constant(y);
  Var one_minus_y = t.constant(y) * -1.0 + 1.0;
  Var bce = -(yv * ad::log(uc) + one_minus_y * ad::log(uc * -1.0 + 1.0));
  return ad::sum(bce) + ad::sum(ad::square(p - t.constant(pl)));
}

double sup_loss_uc(const Schedule& s, const Schedule& label) {
  if (s.u.size() != label.u.size() || s.p.size() != label.p.size()) {
    throw std::invalid_argument("sup_loss_uc: dimension mismatch");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < s.u.size(); ++t) {
    if (s.u[t].size() != label.u[t].size()) throw std::invalid_argument("sup_loss_uc: dimension mismatch");
    for (std::size_t g = 0; g < s.u[t].size(); ++g) {
      const double uc = std::min(std::max(s.u[t][g], kBceClamp), 1.0 - kBceClamp);
      const double y = label.u[t][g];
      total += -(y * std::log(uc) + (1.0 - y) * std::log(1.0 - uc));
      const double e = s.p[t][g] - label.p[t][g];
      total += e * e;
    }
  }
  return total;
}

DcModel build_dc_model(const grid::GridCase& c) {
  DcModel m;
  const std::size_t n = c.n_buses();
  const std::size_t nb = c.n_branches();
  m.n_buses = n;
  m.n_branches = nb;
  m.ptdf.assign(nb * n, 0.0);
  m.shift_flow.assign(nb, 0.0);
  for (const auto& br : c.branches()) m.rate.push_back(br.rate_a);

  // reduced index over active, non-REF buses
  std::vector<long> red(n, -1);
  long m_red = 0;
  for (auto i : c.active_buses())
    if (i != c.ref_bus()) red[i] = m_red++;

  std::vector<double> bk(nb, 0.0);
  std::vector<char> live(nb, 0);
  for (std::size_t k = 0; k < nb; ++k) {
    const auto f = c.branch_from(k), t = c.branch_to(k);
    if (!c.is_active(f) || !c.is_active(t)) continue;
    live[k] = 1;
    bk[k] = 1.0 / (c.branches()[k].x * c.branches()[k].tap);
  }
  if (m_red == 0) return m;

  Eigen::MatrixXd bred = Eigen::MatrixXd::Zero(m_red, m_red);
  Eigen::MatrixXd bf = Eigen::MatrixXd::Zero(static_cast<long>(nb), m_red);
  for (std::size_t k = 0; k < nb; ++k) {
    if (!live[k]) continue;
    const long f = red[c.branch_from(k)], t = red[c.branch_to(k)];
    const long kk = static_cast<long>(k);
    if (f >= 0) {
      bred(f, f) += bk[k];
      bf(kk, f) += bk[k];
    }
    if (t >= 0) {
      bred(t, t) += bk[k];
      bf(kk, t) -= bk[k];
    }
    if (f >= 0 && t >= 0) {
      bred(f, t) -= bk[k];
      bred(t, f) -= bk[k];
    }
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(bred);
  if (!lu.isInvertible()) throw std::runtime_error("DC susceptance matrix is singular");
  Eigen::MatrixXd ptdf_red = bf * lu.inverse();
  for (std::size_t k = 0; k < nb; ++k)
    for (std::size_t i = 0; i < n; ++i)
      if (red[i] >= 0) m.ptdf[k * n + i] = ptdf_red(static_cast<long>(k), red[i]);

  std::vector<double> pshift(n, 0.0);
  bool any_shift = false;
  for (std::size_t k = 0; k < nb; ++k) {
    if (!live[k] || c.branches()[k].shift == 0.0) continue;
    any_shift = true;
    const double s = bk[k] * c.branches()[k].shift;
    pshift[c.branch_from(k)] -= s;
    pshift[c.branch_to(k)] += s;
  }
  if (any_shift) {
    auto base = m.flows(pshift);
    for (std::size_t k = 0; k < nb; ++k) {
      m.shift_flow[k] = -base[k] - (live[k] ? bk[k] * c.branches()[k].shift : 0.0);
    }
  }
  return m;
}

std::vector<double> DcModel::flows(const std::vector<double>& injection) const {
  std::vector<double> f(n_branches, 0.0);
  for (std::size_t k = 0; k < n_branches; ++k) {
    double s = shift_flow[k];
    for (std::size_t i = 0; i < n_buses; ++i) s += ptdf[k * n_buses + i] * injection[i];
    f[k] = s;
  }
  return f;
}

std::size_t audit_constraint_count(const grid::GridCase& c, std::size_t horizon) {
  return 8 * c.n_gens() * horizon + (c.active_buses().size() + c.n_branches()) * horizon;
}

namespace {

void finish(FamilyReport& f, double tol) {
  double sum = 0.0;
  for (double v : f.violation) {
    sum += v;
    f.max = std::max(f.max, v);
    if (v > tol) ++f.violated;
  }
  f.mean = f.violation.empty() ? 0.0 : sum / static_cast<double>(f.violation.size());
}

}  // namespace

UcResidualReport audit_schedule(const grid::GridCase& c, const grid::DemandSeries& demand, const Schedule& input,
                                double tolerance) {
  validate_schedule(c, input);
  grid::validate_demand(c, demand);
  if (demand.horizon != input.horizon) throw std::invalid_argument("audit_schedule: demand horizon mismatch");

  UcResidualReport r;
  Schedule s = input;
  bool fractional = false;
  for (const auto& row : s.u)
    for (double x : row) fractional = fractional || (x != 0.0 && x != 1.0);
  if (fractional || !s.hard_binary) {
    Schedule given = s;
    s = round_schedule(c, s);
    if (!given.v.empty() && !fractional) {
      s.v = given.v;
      s.w = given.w;
    }
    r.rounded = fractional;
  }
  const bool given_transitions = !s.v.empty();
  Schedule derived = s;
  derive_transitions(c, derived);
  if (!given_transitions) {
    s.v = derived.v;
    s.w = derived.w;
  }

  const std::size_t ng = c.n_gens();
  const std::size_t horizon = s.horizon;
  auto& cap = r.families[static_cast<std::size_t>(Family::Capacity)].violation;
  auto& rup = r.families[static_cast<std::size_t>(Family::RampUp)].violation;
  auto& rdn = r.families[static_cast<std::size_t>(Family::RampDown)].violation;
  auto& mup = r.families[static_cast<std::size_t>(Family::MinUptime)].violation;
  auto& mdn = r.families[static_cast<std::size_t>(Family::MinDowntime)].violation;
  auto& logic = r.families[static_cast<std::size_t>(Family::CommitmentLogic)].violation;
  auto& bal = r.families[static_cast<std::size_t>(Family::DcBalance)].violation;
  auto& line = r.families[static_cast<std::size_t>(Family::LineFlow)].violation;

  cap.assign(2 * ng * horizon, 0.0);
  rup.assign(ng * horizon, 0.0);
  rdn.assign(ng * horizon, 0.0);
  mup.assign(ng * horizon, 0.0);
  mdn.assign(ng * horizon, 0.0);
  logic.assign(2 * ng * horizon, 0.0);

  for (std::size_t g = 0; g < ng; ++g) {
    const auto& gen = c.generators()[g];
    double u_prev = initially_on(gen) ? 1.0 : 0.0;
    double p_prev = gen.initial_power;
    for (std::size_t t = 0; t < horizon; ++t) {
      const double u = s.u[t][g], p = s.p[t][g];
      const std::size_t slot = t * ng + g;
      cap[2 * slot] = std::max(0.0, p - u * gen.pmax);
      cap[2 * slot + 1] = std::max(0.0, u * gen.pmin - p);
      rup[slot] = std::max(0.0, p - p_prev - (gen.ramp_up * u_prev + gen.startup_limit * s.v[t][g]));
      rdn[slot] = std::max(0.0, p_prev - p - (gen.ramp_down * u + gen.shutdown_limit * s.w[t][g]));
      logic[2 * slot] = std::abs((u - u_prev) - (s.v[t][g] - s.w[t][g]));
      logic[2 * slot + 1] = std::max(0.0, s.v[t][g] + s.w[t][g] - 1.0);
      u_prev = u;
      p_prev = p;
    }
    std::vector<double> col(horizon);
    for (std::size_t t = 0; t < horizon; ++t) col[t] = s.u[t][g];
    const auto up = min_run_violations(gen, col, 1.0);
    const auto down = min_run_violations(gen, col, 0.0);
    for (std::size_t t = 0; t < horizon; ++t) {
      mup[t * ng + g] = up[t];
      mdn[t * ng + g] = down[t];
    }
  }

  const auto dc = build_dc_model(c);
  const auto& active = c.active_buses();
  for (std::size_t t = 0; t < horizon; ++t) {
    std::vector<double> inj(c.n_buses(), 0.0);
    for (std::size_t i = 0; i < c.n_buses(); ++i) inj[i] = -demand.pd[t][i];
    for (std::size_t g = 0; g < ng; ++g) inj[c.gen_bus(g)] += s.p[t][g];
    for (std::size_t i = 0; i < c.n_buses(); ++i)
      if (!c.is_active(i)) inj[i] = 0.0;
    auto f = dc.flows(inj);
    std::vector<double> net = inj;
    for (std::size_t k = 0; k < c.n_branches(); ++k) {
      net[c.branch_from(k)] -= f[k];
      net[c.branch_to(k)] += f[k];
    }
    for (auto i : active) bal.push_back(std::abs(net[i]));
    for (std::size_t k = 0; k < c.n_branches(); ++k) line.push_back(std::max(0.0, std::abs(f[k]) - dc.rate[k]));
  }

  for (auto& fam : r.families) {
    finish(fam, tolerance);
    r.total_constraints += fam.violation.size();
    r.violated_constraints += fam.violated;
  }
  r.pct_viol = r.total_constraints == 0
                   ? 0.0
                   : 100.0 * static_cast<double>(r.violated_constraints) / static_cast<double>(r.total_constraints);
  r.cost = scuc_cost(c, s);
  return r;
}

double scuc_cost(const grid::GridCase& c, const Schedule& input) {
  Schedule s = input;
  if (s.v.empty()) derive_transitions(c, s);
  double cost = 0.0;
  for (std::size_t t = 0; t < s.horizon; ++t) {
    for (std::size_t g = 0; g < c.n_gens(); ++g) {
      const auto& gen = c.generators()[g];
      const double mw = s.p[t][g] * c.base_mva();
      if (s.u[t][g] != 0.0) cost += s.u[t][g] * (gen.cost_c2 * mw * mw + gen.cost_c1 * mw + gen.cost_c0);
      cost += gen.startup_cost * s.v[t][g] + gen.shutdown_cost * s.w[t][g];
    }
  }
  return cost;
}

UcMetrics uc_metrics(const Schedule& s, const Schedule& label) {
  if (s.u.size() != label.u.size() || s.u.empty()) throw std::invalid_argument("uc_metrics: dimension mismatch");
  double correct = 0.0, sq = 0.0, n = 0.0;
  for (std::size_t t = 0; t < s.u.size(); ++t) {
    if (s.u[t].size() != label.u[t].size()) throw std::invalid_argument("uc_metrics: dimension mismatch");
    for (std::size_t g = 0; g < s.u[t].size(); ++g) {
      const double r = s.u[t][g] >= 0.5 ? 1.0 : 0.0;
      if (r == label.u[t][g]) correct += 1.0;
      const double e = s.p[t][g] - label.p[t][g];
      sq += e * e;
      n += 1.0;
    }
  }
  return {100.0 * correct / n, std::sqrt(sq / n)};
}

std::string audit_csv(const UcResidualReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "family,count,violated,max,mean\n";
  for (std::size_t f = 0; f < kFamilyCount; ++f) {
    const auto& fam = r.families[f];
    os << family_name(static_cast<Family>(f)) << ',' << fam.violation.size() << ',' << fam.violated << ',' << fam.max
       << ',' << fam.mean << '\n';
  }
  return os.str();
}

std::string serialize_schedule(const Schedule& s) {
  nlohmann::json doc;
  doc["horizon"] = s.horizon;
  doc["hard_binary"] = s.hard_binary;
  doc["u"] = s.u;
  doc["p"] = s.p;
  if (!s.v.empty()) {
    doc["v"] = s.v;
    doc["w"] = s.w;
  }
  return doc.dump();
}

Schedule parse_schedule(std::string_view text) {
  auto doc = nlohmann::json::parse(text.begin(), text.end());
  Schedule s;
  s.horizon = doc.at("horizon").get<std::size_t>();
  s.u = doc.at("u").get<Matrix>();
  s.p = doc.at("p").get<Matrix>();
  if (doc.contains("v")) {
    s.v = doc.at("v").get<Matrix>();
    s.w = doc.at("w").get<Matrix>();
  }
  s.hard_binary = doc.value("hard_binary", false);
  return s;
}

}  // namespace gridlearn::scuc
