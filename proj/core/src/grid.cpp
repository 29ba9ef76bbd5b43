#include "gridlearn/grid.hpp"

#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <queue>
#include <random>
#include <sstream>

#include "json.hpp"

namespace gridlearn::grid {

using nlohmann::json;

const char* case_error_kind_name(CaseErrorKind kind) {
  switch (kind) {
    case CaseErrorKind::Syntax: return "syntax";
    case CaseErrorKind::MissingField: return "missing field";
    case CaseErrorKind::DuplicateId: return "duplicate id";
    case CaseErrorKind::DanglingReference: return "dangling reference";
    case CaseErrorKind::Disconnected: return "disconnected graph";
    case CaseErrorKind::NoReferenceBus: return "reference bus";
    case CaseErrorKind::InvalidValue: return "invalid value";
  }
  return "case error";
}

CaseError::CaseError(CaseErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(case_error_kind_name(kind)) + ": " + what), kind_(kind) {}

const char* bus_kind_name(BusKind kind) {
  switch (kind) {
    case BusKind::PQ: return "PQ";
    case BusKind::PV: return "PV";
    case BusKind::REF: return "REF";
    case BusKind::ISOLATED: return "ISOLATED";
  }
  return "PQ";
}

namespace {

[[noreturn]] void invalid(const std::string& what) { throw CaseError(CaseErrorKind::InvalidValue, what); }

bool finite_all(std::initializer_list<double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

GridCase::GridCase(CaseData data) : data_(std::move(data)) {
  if (!(data_.base_mva > 0.0) || !std::isfinite(data_.base_mva)) invalid("base_mva must be positive");
  if (data_.buses.empty()) invalid("case has no buses");

  const std::size_t n = data_.buses.size();
  std::size_t n_ref = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& b = data_.buses[i];
    if (!bus_index_.emplace(b.id, i).second) {
      throw CaseError(CaseErrorKind::DuplicateId, "bus id " + std::to_string(b.id));
    }
    if (!finite_all({b.base_kv, b.vmin, b.vmax}) || !(b.vmin > 0.0) || b.vmin > b.vmax) {
      invalid("bus " + std::to_string(b.id) + " needs 0 < vmin <= vmax");
    }
    if (b.kind == BusKind::REF) {
      ref_ = i;
      ++n_ref;
    }
  }
  if (n_ref != 1) {
    throw CaseError(CaseErrorKind::NoReferenceBus,
                    "expected exactly one REF bus, found " + std::to_string(n_ref));
  }

  auto lookup = [&](int id, const std::string& who) {
    auto it = bus_index_.find(id);
    if (it == bus_index_.end()) {
      throw CaseError(CaseErrorKind::DanglingReference, who + " refers to missing bus " + std::to_string(id));
    }
    return it->second;
  };

  gens_at_.assign(n, {});
  std::map<int, std::size_t> gen_ids;
  for (std::size_t g = 0; g < data_.generators.size(); ++g) {
    const auto& gen = data_.generators[g];
    const std::string who = "generator " + std::to_string(gen.id);
    if (!gen_ids.emplace(gen.id, g).second) throw CaseError(CaseErrorKind::DuplicateId, who);
    gen_bus_.push_back(lookup(gen.bus, who));
    gens_at_[gen_bus_.back()].push_back(g);
    if (!finite_all({gen.pmin, gen.pmax, gen.qmin, gen.qmax, gen.cost_c2, gen.cost_c1, gen.cost_c0, gen.ramp_up,
                     gen.ramp_down, gen.startup_limit, gen.shutdown_limit, gen.min_uptime, gen.min_downtime,
                     gen.initial_status, gen.initial_power, gen.startup_cost, gen.shutdown_cost, gen.vg, gen.mbase,
                     gen.pg, gen.qg, gen.pmin_prod, gen.pmax_prod})) {
      invalid(who + " has a non-finite field");
    }
    if (gen.pmin > gen.pmax) invalid(who + " has pmin > pmax");
    if (gen.qmin > gen.qmax) invalid(who + " has qmin > qmax");
    if (gen.ramp_up < 0.0 || gen.ramp_down < 0.0) invalid(who + " has a negative ramp limit");
    if (gen.min_uptime < 0.0 || gen.min_downtime < 0.0) invalid(who + " has a negative min up/down time");
  }

  base_pd_.assign(n, 0.0);
  base_qd_.assign(n, 0.0);
  for (const auto& l : data_.loads) {
    load_bus_.push_back(lookup(l.bus, "load"));
    if (!finite_all({l.pd, l.qd})) invalid("load has a non-finite demand");
    base_pd_[load_bus_.back()] += l.pd;
    base_qd_[load_bus_.back()] += l.qd;
  }
  for (const auto& s : data_.shunts) {
    shunt_bus_.push_back(lookup(s.bus, "shunt"));
    if (!finite_all({s.gs, s.bs})) invalid("shunt has a non-finite admittance");
  }

  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t k = 0; k < data_.branches.size(); ++k) {
    const auto& br = data_.branches[k];
    const std::string who = "branch " + std::to_string(k);
    branch_from_.push_back(lookup(br.from_bus, who));
    branch_to_.push_back(lookup(br.to_bus, who));
    if (!finite_all({br.r, br.x, br.b_fr, br.b_to, br.rate_a, br.rate_b, br.rate_c, br.angmin, br.angmax, br.tap,
                     br.shift})) {
      invalid(who + " has a non-finite field");
    }
    if (br.x == 0.0) invalid(who + " has x == 0");
    if (br.angmin > br.angmax) invalid(who + " has angmin > angmax");
    if (!(br.rate_a > 0.0)) invalid(who + " needs rate_a > 0");
    if (!(br.tap > 0.0)) invalid(who + " needs tap > 0");
    const auto f = branch_from_.back(), t = branch_to_.back();
    if (f == t) invalid(who + " is a self loop");
    if (is_active(f) && is_active(t)) {
      adj[f].push_back(t);
      adj[t].push_back(f);
    }
  }

  for (std::size_t i = 0; i < n; ++i)
    if (is_active(i)) active_.push_back(i);

  std::vector<char> seen(n, 0);
  std::queue<std::size_t> q;
  q.push(ref_);
  seen[ref_] = 1;
  std::size_t reached = 1;
  while (!q.empty()) {
    auto i = q.front();
    q.pop();
    for (auto j : adj[i]) {
      if (!seen[j]) {
        seen[j] = 1;
        ++reached;
        q.push(j);
      }
    }
  }
  if (reached != active_.size()) {
    throw CaseError(CaseErrorKind::Disconnected, std::to_string(active_.size() - reached) +
                                                     " non-isolated buses are unreachable from the REF bus");
  }
}

std::size_t GridCase::bus_index(int bus_id) const {
  auto it = bus_index_.find(bus_id);
  if (it == bus_index_.end()) {
    throw CaseError(CaseErrorKind::DanglingReference, "no bus with id " + std::to_string(bus_id));
  }
  return it->second;
}

namespace {

const json& field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw CaseError(CaseErrorKind::Syntax, where + " is not an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw CaseError(CaseErrorKind::MissingField, where + "." + key);
  return *it;
}

double num(const json& obj, const char* key, const std::string& where) {
  const auto& v = field(obj, key, where);
  if (!v.is_number()) throw CaseError(CaseErrorKind::Syntax, where + "." + key + " is not a number");
  return v.get<double>();
}

double num_or(const json& obj, const char* key, double fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  return num(obj, key, where);
}

int integer(const json& obj, const char* key, const std::string& where) {
  const auto& v = field(obj, key, where);
  if (!v.is_number_integer()) throw CaseError(CaseErrorKind::Syntax, where + "." + key + " is not an integer");
  return v.get<int>();
}

const json& array(const json& obj, const char* key) {
  const auto& v = field(obj, key, "case");
  if (!v.is_array()) throw CaseError(CaseErrorKind::Syntax, std::string("case.") + key + " is not an array");
  return v;
}

BusKind parse_kind(const json& v, const std::string& where) {
  if (!v.is_string()) throw CaseError(CaseErrorKind::Syntax, where + ".kind is not a string");
  const auto s = v.get<std::string>();
  if (s == "PQ") return BusKind::PQ;
  if (s == "PV") return BusKind::PV;
  if (s == "REF") return BusKind::REF;
  if (s == "ISOLATED") return BusKind::ISOLATED;
  throw CaseError(CaseErrorKind::InvalidValue, where + ".kind '" + s + "'");
}

}  // namespace

GridCase parse_case(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw CaseError(CaseErrorKind::Syntax, e.what());
  }
  if (!doc.is_object()) throw CaseError(CaseErrorKind::Syntax, "case document must be an object");

  CaseData d;
  const auto& name = field(doc, "name", "case");
  if (!name.is_string()) throw CaseError(CaseErrorKind::Syntax, "case.name is not a string");
  d.name = name.get<std::string>();
  d.base_mva = num(doc, "base_mva", "case");
  if (!(d.base_mva > 0.0)) invalid("base_mva must be positive");

  bool per_unit = false;
  if (doc.contains("units")) {
    const auto u = doc["units"].get<std::string>();
    if (u == "per_unit") {
      per_unit = true;
    } else if (u != "MW") {
      invalid("units must be MW or per_unit");
    }
  }
  const double s = per_unit ? 1.0 : d.base_mva;
  auto pu = [&](double mw) { return per_unit ? mw : mw / s; };

  int k = 0;
  for (const auto& b : array(doc, "buses")) {
    const std::string w = "buses[" + std::to_string(k++) + "]";
    Bus bus;
    bus.id = integer(b, "id", w);
    bus.base_kv = num(b, "base_kv", w);
    bus.vmin = num(b, "vmin", w);
    bus.vmax = num(b, "vmax", w);
    bus.kind = parse_kind(field(b, "kind", w), w);
    d.buses.push_back(bus);
  }
  k = 0;
  for (const auto& g : array(doc, "generators")) {
    const std::string w = "generators[" + std::to_string(k++) + "]";
    Generator gen;
    gen.id = integer(g, "id", w);
    gen.bus = integer(g, "bus", w);
    gen.pmin = pu(num(g, "pmin", w));
    gen.pmax = pu(num(g, "pmax", w));
    gen.qmin = pu(num(g, "qmin", w));
    gen.qmax = pu(num(g, "qmax", w));
    gen.cost_c2 = num(g, "cost_c2", w);
    gen.cost_c1 = num(g, "cost_c1", w);
    gen.cost_c0 = num(g, "cost_c0", w);
    gen.ramp_up = pu(num(g, "ramp_up", w));
    gen.ramp_down = pu(num(g, "ramp_down", w));
    gen.startup_limit = pu(num(g, "startup_limit", w));
    gen.shutdown_limit = pu(num(g, "shutdown_limit", w));
    gen.min_uptime = num(g, "min_uptime", w);
    gen.min_downtime = num(g, "min_downtime", w);
    gen.initial_status = num(g, "initial_status", w);
    gen.initial_power = pu(num(g, "initial_power", w));
    gen.startup_cost = num(g, "startup_cost", w);
    gen.shutdown_cost = num(g, "shutdown_cost", w);
    gen.vg = num(g, "vg", w);
    gen.mbase = num(g, "mbase", w);
    gen.pg = pu(num_or(g, "pg", 0.0, w));
    gen.qg = pu(num_or(g, "qg", 0.0, w));
    gen.pmin_prod = pu(num_or(g, "pmin_prod", 0.0, w));
    gen.pmax_prod = pu(num_or(g, "pmax_prod", 0.0, w));
    d.generators.push_back(gen);
  }
  k = 0;
  for (const auto& l : array(doc, "loads")) {
    const std::string w = "loads[" + std::to_string(k++) + "]";
    d.loads.push_back({integer(l, "bus", w), pu(num(l, "pd", w)), pu(num(l, "qd", w))});
  }
  k = 0;
  for (const auto& sh : array(doc, "shunts")) {
    const std::string w = "shunts[" + std::to_string(k++) + "]";
    d.shunts.push_back({integer(sh, "bus", w), pu(num(sh, "gs", w)), pu(num(sh, "bs", w))});
  }
  k = 0;
  for (const auto& b : array(doc, "branches")) {
    const std::string w = "branches[" + std::to_string(k++) + "]";
    Branch br;
    br.from_bus = integer(b, "from_bus", w);
    br.to_bus = integer(b, "to_bus", w);
    br.r = num(b, "r", w);
    br.x = num(b, "x", w);
    br.b_fr = num(b, "b_fr", w);
    br.b_to = num(b, "b_to", w);
    br.rate_a = pu(num(b, "rate_a", w));
    br.rate_b = pu(num_or(b, "rate_b", 0.0, w));
    br.rate_c = pu(num_or(b, "rate_c", 0.0, w));
    br.angmin = num(b, "angmin", w);
    br.angmax = num(b, "angmax", w);
    br.tap = num(b, "tap", w);
    br.shift = num(b, "shift", w);
    const auto& tr = field(b, "is_transformer", w);
    if (!tr.is_boolean()) throw CaseError(CaseErrorKind::Syntax, w + ".is_transformer is not a boolean");
    br.is_transformer = tr.get<bool>();
    d.branches.push_back(br);
  }
  return GridCase(std::move(d));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

GridCase load_case(const std::filesystem::path& path) { return parse_case(read_text_file(path)); }

std::string serialize_case(const GridCase& c) {
  const auto& d = c.data();
  json doc;
  doc["name"] = d.name;
  doc["base_mva"] = d.base_mva;
  doc["units"] = "per_unit";
  doc["buses"] = json::array();
  for (const auto& b : d.buses) {
    doc["buses"].push_back(
        {{"id", b.id}, {"base_kv", b.base_kv}, {"vmin", b.vmin}, {"vmax", b.vmax}, {"kind", bus_kind_name(b.kind)}});
  }
  doc["generators"] = json::array();
  for (const auto& g : d.generators) {
    doc["generators"].push_back({{"id", g.id},
                                 {"bus", g.bus},
                                 {"pmin", g.pmin},
                                 {"pmax", g.pmax},
                                 {"qmin", g.qmin},
                                 {"qmax", g.qmax},
                                 {"cost_c2", g.cost_c2},
                                 {"cost_c1", g.cost_c1},
                                 {"cost_c0", g.cost_c0},
                                 {"ramp_up", g.ramp_up},
                                 {"ramp_down", g.ramp_down},
                                 {"startup_limit", g.startup_limit},
                                 {"shutdown_limit", g.shutdown_limit},
                                 {"min_uptime", g.min_uptime},
                                 {"min_downtime", g.min_downtime},
                                 {"initial_status", g.initial_status},
                                 {"initial_power", g.initial_power},
                                 {"startup_cost", g.startup_cost},
                                 {"shutdown_cost", g.shutdown_cost},
                                 {"vg", g.vg},
                                 {"mbase", g.mbase},
                                 {"pg", g.pg},
                                 {"qg", g.qg},
                                 {"pmin_prod", g.pmin_prod},
                                 {"pmax_prod", g.pmax_prod}});
  }
  doc["loads"] = json::array();
  for (const auto& l : d.loads) doc["loads"].push_back({{"bus", l.bus}, {"pd", l.pd}, {"qd", l.qd}});
  doc["shunts"] = json::array();
  for (const auto& s : d.shunts) doc["shunts"].push_back({{"bus", s.bus}, {"gs", s.gs}, {"bs", s.bs}});
  doc["branches"] = json::array();
  for (const auto& b : d.branches) {
    doc["branches"].push_back({{"from_bus", b.from_bus},
                               {"to_bus", b.to_bus},
                               {"r", b.r},
                               {"x", b.x},
                               {"b_fr", b.b_fr},
                               {"b_to", b.b_to},
                               {"rate_a", b.rate_a},
                               {"rate_b", b.rate_b},
                               {"rate_c", b.rate_c},
                               {"angmin", b.angmin},
                               {"angmax", b.angmax},
                               {"tap", b.tap},
                               {"shift", b.shift},
                               {"is_transformer", b.is_transformer}});
  }
  return doc.dump(1) + "\n";
}

namespace {

bool same(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

}  // namespace

bool identical(const GridCase& a, const GridCase& b) {
  const auto& x = a.data();
  const auto& y = b.data();
  if (x.name != y.name || !same(x.base_mva, y.base_mva)) return false;
  if (x.buses.size() != y.buses.size() || x.generators.size() != y.generators.size() ||
      x.loads.size() != y.loads.size() || x.shunts.size() != y.shunts.size() ||
      x.branches.size() != y.branches.size()) {
    return false;
  }
  for (std::size_t i = 0; i < x.buses.size(); ++i) {
    const auto &p = x.buses[i], &q = y.buses[i];
    if (p.id != q.id || p.kind != q.kind || !same(p.base_kv, q.base_kv) || !same(p.vmin, q.vmin) ||
        !same(p.vmax, q.vmax))
      return false;
  }
  for (std::size_t i = 0; i < x.generators.size(); ++i) {
    const auto &p = x.generators[i], &q = y.generators[i];
    if (p.id != q.id || p.bus != q.bus) return false;
    const double pv[] = {p.pmin, p.pmax, p.qmin, p.qmax, p.cost_c2, p.cost_c1, p.cost_c0, p.ramp_up,
                         p.ramp_down, p.startup_limit, p.shutdown_limit, p.min_uptime, p.min_downtime,
                         p.initial_status, p.initial_power, p.startup_cost, p.shutdown_cost, p.vg, p.mbase,
                         p.pg, p.qg, p.pmin_prod, p.pmax_prod};
    const double qv[] = {q.pmin, q.pmax, q.qmin, q.qmax, q.cost_c2, q.cost_c1, q.cost_c0, q.ramp_up,
                         q.ramp_down, q.startup_limit, q.shutdown_limit, q.min_uptime, q.min_downtime,
                         q.initial_status, q.initial_power, q.startup_cost, q.shutdown_cost, q.vg, q.mbase,
                         q.pg, q.qg, q.pmin_prod, q.pmax_prod};
    for (std::size_t j = 0; j < std::size(pv); ++j)
      if (!same(pv[j], qv[j])) return false;
  }
  for (std::size_t i = 0; i < x.loads.size(); ++i) {
    const auto &p = x.loads[i], &q = y.loads[i];
    if (p.bus != q.bus || !same(p.pd, q.pd) || !same(p.qd, q.qd)) return false;
  }
  for (std::size_t i = 0; i < x.shunts.size(); ++i) {
    const auto &p = x.shunts[i], &q = y.shunts[i];
    if (p.bus != q.bus || !same(p.gs, q.gs) || !same(p.bs, q.bs)) return false;
  }
  for (std::size_t i = 0; i < x.branches.size(); ++i) {
    const auto &p = x.branches[i], &q = y.branches[i];
    if (p.from_bus != q.from_bus || p.to_bus != q.to_bus || p.is_transformer != q.is_transformer) return false;
    const double pv[] = {p.r, p.x, p.b_fr, p.b_to, p.rate_a, p.rate_b, p.rate_c, p.angmin, p.angmax, p.tap, p.shift};
    const double qv[] = {q.r, q.x, q.b_fr, q.b_to, q.rate_a, q.rate_b, q.rate_c, q.angmin, q.angmax, q.tap, q.shift};
    for (std::size_t j = 0; j < std::size(pv); ++j)
      if (!same(pv[j], qv[j])) return false;
  }
  return true;
}

Admittance build_admittance(const GridCase& c) {
  using cplx = std::complex<double>;
  Admittance y;
  const std::size_t n = c.n_buses();
  y.n = n;
  std::vector<cplx> ybus(n * n, cplx(0.0, 0.0));
  for (std::size_t k = 0; k < c.n_branches(); ++k) {
    const auto& br = c.branches()[k];
    const cplx ys = 1.0 / cplx(br.r, br.x);
    const cplx t = std::polar(br.tap, br.shift);
    const cplx yff = (ys + cplx(0.0, br.b_fr)) / (br.tap * br.tap);
    const cplx ytt = ys + cplx(0.0, br.b_to);
    const cplx yft = -ys / std::conj(t);
    const cplx ytf = -ys / t;
    y.branch.push_back({yff.real(), yff.imag(), yft.real(), yft.imag(), ytf.real(), ytf.imag(), ytt.real(), ytt.imag()});
    const auto f = c.branch_from(k), to = c.branch_to(k);
    ybus[f * n + f] += yff;
    ybus[f * n + to] += yft;
    ybus[to * n + f] += ytf;
    ybus[to * n + to] += ytt;
  }
  for (std::size_t s = 0; s < c.shunts().size(); ++s) {
    const auto i = c.shunt_bus(s);
    ybus[i * n + i] += cplx(c.shunts()[s].gs, c.shunts()[s].bs);
  }
  y.g.resize(n * n);
  y.b.resize(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    y.g[i] = ybus[i].real();
    y.b[i] = ybus[i].imag();
  }
  return y;
}

BusDemand base_demand(const GridCase& c) { return {c.base_pd(), c.base_qd()}; }

void validate_demand(const GridCase& c, const DemandSeries& d) {
  if (d.horizon == 0) throw std::invalid_argument("demand horizon must be at least 1");
  if (d.pd.size() != d.horizon || d.qd.size() != d.horizon) {
    throw std::invalid_argument("demand arrays do not match horizon " + std::to_string(d.horizon));
  }
  for (std::size_t t = 0; t < d.horizon; ++t) {
    if (d.pd[t].size() != c.n_buses() || d.qd[t].size() != c.n_buses()) {
      throw std::invalid_argument("demand row " + std::to_string(t) + " does not have one entry per bus");
    }
    for (std::size_t i = 0; i < c.n_buses(); ++i) {
      if (!std::isfinite(d.pd[t][i]) || !std::isfinite(d.qd[t][i]) || d.pd[t][i] < 0.0) {
        throw std::invalid_argument("demand must be finite and active demand non-negative");
      }
    }
  }
}

DemandSeries gen_demand_series(const GridCase& c, const std::vector<double>& profile, double discount) {
  if (profile.empty()) throw std::invalid_argument("gen_demand_series: empty profile");
  if (!(discount > 0.0 && discount <= 1.0)) throw std::invalid_argument("gen_demand_series: discount must be in (0,1]");
  DemandSeries d;
  d.horizon = profile.size();
  for (double f : profile) {
    if (!std::isfinite(f) || f < 0.0) throw std::invalid_argument("gen_demand_series: profile entries must be >= 0");
    std::vector<double> pd(c.n_buses()), qd(c.n_buses());
    for (std::size_t i = 0; i < c.n_buses(); ++i) {
      pd[i] = c.base_pd()[i] * f * discount;
      qd[i] = c.base_qd()[i] * f * discount;
    }
    d.pd.push_back(std::move(pd));
    d.qd.push_back(std::move(qd));
  }
  return d;
}

GridCase perturb_loads(const GridCase& c, std::uint64_t rng_seed, double magnitude) {
  if (!(magnitude >= 0.0 && magnitude <= 0.5)) throw std::invalid_argument("perturb_loads: magnitude must be in [0,0.5]");
  CaseData d = c.data();
  std::mt19937_64 rng(rng_seed);
  for (auto& l : d.loads) {
    const double u = std::generate_canonical<double, 53>(rng);
    const double factor = 1.0 + magnitude * (2.0 * u - 1.0);
    l.pd *= factor;
    l.qd *= factor;
  }
  return GridCase(std::move(d));
}

namespace {

std::vector<std::vector<double>> matrix_field(const json& doc, const char* key) {
  if (!doc.contains(key) || !doc[key].is_array()) {
    throw CaseError(CaseErrorKind::MissingField, std::string("demand.") + key);
  }
  std::vector<std::vector<double>> out;
  for (const auto& row : doc[key]) {
    if (!row.is_array()) throw CaseError(CaseErrorKind::Syntax, std::string("demand.") + key + " rows must be arrays");
    std::vector<double> r;
    for (const auto& v : row) {
      if (!v.is_number()) throw CaseError(CaseErrorKind::Syntax, std::string("demand.") + key + " entries must be numbers");
      r.push_back(v.get<double>());
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

DemandSeries parse_demand(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw CaseError(CaseErrorKind::Syntax, e.what());
  }
  DemandSeries d;
  if (!doc.contains("horizon") || !doc["horizon"].is_number_integer()) {
    throw CaseError(CaseErrorKind::MissingField, "demand.horizon");
  }
  d.horizon = doc["horizon"].get<std::size_t>();
  d.pd = matrix_field(doc, "pd");
  d.qd = matrix_field(doc, "qd");
  if (d.pd.size() != d.horizon || d.qd.size() != d.horizon) {
    throw CaseError(CaseErrorKind::InvalidValue, "demand rows do not match horizon");
  }
  return d;
}

std::string serialize_demand(const DemandSeries& d) {
  json doc;
  doc["horizon"] = d.horizon;
  doc["pd"] = d.pd;
  doc["qd"] = d.qd;
  return doc.dump() + "\n";
}

std::vector<double> parse_profile(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw CaseError(CaseErrorKind::Syntax, e.what());
  }
  if (!doc.contains("profile") || !doc["profile"].is_array()) throw CaseError(CaseErrorKind::MissingField, "profile");
  return doc["profile"].get<std::vector<double>>();
}

}  // namespace gridlearn::grid
