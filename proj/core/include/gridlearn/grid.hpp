#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gridlearn::grid {

enum class CaseErrorKind {
  Syntax,
  MissingField,
  DuplicateId,
  DanglingReference,
  Disconnected,
  NoReferenceBus,
  InvalidValue,
};

const char* case_error_kind_name(CaseErrorKind kind);

class CaseError : public std::runtime_error {
 public:
  CaseError(CaseErrorKind kind, const std::string& what);
  CaseErrorKind kind() const noexcept { return kind_; }

 private:
  CaseErrorKind kind_;
};

enum class BusKind { PQ, PV, REF, ISOLATED };

const char* bus_kind_name(BusKind kind);

// All power quantities below are per-unit on the case base_mva once parsed.
// Cost coefficients stay in $/MW^2, $/MW, $.

struct Bus {
  int id = 0;
  double base_kv = 0.0;
  double vmin = 0.9;
  double vmax = 1.1;
  BusKind kind = BusKind::PQ;
};

struct Generator {
  int id = 0;
  int bus = 0;
  double pmin = 0.0;
  double pmax = 0.0;
  double qmin = 0.0;
  double qmax = 0.0;
  double cost_c2 = 0.0;
  double cost_c1 = 0.0;
  double cost_c0 = 0.0;
  double ramp_up = 0.0;
  double ramp_down = 0.0;
  double startup_limit = 0.0;
  double shutdown_limit = 0.0;
  double min_uptime = 0.0;
  double min_downtime = 0.0;
  /// Hours on (> 0) or off (< 0) before the horizon starts.
  double initial_status = 0.0;
  double initial_power = 0.0;
  double startup_cost = 0.0;
  double shutdown_cost = 0.0;
  double vg = 1.0;
  double mbase = 100.0;
  // Initial injections; ACOPF feature columns only.
  double pg = 0.0;
  double qg = 0.0;
  // Production-curve bounds are retained but not used by any formulation.
  double pmin_prod = 0.0;
  double pmax_prod = 0.0;
};

struct Load {
  int bus = 0;
  double pd = 0.0;
  double qd = 0.0;
};

struct Shunt {
  int bus = 0;
  double gs = 0.0;
  double bs = 0.0;
};

struct Branch {
  int from_bus = 0;
  int to_bus = 0;
  double r = 0.0;
  double x = 0.0;
  double b_fr = 0.0;
  double b_to = 0.0;
  double rate_a = 0.0;
  double rate_b = 0.0;
  double rate_c = 0.0;
  double angmin = -1.0471975511965976;
  double angmax = 1.0471975511965976;
  double tap = 1.0;
  double shift = 0.0;
  bool is_transformer = false;
};

/// Plain, mutable description of a case. GridCase validates and indexes it.
struct CaseData {
  std::string name;
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Generator> generators;
  std::vector<Load> loads;
  std::vector<Shunt> shunts;
  std::vector<Branch> branches;
};

/// Immutable, validated grid with index maps.
class GridCase {
 public:
  explicit GridCase(CaseData data);

  const CaseData& data() const noexcept { return data_; }
  const std::string& name() const noexcept { return data_.name; }
  double base_mva() const noexcept { return data_.base_mva; }
  const std::vector<Bus>& buses() const noexcept { return data_.buses; }
  const std::vector<Generator>& generators() const noexcept { return data_.generators; }
  const std::vector<Load>& loads() const noexcept { return data_.loads; }
  const std::vector<Shunt>& shunts() const noexcept { return data_.shunts; }
  const std::vector<Branch>& branches() const noexcept { return data_.branches; }

  std::size_t n_buses() const noexcept { return data_.buses.size(); }
  std::size_t n_gens() const noexcept { return data_.generators.size(); }
  std::size_t n_branches() const noexcept { return data_.branches.size(); }

  std::size_t bus_index(int bus_id) const;
  std::size_t gen_bus(std::size_t g) const { return gen_bus_[g]; }
  std::size_t load_bus(std::size_t l) const { return load_bus_[l]; }
  std::size_t shunt_bus(std::size_t s) const { return shunt_bus_[s]; }
  std::size_t branch_from(std::size_t k) const { return branch_from_[k]; }
  std::size_t branch_to(std::size_t k) const { return branch_to_[k]; }
  /// Generator indices attached to bus index i.
  const std::vector<std::size_t>& gens_at(std::size_t i) const { return gens_at_[i]; }
  /// Bus indices that take part in power balance, ascending.
  const std::vector<std::size_t>& active_buses() const noexcept { return active_; }
  bool is_active(std::size_t i) const { return data_.buses[i].kind != BusKind::ISOLATED; }
  std::size_t ref_bus() const noexcept { return ref_; }
  /// Aggregate base demand per bus index.
  const std::vector<double>& base_pd() const noexcept { return base_pd_; }
  const std::vector<double>& base_qd() const noexcept { return base_qd_; }

 private:
  CaseData data_;
  std::map<int, std::size_t> bus_index_;
  std::vector<std::size_t> gen_bus_, load_bus_, shunt_bus_, branch_from_, branch_to_;
  std::vector<std::vector<std::size_t>> gens_at_;
  std::vector<std::size_t> active_;
  std::size_t ref_ = 0;
  std::vector<double> base_pd_, base_qd_;
};

/// Parses a case document. Powers in MW/MVar are converted to per-unit unless
/// the document declares "units": "per_unit".
GridCase parse_case(std::string_view text);
GridCase load_case(const std::filesystem::path& path);
/// Writes the case in per-unit so that parse_case(serialize_case(c)) == c.
std::string serialize_case(const GridCase& c);

bool identical(const GridCase& a, const GridCase& b);

/// Dense bus admittance Y = G + jB with per-branch two-port entries.
struct Admittance {
  struct BranchY {
    double gff, bff, gft, bft, gtf, btf, gtt, btt;
  };
  std::size_t n = 0;
  std::vector<double> g;  // n*n row-major
  std::vector<double> b;
  std::vector<BranchY> branch;

  double G(std::size_t i, std::size_t j) const { return g[i * n + j]; }
  double B(std::size_t i, std::size_t j) const { return b[i * n + j]; }
};

Admittance build_admittance(const GridCase& c);

/// Demand per bus index at one instant.
struct BusDemand {
  std::vector<double> pd;
  std::vector<double> qd;
};

BusDemand base_demand(const GridCase& c);

struct DemandSeries {
  std::size_t horizon = 0;
  std::vector<std::vector<double>> pd;  // [t][bus index]
  std::vector<std::vector<double>> qd;

  BusDemand at(std::size_t t) const { return {pd.at(t), qd.at(t)}; }
};

void validate_demand(const GridCase& c, const DemandSeries& d);

/// pd[t][i] = base pd[i] * profile[t] * discount, qd likewise.
DemandSeries gen_demand_series(const GridCase& c, const std::vector<double>& profile, double discount);

/// Scales each load's pd and qd by an independent factor drawn uniformly from
/// [1 - magnitude, 1 + magnitude].
GridCase perturb_loads(const GridCase& c, std::uint64_t rng_seed, double magnitude);

DemandSeries parse_demand(std::string_view text);
std::string serialize_demand(const DemandSeries& d);

/// Hourly scale factors from a {"profile": [...]} document.
std::vector<double> parse_profile(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace gridlearn::grid
