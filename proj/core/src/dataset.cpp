#include "gridlearn/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "json.hpp"

namespace gridlearn::data {

using json = nlohmann::json;

namespace {

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%04zu", prefix, i + 1);
  return buf;
}

grid::DemandSeries single_step(const grid::GridCase& c) {
  grid::DemandSeries d;
  d.horizon = 1;
  d.pd = {c.base_pd()};
  d.qd = {c.base_qd()};
  return d;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Instance make_opf_instance(std::string id, grid::GridCase c) {
  Instance inst;
  inst.id = std::move(id);
  inst.task = model::Task::Opf;
  inst.demand = single_step(c);
  inst.grid = std::make_shared<const grid::GridCase>(std::move(c));
  inst.admittance = std::make_shared<const grid::Admittance>(grid::build_admittance(*inst.grid));
  return inst;
}

Instance make_uc_instance(std::string id, grid::GridCase c, grid::DemandSeries demand) {
  grid::validate_demand(c, demand);
  Instance inst;
  inst.id = std::move(id);
  inst.task = model::Task::Uc;
  inst.demand = std::move(demand);
  inst.grid = std::make_shared<const grid::GridCase>(std::move(c));
  inst.admittance = std::make_shared<const grid::Admittance>(grid::build_admittance(*inst.grid));
  return inst;
}

std::vector<Instance> gen_opf_instances(const grid::GridCase& base, std::size_t n, double magnitude,
                                        std::uint64_t seed) {
  std::vector<Instance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(make_opf_instance(numbered("opf", i), grid::perturb_loads(base, derive_seed(seed, i), magnitude)));
  return out;
}

std::vector<Instance> gen_uc_instances(const grid::GridCase& base, std::size_t n, double magnitude,
                                       const std::vector<double>& profile, double discount, std::uint64_t seed) {
  std::vector<Instance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    grid::GridCase c = grid::perturb_loads(base, derive_seed(seed ^ 0x5543ULL, i), magnitude);
    grid::DemandSeries d = grid::gen_demand_series(c, profile, discount);
    out.push_back(make_uc_instance(numbered("uc", i), std::move(c), std::move(d)));
  }
  return out;
}

LabelStats label_instances(std::vector<Instance>& instances, const LabelOptions& options) {
  LabelStats stats;
  for (auto& inst : instances) {
    const bool opf = inst.task == model::Task::Opf;
    const std::string cfg = opf ? oracle::config_doc(options.acopf) : oracle::config_doc(options.scuc);
    std::string key;
    if (options.cache != nullptr) {
      key = options.cache->key(*inst.grid, grid::serialize_demand(inst.demand), cfg);
      if (auto hit = options.cache->get(key)) {
        inst.label = *hit;
        ++stats.cache_hits;
        if (!hit->feasible) ++stats.infeasible;
        continue;
      }
    }
    oracle::OracleSolution sol;
    try {
      sol = opf ? oracle::solve_acopf(*inst.grid, inst.static_demand(), options.acopf)
                : oracle::solve_scuc_enum(*inst.grid, inst.demand, options.scuc);
    } catch (const oracle::OracleError& e) {
      sol = oracle::OracleSolution{};
      sol.problem = opf ? oracle::Problem::ACOPF : oracle::Problem::SCUC;
      sol.feasible = false;
      sol.objective = std::numeric_limits<double>::quiet_NaN();
      sol.diagnostics = e.diagnostics;
      stats.failures.push_back(inst.id + ": " + e.what());
    } catch (const std::exception& e) {
      stats.failures.push_back(inst.id + ": " + e.what());
      continue;
    }
    ++stats.solved;
    if (!sol.feasible) ++stats.infeasible;
    if (options.cache != nullptr) options.cache->put(key, sol, inst.id);
    inst.label = std::move(sol);
  }
  return stats;
}

std::string serialize_instance(const Instance& inst) {
  json doc;
  doc["format"] = "gridlearn-instance";
  doc["version"] = 1;
  doc["id"] = inst.id;
  doc["task"] = model::task_name(inst.task);
  doc["case"] = json::parse(grid::serialize_case(*inst.grid));
  doc["demand"] = json::parse(grid::serialize_demand(inst.demand));
  return doc.dump(1) + "\n";
}

Instance parse_instance(std::string_view text) {
  using grid::CaseError;
  using grid::CaseErrorKind;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw CaseError(CaseErrorKind::Syntax, std::string("instance: ") + e.what());
  }
  try {
    if (doc.value("format", "") != "gridlearn-instance")
      throw CaseError(CaseErrorKind::InvalidValue, "not a gridlearn instance document");
    if (doc.at("version").get<int>() != 1) throw CaseError(CaseErrorKind::InvalidValue, "unsupported instance version");
    const std::string task = doc.at("task").get<std::string>();
    grid::GridCase c = grid::parse_case(doc.at("case").dump());
    grid::DemandSeries d = grid::parse_demand(doc.at("demand").dump());
    const std::string id = doc.at("id").get<std::string>();
    if (task == "opf") {
      Instance inst = make_opf_instance(id, std::move(c));
      inst.demand = std::move(d);
      grid::validate_demand(*inst.grid, inst.demand);
      if (inst.demand.horizon != 1) throw CaseError(CaseErrorKind::InvalidValue, "OPF instance needs one demand step");
      return inst;
    }
    if (task == "uc") return make_uc_instance(id, std::move(c), std::move(d));
    throw CaseError(CaseErrorKind::InvalidValue, "unknown task " + task);
  } catch (const json::exception& e) {
    throw CaseError(CaseErrorKind::MissingField, std::string("instance: ") + e.what());
  }
}

}  // namespace gridlearn::data
