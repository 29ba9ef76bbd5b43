#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gridlearn/grid.hpp"
#include "gridlearn/model.hpp"
#include "gridlearn/oracle.hpp"

namespace gridlearn::data {

/// One learning problem: a grid, its demand and (optionally) a reference
/// solution. OPF instances carry a single-step demand series.
struct Instance {
  std::string id;
  model::Task task = model::Task::Opf;
  std::shared_ptr<const grid::GridCase> grid;
  std::shared_ptr<const grid::Admittance> admittance;
  grid::DemandSeries demand;
  std::optional<oracle::OracleSolution> label;

  grid::BusDemand static_demand() const { return demand.at(0); }
  bool labeled() const { return label.has_value() && label->feasible; }
};

/// Demand is the case's own load set.
Instance make_opf_instance(std::string id, grid::GridCase c);
Instance make_uc_instance(std::string id, grid::GridCase c, grid::DemandSeries demand);

/// n copies of `base` with loads perturbed by ±magnitude, seeded per instance.
std::vector<Instance> gen_opf_instances(const grid::GridCase& base, std::size_t n, double magnitude,
                                        std::uint64_t seed);
/// Perturbed loads, then demand = perturbed base × profile × discount.
std::vector<Instance> gen_uc_instances(const grid::GridCase& base, std::size_t n, double magnitude,
                                       const std::vector<double>& profile, double discount, std::uint64_t seed);

struct LabelOptions {
  oracle::AcopfConfig acopf;
  oracle::ScucConfig scuc;
  const oracle::LabelCache* cache = nullptr;
};

struct LabelStats {
  std::size_t solved = 0;
  std::size_t cache_hits = 0;
  std::size_t infeasible = 0;
  std::vector<std::string> failures;  // "id: message"
};

/// Attaches oracle solutions. Failures are recorded, not thrown; an
/// infeasible instance gets a label with feasible = false.
LabelStats label_instances(std::vector<Instance>& instances, const LabelOptions& options);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

std::string serialize_instance(const Instance& inst);
/// Throws grid::CaseError on malformed documents.
Instance parse_instance(std::string_view text);

}  // namespace gridlearn::data
