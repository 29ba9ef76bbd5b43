#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gridlearn/dataset.hpp"
#include "gridlearn/model.hpp"
#include "gridlearn/oracle.hpp"

namespace gridlearn::metrics {

/// Every metric a record may carry, in report column order.
const std::vector<std::string>& metric_names();

struct EvalRecord {
  std::string id;
  std::string case_name;
  model::Task task = model::Task::Opf;
  std::map<std::string, double> values;  // only metrics that apply

  bool has(const std::string& m) const { return values.count(m) != 0; }
  double at(const std::string& m) const { return values.at(m); }
};

/// Mean squared error over both entries of every bus (vm, va).
double mse_bus(const acopf::OperatingPoint& p, const acopf::OperatingPoint& label);
/// Mean squared error over both entries of every generator (pg, qg).
double mse_gen(const acopf::OperatingPoint& p, const acopf::OperatingPoint& label);

/// Metrics for an already predicted OPF point / UC schedule. Supervised
/// metrics need `labels`; opt_gap needs `oracle`.
EvalRecord score_opf(const data::Instance& inst, const acopf::OperatingPoint& p,
                     const oracle::OracleSolution* labels, const oracle::OracleSolution* oracle);
EvalRecord score_uc(const data::Instance& inst, const scuc::Schedule& s, const oracle::OracleSolution* labels,
                    const oracle::OracleSolution* oracle);

/// Runs the predictor and scores it. Inference time covers feature building
/// and the forward pass only.
EvalRecord evaluate_instance(const data::Instance& inst, const model::ParamStore& params,
                             const oracle::OracleSolution* labels, const oracle::OracleSolution* oracle);

enum class GroupBy { Case, Task, CaseAndTask };

struct Stat {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // population
};

struct ReportRow {
  std::string case_name;  // empty when not grouped by case
  std::string task;  // empty when not grouped by task
  std::size_t count = 0;
  std::map<std::string, Stat> stats;
};

struct Report {
  std::vector<ReportRow> rows;  // sorted by (case, task)
};

Report aggregate(const std::vector<EvalRecord>& records, GroupBy group_by = GroupBy::CaseAndTask);

/// `timing` controls whether inference_time_s columns are emitted; they are
/// the only nondeterministic values.
std::string report_csv(const Report& r, bool timing = false);
std::string report_text(const Report& r, bool timing = false);
std::string records_csv(const std::vector<EvalRecord>& records, bool timing = false);

}  // namespace gridlearn::metrics
