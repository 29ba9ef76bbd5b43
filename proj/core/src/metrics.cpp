#include "gridlearn/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "gridlearn/acopf.hpp"
#include "gridlearn/scuc.hpp"

namespace gridlearn::metrics {

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> n = {"acc",      "rmse_pg",   "pct_viol", "opt_gap", "mse_bus",
                                             "mse_gen",  "pf_viol",   "viol_norm", "cost",   "inference_time_s"};
  return n;
}

namespace {

double mean_sq(const std::vector<double>& a, const std::vector<double>& b, const std::vector<double>& c,
               const std::vector<double>& d) {
  if (a.size() != b.size() || c.size() != d.size() || a.size() != c.size() || a.empty())
    throw std::invalid_argument("mse: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]) + (c[i] - d[i]) * (c[i] - d[i]);
  return s / static_cast<double>(2 * a.size());
}

const oracle::OracleSolution* usable(const oracle::OracleSolution* s) {
  return s != nullptr && s->feasible ? s : nullptr;
}

EvalRecord base_record(const data::Instance& inst) {
  EvalRecord r;
  r.id = inst.id;
  r.case_name = inst.grid->name();
  r.task = inst.task;
  return r;
}

}  // namespace

double mse_bus(const acopf::OperatingPoint& p, const acopf::OperatingPoint& l) { return mean_sq(p.vm, l.vm, p.va, l.va); }
double mse_gen(const acopf::OperatingPoint& p, const acopf::OperatingPoint& l) { return mean_sq(p.pg, l.pg, p.qg, l.qg); }

EvalRecord score_opf(const data::Instance& inst, const acopf::OperatingPoint& p, const oracle::OracleSolution* labels,
                     const oracle::OracleSolution* oracle) {
  EvalRecord r = base_record(inst);
  const auto rep = acopf::residual_report(*inst.grid, *inst.admittance, p, inst.static_demand());
  const auto m = acopf::ac_metrics(rep, inst.grid->n_buses());
  r.values["pf_viol"] = m.pf_viol;
  r.values["viol_norm"] = m.viol_norm;
  r.values["cost"] = rep.cost;
  if (const auto* l = usable(labels)) {
    r.values["mse_bus"] = mse_bus(p, l->point);
    r.values["mse_gen"] = mse_gen(p, l->point);
  }
  if (const auto* o = usable(oracle)) r.values["opt_gap"] = oracle::opt_gap(rep.cost, o->objective);
  return r;
}

EvalRecord score_uc(const data::Instance& inst, const scuc::Schedule& s, const oracle::OracleSolution* labels,
                    const oracle::OracleSolution* oracle) {
  EvalRecord r = base_record(inst);
  const scuc::Schedule hard = scuc::round_schedule(*inst.grid, s);
  const auto audit = scuc::audit_schedule(*inst.grid, inst.demand, hard);
  r.values["pct_viol"] = audit.pct_viol;
  r.values["cost"] = audit.cost;
  if (const auto* l = usable(labels)) {
    const auto m = scuc::uc_metrics(s, l->schedule);
    r.values["acc"] = m.acc;
    r.values["rmse_pg"] = m.rmse_pg;
  }
  if (const auto* o = usable(oracle)) r.values["opt_gap"] = oracle::opt_gap(audit.cost, o->objective);
  return r;
}

EvalRecord evaluate_instance(const data::Instance& inst, const model::ParamStore& params,
                             const oracle::OracleSolution* labels, const oracle::OracleSolution* oracle) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalRecord r;
  if (inst.task == model::Task::Opf) {
    const auto p = model::predict_opf(*inst.grid, params);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r = score_opf(inst, p, labels, oracle);
    r.values["inference_time_s"] = dt;
  } else {
    const auto s = model::predict_uc(*inst.grid, inst.demand, params);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r = score_uc(inst, s, labels, oracle);
    r.values["inference_time_s"] = dt;
  }
  return r;
}

Report aggregate(const std::vector<EvalRecord>& records, GroupBy group_by) {
  if (records.empty()) throw std::invalid_argument("aggregate: no records");
  std::map<std::pair<std::string, std::string>, std::vector<const EvalRecord*>> groups;
  for (const auto& r : records) {
    std::string c = group_by == GroupBy::Task ? "" : r.case_name;
    std::string t = group_by == GroupBy::Case ? "" : model::task_name(r.task);
    groups[{c, t}].push_back(&r);
  }
  Report out;
  for (const auto& [key, members] : groups) {
    ReportRow row;
    row.case_name = key.first;
    row.task = key.second;
    row.count = members.size();
    for (const auto& m : metric_names()) {
      // Sorted values make the fold independent of record order.
      std::vector<double> v;
      for (const auto* r : members)
        if (r->has(m)) v.push_back(r->at(m));
      if (v.empty()) continue;
      std::sort(v.begin(), v.end());
      Stat s;
      s.n = v.size();
      for (double x : v) s.mean += x;
      s.mean /= static_cast<double>(s.n);
      double var = 0.0;
      for (double x : v) var += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(var / static_cast<double>(s.n));
      row.stats[m] = s;
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

namespace {

std::vector<std::string> shown(bool timing) {
  std::vector<std::string> m = metric_names();
  if (!timing) m.pop_back();
  return m;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string report_csv(const Report& r, bool timing) {
  std::ostringstream os;
  os << "case,task,count";
  for (const auto& m : shown(timing)) os << ',' << m << "_mean," << m << "_std";
  os << '\n';
  for (const auto& row : r.rows) {
    os << row.case_name << ',' << row.task << ',' << row.count;
    for (const auto& m : shown(timing)) {
      auto it = row.stats.find(m);
      if (it == row.stats.end())
        os << ",,";
      else
        os << ',' << num(it->second.mean) << ',' << num(it->second.std);
    }
    os << '\n';
  }
  return os.str();
}

std::string report_text(const Report& r, bool timing) {
  std::vector<std::string> cols = {"case", "task", "count"};
  std::vector<std::string> metrics;
  for (const auto& m : shown(timing)) {
    const bool any = std::any_of(r.rows.begin(), r.rows.end(), [&](const ReportRow& row) { return row.stats.count(m); });
    if (any) metrics.push_back(m);
  }
  for (const auto& m : metrics) cols.push_back(m);
  std::vector<std::vector<std::string>> cells;
  for (const auto& row : r.rows) {
    std::vector<std::string> line = {row.case_name.empty() ? "*" : row.case_name, row.task.empty() ? "*" : row.task,
                                     std::to_string(row.count)};
    for (const auto& m : metrics) {
      auto it = row.stats.find(m);
      if (it == row.stats.end()) {
        line.push_back("-");
      } else {
        std::ostringstream os;
        os << std::setprecision(4) << it->second.mean << " ± " << std::setprecision(2) << it->second.std;
        line.push_back(os.str());
      }
    }
    cells.push_back(std::move(line));
  }
  // "±" is two bytes but one column wide.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s)
      if ((ch & 0xC0) != 0x80) ++w;
    return w;
  };
  std::vector<std::size_t> w(cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) {
    w[j] = width(cols[j]);
    for (const auto& line : cells) w[j] = std::max(w[j], width(line[j]));
  }
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& line) {
    for (std::size_t j = 0; j < line.size(); ++j) {
      os << (j == 0 ? "" : "  ") << line[j];
      if (j + 1 < line.size()) os << std::string(w[j] - width(line[j]), ' ');
    }
    os << '\n';
  };
  emit(cols);
  for (const auto& line : cells) emit(line);
  return os.str();
}

std::string records_csv(const std::vector<EvalRecord>& records, bool timing) {
  std::ostringstream os;
  os << "id,case,task";
  for (const auto& m : shown(timing)) os << ',' << m;
  os << '\n';
  for (const auto& r : records) {
    os << r.id << ',' << r.case_name << ',' << model::task_name(r.task);
    for (const auto& m : shown(timing)) {
      os << ',';
      if (r.has(m)) os << num(r.at(m));
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace gridlearn::metrics
