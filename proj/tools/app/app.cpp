#include "app/app.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "app/suites.hpp"
#include "builtin_profile.hpp"
#include "gridlearn/consensus.hpp"
#include "gridlearn/dataset.hpp"
#include "gridlearn/metrics.hpp"
#include "gridlearn/trainer.hpp"
#include "gridlearn/version.hpp"

namespace gridlearn::app {

namespace fs = std::filesystem;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_input(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  out.close();
  if (!out) throw IoError("write failed for " + p.string());
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string());
}

std::string num(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

struct Run {
  RunConfig cfg;
  fs::path dir;
  std::ostream& out;
  std::ostream& err;
  Json info;  // sidecar: timestamps and anything that may differ between re-runs
};

grid::GridCase load_case_file(const std::string& path) { return grid::parse_case(read_input(path)); }

std::vector<double> profile_slice(const RunConfig& cfg) {
  const std::string p = cfg.str("profile");
  const auto full = p.empty() ? builtin_profile() : grid::parse_profile(read_input(p));
  const std::size_t off = cfg.count("profile_offset"), T = cfg.count("horizon");
  if (T == 0) throw UsageError("horizon must be positive");
  if (off + T > full.size())
    throw UsageError("profile has " + std::to_string(full.size()) + " hours; offset " + std::to_string(off) +
                     " + horizon " + std::to_string(T) + " does not fit");
  return {full.begin() + static_cast<std::ptrdiff_t>(off), full.begin() + static_cast<std::ptrdiff_t>(off + T)};
}

grid::DemandSeries demand_for(const RunConfig& cfg, const grid::GridCase& c) {
  return grid::gen_demand_series(c, profile_slice(cfg), cfg.num("discount"));
}

model::ModelConfig model_config(const RunConfig& cfg, std::size_t horizon) {
  model::ModelConfig m;
  m.hidden_dim = cfg.count("hidden_dim");
  m.layers = cfg.count("layers");
  m.heads = cfg.count("heads");
  m.temporal_dim = cfg.count("temporal_dim");
  m.temporal_layers = cfg.count("temporal_layers");
  m.temporal_heads = cfg.count("temporal_heads");
  m.dropout = cfg.num("dropout");
  m.horizon = horizon;
  m.seed = cfg.u64("seed");
  m.validate();
  return m;
}

fs::path manifest_path(const std::string& p) {
  fs::path m(p);
  if (fs::is_directory(m)) m /= "manifest.json";
  if (!fs::exists(m)) throw InputError("no instance manifest at " + m.string());
  return m;
}

std::vector<data::Instance> load_instances(const std::string& where) {
  const fs::path m = manifest_path(where);
  Json doc;
  try {
    doc = Json::parse(read_input(m));
  } catch (const Json::parse_error& e) {
    throw grid::CaseError(grid::CaseErrorKind::Syntax, m.string() + ": " + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != "gridlearn-manifest" || !doc.contains("instances"))
    throw grid::CaseError(grid::CaseErrorKind::InvalidValue, m.string() + ": not an instance manifest");
  std::vector<data::Instance> out;
  for (const auto& e : doc["instances"]) {
    const fs::path f = m.parent_path() / e.at("file").get<std::string>();
    out.push_back(data::parse_instance(read_input(f)));
  }
  return out;
}

// Attaches labels/<id>.json from a solve-oracle run; missing files leave the
// instance unlabeled.
std::size_t attach_labels(std::vector<data::Instance>& insts, const std::string& where) {
  if (where.empty()) return 0;
  const fs::path dir = fs::path(where) / "labels";
  if (!fs::is_directory(dir)) throw InputError("no labels directory at " + dir.string());
  std::size_t n = 0;
  for (auto& inst : insts) {
    const fs::path f = dir / (inst.id + ".json");
    if (!fs::exists(f)) continue;
    try {
      inst.label = oracle::parse_solution(read_input(f));
    } catch (const Json::exception& e) {
      throw grid::CaseError(grid::CaseErrorKind::Syntax, f.string() + ": " + e.what());
    }
    ++n;
  }
  return n;
}

// ---- commands ----

int gen_data(Run& r) {
  const auto& cfg = r.cfg;
  const auto c = load_case_file(cfg.required("case"));
  const std::string task = cfg.str("task");
  if (task != "opf" && task != "uc" && task != "both") throw UsageError("task must be opf, uc or both");
  const std::size_t n = cfg.count("n_instances");
  const double mag = cfg.num("perturb");
  if (!(mag >= 0.0 && mag < 1.0)) throw UsageError("perturb must be in [0, 1)");
  const std::uint64_t seed = cfg.u64("seed");
  std::vector<data::Instance> insts;
  if (task != "uc") insts = data::gen_opf_instances(c, n, mag, seed);
  if (task != "opf") {
    auto uc = data::gen_uc_instances(c, n, mag, profile_slice(cfg), cfg.num("discount"), seed);
    insts.insert(insts.end(), uc.begin(), uc.end());
  }
  make_dir(r.dir / "instances");
  Json m;
  m["format"] = "gridlearn-manifest";
  m["version"] = 1;
  m["case"] = c.name();
  m["seed"] = seed;
  m["count"] = insts.size();
  m["instances"] = Json::array();
  for (const auto& inst : insts) {
    const std::string file = "instances/" + inst.id + ".json";
    write_file(r.dir / file, data::serialize_instance(inst));
    m["instances"].push_back({{"id", inst.id}, {"task", model::task_name(inst.task)}, {"file", file}});
  }
  write_file(r.dir / "manifest.json", m.dump(1) + "\n");
  r.out << "wrote " << insts.size() << " instances\n";
  return kOk;
}

int solve_oracle(Run& r) {
  const auto& cfg = r.cfg;
  auto insts = load_instances(cfg.required("instances"));
  fs::path cache_dir = cfg.str("cache").empty() ? fs::path(cfg.str("out")) / "cache" : fs::path(cfg.str("cache"));
  make_dir(cache_dir);
  oracle::LabelCache cache(cache_dir);
  data::LabelOptions opt;
  opt.acopf.restarts = cfg.count("acopf_restarts");
  opt.acopf.mismatch_tol = cfg.num("mismatch_tol");
  opt.acopf.seed = cfg.u64("seed");
  opt.scuc.max_gens = cfg.count("scuc_max_gens");
  opt.scuc.max_T = cfg.count("scuc_max_horizon");
  opt.cache = &cache;
  const auto stats = data::label_instances(insts, opt);

  make_dir(r.dir / "labels");
  Json summary;
  summary["count"] = insts.size();
  std::size_t feasible = 0;
  Json flagged = Json::array();
  for (const auto& inst : insts) {
    if (!inst.label) continue;
    write_file(r.dir / "labels" / (inst.id + ".json"), oracle::serialize_solution(*inst.label));
    if (inst.label->feasible)
      ++feasible;
    else
      flagged.push_back(inst.id);
  }
  summary["feasible"] = feasible;
  summary["flagged"] = flagged;
  summary["failures"] = stats.failures;
  write_file(r.dir / "summary.json", summary.dump(1) + "\n");
  r.info["solved"] = stats.solved;
  r.info["cache_hits"] = stats.cache_hits;
  r.info["cache"] = cache_dir.string();
  for (const auto& f : stats.failures) r.err << "oracle: " << f << "\n";
  r.out << "labeled " << insts.size() << " instances (" << stats.cache_hits << " cache hits, " << flagged.size()
        << " flagged)\n";
  return kOk;
}

int train_cmd(Run& r) {
  const auto& cfg = r.cfg;
  auto insts = load_instances(cfg.required("instances"));
  if (insts.empty()) throw UsageError("train: the instance set is empty");
  const std::size_t labeled = attach_labels(insts, cfg.str("labels"));
  std::size_t horizon = 1;
  for (const auto& i : insts)
    if (i.task == model::Task::Uc) horizon = std::max(horizon, i.demand.horizon);

  model::ParamStore ps;
  if (!cfg.str("checkpoint").empty())
    ps = model::parse_params(read_input(cfg.str("checkpoint")));
  else
    ps = model::init_params(*insts.front().grid, model_config(cfg, horizon), cfg.u64("seed"));

  train::TrainConfig tc;
  tc.learning_rate = cfg.num("learning_rate");
  tc.weight_decay = cfg.num("weight_decay");
  tc.batch_size = cfg.count("batch_size");
  tc.grad_clip = cfg.num("grad_clip");
  tc.epochs = cfg.count("epochs");
  tc.gradnorm_enabled = cfg.flag("gradnorm");
  tc.gradnorm_alpha = cfg.num("gradnorm_alpha");
  tc.gradnorm_lr = cfg.num("gradnorm_lr");
  tc.snapshot_every = cfg.count("snapshot_every");
  tc.seed = cfg.u64("seed");
  tc.threads = cfg.count("threads");
  train::LossWeights w;
  w.alpha = cfg.num("alpha");
  w.beta = cfg.num("beta");
  w.gamma = cfg.num("gamma");
  w.delta = cfg.num("delta");

  const auto res = train::train(insts, ps, tc, w);
  write_file(r.dir / "train_log.csv", res.log.csv());
  Json prov;
  prov["command"] = "train";
  prov["instances"] = insts.size();
  prov["labeled"] = labeled;
  prov["epochs"] = res.log.epochs.size();
  model::save_params(res.params, r.dir / "params.json", prov.dump());
  Json summary;
  summary["epochs"] = res.log.epochs.size();
  if (!res.log.epochs.empty()) {
    summary["first_total"] = res.log.epochs.front().total;
    summary["final_total"] = res.log.epochs.back().total;
  }
  summary["aborted"] = res.aborted;
  summary["message"] = res.message;
  write_file(r.dir / "summary.json", summary.dump(1) + "\n");
  if (res.aborted) {
    r.err << "training aborted: " << res.message << "\n";
    return kNumerical;
  }
  r.out << "trained " << res.log.epochs.size() << " epochs on " << insts.size() << " instances\n";
  return kOk;
}

consensus::Optimizer optimizer(const std::string& s) {
  if (s == "adam") return consensus::Optimizer::Adam;
  if (s == "gd") return consensus::Optimizer::GradientDescent;
  if (s == "lbfgs") return consensus::Optimizer::Lbfgs;
  throw UsageError("optimizer must be adam, gd or lbfgs");
}

std::string dispatch_csv(const consensus::CoupledOutput& o) {
  std::string s = "t,gen,u_hat,p_uc,p_ac,p_eff\n";
  for (std::size_t t = 0; t < o.p_eff.rows(); ++t)
    for (std::size_t g = 0; g < o.p_eff.cols(); ++g)
      s += std::to_string(t) + "," + std::to_string(g) + "," + num(o.u_hat.at(t, g)) + "," + num(o.p_uc.at(t, g)) +
           "," + num(o.p_ac.at(t, g)) + "," + num(o.p_eff.at(t, g)) + "\n";
  return s;
}

int finetune_cmd(Run& r) {
  const auto& cfg = r.cfg;
  auto ps = model::parse_params(read_input(cfg.required("checkpoint")));
  const auto c = load_case_file(cfg.required("case"));
  const auto d = demand_for(cfg, c);
  if (cfg.flag("freeze_encoder")) ps.freeze_encoder();
  train::LossWeights w;
  w.lambda_opf = cfg.num("lambda_opf");
  w.lambda_uc = cfg.num("lambda_uc");
  consensus::FinetuneConfig fc;
  fc.learning_rate = cfg.num("finetune_lr");
  fc.max_epochs = cfg.count("max_epochs");
  fc.eta_stop = cfg.num("eta_stop");
  fc.optimizer = optimizer(cfg.str("optimizer"));
  fc.consensus_eps = cfg.num("consensus_eps");

  const auto res = consensus::finetune(c, d, ps, w, fc);
  model::save_params(res.params, r.dir / "params.json", consensus::provenance_json(ps, res.report));
  write_file(r.dir / "theory_report.csv", consensus::theory_report_csv({res.report}));
  std::string trace = "step,objective\n";
  for (std::size_t i = 0; i < res.trace.size(); ++i) trace += std::to_string(i) + "," + num(res.trace[i]) + "\n";
  write_file(r.dir / "trace.csv", trace);
  write_file(r.dir / "dispatch.csv",
             dispatch_csv(consensus::predict(consensus::make_problem(c, d, res.params), res.params)));
  r.out << "fine-tuned " << res.report.steps << " steps, gradient norm " << res.report.eta
        << (res.report.reached ? " (reached)" : " (not reached)") << "\n";
  return kOk;
}

int eval_cmd(Run& r) {
  const auto& cfg = r.cfg;
  const auto ps = model::parse_params(read_input(cfg.required("checkpoint")));
  auto insts = load_instances(cfg.required("instances"));
  if (insts.empty()) throw UsageError("eval: the instance set is empty");
  attach_labels(insts, cfg.str("labels"));
  metrics::GroupBy g;
  const std::string gb = cfg.str("group_by");
  if (gb == "case")
    g = metrics::GroupBy::Case;
  else if (gb == "task")
    g = metrics::GroupBy::Task;
  else if (gb == "case_task")
    g = metrics::GroupBy::CaseAndTask;
  else
    throw UsageError("group_by must be case, task or case_task");
  std::vector<metrics::EvalRecord> recs;
  for (const auto& inst : insts) {
    const oracle::OracleSolution* l = inst.label ? &*inst.label : nullptr;
    recs.push_back(metrics::evaluate_instance(inst, ps, l, l));
  }
  const bool timing = cfg.flag("timing");
  const auto rep = metrics::aggregate(recs, g);
  write_file(r.dir / "records.csv", metrics::records_csv(recs, timing));
  write_file(r.dir / "report.csv", metrics::report_csv(rep, timing));
  const std::string text = metrics::report_text(rep, timing);
  write_file(r.dir / "report.txt", text);
  r.out << text;
  return kOk;
}

int grad_check(Run& r) {
  const auto& cfg = r.cfg;
  std::vector<NamedCase> cases;
  for (const auto& p : cfg.strings("cases")) cases.push_back({fs::path(p).stem().string(), load_case_file(p)});
  if (cases.empty()) throw UsageError("--cases is required for grad-check");
  GradOptions o;
  o.samples = cfg.count("grad_samples");
  o.components = cfg.count("grad_components");
  o.step = cfg.num("grad_step");
  o.tol = cfg.num("grad_tol");
  o.seed = cfg.u64("seed");
  if (o.samples == 0 || !(o.step > 0.0) || !(o.tol > 0.0)) throw UsageError("grad-check: bad sample count, step or tol");
  const auto rows = gradient_suite(cases, o);
  write_file(r.dir / "grad_check.csv", grad_csv(rows));
  bool ok = true;
  for (const auto& row : rows) {
    r.out << (row.passed ? "ok   " : "FAIL ") << row.loss << " on " << row.case_name << ": max rel error "
          << row.max_rel_error << " over " << row.checked << " components\n";
    ok = ok && row.passed;
  }
  return ok ? kOk : kGradCheck;
}

int theory_check(Run& r) {
  const auto& cfg = r.cfg;
  const auto c = load_case_file(cfg.required("case"));
  const auto d = demand_for(cfg, c);
  model::ParamStore ps = cfg.str("checkpoint").empty()
                             ? model::init_params(c, model_config(cfg, d.horizon), cfg.u64("seed"))
                             : model::parse_params(read_input(cfg.str("checkpoint")));
  ps.freeze_encoder();
  consensus::FinetuneConfig fc;
  fc.optimizer = optimizer(cfg.str("sweep_optimizer"));
  fc.max_epochs = cfg.count("sweep_max_epochs");
  fc.eta_stop = cfg.num("eta_stop");
  fc.consensus_eps = cfg.num("consensus_eps");
  const auto res = theory_suite(c, d, ps, cfg.numbers("lambdas"), fc, cfg.count("lemma_draws"), cfg.u64("seed"),
                                cfg.count("threads"));
  write_file(r.dir / "sweep.csv", consensus::sweep_csv(res.sweep));
  std::vector<consensus::TheoryReport> reps;
  for (const auto& row : res.sweep.rows) reps.push_back(row.report);
  write_file(r.dir / "theory_report.csv", consensus::theory_report_csv(reps));
  write_file(r.dir / "summary.json", theory_summary_json(res));
  r.out << "coupling check " << (res.lemma.passed() ? "ok" : "FAILED") << " over " << res.lemma.draws << " draws\n";
  for (const auto& row : res.sweep.rows)
    r.out << "lambda " << row.lambda << ": violation " << row.report.objective.hinge_violation_sq() << ", eta "
          << row.report.eta << (row.flagged ? " (not reached)" : "") << "\n";
  r.out << "slope " << res.sweep.slope << ", ratio " << res.ratio << ", identity gap " << res.max_identity_gap << "\n";
  r.out << (res.passed() ? "theory check passed\n" : "theory check FAILED\n");
  return res.passed() ? kOk : kTheoryCheck;
}

const std::map<std::string, std::function<int(Run&)>>& handlers() {
  static const std::map<std::string, std::function<int(Run&)>> h = {
      {"gen-data", gen_data},     {"solve-oracle", solve_oracle}, {"train", train_cmd},
      {"finetune", finetune_cmd}, {"eval", eval_cmd},             {"grad-check", grad_check},
      {"theory-check", theory_check}};
  return h;
}

const char* summary_of(const std::string& cmd) {
  if (cmd == "gen-data") return "generate perturbed OPF and UC instances";
  if (cmd == "solve-oracle") return "label instances with the reference solvers";
  if (cmd == "train") return "joint supervised and physics-informed training";
  if (cmd == "finetune") return "decoder-only UC-ACOPF fine-tuning";
  if (cmd == "eval") return "score a checkpoint on an instance set";
  if (cmd == "grad-check") return "finite-difference check of every loss";
  return "coupling and penalty-scaling checks";
}

int classify(const std::exception_ptr& e, std::ostream& err) {
  try {
    std::rethrow_exception(e);
  } catch (const UsageError& x) {
    err << "error: " << x.what() << "\n";
    return kUsage;
  } catch (const model::ConfigError& x) {
    err << "config error: " << x.what() << "\n";
    return kUsage;
  } catch (const consensus::ContractError& x) {
    err << "refused: " << x.what() << "\n";
    return kContract;
  } catch (const std::invalid_argument& x) {
    err << "error: " << x.what() << "\n";
    return kUsage;
  } catch (const InputError& x) {
    err << "input error: " << x.what() << "\n";
    return kInput;
  } catch (const grid::CaseError& x) {
    err << "input error: " << x.what() << "\n";
    return kInput;
  } catch (const model::ParamError& x) {
    err << "checkpoint error: " << x.what() << "\n";
    return kInput;
  } catch (const ad::ShapeError& x) {
    err << "input error: " << x.what() << "\n";
    return kInput;
  } catch (const ad::NonFiniteError& x) {
    err << "numerical error: " << x.what() << "\n";
    return kNumerical;
  } catch (const oracle::OracleError& x) {
    err << "numerical error: " << x.what() << "\n";
    return kNumerical;
  } catch (const train::TrainError& x) {
    err << "numerical error: " << x.what() << "\n";
    return kNumerical;
  } catch (const IoError& x) {
    err << "I/O error: " << x.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& x) {
    err << "I/O error: " << x.what() << "\n";
    return kIo;
  } catch (const std::exception& x) {
    err << "internal error: " << x.what() << "\n";
    return kInternal;
  }
}

}  // namespace

std::vector<double> builtin_profile() { return grid::parse_profile(kBuiltinProfile); }

fs::path next_run_dir(const fs::path& root) {
  make_dir(root);
  std::size_t next = 1;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(root, ec)) {
    const std::string n = e.path().filename().string();
    if (n.size() == 8 && n.rfind("run-", 0) == 0 && n.find_first_not_of("0123456789", 4) == std::string::npos)
      next = std::max<std::size_t>(next, std::stoul(n.substr(4)) + 1);
  }
  if (ec) throw IoError("cannot list " + root.string());
  for (;; ++next) {
    char name[16];
    std::snprintf(name, sizeof name, "run-%04zu", next);
    const fs::path p = root / name;
    if (fs::create_directory(p, ec)) return p;
    if (ec) throw IoError("cannot create " + p.string());
  }
}

int run(const std::vector<std::string>& args, const Env& env, std::ostream& out, std::ostream& err) {
  CLI::App cli{"Learning ACOPF and SCUC solutions on grid graphs", "gridlearn"};
  cli.require_subcommand(1);
  cli.set_version_flag("--version", std::string(version()));
  struct Sub {
    CLI::App* app;
    std::optional<std::string> config;
    std::map<std::string, std::optional<std::string>> opts;
  };
  std::map<std::string, Sub> subs;
  for (const auto& name : command_names()) {
    Sub& s = subs[name];
    s.app = cli.add_subcommand(name, summary_of(name));
    s.app->add_option("--config", s.config, "JSON config file");
    for (const auto* k : keys_for(name)) {
      auto& slot = s.opts[k->key];
      std::string names = "--" + k->key;
      if (k->key.find('_') != std::string::npos) {
        std::string dashed = k->key;
        std::replace(dashed.begin(), dashed.end(), '_', '-');
        names += ",--" + dashed;
      }
      const Json& dv = k->default_value;
      std::string help = k->help;
      if (!dv.is_null() && !(dv.is_string() && dv.get<std::string>().empty()))
        help += " (default " + (dv.is_string() ? dv.get<std::string>() : dv.dump()) + ")";
      help += " [" + env_name(k->key) + "]";
      if (dv.is_boolean())
        s.app->add_flag(names + "{true}", slot, help);
      else
        s.app->add_option(names, slot, help)
            ->type_name(dv.is_number_integer() ? "INT" : dv.is_number() ? "NUM" : "TEXT");
    }
  }
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    cli.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      // --help / --version
      std::ostringstream o, x;
      cli.exit(e, o, x);
      out << o.str() << x.str();
      return kOk;
    }
    err << "error: " << e.what() << "\nRun with --help for usage.\n";
    return kUsage;
  }

  std::string command;
  for (auto& [name, s] : subs)
    if (s.app->parsed()) command = name;
  Sub& s = subs.at(command);
  std::map<std::string, std::string> flags;
  for (const auto& [k, v] : s.opts)
    if (v) flags[k] = *v;

  std::optional<Run> r;
  const std::string started = utc_now();
  try {
    auto cfg = RunConfig::resolve(command, s.config, env, flags);
    if (cfg.count("threads") == 0) throw UsageError("threads must be at least 1");
    const fs::path dir = next_run_dir(cfg.str("out"));
    r.emplace(Run{std::move(cfg), dir, out, err, Json::object()});
    Json doc;
    doc["command"] = command;
    doc["version"] = version();
    doc["config"] = r->cfg.values();
    write_file(dir / "config.json", doc.dump(1) + "\n");
    out << "run directory: " << dir.string() << "\n";
  } catch (...) {
    return classify(std::current_exception(), err);
  }

  int code = kOk;
  try {
    code = handlers().at(command)(*r);
  } catch (...) {
    code = classify(std::current_exception(), err);
  }
  r->info["started"] = started;
  r->info["finished"] = utc_now();
  r->info["exit_code"] = code;
  Json sources;
  for (const auto& [k, v] : r->cfg.sources()) sources[k] = v;
  r->info["sources"] = sources;
  try {
    write_file(r->dir / "run_info.json", r->info.dump(1) + "\n");
  } catch (...) {
    if (code == kOk) code = classify(std::current_exception(), err);
  }
  return code;
}

}  // namespace gridlearn::app
