#include "app/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

extern char** environ;

namespace gridlearn::app {

namespace {

const std::vector<std::string> kData = {"gen-data", "finetune", "theory-check"};
const std::vector<std::string> kModel = {"train", "theory-check"};

std::vector<KeySpec> make_specs() {
  using V = std::vector<std::string>;
  std::vector<KeySpec> s = {
      {"seed", 0, {}, "random seed"},
      {"threads", 1, {}, "worker threads"},
      {"out", "runs", {}, "output root; each run gets a fresh run-NNNN directory"},

      {"case", "", {"gen-data", "finetune", "theory-check"}, "case file"},
      {"task", "both", {"gen-data"}, "opf, uc or both"},
      {"n_instances", 16, {"gen-data"}, "instances per task"},
      {"perturb", 0.1, {"gen-data"}, "load perturbation magnitude"},
      {"horizon", 36, kData, "UC horizon in hours"},
      {"profile", "", kData, "hourly profile file (built-in 36-hour profile when empty)"},
      {"profile_offset", 0, kData, "first profile hour used"},
      {"discount", 0.7, kData, "demand discount factor"},

      {"instances", "", V{"solve-oracle", "train", "eval"}, "gen-data run directory or manifest"},
      {"labels", "", V{"train", "eval"}, "solve-oracle run directory"},
      {"cache", "", V{"solve-oracle"}, "label cache directory (default <out>/cache)"},
      {"acopf_restarts", 2, V{"solve-oracle"}, "ACOPF oracle restarts"},
      {"mismatch_tol", 1e-4, V{"solve-oracle"}, "ACOPF mismatch tolerance (p.u.)"},
      {"scuc_max_gens", 5, V{"solve-oracle"}, "largest generator count the SCUC oracle accepts"},
      {"scuc_max_horizon", 8, V{"solve-oracle"}, "longest horizon the SCUC oracle accepts"},

      {"checkpoint", "", V{"train", "finetune", "eval", "theory-check"}, "parameter file"},
      {"hidden_dim", 64, kModel, "hidden width"},
      {"layers", 4, kModel, "message-passing layers"},
      {"heads", 8, kModel, "attention heads"},
      {"temporal_dim", 128, kModel, "UC token width"},
      {"temporal_layers", 2, kModel, "temporal attention layers"},
      {"temporal_heads", 4, kModel, "temporal attention heads"},
      {"dropout", 0.1, kModel, "dropout rate"},

      {"learning_rate", 5e-4, V{"train"}, "Adam learning rate"},
      {"weight_decay", 1e-5, V{"train"}, "decoupled weight decay"},
      {"batch_size", 32, V{"train"}, "batch size"},
      {"grad_clip", 1.0, V{"train"}, "global gradient-norm clip"},
      {"epochs", 50, V{"train"}, "training epochs"},
      {"gradnorm", false, V{"train"}, "GradNorm task balancing"},
      {"gradnorm_alpha", 1.5, V{"train"}, "GradNorm asymmetry"},
      {"gradnorm_lr", 0.025, V{"train"}, "GradNorm weight step"},
      {"snapshot_every", 0, V{"train"}, "training-set metrics every n epochs (0 = never)"},
      {"alpha", 1.0, V{"train"}, "supervised OPF weight"},
      {"beta", 1.0, V{"train"}, "supervised UC weight"},
      {"gamma", 0.1, V{"train"}, "physics OPF weight"},
      {"delta", 0.1, V{"train"}, "physics UC weight"},

      {"lambda_opf", 10.0, V{"finetune"}, "OPF penalty weight"},
      {"lambda_uc", 10.0, V{"finetune"}, "UC penalty weight"},
      {"freeze_encoder", false, V{"finetune"}, "freeze the shared encoder (required)"},
      {"finetune_lr", 5e-5, V{"finetune"}, "decoder step size"},
      {"max_epochs", 1000, V{"finetune"}, "step budget"},
      {"optimizer", "adam", V{"finetune"}, "adam, gd or lbfgs"},
      {"eta_stop", 1e-3, V{"finetune", "theory-check"}, "stop when the decoder-gradient norm is below this"},
      {"consensus_eps", 1e-2, V{"finetune", "theory-check"}, "alignment tolerance of the stationarity check"},

      {"lambdas", "1,10,100", V{"theory-check"}, "penalty weights for the sweep, increasing"},
      {"sweep_optimizer", "lbfgs", V{"theory-check"}, "adam, gd or lbfgs"},
      {"sweep_max_epochs", 20000, V{"theory-check"}, "step budget per sweep run"},
      {"lemma_draws", 10000, V{"theory-check"}, "random draws for the coupling check"},

      {"timing", false, V{"eval"}, "include inference times in reports"},
      {"group_by", "case_task", V{"eval"}, "case, task or case_task"},

      {"cases", "", V{"grad-check"}, "comma-separated case files"},
      {"grad_step", 1e-6, V{"grad-check"}, "central-difference step"},
      {"grad_tol", 1e-5, V{"grad-check"}, "relative error tolerance"},
      {"grad_samples", 100, V{"grad-check"}, "random inputs per loss and case"},
      {"grad_components", 6, V{"grad-check"}, "components checked per input (0 = all)"},
  };
  return s;
}

bool applies(const KeySpec& k, std::string_view command) {
  return k.commands.empty() || std::find(k.commands.begin(), k.commands.end(), command) != k.commands.end();
}

const KeySpec* find_spec(std::string_view key) {
  for (const auto& k : key_specs())
    if (k.key == key) return &k;
  return nullptr;
}

std::string trim(std::string s) {
  auto sp = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && sp(s.back())) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && sp(s[i])) ++i;
  return s.substr(i);
}

}  // namespace

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> s = make_specs();
  return s;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> c = {"gen-data", "solve-oracle", "train",       "finetune",
                                             "eval",     "grad-check",   "theory-check"};
  return c;
}

std::vector<const KeySpec*> keys_for(std::string_view command) {
  std::vector<const KeySpec*> out;
  for (const auto& k : key_specs())
    if (applies(k, command)) out.push_back(&k);
  return out;
}

std::string env_name(std::string_view key) {
  std::string s = "GRIDLEARN_";
  for (char c : key) s += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

Env process_env() {
  Env e;
  for (char** p = environ; p && *p; ++p) {
    std::string_view kv(*p);
    if (kv.rfind("GRIDLEARN_", 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    e.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return e;
}

Json parse_value(const std::string& key, const std::string& text, const Json& like) {
  const std::string t = trim(text);
  auto bad = [&](const char* what) { return UsageError(key + ": expected " + what + ", got '" + text + "'"); };
  if (like.is_boolean()) {
    std::string l = t;
    std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
    if (l == "true" || l == "1" || l == "yes" || l == "on") return true;
    if (l == "false" || l == "0" || l == "no" || l == "off") return false;
    throw bad("a boolean");
  }
  if (like.is_number_integer()) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty()) throw bad("a non-negative integer");
    return v;
  }
  if (like.is_number()) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty()) throw bad("a number");
    if (!std::isfinite(v)) throw bad("a finite number");
    return v;
  }
  return t;
}

namespace {

Json coerce(const std::string& key, const Json& v, const Json& like) {
  if (like.is_boolean() && v.is_boolean()) return v;
  if (like.is_number_integer() && v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
  if (like.is_number_float() && v.is_number()) return v.get<double>();
  if (like.is_string() && v.is_string()) return v;
  // lists may be given as JSON arrays of numbers
  if (like.is_string() && v.is_array()) {
    std::string s;
    for (const auto& x : v) {
      if (!x.is_number() && !x.is_string()) throw UsageError(key + ": list entries must be numbers or strings");
      if (!s.empty()) s += ",";
      s += x.is_string() ? x.get<std::string>() : x.dump();
    }
    return s;
  }
  throw UsageError(key + ": wrong type in config file (" + std::string(v.type_name()) + ")");
}

}  // namespace

RunConfig RunConfig::resolve(std::string_view command, const std::optional<std::string>& config_path, const Env& env,
                             const std::map<std::string, std::string>& flags) {
  if (std::find(command_names().begin(), command_names().end(), command) == command_names().end())
    throw UsageError("unknown command " + std::string(command));
  RunConfig rc;
  rc.command_ = std::string(command);
  const auto keys = keys_for(command);
  for (const auto* k : keys) {
    rc.values_[k->key] = k->default_value;
    rc.sources_[k->key] = "default";
  }
  auto mine = [&](const std::string& key) -> const KeySpec* {
    const KeySpec* s = find_spec(key);
    if (!s) throw UsageError("unknown config key '" + key + "'");
    return applies(*s, command) ? s : nullptr;
  };

  if (config_path) {
    std::ifstream in(*config_path, std::ios::binary);
    if (!in) throw InputError("cannot open config file " + *config_path);
    std::ostringstream os;
    os << in.rdbuf();
    Json doc;
    try {
      doc = Json::parse(os.str());
    } catch (const Json::parse_error& e) {
      throw UsageError("config file " + *config_path + ": " + e.what());
    }
    if (!doc.is_object()) throw UsageError("config file " + *config_path + ": expected a JSON object");
    for (const auto& [key, v] : doc.items()) {
      // keys of other commands are allowed so one file can drive a pipeline
      if (const KeySpec* s = mine(key)) {
        rc.values_[key] = coerce(key, v, s->default_value);
        rc.sources_[key] = "file";
      }
    }
  }
  for (const auto* k : keys) {
    auto it = env.find(env_name(k->key));
    if (it == env.end()) continue;
    rc.values_[k->key] = parse_value(k->key, it->second, k->default_value);
    rc.sources_[k->key] = "env";
  }
  for (const auto& [key, text] : flags) {
    const KeySpec* s = mine(key);
    if (!s) throw UsageError("option --" + key + " does not apply to " + std::string(command));
    rc.values_[key] = parse_value(key, text, s->default_value);
    rc.sources_[key] = "flag";
  }
  return rc;
}

std::string RunConfig::str(const std::string& key) const { return values_.at(key).get<std::string>(); }
double RunConfig::num(const std::string& key) const { return values_.at(key).get<double>(); }
std::size_t RunConfig::count(const std::string& key) const { return values_.at(key).get<std::size_t>(); }
std::uint64_t RunConfig::u64(const std::string& key) const { return values_.at(key).get<std::uint64_t>(); }
bool RunConfig::flag(const std::string& key) const { return values_.at(key).get<bool>(); }

std::vector<std::string> RunConfig::strings(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> RunConfig::numbers(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : strings(key)) out.push_back(parse_value(key, s, 0.0).get<double>());
  return out;
}

std::string RunConfig::required(const std::string& key) const {
  std::string v = str(key);
  if (v.empty()) throw UsageError("--" + key + " is required for " + command_);
  return v;
}

void RunConfig::set(const std::string& key, Json value) {
  values_[key] = std::move(value);
  sources_[key] = "derived";
}

}  // namespace gridlearn::app
