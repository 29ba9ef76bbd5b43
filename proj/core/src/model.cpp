#include "gridlearn/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "gridlearn/oracle.hpp"
#include "json.hpp"

namespace gridlearn::model {

using ad::Tape;
using ad::Var;
using json = nlohmann::json;
using ad::shape_str;

const char* task_name(Task t) { return t == Task::Opf ? "opf" : "uc"; }

const char* node_type_name(NodeType t) {
  switch (t) {
    case NodeType::Bus: return "bus";
    case NodeType::Gen: return "gen";
    case NodeType::Load: return "load";
    case NodeType::Shunt: return "shunt";
  }
  return "?";
}

namespace {
constexpr std::array<const char*, kGroups> kGroupNames = {"task_encoders", "shared_projection", "spatial_encoder",
                                                          "opf_decoder",   "uc_decoder",        "temporal"};
constexpr std::array<NodeType, kNodeTypes> kTypes = {NodeType::Bus, NodeType::Gen, NodeType::Load, NodeType::Shunt};
constexpr std::array<Task, 2> kTasks = {Task::Opf, Task::Uc};
}  // namespace

const char* group_name(Group g) { return kGroupNames[static_cast<std::size_t>(g)]; }

std::optional<Group> parse_group(std::string_view name) {
  for (std::size_t i = 0; i < kGroups; ++i)
    if (name == kGroupNames[i]) return static_cast<Group>(i);
  return std::nullopt;
}

bool is_encoder_group(Group g) {
  return g == Group::TaskEncoders || g == Group::SharedProjection || g == Group::SpatialEncoder;
}

const char* relation_name(Relation r) {
  static constexpr std::array<const char*, kRelations> names = {
      "line", "transformer", "gen_bus", "bus_gen", "load_bus", "bus_load", "shunt_bus", "bus_shunt"};
  return names[static_cast<std::size_t>(r)];
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (hidden_dim == 0) fail("hidden_dim must be positive");
  if (layers == 0) fail("layers must be positive");
  if (heads == 0 || hidden_dim % heads != 0)
    fail("heads (" + std::to_string(heads) + ") must divide hidden_dim (" + std::to_string(hidden_dim) + ")");
  if (temporal_heads == 0 || hidden_dim % temporal_heads != 0)
    fail("temporal_heads (" + std::to_string(temporal_heads) + ") must divide hidden_dim (" +
         std::to_string(hidden_dim) + ")");
  if (temporal_dim < hidden_dim + 2)
    fail("temporal_dim must exceed hidden_dim + 1 to leave room for the time embedding");
  if (horizon == 0) fail("horizon must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(std::string name, Group group, Tensor value) {
  if (index_.count(name) != 0) throw ParamError(ParamErrorKind::Duplicate, "duplicate parameter " + name);
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), group, std::move(value)});
}

const Param* ParamStore::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

const Tensor& ParamStore::value(std::string_view name) const {
  const Param* p = find(name);
  if (p == nullptr) throw ParamError(ParamErrorKind::Missing, "unknown parameter " + std::string(name));
  return p->value;
}

void ParamStore::set(std::string_view name, Tensor value) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ParamError(ParamErrorKind::Missing, "unknown parameter " + std::string(name));
  Param& p = params_[it->second];
  if (p.value.shape() != value.shape())
    throw ParamError(ParamErrorKind::Shape, "shape change for parameter " + p.name + ": " +
                                                shape_str(p.value.shape()) + " -> " + shape_str(value.shape()));
  p.value = std::move(value);
}

void ParamStore::freeze_encoder(bool f) {
  set_frozen(Group::TaskEncoders, f);
  set_frozen(Group::SharedProjection, f);
  set_frozen(Group::SpatialEncoder, f);
}

bool ParamStore::encoder_frozen() const {
  return frozen(Group::TaskEncoders) && frozen(Group::SharedProjection) && frozen(Group::SpatialEncoder);
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t ParamStore::count(Group g) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.group == g) n += p.value.size();
  return n;
}

bool identical(const ParamStore& a, const ParamStore& b) {
  if (!(a.config() == b.config()) || a.params().size() != b.params().size()) return false;
  for (std::size_t g = 0; g < kGroups; ++g)
    if (a.frozen(static_cast<Group>(g)) != b.frozen(static_cast<Group>(g))) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& x = a.params()[i];
    const auto& y = b.params()[i];
    if (x.name != y.name || x.group != y.group || x.value.shape() != y.value.shape()) return false;
    if (!std::equal(x.value.data().begin(), x.value.data().end(), y.value.data().begin(),
                    [](double p, double q) { return std::memcmp(&p, &q, sizeof p) == 0; }))
      return false;
  }
  return true;
}

std::uint64_t param_hash(const ParamStore& p) {
  std::uint64_t h = oracle::fnv1a("gridlearn-params");
  for (const auto& prm : p.params()) {
    h = oracle::fnv1a(prm.name, h);
    const auto d = prm.value.data();
    h = oracle::fnv1a(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Features

const std::vector<std::string>& bus_feature_names() {
  static const std::vector<std::string> n = {"base_kv", "vmin", "vmax", "is_pq", "is_pv", "is_ref", "is_isolated"};
  return n;
}

const std::vector<std::string>& gen_feature_names(Task task) {
  static const std::vector<std::string> uc = {
      "c2",           "c1",           "c0",          "qmax",           "qmin",       "vg",
      "mbase",        "pmax",         "pmin",        "ramp_up",        "ramp_down",  "startup_limit",
      "shutdown_limit", "min_uptime", "min_downtime", "initial_status", "initial_power", "pmin_prod",
      "pmax_prod"};
  static const std::vector<std::string> opf = {"mbase", "pg", "qg", "pmin", "pmax", "qmin",
                                               "qmax",  "vg", "c2", "c1",   "c0"};
  return task == Task::Uc ? uc : opf;
}

const std::vector<std::string>& load_feature_names() {
  static const std::vector<std::string> n = {"pd", "qd"};
  return n;
}

const std::vector<std::string>& shunt_feature_names() {
  static const std::vector<std::string> n = {"bs", "gs"};
  return n;
}

namespace {

std::size_t feature_width(NodeType t, Task task) {
  switch (t) {
    case NodeType::Bus: return bus_feature_names().size();
    case NodeType::Gen: return gen_feature_names(task).size();
    case NodeType::Load: return load_feature_names().size();
    case NodeType::Shunt: return shunt_feature_names().size();
  }
  throw ConfigError("unknown node type");
}

double signed_log1p(double x) { return std::copysign(std::log1p(std::fabs(x)), x); }

}  // namespace

NodeFeatures build_features(const grid::GridCase& c, Task task) {
  NodeFeatures f;
  f.task = task;
  auto& bus = f.blocks[0];
  bus.rows = c.n_buses();
  bus.cols = 7;
  for (const auto& b : c.buses()) {
    bus.data.insert(bus.data.end(), {b.base_kv, b.vmin, b.vmax, b.kind == grid::BusKind::PQ ? 1.0 : 0.0,
                                     b.kind == grid::BusKind::PV ? 1.0 : 0.0, b.kind == grid::BusKind::REF ? 1.0 : 0.0,
                                     b.kind == grid::BusKind::ISOLATED ? 1.0 : 0.0});
  }
  auto& gen = f.blocks[1];
  gen.rows = c.n_gens();
  gen.cols = feature_width(NodeType::Gen, task);
  for (const auto& g : c.generators()) {
    if (task == Task::Uc) {
      gen.data.insert(gen.data.end(),
                      {g.cost_c2, g.cost_c1, g.cost_c0, g.qmax, g.qmin, g.vg, g.mbase, g.pmax, g.pmin, g.ramp_up,
                       g.ramp_down, g.startup_limit, g.shutdown_limit, g.min_uptime, g.min_downtime, g.initial_status,
                       g.initial_power, g.pmin_prod, g.pmax_prod});
    } else {
      gen.data.insert(gen.data.end(),
                      {g.mbase, g.pg, g.qg, g.pmin, g.pmax, g.qmin, g.qmax, g.vg, g.cost_c2, g.cost_c1, g.cost_c0});
    }
  }
  auto& load = f.blocks[2];
  load.rows = c.loads().size();
  load.cols = 2;
  for (const auto& l : c.loads()) load.data.insert(load.data.end(), {l.pd, l.qd});
  auto& sh = f.blocks[3];
  sh.rows = c.shunts().size();
  sh.cols = 2;
  for (const auto& s : c.shunts()) sh.data.insert(sh.data.end(), {s.bs, s.gs});
  return f;
}

NodeLayout node_layout(const grid::GridCase& c) {
  NodeLayout l;
  l.count = {c.n_buses(), c.n_gens(), c.loads().size(), c.shunts().size()};
  for (std::size_t i = 0; i < kNodeTypes; ++i) {
    l.offset[i] = l.total;
    l.total += l.count[i];
  }
  return l;
}

void validate_features(const grid::GridCase& c, const NodeFeatures& f) {
  const NodeLayout l = node_layout(c);
  for (NodeType t : kTypes) {
    const auto& b = f.of(t);
    const std::size_t i = static_cast<std::size_t>(t);
    const std::size_t want = feature_width(t, f.task);
    if (b.rows != l.count[i] || b.cols != want || b.data.size() != b.rows * b.cols) {
      throw ConfigError(std::string(node_type_name(t)) + " features for task " + task_name(f.task) + " must be " +
                        std::to_string(l.count[i]) + " x " + std::to_string(want) + ", got " +
                        std::to_string(b.rows) + " x " + std::to_string(b.cols));
    }
  }
}

std::array<EdgeList, kRelations> build_edges(const grid::GridCase& c) {
  const NodeLayout l = node_layout(c);
  std::array<EdgeList, kRelations> e;
  auto push = [&](Relation r, std::size_t s, std::size_t d) {
    e[static_cast<std::size_t>(r)].src.push_back(s);
    e[static_cast<std::size_t>(r)].dst.push_back(d);
  };
  for (std::size_t k = 0; k < c.n_branches(); ++k) {
    const Relation r = c.branches()[k].is_transformer ? Relation::Transformer : Relation::Line;
    push(r, c.branch_from(k), c.branch_to(k));
    push(r, c.branch_to(k), c.branch_from(k));
  }
  for (std::size_t g = 0; g < c.n_gens(); ++g) {
    push(Relation::GenToBus, l.offset[1] + g, c.gen_bus(g));
    push(Relation::BusToGen, c.gen_bus(g), l.offset[1] + g);
  }
  for (std::size_t i = 0; i < c.loads().size(); ++i) {
    push(Relation::LoadToBus, l.offset[2] + i, c.load_bus(i));
    push(Relation::BusToLoad, c.load_bus(i), l.offset[2] + i);
  }
  for (std::size_t i = 0; i < c.shunts().size(); ++i) {
    push(Relation::ShuntToBus, l.offset[3] + i, c.shunt_bus(i));
    push(Relation::BusToShunt, c.shunt_bus(i), l.offset[3] + i);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Parameter layout

namespace {

struct Spec {
  std::string name;
  Group group;
  Shape shape;
  enum Init { Glorot, Zero, One } init;
};

std::vector<Spec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.hidden_dim, dt = cfg.temporal_dim;
  std::vector<Spec> s;
  auto lin = [&](const std::string& p, Group g, std::size_t in, std::size_t out) {
    s.push_back({p + ".w", g, {in, out}, Spec::Glorot});
    s.push_back({p + ".b", g, {out}, Spec::Zero});
  };
  auto mat = [&](const std::string& n, Group g, std::size_t in, std::size_t out) {
    s.push_back({n, g, {in, out}, Spec::Glorot});
  };
  auto norm = [&](const std::string& p, Group g) {
    s.push_back({p + ".ln_g", g, {d}, Spec::One});
    s.push_back({p + ".ln_b", g, {d}, Spec::Zero});
  };
  for (Task task : kTasks)
    for (NodeType t : kTypes) {
      const std::string p = std::string("enc.") + task_name(task) + "." + node_type_name(t);
      lin(p + ".l1", Group::TaskEncoders, feature_width(t, task), d);
      lin(p + ".l2", Group::TaskEncoders, d, d);
    }
  lin("proj", Group::SharedProjection, d, d);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "hgt." + std::to_string(l) + ".";
    for (NodeType t : kTypes) {
      const std::string q = p + node_type_name(t);
      norm(q, Group::SpatialEncoder);
      mat(q + ".wq", Group::SpatialEncoder, d, d);
      lin(q + ".msg", Group::SpatialEncoder, d, d);
      lin(q + ".out", Group::SpatialEncoder, d, d);
    }
    for (std::size_t r = 0; r < kRelations; ++r) {
      const std::string q = p + relation_name(static_cast<Relation>(r));
      mat(q + ".wk", Group::SpatialEncoder, d, d);
      mat(q + ".wv", Group::SpatialEncoder, d, d);
    }
  }
  for (const char* head : {"opf.bus", "opf.gen"}) {
    lin(std::string(head) + ".l1", Group::OpfDecoder, d, d);
    lin(std::string(head) + ".l2", Group::OpfDecoder, d, 2);
  }
  mat("uc.time_emb", Group::Temporal, cfg.horizon, cfg.time_embedding_dim());
  lin("uc.in", Group::Temporal, dt, d);
  for (std::size_t k = 0; k < cfg.temporal_layers; ++k) {
    const std::string p = "tmp." + std::to_string(k) + ".";
    for (const char* part : {"sp", "tm"}) {
      const std::string q = p + part;
      norm(q, Group::Temporal);
      for (const char* w : {".wq", ".wk", ".wv", ".wo"}) mat(q + w, Group::Temporal, d, d);
    }
    norm(p + "ff", Group::Temporal);
    lin(p + "ff.l1", Group::Temporal, d, dt);
    lin(p + "ff.l2", Group::Temporal, dt, d);
  }
  for (const char* head : {"uc.on", "uc.disp"}) {
    lin(std::string(head) + ".l1", Group::UcDecoder, d, d);
    lin(std::string(head) + ".l2", Group::UcDecoder, d, 1);
  }
  return s;
}

}  // namespace

std::size_t expected_param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.hidden_dim, dt = cfg.temporal_dim;
  // Encoder inputs: bus 7, load 2, shunt 2 per task; gens 11 (opf) and 19 (uc).
  const std::size_t enc_in = 2 * (7 + 2 + 2) + 11 + 19;
  const std::size_t enc = enc_in * d + 8 * (d + d * d + d);
  const std::size_t proj = d * d + d;
  const std::size_t hgt = cfg.layers * (4 * (3 * d * d + 4 * d) + 16 * d * d);
  const std::size_t opf = 2 * (d * d + d + 2 * d + 2);
  const std::size_t temporal = cfg.horizon * (dt - d - 1) + dt * d + d +
                               cfg.temporal_layers * (2 * (4 * d * d + 2 * d) + 2 * d + 2 * d * dt + dt + d);
  const std::size_t uc = 2 * (d * d + d + d + 1);
  return enc + proj + hgt + opf + temporal + uc;
}

ParamStore init_params(const ModelConfig& config, std::uint64_t seed) {
  ParamStore store(config);
  std::mt19937_64 rng(seed);
  for (const Spec& s : param_specs(config)) {
    Tensor t(s.shape, s.init == Spec::One ? 1.0 : 0.0);
    if (s.init == Spec::Glorot) {
      const double a = std::sqrt(6.0 / static_cast<double>(s.shape[0] + s.shape[1]));
      std::uniform_real_distribution<double> u(-a, a);
      for (auto& v : t.data()) v = u(rng);
    }
    store.add(s.name, s.group, std::move(t));
  }
  return store;
}

ParamStore init_params(const grid::GridCase& case_template, const ModelConfig& config, std::uint64_t seed) {
  // The parameterization is topology independent; the template only has to
  // be encodable.
  if (case_template.n_gens() == 0) throw ConfigError("case has no generators");
  return init_params(config, seed);
}

// ---------------------------------------------------------------------------
// Binder

Binder::Binder(Tape& tape, const ParamStore& store, Track track) : tape_(tape), store_(store), track_(track) {}

Var Binder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Param* p = store_.find(name);
  if (p == nullptr) throw ParamError(ParamErrorKind::Missing, "unknown parameter " + name);
  const bool tracked = track_ == Track::All || (track_ == Track::Trainable && store_.trainable(*p));
  Var v = tracked ? tape_.input(name, p->value) : tape_.constant(p->value);
  bound_.emplace(name, v);
  return v;
}

void Binder::bind(const std::string& name, Var v) {
  const Param* p = store_.find(name);
  if (p == nullptr) throw ParamError(ParamErrorKind::Missing, "unknown parameter " + name);
  if (v.shape() != p->value.shape())
    throw ParamError(ParamErrorKind::Shape, "bind: shape mismatch for parameter " + name);
  bound_[name] = v;
}

void Binder::enable_dropout(std::uint64_t seed, std::uint64_t step) {
  dropout_on_ = true;
  dropout_seed_ = seed;
  dropout_step_ = step;
}

namespace {
std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

Var Binder::dropout(Var x, std::uint64_t site) {
  const double rate = store_.config().dropout;
  if (!dropout_on_ || rate <= 0.0) return x;
  const std::uint64_t key = splitmix(splitmix(splitmix(dropout_seed_) ^ site) ^ dropout_step_);
  Tensor mask(x.shape(), 0.0);
  const double keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double r = static_cast<double>(splitmix(key ^ (i * 0x632be59bd9b4e019ULL)) >> 11) * 0x1.0p-53;
    mask[i] = r < rate ? 0.0 : keep;
  }
  return x * tape_.constant(std::move(mask));
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

Var linear(Binder& b, Var x, const std::string& p) { return ad::add_row(ad::matmul(x, b(p + ".w")), b(p + ".b")); }

Var mlp2(Binder& b, Var x, const std::string& p) { return linear(b, ad::relu(linear(b, x, p + ".l1")), p + ".l2"); }

Var norm(Binder& b, Var x, const std::string& p) {
  return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), b(p + ".ln_g")), b(p + ".ln_b"));
}

Tensor head_sum(std::size_t d, std::size_t heads) {
  Tensor m({d, heads}, 0.0);
  const std::size_t dh = d / heads;
  for (std::size_t j = 0; j < d; ++j) m.at(j, j / dh) = 1.0;
  return m;
}

Tensor transpose_of(const Tensor& a) {
  Tensor out({a.cols(), a.rows()}, 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Var vertical(std::vector<Var> parts) {
  return parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
}

}  // namespace

Var encode(Binder& b, const grid::GridCase& c, const NodeFeatures& f) {
  validate_features(c, f);
  const ModelConfig& cfg = b.config();
  Tape& t = b.tape();
  const NodeLayout lay = node_layout(c);
  const std::size_t d = cfg.hidden_dim;

  std::vector<Var> blocks;
  for (NodeType ty : kTypes) {
    const auto& fb = f.of(ty);
    if (fb.rows == 0) continue;
    std::vector<double> x(fb.data.size());
    std::transform(fb.data.begin(), fb.data.end(), x.begin(), signed_log1p);
    const std::string p = std::string("enc.") + task_name(f.task) + "." + node_type_name(ty);
    blocks.push_back(mlp2(b, t.constant(Tensor({fb.rows, fb.cols}, std::move(x))), p));
  }
  Var h = linear(b, vertical(blocks), "proj");

  const auto edges = build_edges(c);
  std::vector<std::size_t> dst_all;
  for (const auto& e : edges) dst_all.insert(dst_all.end(), e.dst.begin(), e.dst.end());
  const ad::IndexList dst_index = ad::make_index(dst_all);
  const std::size_t heads = cfg.heads;
  Var hsum = t.constant(head_sum(d, heads));
  Var hsum_t = t.constant(transpose_of(head_sum(d, heads)));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d / heads));

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "hgt." + std::to_string(l) + ".";
    std::vector<Var> a_parts, q_parts;
    for (NodeType ty : kTypes) {
      const std::size_t i = static_cast<std::size_t>(ty);
      if (lay.count[i] == 0) continue;
      const std::string q = p + node_type_name(ty);
      Var a = norm(b, ad::slice_rows(h, lay.offset[i], lay.count[i]), q);
      a_parts.push_back(a);
      q_parts.push_back(ad::matmul(a, b(q + ".wq")));
    }
    Var a = vertical(a_parts);
    Var qall = vertical(q_parts);

    Var msg;
    if (dst_all.empty()) {
      msg = t.constant(Tensor({lay.total, d}, 0.0));
    } else {
      std::vector<Var> scores, vals;
      for (std::size_t r = 0; r < kRelations; ++r) {
        if (edges[r].src.empty()) continue;
        const std::string q = p + relation_name(static_cast<Relation>(r));
        Var src = ad::gather_rows(a, ad::make_index(edges[r].src));
        Var k = ad::matmul(src, b(q + ".wk"));
        vals.push_back(ad::matmul(src, b(q + ".wv")));
        Var qd = ad::gather_rows(qall, ad::make_index(edges[r].dst));
        scores.push_back(ad::matmul(qd * k, hsum) * inv_sqrt);
      }
      Var alpha = ad::segment_softmax(vertical(scores), dst_index, lay.total);
      Var weighted = ad::matmul(alpha, hsum_t) * vertical(vals);
      msg = ad::scatter_add_rows(weighted, dst_index, lay.total);
    }

    std::vector<Var> next;
    for (NodeType ty : kTypes) {
      const std::size_t i = static_cast<std::size_t>(ty);
      if (lay.count[i] == 0) continue;
      const std::string q = p + node_type_name(ty);
      Var m = ad::slice_rows(msg, lay.offset[i], lay.count[i]);
      Var upd = linear(b, ad::relu(linear(b, m, q + ".msg")), q + ".out");
      upd = b.dropout(upd, 100 + 8 * l + i);
      next.push_back(ad::slice_rows(h, lay.offset[i], lay.count[i]) + upd);
    }
    h = vertical(next);
  }
  return h;
}

Var squash(Tape& t, Var logits, const Tensor& lo, const Tensor& hi) {
  if (lo.shape() != logits.shape() || hi.shape() != logits.shape())
    throw ad::ShapeError("squash: bounds must match the logits shape " + shape_str(logits.shape()));
  Var s = ad::sigmoid(logits);
  const Tensor& sv = s.value();
  Tensor span(lo.shape(), 0.0), low_mask(lo.shape(), 0.0), high_mask(lo.shape(), 0.0);
  for (std::size_t i = 0; i < sv.size(); ++i) {
    span[i] = hi[i] - lo[i];
    (sv[i] <= 0.5 ? low_mask[i] : high_mask[i]) = 1.0;
  }
  // Below the midpoint grow from lo, above it shrink from hi, so rounding can
  // never carry the value across either bound.
  Var d = t.constant(span);
  Var from_lo = t.constant(lo) + d * s;
  Var from_hi = t.constant(hi) - d * (ad::neg(s) + 1.0);
  return t.constant(std::move(low_mask)) * from_lo + t.constant(std::move(high_mask)) * from_hi;
}

acopf::PointVars decode_opf(Binder& b, const grid::GridCase& c, Var h) {
  Tape& t = b.tape();
  const std::size_t nb = c.n_buses(), ng = c.n_gens();
  if (ng == 0) throw ConfigError("case has no generators");
  if (h.rows() != node_layout(c).total || h.cols() != b.config().hidden_dim)
    throw ad::ShapeError("decode_opf: embedding shape " + shape_str(h.shape()) + " does not fit the case");
  Var ob = mlp2(b, ad::slice_rows(h, 0, nb), "opf.bus");
  Var og = mlp2(b, ad::slice_rows(h, nb, ng), "opf.gen");
  Tensor vmin({nb, 1}), vmax({nb, 1}), pmin({ng, 1}), pmax({ng, 1}), qmin({ng, 1}), qmax({ng, 1});
  for (std::size_t i = 0; i < nb; ++i) {
    vmin[i] = c.buses()[i].vmin;
    vmax[i] = c.buses()[i].vmax;
  }
  for (std::size_t g = 0; g < ng; ++g) {
    const auto& gen = c.generators()[g];
    pmin[g] = gen.pmin;
    pmax[g] = gen.pmax;
    qmin[g] = gen.qmin;
    qmax[g] = gen.qmax;
  }
  acopf::PointVars x;
  x.vm = squash(t, ad::slice_cols(ob, 0, 1), vmin, vmax);
  x.va = ad::slice_cols(ob, 1, 1);
  x.pg = squash(t, ad::slice_cols(og, 0, 1), pmin, pmax);
  x.qg = squash(t, ad::slice_cols(og, 1, 1), qmin, qmax);
  return x;
}

UcVars decode_uc(Binder& b, const grid::GridCase& c, Var h, const grid::DemandSeries& demand) {
  const ModelConfig& cfg = b.config();
  Tape& t = b.tape();
  const std::size_t T = cfg.horizon;
  if (demand.horizon != T)
    throw ConfigError("horizon mismatch: demand has " + std::to_string(demand.horizon) + " steps, model expects " +
                      std::to_string(T));
  grid::validate_demand(c, demand);
  const NodeLayout lay = node_layout(c);
  const std::size_t V = lay.total, nb = c.n_buses(), ng = c.n_gens(), d = cfg.hidden_dim;
  if (ng == 0) throw ConfigError("case has no generators");
  if (h.rows() != V || h.cols() != d)
    throw ad::ShapeError("decode_uc: embedding shape " + shape_str(h.shape()) + " does not fit the case");

  // Tokens in node-major order: row v*T + t.
  std::vector<std::size_t> rep(V * T), tix(V * T), to_time(V * T), to_node(V * T);
  Tensor ell({V * T, 1}, 0.0);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t s = 0; s < T; ++s) {
      rep[v * T + s] = v;
      tix[v * T + s] = s;
      if (v < nb) ell[v * T + s] = demand.pd[s][v];
      to_time[s * V + v] = v * T + s;
      to_node[v * T + s] = s * V + v;
    }
  const ad::IndexList time_major = ad::make_index(to_time), node_major = ad::make_index(to_node);
  std::array<Var, 3> token = {ad::gather_rows(h, ad::make_index(rep)), t.constant(std::move(ell)),
                              ad::gather_rows(b("uc.time_emb"), ad::make_index(tix))};
  Var z = linear(b, ad::concat_cols(token), "uc.in");

  const std::size_t th = cfg.temporal_heads;
  auto attend = [&](Var x, const std::string& p, std::size_t group) {
    Var a = norm(b, x, p);
    Var att = ad::block_attention(ad::matmul(a, b(p + ".wq")), ad::matmul(a, b(p + ".wk")),
                                  ad::matmul(a, b(p + ".wv")), group, th);
    return ad::matmul(att, b(p + ".wo"));
  };
  for (std::size_t k = 0; k < cfg.temporal_layers; ++k) {
    const std::string p = "tmp." + std::to_string(k) + ".";
    // Across nodes within each hour, then across hours within each node.
    Var sp = attend(ad::gather_rows(z, time_major), p + "sp", V);
    z = z + b.dropout(ad::gather_rows(sp, node_major), 1000 + 4 * k);
    z = z + b.dropout(attend(z, p + "tm", T), 1001 + 4 * k);
    Var ff = mlp2(b, norm(b, z, p + "ff"), p + "ff");
    z = z + b.dropout(ff, 1002 + 4 * k);
  }

  std::vector<std::size_t> gen_rows(T * ng);
  for (std::size_t s = 0; s < T; ++s)
    for (std::size_t g = 0; g < ng; ++g) gen_rows[s * ng + g] = (nb + g) * T + s;
  Var sg = ad::gather_rows(z, ad::make_index(gen_rows));
  UcVars out;
  out.u = ad::sigmoid(ad::reshape(mlp2(b, sg, "uc.on"), {T, ng}));
  Tensor lo({T, ng}, 0.0), hi({T, ng}, 0.0);
  for (std::size_t s = 0; s < T; ++s)
    for (std::size_t g = 0; g < ng; ++g) hi.at(s, g) = c.generators()[g].pmax;
  out.p = squash(t, ad::reshape(mlp2(b, sg, "uc.disp"), {T, ng}), lo, hi);
  return out;
}

// ---------------------------------------------------------------------------
// Conveniences

namespace {
std::vector<double> column(const Tensor& x) { return x.values(); }
}  // namespace

acopf::OperatingPoint to_point(const acopf::PointVars& x) {
  return {column(x.vm.value()), column(x.va.value()), column(x.pg.value()), column(x.qg.value())};
}

scuc::Schedule to_schedule(const UcVars& x) {
  scuc::Schedule s;
  s.horizon = x.u.rows();
  s.u = scuc::to_matrix(x.u.value());
  s.p = scuc::to_matrix(x.p.value());
  return s;
}

Tensor embed(const grid::GridCase& c, Task task, const ParamStore& params) {
  Tape t;
  Binder b(t, params, Binder::Track::None);
  return encode(b, c, build_features(c, task)).value();
}

acopf::OperatingPoint predict_opf(const grid::GridCase& c, const ParamStore& params) {
  Tape t;
  Binder b(t, params, Binder::Track::None);
  return to_point(decode_opf(b, c, encode(b, c, build_features(c, Task::Opf))));
}

scuc::Schedule predict_uc(const grid::GridCase& c, const grid::DemandSeries& demand, const ParamStore& params) {
  Tape t;
  Binder b(t, params, Binder::Track::None);
  return to_schedule(decode_uc(b, c, encode(b, c, build_features(c, Task::Uc)), demand));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json config_json(const ModelConfig& c) {
  return json{{"hidden_dim", c.hidden_dim},     {"layers", c.layers},
              {"heads", c.heads},               {"temporal_dim", c.temporal_dim},
              {"temporal_layers", c.temporal_layers}, {"temporal_heads", c.temporal_heads},
              {"horizon", c.horizon},           {"dropout", c.dropout},
              {"seed", c.seed}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.temporal_dim = j.at("temporal_dim").get<std::size_t>();
  c.temporal_layers = j.at("temporal_layers").get<std::size_t>();
  c.temporal_heads = j.at("temporal_heads").get<std::size_t>();
  c.horizon = j.at("horizon").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

std::string serialize_params(const ParamStore& p, std::string_view provenance_json) {
  json doc;
  doc["format"] = "gridlearn-params";
  doc["version"] = kCheckpointVersion;
  doc["config"] = config_json(p.config());
  json frozen = json::array();
  for (std::size_t g = 0; g < kGroups; ++g)
    if (p.frozen(static_cast<Group>(g))) frozen.push_back(kGroupNames[g]);
  doc["frozen"] = frozen;
  if (!provenance_json.empty()) doc["provenance"] = json::parse(provenance_json);
  json arr = json::array();
  for (const auto& prm : p.params()) {
    arr.push_back(json{{"name", prm.name},
                       {"group", group_name(prm.group)},
                       {"shape", prm.value.shape()},
                       {"values", prm.value.values()}});
  }
  doc["params"] = std::move(arr);
  return doc.dump(1) + "\n";
}

ParamStore parse_params(std::string_view text, const std::optional<ModelConfig>& expected) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParamError(ParamErrorKind::Parse, std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (!doc.is_object() || doc.value("format", "") != "gridlearn-params")
      throw ParamError(ParamErrorKind::Version, "not a gridlearn parameter checkpoint");
    const int version = doc.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw ParamError(ParamErrorKind::Version, "unsupported checkpoint version " + std::to_string(version));
    ModelConfig cfg = config_from(doc.at("config"));
    cfg.validate();
    ParamStore store(cfg);
    for (const auto& e : doc.at("params")) {
      const std::string name = e.at("name").get<std::string>();
      const auto group = parse_group(e.at("group").get<std::string>());
      if (!group) throw ParamError(ParamErrorKind::Parse, "unknown group for parameter " + name);
      Shape shape = e.at("shape").get<Shape>();
      std::vector<double> values = e.at("values").get<std::vector<double>>();
      std::size_t n = 1;
      for (auto s : shape) n *= s;
      if (shape.empty() || n != values.size())
        throw ParamError(ParamErrorKind::Shape, "value count does not match shape for parameter " + name);
      store.add(name, *group, Tensor(std::move(shape), std::move(values)));
    }
    for (const auto& g : doc.at("frozen")) {
      const auto group = parse_group(g.get<std::string>());
      if (!group) throw ParamError(ParamErrorKind::Parse, "unknown frozen group " + g.get<std::string>());
      store.set_frozen(*group, true);
    }
    const ModelConfig want = expected.value_or(cfg);
    std::vector<Spec> specs = param_specs(want);
    for (const Spec& s : specs) {
      const Param* have = store.find(s.name);
      if (have == nullptr) throw ParamError(ParamErrorKind::Missing, "checkpoint lacks parameter " + s.name);
      if (have->value.shape() != s.shape)
        throw ParamError(ParamErrorKind::Shape, "shape mismatch for parameter " + s.name + ": expected " +
                                                    shape_str(s.shape) + ", found " + shape_str(have->value.shape()));
    }
    if (specs.size() != store.params().size())
      throw ParamError(ParamErrorKind::Shape, "checkpoint holds parameters the configuration does not define");
    return store;
  } catch (const json::exception& e) {
    throw ParamError(ParamErrorKind::Parse, std::string("malformed checkpoint: ") + e.what());
  } catch (const ad::ShapeError& e) {
    throw ParamError(ParamErrorKind::Parse, std::string("malformed checkpoint: ") + e.what());
  } catch (const ad::NonFiniteError& e) {
    throw ParamError(ParamErrorKind::Parse, std::string("malformed checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw ParamError(ParamErrorKind::Parse, std::string("checkpoint config invalid: ") + e.what());
  }
}

void save_params(const ParamStore& p, const std::filesystem::path& path, std::string_view provenance_json) {
  const std::string text = serialize_params(p, provenance_json);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

ParamStore load_params(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  return parse_params(grid::read_text_file(path), expected);
}

}  // namespace gridlearn::model
