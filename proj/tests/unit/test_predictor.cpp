#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include "doctest.h"
#include "gridlearn/model.hpp"
#include "test_util.hpp"

using namespace gridlearn;
using model::Binder;
using model::ModelConfig;
using model::ParamStore;
using model::Task;
using ad::Tensor;
using ad::Var;

namespace {

using testutil::bind_flat;
using testutil::fixture;
using testutil::flatten_group;
using testutil::small_config;

// Independent tally, walking the architecture component by component.
std::size_t tally(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim, dt = c.temporal_dim;
  auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
  std::size_t n = 0;
  for (std::size_t in : {7, 11, 2, 2, 7, 19, 2, 2}) n += lin(in, d) + lin(d, d);
  n += lin(d, d);
  for (std::size_t l = 0; l < c.layers; ++l) {
    n += 4 * (2 * d + d * d + lin(d, d) + lin(d, d));
    n += 8 * (2 * d * d);
  }
  n += 2 * (lin(d, d) + lin(d, 2));
  n += c.horizon * (dt - d - 1) + lin(dt, d);
  for (std::size_t k = 0; k < c.temporal_layers; ++k) n += 2 * (2 * d + 4 * d * d) + 2 * d + lin(d, dt) + lin(dt, d);
  n += 2 * (lin(d, d) + lin(d, 1));
  return n;
}

double slog(double x) { return std::copysign(std::log1p(std::fabs(x)), x); }

std::vector<double> mat_row_apply(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
  std::vector<double> y(w.cols(), 0.0);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at(i, j);
    y[j] = s + b[j];
  }
  return y;
}

void zero_where(ParamStore& ps, const std::function<bool(const std::string&)>& pred) {
  for (const auto& p : std::vector<model::Param>(ps.params()))
    if (pred(p.name)) ps.set(p.name, Tensor(p.value.shape(), 0.0));
}

bool contains(const std::string& s, const char* part) { return s.find(part) != std::string::npos; }

// Same grid with every element list reversed.
grid::GridCase reversed(const grid::GridCase& c) {
  grid::CaseData d = c.data();
  std::reverse(d.buses.begin(), d.buses.end());
  std::reverse(d.generators.begin(), d.generators.end());
  std::reverse(d.loads.begin(), d.loads.end());
  std::reverse(d.shunts.begin(), d.shunts.end());
  std::reverse(d.branches.begin(), d.branches.end());
  return grid::GridCase(d);
}

std::vector<std::size_t> reversed_node_map(const grid::GridCase& c) {
  const auto lay = model::node_layout(c);
  std::vector<std::size_t> map(lay.total);
  for (std::size_t ty = 0; ty < model::kNodeTypes; ++ty)
    for (std::size_t i = 0; i < lay.count[ty]; ++i) map[lay.offset[ty] + i] = lay.offset[ty] + lay.count[ty] - 1 - i;
  return map;
}

grid::DemandSeries ramp_demand(const grid::GridCase& c, std::size_t T) {
  std::vector<double> prof;
  for (std::size_t t = 0; t < T; ++t) prof.push_back(0.7 + 0.1 * static_cast<double>(t));
  return grid::gen_demand_series(c, prof, 1.0);
}

}  // namespace

TEST_CASE("parameter count matches the closed form") {
  ModelConfig def;
  const ParamStore ps = model::init_params(def, 3);
  CHECK(ps.count() == model::expected_param_count(def));
  CHECK(ps.count() == tally(def));
  for (std::size_t T : {1u, 4u, 36u}) {
    ModelConfig c = small_config(T);
    CHECK(model::init_params(c, 0).count() == tally(c));
  }
}

TEST_CASE("initialization is deterministic and Glorot bounded") {
  const ModelConfig c = small_config();
  const ParamStore a = model::init_params(c, 11);
  const ParamStore b = model::init_params(c, 11);
  const ParamStore other = model::init_params(c, 12);
  CHECK(model::identical(a, b));
  CHECK_FALSE(model::identical(a, other));
  for (const auto& p : a.params()) {
    const bool bias = p.value.rank() == 1;
    if (bias) {
      const double want = contains(p.name, ".ln_g") ? 1.0 : 0.0;
      for (double v : p.value.values()) CHECK(v == want);
    } else {
      const double lim = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
      for (double v : p.value.values()) CHECK(std::fabs(v) <= lim);
    }
  }
}

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(model::init_params(c, 0), model::ConfigError);
  c = small_config();
  c.temporal_heads = 3;
  CHECK_THROWS_AS(c.validate(), model::ConfigError);
  c = small_config();
  c.temporal_dim = c.hidden_dim + 1;
  CHECK_THROWS_AS(c.validate(), model::ConfigError);
}

TEST_CASE("feature tables follow the column schemas") {
  const auto c = grid::load_case(fixture("case14.json"));
  const auto uc = model::build_features(c, Task::Uc);
  const auto opf = model::build_features(c, Task::Opf);
  CHECK(uc.of(model::NodeType::Bus).cols == 7);
  CHECK(uc.of(model::NodeType::Gen).cols == 19);
  CHECK(opf.of(model::NodeType::Gen).cols == 11);
  CHECK(opf.of(model::NodeType::Load).cols == 2);
  CHECK(opf.of(model::NodeType::Shunt).cols == 2);
  const auto& g0 = c.generators()[0];
  const auto& ug = uc.of(model::NodeType::Gen);
  CHECK(ug.at(0, 0) == g0.cost_c2);
  CHECK(ug.at(0, 7) == g0.pmax);
  CHECK(ug.at(0, 15) == g0.initial_status);
  const auto& og = opf.of(model::NodeType::Gen);
  CHECK(og.at(0, 0) == g0.mbase);
  CHECK(og.at(0, 4) == g0.pmax);
  CHECK(og.at(0, 10) == g0.cost_c0);
  const auto& bus = uc.of(model::NodeType::Bus);
  CHECK(bus.at(c.ref_bus(), 5) == 1.0);
  auto broken = uc;
  broken.task = Task::Opf;
  CHECK_THROWS_AS(model::validate_features(c, broken), model::ConfigError);
}

TEST_CASE("zero message layers leave the projected features unchanged") {
  const auto c = grid::load_case(fixture("case14.json"));
  ParamStore ps = model::init_params(small_config(), 5);
  zero_where(ps, [](const std::string& n) { return contains(n, ".msg.") || contains(n, ".out."); });
  const Tensor h = model::embed(c, Task::Opf, ps);
  const auto f = model::build_features(c, Task::Opf);
  const auto lay = model::node_layout(c);
  double worst = 0.0;
  for (std::size_t ty = 0; ty < model::kNodeTypes; ++ty) {
    const auto& blk = f.blocks[ty];
    const std::string p = std::string("enc.opf.") + model::node_type_name(static_cast<model::NodeType>(ty));
    for (std::size_t r = 0; r < blk.rows; ++r) {
      std::vector<double> x(blk.cols);
      for (std::size_t j = 0; j < blk.cols; ++j) x[j] = slog(blk.at(r, j));
      auto y = mat_row_apply(x, ps.value(p + ".l1.w"), ps.value(p + ".l1.b"));
      for (double& v : y) v = std::max(0.0, v);
      y = mat_row_apply(y, ps.value(p + ".l2.w"), ps.value(p + ".l2.b"));
      y = mat_row_apply(y, ps.value("proj.w"), ps.value("proj.b"));
      for (std::size_t j = 0; j < y.size(); ++j)
        worst = std::max(worst, std::fabs(y[j] - h.at(lay.offset[ty] + r, j)));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("relabeling nodes permutes every output identically") {
  const ModelConfig cfg = small_config(3);
  const auto c = grid::load_case(fixture("case14.json"));
  const auto rc = reversed(c);
  const ParamStore ps = model::init_params(cfg, 21);
  const auto map = reversed_node_map(c);
  for (Task task : {Task::Opf, Task::Uc}) {
    const Tensor h = model::embed(c, task, ps);
    const Tensor hr = model::embed(rc, task, ps);
    double worst = 0.0;
    for (std::size_t v = 0; v < map.size(); ++v)
      for (std::size_t j = 0; j < h.cols(); ++j) worst = std::max(worst, std::fabs(h.at(v, j) - hr.at(map[v], j)));
    CHECK(worst < 1e-10);
  }
  const auto p = model::predict_opf(c, ps);
  const auto pr = model::predict_opf(rc, ps);
  const std::size_t nb = c.n_buses(), ng = c.n_gens();
  double worst = 0.0;
  for (std::size_t i = 0; i < nb; ++i) {
    worst = std::max(worst, std::fabs(p.vm[i] - pr.vm[nb - 1 - i]));
    worst = std::max(worst, std::fabs(p.va[i] - pr.va[nb - 1 - i]));
  }
  for (std::size_t g = 0; g < ng; ++g) {
    worst = std::max(worst, std::fabs(p.pg[g] - pr.pg[ng - 1 - g]));
    worst = std::max(worst, std::fabs(p.qg[g] - pr.qg[ng - 1 - g]));
  }
  const auto s = model::predict_uc(c, ramp_demand(c, 3), ps);
  const auto sr = model::predict_uc(rc, ramp_demand(rc, 3), ps);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t g = 0; g < ng; ++g) {
      worst = std::max(worst, std::fabs(s.u[t][g] - sr.u[t][ng - 1 - g]));
      worst = std::max(worst, std::fabs(s.p[t][g] - sr.p[t][ng - 1 - g]));
    }
  CHECK(worst < 1e-10);
}

TEST_CASE("isomorphic components get identical embeddings") {
  grid::CaseData d = grid::load_case(fixture("case2.json")).data();
  // Two twin islands (isolated bus + load + shunt) and two twin leaves.
  d.buses.push_back({3, 230.0, 0.9, 1.1, grid::BusKind::PQ});
  d.buses.push_back({4, 230.0, 0.9, 1.1, grid::BusKind::PQ});
  d.buses.push_back({5, 115.0, 0.95, 1.05, grid::BusKind::ISOLATED});
  d.buses.push_back({6, 115.0, 0.95, 1.05, grid::BusKind::ISOLATED});
  grid::Branch br = d.branches[0];
  br.from_bus = 2;
  br.to_bus = 3;
  d.branches.push_back(br);
  br.to_bus = 4;
  d.branches.push_back(br);
  d.loads.push_back({3, 10.0, 2.0});
  d.loads.push_back({4, 10.0, 2.0});
  d.loads.push_back({5, 7.0, 1.0});
  d.loads.push_back({6, 7.0, 1.0});
  d.shunts.push_back({5, 0.0, 3.0});
  d.shunts.push_back({6, 0.0, 3.0});
  const grid::GridCase c(d);
  const auto ps = model::init_params(small_config(), 4);
  const auto lay = model::node_layout(c);
  for (Task task : {Task::Opf, Task::Uc}) {
    const Tensor h = model::embed(c, task, ps);
    auto same_rows = [&](std::size_t a, std::size_t b) {
      for (std::size_t j = 0; j < h.cols(); ++j)
        if (h.at(a, j) != h.at(b, j)) return false;
      return true;
    };
    CHECK(same_rows(2, 3));
    CHECK(same_rows(4, 5));
    CHECK(same_rows(lay.offset[2] + 1, lay.offset[2] + 2));
    CHECK(same_rows(lay.offset[2] + 3, lay.offset[2] + 4));
    CHECK(same_rows(lay.offset[3], lay.offset[3] + 1));
    CHECK_FALSE(same_rows(2, 4));
  }
}

TEST_CASE("zero decoder weights put outputs at the box midpoints") {
  const auto c = grid::load_case(fixture("case5.json"));
  ParamStore ps = model::init_params(small_config(), 8);
  zero_where(ps, [](const std::string& n) { return n.rfind("opf.", 0) == 0; });
  const auto p = model::predict_opf(c, ps);
  for (std::size_t i = 0; i < c.n_buses(); ++i) {
    const auto& b = c.buses()[i];
    CHECK(p.vm[i] == doctest::Approx(0.5 * (b.vmin + b.vmax)).epsilon(1e-15));
    CHECK(p.va[i] == 0.0);
  }
  for (std::size_t g = 0; g < c.n_gens(); ++g) {
    const auto& gen = c.generators()[g];
    CHECK(p.pg[g] == doctest::Approx(0.5 * (gen.pmin + gen.pmax)).epsilon(1e-15));
    CHECK(p.qg[g] == doctest::Approx(0.5 * (gen.qmin + gen.qmax)).epsilon(1e-15));
  }
}

TEST_CASE("squash stays inside the box even when saturated") {
  ad::Tape t;
  Tensor lo = Tensor::vector({0.1, -3.0, 0.0, 1e-3});
  Tensor hi = Tensor::vector({0.3, 7.0, 2.5, 1e-3 + 1e-12});
  Var x = t.constant(Tensor::vector({800.0, -800.0, 40.0, 0.0}));
  const Tensor y = model::squash(t, x, lo, hi).value();
  CHECK(y[0] == 0.3);
  CHECK(y[1] == -3.0);
  CHECK(y[2] <= 2.5);
  for (std::size_t i = 0; i < 4; ++i) CHECK((y[i] >= lo[i] && y[i] <= hi[i]));
}

TEST_CASE("decoded OPF outputs respect boxes over random parameter draws") {
  const auto c = grid::load_case(fixture("case14.json"));
  const ModelConfig cfg = small_config();
  std::size_t bad = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    ParamStore ps = model::init_params(cfg, s);
    // Inflate the heads so the squashing saturates on some draws.
    const double gain = 1.0 + static_cast<double>(s % 7) * 4.0;
    for (const auto& p : std::vector<model::Param>(ps.params()))
      if (p.name.rfind("opf.", 0) == 0) {
        Tensor v = p.value;
        for (auto& e : v.data()) e *= gain;
        ps.set(p.name, v);
      }
    const auto pt = model::predict_opf(c, ps);
    for (std::size_t i = 0; i < c.n_buses(); ++i)
      if (!(pt.vm[i] >= c.buses()[i].vmin && pt.vm[i] <= c.buses()[i].vmax)) ++bad;
    for (std::size_t g = 0; g < c.n_gens(); ++g) {
      const auto& gen = c.generators()[g];
      if (!(pt.pg[g] >= gen.pmin && pt.pg[g] <= gen.pmax)) ++bad;
      if (!(pt.qg[g] >= gen.qmin && pt.qg[g] <= gen.qmax)) ++bad;
    }
  }
  CHECK(bad == 0);
}

TEST_CASE("decoded UC outputs: boxes, degenerate horizon, demand sensitivity") {
  const auto c = grid::load_case(fixture("case5.json"));
  SUBCASE("1000 draws") {
    const ModelConfig cfg = small_config(4);
    const auto demand = ramp_demand(c, 4);
    std::size_t bad = 0;
    for (std::uint64_t s = 0; s < 1000; ++s) {
      const auto sch = model::predict_uc(c, demand, model::init_params(cfg, s));
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t g = 0; g < c.n_gens(); ++g) {
          if (!(sch.u[t][g] > 0.0 && sch.u[t][g] < 1.0)) ++bad;
          if (!(sch.p[t][g] >= 0.0 && sch.p[t][g] <= c.generators()[g].pmax)) ++bad;
        }
    }
    CHECK(bad == 0);
  }
  SUBCASE("T = 1") {
    const auto sch = model::predict_uc(c, ramp_demand(c, 1), model::init_params(small_config(1), 2));
    REQUIRE(sch.u.size() == 1);
    for (double v : sch.u[0]) CHECK(std::isfinite(v));
  }
  SUBCASE("doubling demand moves the outputs") {
    const auto ps = model::init_params(small_config(4), 9);
    const auto d1 = ramp_demand(c, 4);
    auto d2 = d1;
    for (auto& row : d2.pd)
      for (auto& v : row) v *= 2.0;
    const auto a = model::predict_uc(c, d1, ps);
    const auto b = model::predict_uc(c, d2, ps);
    double diff = 0.0;
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t g = 0; g < c.n_gens(); ++g)
        diff = std::max({diff, std::fabs(a.u[t][g] - b.u[t][g]), std::fabs(a.p[t][g] - b.p[t][g])});
    CHECK(diff > 1e-9);
  }
  SUBCASE("horizon mismatch") {
    CHECK_THROWS_AS(model::predict_uc(c, ramp_demand(c, 5), model::init_params(small_config(4), 2)),
                    model::ConfigError);
  }
}

TEST_CASE("decoder gradients match finite differences") {
  const auto c = grid::load_case(fixture("case3.json"));
  const ParamStore ps = model::init_params(small_config(3), 31);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SUBCASE("sup_loss_opf through the OPF heads") {
    acopf::OperatingPoint label = acopf::flat_start(c);
    for (auto& v : label.va) v = u(rng) - 0.5;
    for (auto& v : label.pg) v += 0.3 * u(rng);
    std::vector<const model::Param*> order;
    const Tensor point = flatten_group(ps, model::Group::OpfDecoder, order);
    const Tensor h = model::embed(c, Task::Opf, ps);
    auto loss = [&](ad::Tape& t, Var x) {
      Binder b(t, ps, Binder::Track::None);
      bind_flat(b, x, order);
      return acopf::sup_loss_opf(t, model::decode_opf(b, c, t.constant(h)), label);
    };
    const auto rep = ad::finite_diff_check(loss, point, {1e-6, 1e-5, 0, 0});
    CHECK(rep.passed);
    CHECK(rep.max_rel_error < 1e-5);
    CHECK(rep.checked > 100);
  }
  SUBCASE("sup_loss_uc through the temporal stack and UC heads") {
    const auto demand = ramp_demand(c, 3);
    scuc::Schedule label;
    label.horizon = 3;
    label.u = {{1, 0}, {1, 1}, {0, 1}};
    label.p = {{0.5, 0.0}, {0.6, 0.2}, {0.0, 0.4}};
    for (model::Group g : {model::Group::UcDecoder, model::Group::Temporal}) {
      std::vector<const model::Param*> order;
      const Tensor point = flatten_group(ps, g, order);
      const Tensor h = model::embed(c, Task::Uc, ps);
      auto loss = [&](ad::Tape& t, Var x) {
        Binder b(t, ps, Binder::Track::None);
        bind_flat(b, x, order);
        const auto out = model::decode_uc(b, c, t.constant(h), demand);
        return scuc::sup_loss_uc(t, out.u, out.p, label);
      };
      const auto rep = ad::finite_diff_check(loss, point, {1e-6, 1e-5, 150, 3});
      CHECK(rep.passed);
      CHECK(rep.max_rel_error < 1e-5);
    }
  }
}

TEST_CASE("binder tracks only unfrozen groups") {
  const auto c = grid::load_case(fixture("case3.json"));
  ParamStore ps = model::init_params(small_config(), 1);
  ps.freeze_encoder();
  CHECK(ps.encoder_frozen());
  ad::Tape t;
  Binder b(t, ps);
  const auto x = model::decode_opf(b, c, model::encode(b, c, model::build_features(c, Task::Opf)));
  const auto grads = t.backward(ad::sum(x.pg) + ad::sum(x.vm));
  CHECK_FALSE(grads.empty());
  for (const auto& [name, g] : grads) CHECK(name.rfind("opf.", 0) == 0);
}

TEST_CASE("dropout is keyed by seed and step and off in evaluation") {
  const auto c = grid::load_case(fixture("case3.json"));
  ModelConfig cfg = small_config();
  cfg.dropout = 0.5;
  const ParamStore ps = model::init_params(cfg, 2);
  auto run = [&](bool train, std::uint64_t step) {
    ad::Tape t;
    Binder b(t, ps);
    if (train) b.enable_dropout(77, step);
    return model::encode(b, c, model::build_features(c, Task::Opf)).value();
  };
  const Tensor e1 = run(false, 0), e2 = run(false, 0);
  CHECK(e1.values() == e2.values());
  CHECK(run(true, 3).values() == run(true, 3).values());
  CHECK(run(true, 3).values() != run(true, 4).values());
  CHECK(run(true, 3).values() != e1.values());
}

TEST_CASE("checkpoints round-trip and validate") {
  const auto dir = std::filesystem::temp_directory_path() / "gridlearn_test_predictor";
  std::filesystem::create_directories(dir);
  ParamStore ps = model::init_params(small_config(), 17);
  ps.set_frozen(model::Group::SpatialEncoder, true);
  const auto path = dir / "p.json";
  model::save_params(ps, path, R"({"parent": "none"})");
  const ParamStore back = model::load_params(path, small_config());
  CHECK(model::identical(ps, back));
  CHECK(model::param_hash(ps) == model::param_hash(back));

  const std::string text = grid::read_text_file(path);
  CHECK_THROWS_AS(model::parse_params(text.substr(0, text.size() / 2)), model::ParamError);
  try {
    model::parse_params(text.substr(0, text.size() / 2));
  } catch (const model::ParamError& e) {
    CHECK(e.kind() == model::ParamErrorKind::Parse);
  }

  ModelConfig wider = small_config();
  wider.hidden_dim = 12;
  wider.temporal_dim = 24;
  try {
    model::parse_params(text, wider);
    FAIL("expected a shape error");
  } catch (const model::ParamError& e) {
    CHECK(e.kind() == model::ParamErrorKind::Shape);
    CHECK(std::string(e.what()).find("enc.opf.bus.l1.w") != std::string::npos);
  }

  std::string bumped = text;
  const auto pos = bumped.find("\"version\": 1");
  REQUIRE(pos != std::string::npos);
  bumped.replace(pos, 12, "\"version\": 9");
  try {
    model::parse_params(bumped);
    FAIL("expected a version error");
  } catch (const model::ParamError& e) {
    CHECK(e.kind() == model::ParamErrorKind::Version);
  }
  std::filesystem::remove_all(dir);
}
