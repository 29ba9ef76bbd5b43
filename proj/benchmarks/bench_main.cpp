#include <benchmark/benchmark.h>

#include <string>

#include "gridlearn/acopf.hpp"
#include "gridlearn/model.hpp"
#include "gridlearn/oracle.hpp"

using namespace gridlearn;

namespace {

grid::GridCase fixture(const char* name) { return grid::load_case(std::string(GRIDLEARN_DATA_DIR) + "/" + name); }

ad::Tensor col(const std::vector<double>& v) { return ad::Tensor(ad::Shape{v.size(), 1}, v); }

const char* case_for(std::int64_t i) {
  static const char* names[] = {"case3.json", "case5.json", "case14.json"};
  return names[i];
}

// Plain-value power balance mismatch.
void BM_Mismatch(benchmark::State& st) {
  const auto c = fixture(case_for(st.range(0)));
  const auto y = grid::build_admittance(c);
  const auto p = acopf::flat_start(c);
  const auto d = grid::base_demand(c);
  for (auto _ : st) benchmark::DoNotOptimize(acopf::ac_mismatch(c, y, p, d));
  st.SetLabel(c.name());
}
BENCHMARK(BM_Mismatch)->DenseRange(0, 2);

// Recording the physics loss on a tape and running the reverse sweep.
void BM_PhysLossBackward(benchmark::State& st) {
  const auto c = fixture(case_for(st.range(0)));
  const auto y = grid::build_admittance(c);
  const auto p0 = acopf::flat_start(c);
  const auto d = grid::base_demand(c);
  for (auto _ : st) {
    ad::Tape t;
    acopf::PointVars x{t.input("vm", col(p0.vm)), t.input("va", col(p0.va)),
                       t.input("pg", col(p0.pg)), t.input("qg", col(p0.qg))};
    const auto loss = acopf::phys_loss_opf(t, c, y, x, d);
    t.backward(loss);
    benchmark::DoNotOptimize(t.value(loss));
  }
  st.SetLabel(c.name());
}
BENCHMARK(BM_PhysLossBackward)->DenseRange(0, 2);

// Economic dispatch for an all-on commitment over a short horizon.
void BM_Dispatch(benchmark::State& st) {
  const auto c = fixture("case5.json");
  const std::size_t T = static_cast<std::size_t>(st.range(0));
  const auto d = grid::gen_demand_series(c, std::vector<double>(T, 0.7), 1.0);
  const auto dc = scuc::build_dc_model(c);
  const scuc::Matrix u(T, std::vector<double>(c.n_gens(), 1.0));
  for (auto _ : st) benchmark::DoNotOptimize(oracle::solve_dispatch(c, d, u, dc));
}
BENCHMARK(BM_Dispatch)->Arg(1)->Arg(4)->Arg(8)->Unit(benchmark::kMicrosecond);

// Inference-mode forward pass of the default-size model.
void BM_ForwardOpf(benchmark::State& st) {
  const auto c = fixture(case_for(st.range(0)));
  model::ModelConfig cfg;
  cfg.horizon = 4;
  const auto ps = model::init_params(c, cfg, 0);
  for (auto _ : st) benchmark::DoNotOptimize(model::predict_opf(c, ps));
  st.SetLabel(c.name());
}
BENCHMARK(BM_ForwardOpf)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
