#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gridlearn/model.hpp"

namespace testutil {

inline std::string fixture(const char* name) { return std::string(GRIDLEARN_DATA_DIR) + "/" + name; }

// Small enough for finite differences, large enough to exercise every path.
inline gridlearn::model::ModelConfig small_config(std::size_t horizon = 3) {
  gridlearn::model::ModelConfig c;
  c.hidden_dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.temporal_dim = 16;
  c.temporal_layers = 1;
  c.temporal_heads = 2;
  c.horizon = horizon;
  c.dropout = 0.0;
  return c;
}

// Concatenates the selected parameters into one vector; `order` records
// which parameter each slice came from.
inline gridlearn::ad::Tensor flatten_params(const gridlearn::model::ParamStore& ps,
                                            const std::function<bool(const gridlearn::model::Param&)>& pick,
                                            std::vector<const gridlearn::model::Param*>& order) {
  std::vector<double> v;
  for (const auto& p : ps.params())
    if (pick(p)) {
      order.push_back(&p);
      v.insert(v.end(), p.value.values().begin(), p.value.values().end());
    }
  return gridlearn::ad::Tensor::vector(v);
}

inline gridlearn::ad::Tensor flatten_group(const gridlearn::model::ParamStore& ps, gridlearn::model::Group g,
                                           std::vector<const gridlearn::model::Param*>& order) {
  return flatten_params(ps, [g](const gridlearn::model::Param& p) { return p.group == g; }, order);
}

inline void bind_flat(gridlearn::model::Binder& b, gridlearn::ad::Var flat,
                      const std::vector<const gridlearn::model::Param*>& order) {
  std::size_t off = 0;
  for (const auto* p : order) {
    b.bind(p->name, gridlearn::ad::reshape(gridlearn::ad::slice_rows(flat, off, p->value.size()), p->value.shape()));
    off += p->value.size();
  }
}

}  // namespace testutil
