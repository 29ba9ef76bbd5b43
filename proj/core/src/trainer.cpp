#include "gridlearn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>
#include <thread>

#include "gridlearn/acopf.hpp"
#include "gridlearn/metrics.hpp"
#include "gridlearn/scuc.hpp"

namespace gridlearn::train {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using data::Instance;
using model::Task;

void LossWeights::validate() const {
  for (double v : {alpha, beta, gamma, delta, lambda_opf, lambda_uc})
    if (!(v >= 0.0) || !std::isfinite(v)) throw TrainError("loss weights must be finite and non-negative");
  if (alpha + beta + gamma + delta <= 0.0) throw TrainError("at least one of alpha, beta, gamma, delta must be > 0");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw TrainError("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw TrainError("weight_decay must be >= 0");
  if (!(grad_clip > 0.0)) throw TrainError("grad_clip must be > 0");
  if (batch_size == 0) throw TrainError("batch_size must be positive");
  if (!(gradnorm_alpha >= 0.0) || !(gradnorm_lr > 0.0)) throw TrainError("invalid GradNorm settings");
}

namespace {

struct Terms {
  Var sup;  // invalid when the instance has no usable label
  Var phys;
};

Terms instance_terms(model::Binder& b, const Instance& inst) {
  Tape& t = b.tape();
  const auto& c = *inst.grid;
  Var h = model::encode(b, c, model::build_features(c, inst.task));
  Terms out;
  if (inst.task == Task::Opf) {
    const auto x = model::decode_opf(b, c, h);
    out.phys = acopf::phys_loss_opf(t, c, *inst.admittance, x, inst.static_demand());
    if (inst.labeled()) out.sup = acopf::sup_loss_opf(t, x, inst.label->point);
  } else {
    const auto x = model::decode_uc(b, c, h, inst.demand);
    out.phys = scuc::phys_loss_uc(t, c, x.u, x.p);
    if (inst.labeled()) out.sup = scuc::sup_loss_uc(t, x.u, x.p, inst.label->schedule);
  }
  return out;
}

struct Counts {
  std::size_t opf = 0, uc = 0, sup_opf = 0, sup_uc = 0;
};

Counts count(const std::vector<const Instance*>& batch) {
  Counts n;
  for (const auto* i : batch) {
    if (i->task == Task::Opf) {
      ++n.opf;
      if (i->labeled()) ++n.sup_opf;
    } else {
      ++n.uc;
      if (i->labeled()) ++n.sup_uc;
    }
  }
  return n;
}

double inv(std::size_t n) { return n == 0 ? 0.0 : 1.0 / static_cast<double>(n); }

// Weighted contribution of one instance to Eq. (14) plus its raw term values.
struct Contribution {
  Var loss;
  double sup = 0.0, phys = 0.0;
};

Contribution contribution(model::Binder& b, const Instance& inst, const Counts& n, const LossWeights& w,
                          const std::array<double, 2>& tw) {
  const Terms terms = instance_terms(b, inst);
  const bool opf = inst.task == Task::Opf;
  const double ws = opf ? w.alpha * inv(n.sup_opf) : w.beta * inv(n.sup_uc);
  const double wp = opf ? w.gamma * inv(n.opf) : w.delta * inv(n.uc);
  const double k = opf ? tw[0] : tw[1];
  Contribution c;
  c.phys = terms.phys.value().item();
  c.loss = terms.phys * (k * wp);
  if (terms.sup.valid()) {
    c.sup = terms.sup.value().item();
    c.loss = c.loss + terms.sup * (k * ws);
  }
  return c;
}

}  // namespace

Var total_loss(model::Binder& b, const std::vector<const Instance*>& batch, const LossWeights& w, LossTerms* terms,
               const std::array<double, 2>& task_weights) {
  if (batch.empty()) throw TrainError("total_loss: empty batch");
  w.validate();
  const Counts n = count(batch);
  LossTerms lt;
  lt.n_opf = n.opf;
  lt.n_uc = n.uc;
  Var total;
  for (const auto* inst : batch) {
    const Contribution c = contribution(b, *inst, n, w, task_weights);
    total = total.valid() ? total + c.loss : c.loss;
    if (inst->task == Task::Opf) {
      lt.sup_opf += c.sup * inv(n.sup_opf);
      lt.phys_opf += c.phys * inv(n.opf);
    } else {
      lt.sup_uc += c.sup * inv(n.sup_uc);
      lt.phys_uc += c.phys * inv(n.uc);
    }
  }
  if (terms != nullptr) *terms = lt;
  return total;
}

LossValue total_loss(const std::vector<const Instance*>& batch, const model::ParamStore& params,
                     const LossWeights& w) {
  Tape t;
  model::Binder b(t, params, model::Binder::Track::None);
  LossValue v;
  v.total = total_loss(b, batch, w, &v.terms).value().item();
  return v;
}

void gradnorm_update(const std::vector<double>& task_losses, const std::vector<double>& grad_norms,
                     GradNormState& state, double alpha, double lr) {
  const std::size_t k = task_losses.size();
  if (k < 2 || grad_norms.size() != k || state.weights.size() != k)
    throw TrainError("gradnorm_update needs matching loss, norm and weight vectors for at least two tasks");
  if (state.initial_losses.size() != k) throw TrainError("gradnorm_update: missing epoch-0 reference losses");
  for (std::size_t i = 0; i < k; ++i)
    if (!(task_losses[i] > 0.0) || !(state.initial_losses[i] > 0.0))
      throw TrainError("gradnorm_update: every task needs a nonzero loss");
  std::vector<double> g(k), ratio(k);
  double gbar = 0.0, rbar = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    g[i] = state.weights[i] * grad_norms[i];
    ratio[i] = task_losses[i] / state.initial_losses[i];
    gbar += g[i];
    rbar += ratio[i];
  }
  gbar /= static_cast<double>(k);
  rbar /= static_cast<double>(k);
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double target = gbar * std::pow(ratio[i] / rbar, alpha);
    const double diff = g[i] - target;
    // d|w G - target| / dw = sign(w G - target) G
    const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    state.weights[i] = std::max(state.weights[i] - lr * sign * grad_norms[i], 1e-6);
    sum += state.weights[i];
  }
  for (auto& w : state.weights) w *= static_cast<double>(k) / sum;
}

std::vector<std::string> shared_last_layer(const model::ParamStore& p) {
  const std::string prefix = "hgt." + std::to_string(p.config().layers - 1) + ".";
  std::vector<std::string> out;
  for (const auto& prm : p.params())
    if (prm.name.rfind(prefix, 0) == 0 && prm.name.size() > 6 && prm.name.ends_with(".out.w")) out.push_back(prm.name);
  return out;
}

double grad_norm(const ad::Gradients& g) {
  double s = 0.0;
  for (const auto& [name, t] : g)
    for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<Instance>& dataset, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> opf, uc;
  for (std::size_t i = 0; i < dataset.size(); ++i) (dataset[i].task == Task::Opf ? opf : uc).push_back(i);
  std::mt19937_64 rng(data::derive_seed(seed, epoch));
  std::shuffle(opf.begin(), opf.end(), rng);
  std::shuffle(uc.begin(), uc.end(), rng);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < std::max(opf.size(), uc.size()); ++i) {
    if (i < opf.size()) order.push_back(opf[i]);
    if (i < uc.size()) order.push_back(uc[i]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  return batches;
}

std::map<std::string, double> snapshot_metrics(const std::vector<Instance>& dataset, const model::ParamStore& params) {
  std::vector<metrics::EvalRecord> recs;
  for (const auto& inst : dataset) {
    const oracle::OracleSolution* l = inst.labeled() ? &*inst.label : nullptr;
    recs.push_back(metrics::evaluate_instance(inst, params, l, nullptr));
  }
  std::map<std::string, double> out;
  const auto rep = metrics::aggregate(recs, metrics::GroupBy::Task);
  for (const auto& row : rep.rows)
    for (const auto& [m, s] : row.stats)
      if (m != "inference_time_s" && m != "cost") out[m] = s.mean;
  return out;
}

namespace {

struct InstanceResult {
  ad::Gradients grads;
  double sup = 0.0, phys = 0.0;
  bool finite = true;
  std::string error;
};

template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) f(i);
    });
  for (auto& th : pool) th.join();
}

void accumulate(std::map<std::string, std::vector<double>>& acc, const ad::Gradients& g, double scale = 1.0) {
  for (const auto& [name, t] : g) {
    auto& v = acc[name];
    if (v.empty()) v.assign(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) v[i] += scale * t[i];
  }
}

double norm_over(const std::map<std::string, std::vector<double>>& g, const std::vector<std::string>& names) {
  double s = 0.0;
  for (const auto& n : names) {
    auto it = g.find(n);
    if (it == g.end()) continue;
    for (double v : it->second) s += v * v;
  }
  return std::sqrt(s);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string TrainLog::csv() const {
  static const std::vector<std::string> snap = {"acc", "rmse_pg", "pct_viol", "mse_bus", "mse_gen", "pf_viol", "viol_norm"};
  std::ostringstream os;
  os << "epoch,total,sup_opf,sup_uc,phys_opf,phys_uc,w_opf,w_uc,grad_norm_mean,grad_norm_max,clipped_norm_max,steps";
  for (const auto& s : snap) os << ',' << s;
  os << '\n';
  for (const auto& e : epochs) {
    os << e.epoch << ',' << fmt(e.total) << ',' << fmt(e.terms.sup_opf) << ',' << fmt(e.terms.sup_uc) << ','
       << fmt(e.terms.phys_opf) << ',' << fmt(e.terms.phys_uc) << ',' << fmt(e.w_opf) << ',' << fmt(e.w_uc) << ','
       << fmt(e.grad_norm_mean) << ',' << fmt(e.grad_norm_max) << ',' << fmt(e.clipped_norm_max) << ',' << e.steps;
    for (const auto& s : snap) {
      os << ',';
      auto it = e.snapshot.find(s);
      if (it != e.snapshot.end()) os << fmt(it->second);
    }
    os << '\n';
  }
  return os.str();
}

TrainResult train(const std::vector<Instance>& dataset, model::ParamStore params, const TrainConfig& config,
                  const LossWeights& weights) {
  if (dataset.empty()) throw TrainError("train: empty dataset");
  config.validate();
  weights.validate();

  std::vector<std::string> shared;
  if (config.gradnorm_enabled) {
    shared = shared_last_layer(params);
    for (const auto& n : shared)
      if (!params.trainable(*params.find(n))) throw TrainError("GradNorm needs a trainable shared encoder");
  }

  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments> adam;
  for (const auto& p : params.params())
    if (params.trainable(p)) adam[p.name] = {std::vector<double>(p.value.size(), 0.0), std::vector<double>(p.value.size(), 0.0)};
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  TrainResult result{params, {}, false, ""};
  GradNormState gn;
  std::uint64_t step = 0;
  const bool dropout = params.config().dropout > 0.0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    double gsum = 0.0;
    for (const auto& batch_idx : epoch_batches(dataset, config.batch_size, config.seed, epoch)) {
      std::vector<const Instance*> batch;
      for (auto i : batch_idx) batch.push_back(&dataset[i]);
      const Counts n = count(batch);
      const std::array<double, 2> unit = {1.0, 1.0};

      std::vector<InstanceResult> res(batch.size());
      parallel_for(batch.size(), config.threads, [&](std::size_t i) {
        try {
          Tape t;
          model::Binder b(t, params);
          if (dropout) b.enable_dropout(config.seed, step * 1000003ULL + i);
          const Contribution c = contribution(b, *batch[i], n, weights, unit);
          res[i].sup = c.sup;
          res[i].phys = c.phys;
          res[i].finite = std::isfinite(c.loss.value().item());
          if (res[i].finite) res[i].grads = t.backward(c.loss);
        } catch (const ad::NonFiniteError& e) {
          res[i].finite = false;
          res[i].error = e.what();
        }
      });

      std::map<std::string, std::vector<double>> g_opf, g_uc;
      double l_opf = 0.0, l_uc = 0.0;
      LossTerms bt;
      bool finite = true;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        finite = finite && res[i].finite;
        if (!res[i].finite) continue;
        if (batch[i]->task == Task::Opf) {
          accumulate(g_opf, res[i].grads);
          bt.sup_opf += res[i].sup * inv(n.sup_opf);
          bt.phys_opf += res[i].phys * inv(n.opf);
        } else {
          accumulate(g_uc, res[i].grads);
          bt.sup_uc += res[i].sup * inv(n.sup_uc);
          bt.phys_uc += res[i].phys * inv(n.uc);
        }
      }
      l_opf = weights.alpha * bt.sup_opf + weights.gamma * bt.phys_opf;
      l_uc = weights.beta * bt.sup_uc + weights.delta * bt.phys_uc;
      if (!finite || !std::isfinite(l_opf + l_uc)) {
        result.aborted = true;
        result.message = "non-finite loss at epoch " + std::to_string(epoch) + "; kept the last finite parameters";
        for (const auto& r : res)
          if (!r.error.empty()) result.message += " (" + r.error + ")";
        return result;
      }

      if (config.gradnorm_enabled && n.opf > 0 && n.uc > 0 && l_opf > 0.0 && l_uc > 0.0) {
        if (gn.initial_losses.empty()) gn.initial_losses = {l_opf, l_uc};
        gradnorm_update({l_opf, l_uc}, {norm_over(g_opf, shared), norm_over(g_uc, shared)}, gn,
                        config.gradnorm_alpha, config.gradnorm_lr);
      }
      std::map<std::string, std::vector<double>> g;
      for (const auto& [name, v] : g_opf) {
        auto& d = g[name];
        if (d.empty()) d.assign(v.size(), 0.0);
        for (std::size_t i = 0; i < v.size(); ++i) d[i] += gn.weights[0] * v[i];
      }
      for (const auto& [name, v] : g_uc) {
        auto& d = g[name];
        if (d.empty()) d.assign(v.size(), 0.0);
        for (std::size_t i = 0; i < v.size(); ++i) d[i] += gn.weights[1] * v[i];
      }
      double norm = 0.0;
      for (const auto& [name, v] : g)
        for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      const double scale = norm > config.grad_clip ? config.grad_clip / norm : 1.0;
      double clipped = 0.0;
      for (auto& [name, v] : g)
        for (auto& x : v) {
          x *= scale;
          clipped += x * x;
        }
      rec.clipped_norm_max = std::max(rec.clipped_norm_max, std::sqrt(clipped));

      ++step;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (auto& [name, mo] : adam) {
        const auto it = g.find(name);
        Tensor value = params.value(name);
        for (std::size_t i = 0; i < value.size(); ++i) {
          const double gi = it == g.end() ? 0.0 : it->second[i];
          mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * gi;
          mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
          const double upd = (mo.m[i] / c1) / (std::sqrt(mo.v[i] / c2) + eps) + config.weight_decay * value[i];
          if (config.learning_rate != 0.0) value[i] -= config.learning_rate * upd;
        }
        params.set(name, std::move(value));
      }
      result.params = params;

      rec.total += l_opf + l_uc;
      rec.terms.sup_opf += bt.sup_opf;
      rec.terms.sup_uc += bt.sup_uc;
      rec.terms.phys_opf += bt.phys_opf;
      rec.terms.phys_uc += bt.phys_uc;
      rec.terms.n_opf += n.opf;
      rec.terms.n_uc += n.uc;
      gsum += norm;
      rec.grad_norm_max = std::max(rec.grad_norm_max, norm);
      ++rec.steps;
    }
    const double k = 1.0 / static_cast<double>(rec.steps);
    rec.total *= k;
    rec.terms.sup_opf *= k;
    rec.terms.sup_uc *= k;
    rec.terms.phys_opf *= k;
    rec.terms.phys_uc *= k;
    rec.grad_norm_mean = gsum * k;
    rec.w_opf = gn.weights[0];
    rec.w_uc = gn.weights[1];
    if (config.snapshot_every > 0 && (epoch % config.snapshot_every == 0 || epoch == config.epochs))
      rec.snapshot = snapshot_metrics(dataset, params);
    result.log.epochs.push_back(std::move(rec));
  }
  return result;
}

}  // namespace gridlearn::train
