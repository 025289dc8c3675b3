#include "dinf/infn.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "dinf/numerics/ops.hpp"

namespace dinf {

namespace {

void add_dense(ParameterStored& store, const std::string& name, Index in, Index out, double bound,
               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensord w({in, out});
  for (Index i = 0; i < w.size(); ++i) w[i] = dist(rng);
  store.add(name + ".weight", std::move(w));
  store.add(name + ".bias", Tensord({out}));
}

}  // namespace

void InfnConfig::validate() const {
  filter.validate();
  if (iterations < 0 || eval_iterations < 0) throw std::invalid_argument("iteration counts must be >= 0");
  if (num_classes <= 0) throw std::invalid_argument("num_classes must be positive");
  if (!use_dinf && (iterations != 0 || eval_iterations != 0)) {
    throw std::invalid_argument("a model without DINF cannot run refinement iterations");
  }
}

ParameterStored build_model(const InfnConfig& cfg, std::uint64_t seed) {
  cfg.filter.validate();
  std::mt19937_64 rng(seed);
  ParameterStored store;
  const FilterConfig& f = cfg.filter;
  const Index flat = f.roi_size(), d = f.instance_dim;
  add_dense(store, "head.fc_a", flat, d, std::sqrt(6.0 / static_cast<double>(flat)), rng);
  add_dense(store, "head.fc_b", d, d, std::sqrt(6.0 / static_cast<double>(d)), rng);
  add_dense(store, "head.cls", d, cfg.num_classes, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  add_dense(store, "head.reg", d, 4, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  if (cfg.use_dinf) {
    add_kernel_generator_params(store, "dinf.gen", f, rng);
    if (cfg.interaction == Interaction::soft_threshold) add_stm_params(store, "dinf.stm", f.mid_channels, rng);
  }
  store.seal();
  return store;
}

HeadVars HeadVars::bind(Taped& tape, const ParameterStored& s) {
  return {tape.parameter(s, "head.fc_a.weight"), tape.parameter(s, "head.fc_a.bias"),
          tape.parameter(s, "head.fc_b.weight"), tape.parameter(s, "head.fc_b.bias"),
          tape.parameter(s, "head.cls.weight"),  tape.parameter(s, "head.cls.bias"),
          tape.parameter(s, "head.reg.weight"),  tape.parameter(s, "head.reg.bias")};
}

ModelVars ModelVars::bind(Taped& tape, const ParameterStored& store) {
  ModelVars m;
  m.head = HeadVars::bind(tape, store);
  m.has_dinf = store.contains("dinf.gen.weight");
  if (m.has_dinf) {
    m.dinf.gen = KernelGenVars<double>::bind(tape, store, "dinf.gen");
    if (store.contains("dinf.stm.fc1.weight")) m.dinf.stm = StmVars<double>::bind(tape, store, "dinf.stm");
  }
  return m;
}

HeadOutput head_forward(const Vard& f, const HeadVars& p, const InfnConfig& cfg) {
  const FilterConfig& fc = cfg.filter;
  if (f.value().rank() != 4 || f.dim(1) != fc.channels || f.dim(2) != fc.spatial || f.dim(3) != fc.spatial) {
    throw ShapeError("head_forward: expected [B, " + std::to_string(fc.channels) + ", " +
                     std::to_string(fc.spatial) + ", " + std::to_string(fc.spatial) + "], got " +
                     to_string(f.shape()));
  }
  const Vard flat = reshape(f, {f.dim(0), fc.roi_size()});
  const Vard v = relu(linear(relu(linear(flat, p.fc_a_weight, p.fc_a_bias)), p.fc_b_weight, p.fc_b_bias));
  return {v, linear(v, p.cls_weight, p.cls_bias), canonical_box(sigmoid(linear(v, p.reg_weight, p.reg_bias)))};
}

std::vector<IterationVars> infn_forward(const Vard& f0, const ModelVars& params, const InfnConfig& cfg,
                                        Index iterations) {
  if (iterations < 0) throw std::invalid_argument("infn_forward: iterations must be >= 0");
  if (iterations > 0 && !params.has_dinf) throw std::invalid_argument("infn_forward: model has no DINF parameters");
  std::vector<IterationVars> out;
  out.reserve(static_cast<std::size_t>(iterations + 1));
  out.push_back({Vard(), f0, head_forward(f0, params.head, cfg)});
  // Running dense sum f0 + f1 + ... + f_{k-1}.
  Vard dense = f0;
  for (Index k = 1; k <= iterations; ++k) {
    const Vard fk = dinf_apply(dense, out.back().head.instance, params.dinf, cfg.filter, cfg.interaction);
    out.push_back({dense, fk, head_forward(fk, params.head, cfg)});
    if (k < iterations) dense = add(dense, fk);
  }
  return out;
}

std::vector<PredictionVars> predictions(const std::vector<IterationVars>& iters) {
  std::vector<PredictionVars> p;
  p.reserve(iters.size());
  for (const auto& it : iters) p.push_back({it.head.logits, it.head.box});
  return p;
}

std::vector<PredictionSet> infn_forward_batch(const Tensord& f0, const ParameterStored& params, const InfnConfig& cfg,
                                              Index iterations) {
  Taped tape;
  const ModelVars vars = ModelVars::bind(tape, params);
  const auto iters = infn_forward(tape.constant(f0), vars, cfg, iterations);
  const Index batch = f0.dim(0), m = cfg.num_classes, d = cfg.filter.instance_dim;
  const Shape roi{cfg.filter.channels, cfg.filter.spatial, cfg.filter.spatial};
  const Index roi_n = cfg.filter.roi_size();
  std::vector<PredictionSet> out(static_cast<std::size_t>(batch));
  auto row = [](const Tensord& t, Index i, Index n, const Shape& shape) {
    return Tensord(shape, t.data().segment(i * n, n));
  };
  for (Index b = 0; b < batch; ++b) {
    for (const auto& it : iters) {
      Prediction p;
      p.logits = row(it.head.logits.value(), b, m, {m});
      p.box = box_from_tensor(it.head.box.value(), b);
      p.instance = row(it.head.instance.value(), b, d, {d});
      p.feature = row(it.feature.value(), b, roi_n, roi);
      if (it.filter_input.valid()) p.filter_input = row(it.filter_input.value(), b, roi_n, roi);
      out[b].push_back(std::move(p));
    }
  }
  return out;
}

PredictionSet infn_forward(const Tensord& f0, const ParameterStored& params, const InfnConfig& cfg, Index iterations) {
  if (f0.rank() != 3) throw ShapeError("infn_forward: expected a single RoI feature [C, S, S], got " +
                                       to_string(f0.shape()));
  Shape batched{1};
  batched.insert(batched.end(), f0.shape().begin(), f0.shape().end());
  return infn_forward_batch(f0.reshaped(batched), params, cfg, iterations).front();
}

Index count_parameters(const ParameterStored& params) { return params.scalar_count(); }

double total_loss(const PredictionSet& preds, int label, const Box& gt, const IffConfig& cfg) {
  double total = 0;
  for (const auto& p : preds) total += cross_entropy(p.logits, label) + cfg.reg_weight * iff_loss(p.box, gt, cfg);
  return total;
}

}  // namespace dinf
