#include "dinf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Core>

#include "dinf/numerics/ops.hpp"

namespace dinf {

namespace {

constexpr Index kEvalChunk = 256;

Tensord stack_features(std::span<const SynthSample> samples, std::span<const Index> order, Index begin, Index end) {
  const Tensord& first = samples[order[begin]].feature;
  const Index n = first.size();
  Shape shape{end - begin};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensord out(shape);
  for (Index b = begin; b < end; ++b) out.data().segment((b - begin) * n, n) = samples[order[b]].feature.data();
  return out;
}

std::vector<Index> identity_order(std::size_t n) {
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  return order;
}

int argmax(const Tensord& logits) {
  Index best = 0;
  for (Index j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[best]) best = j;
  return static_cast<int>(best);
}

/// Unit-norm dominant eigenvector of a symmetric PSD matrix, kept orthogonal
/// to `against`.
Vector<double> power_iteration(const RowMatrix<double>& cov, const std::vector<Vector<double>>& against,
                               std::uint64_t seed) {
  const Index d = cov.rows();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Vector<double> v(d);
  for (Index i = 0; i < d; ++i) v[i] = normal(rng);
  auto orthogonalize = [&](Vector<double>& x) {
    for (const auto& u : against) x -= u.dot(x) * u;
  };
  orthogonalize(v);
  v.normalize();
  const double scale = std::max(cov.norm(), 1e-300);
  for (int it = 0; it < 200000; ++it) {
    Vector<double> w = cov * v;
    orthogonalize(w);
    const double lambda = v.dot(w);
    const double residual = (w - lambda * v).norm();
    const double n = w.norm();
    if (n == 0) return v;
    v = w / n;
    if (residual <= 1e-13 * scale) break;
  }
  orthogonalize(v);
  return v.normalized();
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(grad_clip >= 0)) throw std::invalid_argument("grad_clip must be >= 0");
  model.validate();
  iff.validate();
  synth.validate();
  if (synth.channels != model.filter.channels || synth.spatial != model.filter.spatial ||
      synth.classes != model.num_classes) {
    throw std::invalid_argument("synthetic data shape does not match the model configuration");
  }
}

double clip_gradients(ParameterStored& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, e] : params.entries()) sq += e.grad.data().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, e] : params.entries()) e.grad.data() *= s;
  }
  return norm;
}

void sgd_step(ParameterStored& params, double lr, double momentum) {
  for (const auto& [name, e] : params.entries()) {
    if (!e.grad.all_finite()) throw DivergenceError("non-finite gradient in parameter '" + name + "'", -1);
  }
  for (auto& [name, e] : params.entries()) {
    e.momentum.data() = momentum * e.momentum.data() + e.grad.data();
    e.value.data() -= lr * e.momentum.data();
    e.grad.data().setZero();
  }
}

TrainResult train(const TrainConfig& cfg, std::span<const SynthSample> train_set,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  TrainResult result{build_model(cfg.model, cfg.seed), {}};
  if (train_set.empty() || cfg.epochs == 0) return result;
  check_compatible(result.params, cfg.model);

  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5348554646ULL);
  std::vector<Index> order = identity_order(train_set.size());
  const Index n = static_cast<Index>(train_set.size());
  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    Index batches = 0;
    for (Index begin = 0; begin < n; begin += cfg.batch_size) {
      const Index end = std::min(n, begin + cfg.batch_size);
      std::vector<int> labels;
      std::vector<Box> boxes;
      for (Index b = begin; b < end; ++b) {
        labels.push_back(train_set[order[b]].label);
        boxes.push_back(train_set[order[b]].gt_box);
      }
      Taped tape;
      const ModelVars vars = ModelVars::bind(tape, result.params);
      const auto iters =
          infn_forward(tape.constant(stack_features(train_set, order, begin, end)), vars, cfg.model, cfg.model.iterations);
      const auto preds = predictions(iters);
      const Vard loss = total_loss(preds, labels, boxes, cfg.iff);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw DivergenceError("training loss became non-finite in epoch " + std::to_string(epoch), epoch);
      }
      tape.backward(loss);
      tape.accumulate_into(result.params);
      clip_gradients(result.params, cfg.grad_clip);
      try {
        sgd_step(result.params, cfg.learning_rate, cfg.momentum);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " in epoch " + std::to_string(epoch), epoch);
      }
      loss_sum += value;
      ++batches;
    }
    result.history.push_back({epoch, loss_sum / static_cast<double>(batches)});
    if (on_epoch) on_epoch(result.history.back());
  }
  return result;
}

void check_compatible(const ParameterStored& params, const InfnConfig& model) {
  const FilterConfig& f = model.filter;
  auto expect = [&](const std::string& name, const Shape& shape) {
    if (!params.contains(name)) throw std::invalid_argument("checkpoint lacks parameter '" + name + "'");
    if (params.value(name).shape() != shape) {
      throw std::invalid_argument("parameter '" + name + "' has shape " + to_string(params.value(name).shape()) +
                                  ", configuration expects " + to_string(shape));
    }
  };
  expect("head.fc_a.weight", {f.roi_size(), f.instance_dim});
  expect("head.fc_b.weight", {f.instance_dim, f.instance_dim});
  expect("head.cls.weight", {f.instance_dim, model.num_classes});
  expect("head.reg.weight", {f.instance_dim, 4});
  if (model.use_dinf) {
    expect("dinf.gen.weight", {f.instance_dim, f.generator_width()});
    if (model.interaction == Interaction::soft_threshold) {
      expect("dinf.stm.fc1.weight", {f.mid_channels, f.mid_channels});
    }
  }
}

EvalReport evaluate(const ParameterStored& params, const InfnConfig& model, const IffConfig& iff,
                    std::span<const SynthSample> eval_set, Index k_eval) {
  check_compatible(params, model);
  if (k_eval > 0 && !params.contains("dinf.gen.weight")) {
    throw std::invalid_argument("evaluate: k_eval > 0 needs a model with DINF parameters");
  }
  EvalReport report(static_cast<std::size_t>(k_eval + 1));
  std::vector<double> acc_h(report.size()), miou_h(report.size()), in_h(report.size()), out_h(report.size());
  std::vector<std::vector<Tensord>> features(report.size());
  std::vector<int> labels;
  Index heavy = 0;
  const std::vector<Index> order = identity_order(eval_set.size());
  const Index n = static_cast<Index>(eval_set.size());
  for (Index begin = 0; begin < n; begin += kEvalChunk) {
    const Index end = std::min(n, begin + kEvalChunk);
    const auto sets = infn_forward_batch(stack_features(eval_set, order, begin, end), params, model, k_eval);
    for (Index b = begin; b < end; ++b) {
      const SynthSample& s = eval_set[b];
      const PredictionSet& ps = sets[b - begin];
      const bool h = is_heavy(s);
      heavy += h;
      labels.push_back(s.label);
      const double in = snr(s.feature, s.clean);
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const Prediction& p = ps[i];
        IterationMetrics& m = report[i];
        const double correct = argmax(p.logits) == s.label ? 1.0 : 0.0;
        const double overlap = dinf::iou(p.box, s.gt_box);
        const double out = snr(p.feature, s.clean);
        m.loss += cross_entropy(p.logits, s.label) + iff.reg_weight * iff_loss(p.box, s.gt_box, iff);
        m.acc += correct;
        m.miou += overlap;
        m.snr_in += in;
        m.snr_out += out;
        if (h) {
          acc_h[i] += correct;
          miou_h[i] += overlap;
          in_h[i] += in;
          out_h[i] += out;
        }
        features[i].push_back(p.instance);
      }
    }
  }
  for (std::size_t i = 0; i < report.size(); ++i) {
    IterationMetrics& m = report[i];
    m.i = static_cast<Index>(i);
    m.count = n;
    m.heavy_count = heavy;
    if (n > 0) {
      const double dn = static_cast<double>(n);
      m.loss /= dn;
      m.acc /= dn;
      m.miou /= dn;
      m.snr_in /= dn;
      m.snr_out /= dn;
    }
    if (heavy > 0) {
      const double dh = static_cast<double>(heavy);
      m.acc_heavy = acc_h[i] / dh;
      m.miou_heavy = miou_h[i] / dh;
      m.snr_in_heavy = in_h[i] / dh;
      m.snr_out_heavy = out_h[i] / dh;
    }
    if (n >= 3) m.compactness = analyze_compactness(features[i], labels).total;
  }
  return report;
}

std::vector<std::vector<Tensord>> instance_features(const ParameterStored& params, const InfnConfig& model,
                                                    std::span<const SynthSample> eval_set, Index k_eval) {
  check_compatible(params, model);
  std::vector<std::vector<Tensord>> out(static_cast<std::size_t>(k_eval + 1));
  const std::vector<Index> order = identity_order(eval_set.size());
  const Index n = static_cast<Index>(eval_set.size());
  for (Index begin = 0; begin < n; begin += kEvalChunk) {
    const Index end = std::min(n, begin + kEvalChunk);
    for (const auto& ps : infn_forward_batch(stack_features(eval_set, order, begin, end), params, model, k_eval)) {
      for (std::size_t i = 0; i < ps.size(); ++i) out[i].push_back(ps[i].instance);
    }
  }
  return out;
}

CompactnessAnalysis analyze_compactness(std::span<const Tensord> features, std::span<const int> labels) {
  if (features.size() < 3) throw std::invalid_argument("analyze_compactness: need at least 3 features");
  if (labels.size() != features.size()) throw std::invalid_argument("analyze_compactness: label count mismatch");
  const Index n = static_cast<Index>(features.size()), d = features.front().size();
  RowMatrix<double> x(n, d);
  for (Index i = 0; i < n; ++i) {
    if (features[i].size() != d) throw ShapeError("analyze_compactness: features differ in dimension");
    x.row(i) = features[i].data().transpose();
  }
  x.rowwise() -= x.colwise().mean();
  const RowMatrix<double> cov = (x.transpose() * x) / static_cast<double>(n);

  CompactnessAnalysis out;
  out.total_variance = cov.trace();
  out.components = RowMatrix<double>::Zero(d, 2);
  out.projections = RowMatrix<double>::Zero(n, 2);
  for (int l : labels) out.per_class[l] = 0.0;
  if (out.total_variance <= 0) return out;

  std::vector<Vector<double>> found;
  for (int k = 0; k < 2 && k < d; ++k) {
    Vector<double> v = power_iteration(cov, found, 0x9ca + static_cast<std::uint64_t>(k));
    Index big = 0;
    v.cwiseAbs().maxCoeff(&big);
    if (v[big] < 0) v = -v;
    out.explained_variance[k] = std::max(0.0, v.dot(cov * v));
    out.components.col(k) = v;
    found.push_back(v);
  }
  out.projections = x * out.components;

  std::map<int, std::vector<Index>> members;
  for (Index i = 0; i < n; ++i) members[labels[i]].push_back(i);
  double weighted = 0;
  for (const auto& [label, idx] : members) {
    Eigen::RowVector2d centroid = Eigen::RowVector2d::Zero();
    for (Index i : idx) centroid += out.projections.row(i);
    centroid /= static_cast<double>(idx.size());
    double sq = 0;
    for (Index i : idx) sq += (out.projections.row(i) - centroid).squaredNorm();
    out.per_class[label] = sq / static_cast<double>(idx.size());
    weighted += sq;
  }
  out.total = weighted / static_cast<double>(n);
  return out;
}

}  // namespace dinf
