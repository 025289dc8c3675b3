#include "dinf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dinf/numerics/ops.hpp"

namespace dinf {

void IffConfig::validate() const {
  if (!(gamma >= 0)) throw std::invalid_argument("iff gamma must be >= 0");
  if (!(iou_floor > 0 && iou_floor < 1)) throw std::invalid_argument("iff iou_floor must lie in (0, 1)");
  if (!(reg_weight > 0)) throw std::invalid_argument("regression weight must be > 0");
}

double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double smooth_l1(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

double smooth_l1(const Box& pred, const Box& gt) {
  return smooth_l1(pred.x1 - gt.x1) + smooth_l1(pred.y1 - gt.y1) + smooth_l1(pred.x2 - gt.x2) +
         smooth_l1(pred.y2 - gt.y2);
}

double iff_weight(double iou_value, const IffConfig& cfg) {
  if (!cfg.enabled) return 1.0;
  const double u = std::clamp(iou_value, cfg.iou_floor, 1.0);
  // -log(1) is -0.0; report a clean zero.
  if (u == 1.0) return 0.0;
  return -std::pow(1.0 - u, cfg.gamma) * std::log(u);
}

double iff_loss(const Box& pred, const Box& gt, const IffConfig& cfg) {
  return iff_weight(iou(pred, gt), cfg) * smooth_l1(pred, gt);
}

double cross_entropy(const Tensord& logits, int label) {
  if (label < 0 || label >= logits.size()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " out of range for " +
                            std::to_string(logits.size()) + " classes");
  }
  const double mx = logits.data().maxCoeff();
  const double lse = std::log((logits.data().array() - mx).exp().sum());
  return lse - (logits[label] - mx);
}

Box box_from_tensor(const Tensord& t, Index row) {
  const double* p = t.data().data() + 4 * row;
  return {p[0], p[1], p[2], p[3]};
}

Tensord boxes_to_tensor(std::span<const Box> boxes) {
  Tensord t({static_cast<Index>(boxes.size()), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    t[4 * i] = boxes[i].x1;
    t[4 * i + 1] = boxes[i].y1;
    t[4 * i + 2] = boxes[i].x2;
    t[4 * i + 3] = boxes[i].y2;
  }
  return t;
}

Vard total_loss(std::span<const PredictionVars> preds, std::span<const int> labels, std::span<const Box> targets,
                const IffConfig& cfg, LossWeights* used, const LossWeights* frozen) {
  if (preds.empty()) throw std::invalid_argument("total_loss: no predictions");
  if (labels.size() != targets.size()) throw std::invalid_argument("total_loss: label/target count mismatch");
  const Index batch = static_cast<Index>(labels.size());
  if (frozen && frozen->mu.size() != preds.size()) throw std::invalid_argument("total_loss: frozen weights mismatch");
  Taped& tape = *preds.front().logits.tape();
  const Vard gt = tape.constant(boxes_to_tensor(targets));
  if (used) used->mu.clear();

  Vard total;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const Tensord& box = preds[k].box.value();
    if (box.dim(0) != batch) throw ShapeError("total_loss: prediction batch does not match targets");
    std::vector<double> mu(static_cast<std::size_t>(batch));
    for (Index i = 0; i < batch; ++i) {
      mu[i] = frozen ? frozen->mu[k].at(i) : iff_weight(iou(box_from_tensor(box, i), targets[i]), cfg);
    }
    std::vector<double> reg_w(mu.size()), cls_w(mu.size(), 1.0 / static_cast<double>(batch));
    for (std::size_t i = 0; i < mu.size(); ++i) reg_w[i] = cfg.reg_weight * mu[i] / static_cast<double>(batch);
    const Vard ce = weighted_sum(cross_entropy(preds[k].logits, labels), std::span<const double>(cls_w));
    const Vard reg = weighted_sum(sum_last(smooth_l1(sub(preds[k].box, gt))), std::span<const double>(reg_w));
    const Vard term = add(ce, reg);
    total = total.valid() ? add(total, term) : term;
    if (used) used->mu.push_back(std::move(mu));
  }
  return total;
}

}  // namespace dinf
