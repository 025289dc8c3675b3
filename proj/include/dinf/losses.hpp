#pragma once

#include <span>
#include <vector>

#include "dinf/numerics/tape.hpp"
#include "dinf/numerics/tensor.hpp"

namespace dinf {

/// Axis-aligned box in normalized corner form.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double area() const { return (x2 - x1) * (y2 - y1); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct IffConfig {
  /// Focusing parameter.
  double gamma = 0.1;
  /// IoU is clamped to [iou_floor, 1] before the log.
  double iou_floor = 0.01;
  double reg_weight = 1.0;
  /// When false the factor is replaced by 1 (plain SmoothL1).
  bool enabled = true;

  void validate() const;
};

double iou(const Box& a, const Box& b);

double smooth_l1(double x);

/// Σ over the four coordinates of smooth_l1(pred - gt).
double smooth_l1(const Box& pred, const Box& gt);

/// -(1 - iou)^γ · ln(iou) with iou clamped to [ε, 1]. Always ≥ 0; treated
/// as a constant weight (never differentiated).
double iff_weight(double iou_value, const IffConfig& cfg);

/// iff_weight(iou(pred, gt)) · Σ smooth_l1(pred_c - gt_c).
double iff_loss(const Box& pred, const Box& gt, const IffConfig& cfg);

/// Negative log-softmax of `label`, computed with max subtraction.
double cross_entropy(const Tensord& logits, int label);

Box box_from_tensor(const Tensord& t, Index row = 0);
Tensord boxes_to_tensor(std::span<const Box> boxes);

/// One prediction on the tape: logits [B, M] and canonical boxes [B, 4].
struct PredictionVars {
  Vard logits;
  Vard box;
};

struct LossWeights {
  /// Per-iteration, per-sample regression weights μ actually used.
  std::vector<std::vector<double>> mu;
};

/// Batch-mean of Σ_k [CE(logits_k, label) + λ μ_k · SmoothL1(box_k - gt)].
///
/// μ is computed from the current boxes unless `frozen` supplies it, in
/// which case the supplied weights are reused verbatim (used to hold the
/// detached factor fixed under finite differences).
Vard total_loss(std::span<const PredictionVars> preds, std::span<const int> labels, std::span<const Box> targets,
                const IffConfig& cfg, LossWeights* used = nullptr, const LossWeights* frozen = nullptr);

}  // namespace dinf
