#pragma once

// Iterative noise filter network: a prediction head plus a DINF applied
// repeatedly at the feature level. Iteration k filters the dense sum of the
// original RoI feature and all previous filter outputs, with kernels
// generated from the previous iteration's instance feature. The head and
// the filter resolve the same parameter names at every iteration.

#include <cstdint>
#include <vector>

#include "dinf/filter.hpp"
#include "dinf/losses.hpp"
#include "dinf/numerics/parameter_store.hpp"
#include "dinf/numerics/tape.hpp"

namespace dinf {

struct InfnConfig {
  /// Refinement iterations used in training.
  Index iterations = 3;
  /// Refinement iterations used at evaluation.
  Index eval_iterations = 1;
  FilterConfig filter = FilterConfig::desk();
  Index num_classes = 4;
  Interaction interaction = Interaction::soft_threshold;
  /// Plain head only: no filter parameters, and iterations are forced to 0.
  bool use_dinf = true;

  void validate() const;
};

/// Registers every head and filter parameter and seals the store. The name
/// set depends on `use_dinf` and `interaction` but never on the iteration
/// counts.
ParameterStored build_model(const InfnConfig& cfg, std::uint64_t seed);

struct HeadVars {
  Vard fc_a_weight, fc_a_bias, fc_b_weight, fc_b_bias, cls_weight, cls_bias, reg_weight, reg_bias;

  static HeadVars bind(Taped& tape, const ParameterStored& store);
};

struct ModelVars {
  HeadVars head;
  DinfVars<double> dinf;
  bool has_dinf = false;

  static ModelVars bind(Taped& tape, const ParameterStored& store);
};

struct HeadOutput {
  Vard instance;  // [B, D]
  Vard logits;    // [B, M]
  Vard box;       // [B, 4], canonical corners in (0, 1)
};

/// f: [B, C, S, S]. v = relu(fc_b(relu(fc_a(flatten f)))); logits = cls(v);
/// box = canonical corners of sigmoid(reg(v)).
HeadOutput head_forward(const Vard& f, const HeadVars& p, const InfnConfig& cfg);

struct IterationVars {
  /// Input handed to the filter (undefined for iteration 0).
  Vard filter_input;
  /// Feature entering the head: f0 at iteration 0, the filter output after.
  Vard feature;
  HeadOutput head;
};

/// Records iterations 0..iterations on `tape`. f0: [B, C, S, S].
std::vector<IterationVars> infn_forward(const Vard& f0, const ModelVars& params, const InfnConfig& cfg,
                                        Index iterations);

std::vector<PredictionVars> predictions(const std::vector<IterationVars>& iters);

/// Value-level result for a single RoI.
struct Prediction {
  Tensord logits;    // [M]
  Box box;
  Tensord instance;  // [D]
  Tensord feature;   // [C, S, S], the feature the head saw
  Tensord filter_input;  // [C, S, S]; empty for iteration 0
};
using PredictionSet = std::vector<Prediction>;

/// Runs `iterations` refinement steps on one RoI feature [C, S, S] and
/// returns iterations + 1 predictions.
PredictionSet infn_forward(const Tensord& f0, const ParameterStored& params, const InfnConfig& cfg, Index iterations);

/// Batched variant; f0: [B, C, S, S]. Returns one PredictionSet per row.
std::vector<PredictionSet> infn_forward_batch(const Tensord& f0, const ParameterStored& params, const InfnConfig& cfg,
                                              Index iterations);

Index count_parameters(const ParameterStored& params);

/// Σ over iterations of CE + λ·iff_loss for one RoI and its target.
double total_loss(const PredictionSet& preds, int label, const Box& gt, const IffConfig& cfg);

}  // namespace dinf
