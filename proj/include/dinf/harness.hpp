#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dinf/infn.hpp"
#include "dinf/losses.hpp"
#include "dinf/synth.hpp"

namespace dinf {

struct TrainConfig {
  Index epochs = 30;
  Index batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  /// Global gradient-norm ceiling applied before each step; 0 disables.
  double grad_clip = 5.0;
  std::uint64_t seed = 0;
  InfnConfig model;
  IffConfig iff;
  SynthConfig synth;

  void validate() const;
};

/// Raised when a training loss or gradient becomes non-finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, Index epoch) : std::runtime_error(what), epoch_(epoch) {}
  Index epoch() const { return epoch_; }

 private:
  Index epoch_;
};

/// Rescales the gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
double clip_gradients(ParameterStored& params, double max_norm);

/// m <- momentum * m + g; p <- p - lr * m; g <- 0. Throws on a non-finite
/// gradient, naming the parameter.
void sgd_step(ParameterStored& params, double lr, double momentum);

struct EpochRecord {
  Index epoch = 0;  // 1-based
  double loss = 0;  // mean training loss over the epoch's batches
};

struct TrainResult {
  ParameterStored params;
  std::vector<EpochRecord> history;
};

/// Mini-batch SGD on the summed multi-iteration loss at cfg.model.iterations.
TrainResult train(const TrainConfig& cfg, std::span<const SynthSample> train_set,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Metrics of one prediction index i over an evaluation set.
struct IterationMetrics {
  Index i = 0;
  Index count = 0;
  Index heavy_count = 0;
  double loss = 0;
  double acc = 0;
  double miou = 0;
  double snr_in = 0;
  double snr_out = 0;
  /// Absent when the evaluation set has no heavy-overlap sample.
  std::optional<double> acc_heavy, miou_heavy, snr_in_heavy, snr_out_heavy;
  double compactness = 0;
};

using EvalReport = std::vector<IterationMetrics>;

/// Evaluates prediction indices 0..k_eval. SNR_out for index i is measured
/// on the feature the head saw at that index (f0 for i = 0).
EvalReport evaluate(const ParameterStored& params, const InfnConfig& model, const IffConfig& iff,
                    std::span<const SynthSample> eval_set, Index k_eval);

/// Throws if the store's shapes do not match `model`.
void check_compatible(const ParameterStored& params, const InfnConfig& model);

struct CompactnessAnalysis {
  RowMatrix<double> projections;  // [N, 2]
  RowMatrix<double> components;   // [D, 2], orthonormal columns
  std::array<double, 2> explained_variance{0, 0};
  double total_variance = 0;
  std::map<int, double> per_class;
  double total = 0;
};

/// Projects features onto their top-2 principal components (power iteration
/// with deflation on the covariance) and measures, per class, the mean
/// squared distance to the class centroid in the 2-d projection.
CompactnessAnalysis analyze_compactness(std::span<const Tensord> features, std::span<const int> labels);

/// Instance features of every eval sample at each index 0..k_eval.
std::vector<std::vector<Tensord>> instance_features(const ParameterStored& params, const InfnConfig& model,
                                                    std::span<const SynthSample> eval_set, Index k_eval);

}  // namespace dinf
