#pragma once

// Synthetic occluded-RoI benchmark. Each sample places one class prototype
// inside a target rectangle, overwrites a fraction of it with an occluder
// (another prototype, or a rank-2 clutter field), and adds gaussian noise.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "dinf/losses.hpp"
#include "dinf/numerics/tensor.hpp"

namespace dinf {

enum class OcclusionPattern : std::uint8_t { stuff = 0, pedestrian = 1 };

struct OverlapBucket {
  double probability;
  double lo;
  double hi;
};

struct SynthConfig {
  Index classes = 4;
  Index channels = 32;
  Index spatial = 7;
  double noise_sigma = 0.02;
  std::array<OverlapBucket, 3> overlap_mixture{{{0.70, 0.0, 0.3}, {0.20, 0.3, 0.5}, {0.10, 0.5, 0.9}}};
  /// Probability that the occluder is another class's prototype.
  double pedestrian_ratio = 0.5;
  Index n_train = 8000;
  Index n_eval = 2000;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Unit-Frobenius-norm class prototypes, fixed by (seed, M, C, S).
struct PrototypeBank {
  std::vector<Tensord> prototypes;

  static PrototypeBank draw(const SynthConfig& cfg);
};

struct SynthSample {
  Tensord feature;  // [C, S, S]
  int label = 0;
  /// Full target rectangle in normalized grid coordinates.
  Box gt_box;
  /// Target component after occlusion; occluded cells are zero.
  Tensord clean;
  /// Fraction of the target rectangle covered by the occluder.
  double overlap = 0;
  OcclusionPattern pattern = OcclusionPattern::stuff;
};

/// Heavy-overlap threshold on SynthSample::overlap.
inline constexpr double kHeavyOverlap = 0.5;

inline bool is_heavy(const SynthSample& s) { return s.overlap >= kHeavyOverlap; }

struct Dataset {
  std::vector<SynthSample> train;
  std::vector<SynthSample> eval;
  /// Samples whose placement failed 100 times and were redrawn.
  Index regenerated = 0;
};

enum class Split : std::uint32_t { train = 0, eval = 1 };

/// Deterministic in `cfg`. Every sample draws from its own stream seeded by
/// (seed, split, index), so samples are independent of generation order.
Dataset generate(const SynthConfig& cfg);

/// One sample of `split` at `index`; `regenerated` counts redraws.
SynthSample generate_sample(const SynthConfig& cfg, const PrototypeBank& bank, Split split, Index index,
                            Index* regenerated = nullptr);

/// Projection SNR in dB of `feature` against `clean`, capped at 60.
/// An all-zero feature carries no signal and scores -60.
double snr(const Tensord& feature, const Tensord& clean);

inline constexpr double kSnrCapDb = 60.0;

struct OverlapHistogram {
  Index light = 0;  // overlap in [0, 0.5)
  Index heavy = 0;  // overlap in [0.5, 1]
};

OverlapHistogram overlap_histogram(std::span<const SynthSample> samples);

}  // namespace dinf
