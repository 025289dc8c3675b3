#include "dinf/synth.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace dinf {

namespace {

constexpr int kPlacementRetries = 100;

struct Rect {
  double x0, y0, x1, y1;
};

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index, std::uint64_t attempt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32), static_cast<std::uint32_t>(attempt)};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Cells whose centre lies inside `r`.
std::vector<bool> rasterize(const Rect& r, Index s) {
  std::vector<bool> mask(static_cast<std::size_t>(s * s));
  for (Index y = 0; y < s; ++y) {
    for (Index x = 0; x < s; ++x) {
      const double cy = static_cast<double>(y) + 0.5, cx = static_cast<double>(x) + 0.5;
      mask[y * s + x] = cx >= r.x0 && cx < r.x1 && cy >= r.y0 && cy < r.y1;
    }
  }
  return mask;
}

Tensord masked(const Tensord& field, const std::vector<bool>& mask, Index area) {
  Tensord out(field.shape());
  const Index channels = field.size() / area;
  for (Index c = 0; c < channels; ++c)
    for (Index i = 0; i < area; ++i)
      if (mask[i]) out[c * area + i] = field[c * area + i];
  return out;
}

Tensord clutter_field(const SynthConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  const Index area = cfg.spatial * cfg.spatial;
  Tensord field({cfg.channels, cfg.spatial, cfg.spatial});
  for (int r = 0; r < 2; ++r) {
    Vector<double> a(cfg.channels), b(area);
    for (Index i = 0; i < a.size(); ++i) a[i] = normal(rng);
    for (Index i = 0; i < b.size(); ++i) b[i] = normal(rng);
    field.matrix(cfg.channels, area) += a * b.transpose();
  }
  field.data() /= field.data().norm();
  return field;
}

/// Tries to place one sample; false when the target keeps no visible cell.
bool try_place(const SynthConfig& cfg, const PrototypeBank& bank, std::mt19937_64& rng, SynthSample& out) {
  const double s = static_cast<double>(cfg.spatial);
  const Index area = cfg.spatial * cfg.spatial;

  const int label = static_cast<int>(std::uniform_int_distribution<Index>(0, cfg.classes - 1)(rng));
  const double h = uniform(rng, 0.4 * s, 0.9 * s), w = uniform(rng, 0.4 * s, 0.9 * s);
  const double y0 = uniform(rng, 0.0, s - h), x0 = uniform(rng, 0.0, s - w);
  const Rect target{x0, y0, x0 + w, y0 + h};

  const double u = uniform(rng, 0.0, 1.0);
  const auto& mix = cfg.overlap_mixture;
  const OverlapBucket& bucket =
      u < mix[0].probability ? mix[0] : (u < mix[0].probability + mix[1].probability ? mix[1] : mix[2]);
  const double o = uniform(rng, bucket.lo, bucket.hi);
  const bool pedestrian = uniform(rng, 0.0, 1.0) < cfg.pedestrian_ratio && cfg.classes > 1;

  std::vector<bool> occluder_mask(static_cast<std::size_t>(area), false);
  double overlap = 0.0;
  if (o > 0) {
    // Intersection is a corner-anchored sub-rectangle holding fraction o of
    // the target; the occluder extends outward from the target edges it touches.
    double fw = uniform(rng, o, 1.0), fh = o / fw;
    if (uniform(rng, 0.0, 1.0) < 0.5) std::swap(fw, fh);
    const double iw = fw * w, ih = fh * h;
    const double ix0 = uniform(rng, 0.0, 1.0) < 0.5 ? x0 : x0 + w - iw;
    const double iy0 = uniform(rng, 0.0, 1.0) < 0.5 ? y0 : y0 + h - ih;
    const Rect inter{ix0, iy0, ix0 + iw, iy0 + ih};
    Rect occ = inter;
    if (inter.x0 <= x0) occ.x0 -= uniform(rng, 0.0, inter.x0);
    if (inter.x1 >= x0 + w) occ.x1 += uniform(rng, 0.0, s - inter.x1);
    if (inter.y0 <= y0) occ.y0 -= uniform(rng, 0.0, inter.y0);
    if (inter.y1 >= y0 + h) occ.y1 += uniform(rng, 0.0, s - inter.y1);
    occluder_mask = rasterize(occ, cfg.spatial);
    const double ow = std::max(0.0, std::min(occ.x1, target.x1) - std::max(occ.x0, target.x0));
    const double oh = std::max(0.0, std::min(occ.y1, target.y1) - std::max(occ.y0, target.y0));
    overlap = ow * oh / (w * h);
  }

  const std::vector<bool> target_mask = rasterize(target, cfg.spatial);
  std::vector<bool> visible(static_cast<std::size_t>(area));
  bool any_visible = false;
  for (Index i = 0; i < area; ++i) {
    visible[i] = target_mask[i] && !occluder_mask[i];
    any_visible = any_visible || visible[i];
  }
  if (!any_visible) return false;

  out.label = label;
  out.gt_box = {x0 / s, y0 / s, (x0 + w) / s, (y0 + h) / s};
  out.overlap = overlap;
  out.pattern = pedestrian ? OcclusionPattern::pedestrian : OcclusionPattern::stuff;
  out.clean = masked(bank.prototypes[label], visible, area);
  out.feature = out.clean;
  if (o > 0) {
    Tensord occluder;
    if (pedestrian) {
      Index other = std::uniform_int_distribution<Index>(0, cfg.classes - 2)(rng);
      if (other >= label) ++other;
      occluder = bank.prototypes[other];
    } else {
      occluder = clutter_field(cfg, rng);
    }
    out.feature.data() += masked(occluder, occluder_mask, area).data();
  }
  if (cfg.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (Index i = 0; i < out.feature.size(); ++i) out.feature[i] += noise(rng);
  }
  return true;
}

}  // namespace

void SynthConfig::validate() const {
  if (classes <= 0 || channels <= 0 || spatial <= 0) throw std::invalid_argument("synth extents must be positive");
  if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be >= 0");
  if (n_train < 0 || n_eval < 0) throw std::invalid_argument("sample counts must be >= 0");
  if (!(pedestrian_ratio >= 0 && pedestrian_ratio <= 1)) throw std::invalid_argument("pattern ratio must be in [0, 1]");
  double total = 0;
  for (const auto& b : overlap_mixture) {
    if (!(b.probability >= 0)) throw std::invalid_argument("mixture probabilities must be >= 0");
    if (!(b.lo >= 0 && b.lo <= b.hi && b.hi < 1)) {
      throw std::invalid_argument("overlap range [" + std::to_string(b.lo) + ", " + std::to_string(b.hi) +
                                  "] must lie within [0, 1)");
    }
    total += b.probability;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("mixture probabilities must sum to 1");
}

PrototypeBank PrototypeBank::draw(const SynthConfig& cfg) {
  std::mt19937_64 rng = stream(cfg.seed, 0x70726f74, 0, 0);
  std::normal_distribution<double> normal;
  PrototypeBank bank;
  for (Index m = 0; m < cfg.classes; ++m) {
    Tensord p({cfg.channels, cfg.spatial, cfg.spatial});
    for (Index i = 0; i < p.size(); ++i) p[i] = normal(rng);
    p.data() /= p.data().norm();
    bank.prototypes.push_back(std::move(p));
  }
  return bank;
}

SynthSample generate_sample(const SynthConfig& cfg, const PrototypeBank& bank, Split split, Index index,
                            Index* regenerated) {
  const std::uint64_t tag = split == Split::train ? 1 : 2;
  SynthSample sample;
  for (std::uint64_t attempt = 0;; ++attempt) {
    std::mt19937_64 rng = stream(cfg.seed, tag, static_cast<std::uint64_t>(index), attempt);
    for (int retry = 0; retry < kPlacementRetries; ++retry) {
      if (try_place(cfg, bank, rng, sample)) return sample;
    }
    if (regenerated) ++*regenerated;
  }
}

Dataset generate(const SynthConfig& cfg) {
  cfg.validate();
  const PrototypeBank bank = PrototypeBank::draw(cfg);
  Dataset ds;
  ds.train.reserve(static_cast<std::size_t>(cfg.n_train));
  ds.eval.reserve(static_cast<std::size_t>(cfg.n_eval));
  for (Index i = 0; i < cfg.n_train; ++i) ds.train.push_back(generate_sample(cfg, bank, Split::train, i, &ds.regenerated));
  for (Index i = 0; i < cfg.n_eval; ++i) ds.eval.push_back(generate_sample(cfg, bank, Split::eval, i, &ds.regenerated));
  return ds;
}

double snr(const Tensord& feature, const Tensord& clean) {
  if (feature.size() != clean.size()) throw ShapeError("snr: feature and clean sizes differ");
  const double tt = clean.data().squaredNorm();
  if (tt == 0) throw std::invalid_argument("snr: clean signal is all zero");
  if (feature.data().squaredNorm() == 0) return -kSnrCapDb;
  const double a = feature.data().dot(clean.data()) / tt;
  const double rr = (feature.data() - a * clean.data()).squaredNorm();
  if (rr < 1e-12 * tt) return kSnrCapDb;
  return std::min(kSnrCapDb, 10.0 * std::log10(a * a * tt / rr));
}

OverlapHistogram overlap_histogram(std::span<const SynthSample> samples) {
  OverlapHistogram h;
  for (const auto& s : samples) (is_heavy(s) ? h.heavy : h.light)++;
  return h;
}

}  // namespace dinf
