#pragma once

// Soft-thresholding module (channel-wise adaptive thresholds) and the
// dynamic instance noise filter built around it.
//
// All tape-level functions accept either a single instance
// (f: [C, S, S], v: [D]) or a batch (f: [B, C, S, S], v: [B, D]).

#include <cstdint>
#include <random>
#include <string>

#include "dinf/numerics/ops.hpp"
#include "dinf/numerics/parameter_store.hpp"
#include "dinf/numerics/tape.hpp"

namespace dinf {

struct FilterConfig {
  Index channels = 32;
  Index mid_channels = 8;
  Index spatial = 7;
  Index instance_dim = 256;

  /// C=256, C_mid=64, S=7, D=1024.
  static FilterConfig full() { return {256, 64, 7, 1024}; }
  /// C=32, C_mid=8, S=7, D=256.
  static FilterConfig desk() { return {32, 8, 7, 256}; }

  Index generator_width() const { return channels * 2 * mid_channels; }
  Index roi_size() const { return channels * spatial * spatial; }

  void validate() const {
    if (channels <= 0 || mid_channels <= 0 || spatial <= 0 || instance_dim <= 0) {
      throw std::invalid_argument("filter config extents must be positive");
    }
  }

  friend bool operator==(const FilterConfig&, const FilterConfig&) = default;
};

/// Activation applied between the two dynamic kernels.
enum class Interaction { soft_threshold, relu };

/// Square FC pair producing the threshold scaling logits.
template <typename Scalar>
struct StmParams {
  Tensor<Scalar> fc1_weight;  // [C, C]
  Tensor<Scalar> fc1_bias;    // [C]
  Tensor<Scalar> fc2_weight;  // [C, C]
  Tensor<Scalar> fc2_bias;    // [C]

  static StmParams zeros(Index c) { return {Tensor<Scalar>({c, c}), Tensor<Scalar>({c}), Tensor<Scalar>({c, c}), Tensor<Scalar>({c})}; }
};

template <typename Scalar>
struct KernelGenParams {
  Tensor<Scalar> gen_weight;  // [D, C * 2 * C_mid]
  Tensor<Scalar> gen_bias;    // [C * 2 * C_mid]
};

template <typename Scalar>
struct DynamicKernels {
  Tensor<Scalar> w1;  // [C_mid, C], applied as C -> C_mid
  Tensor<Scalar> w2;  // [C, C_mid], applied as C_mid -> C
};

template <typename Scalar>
struct StmVars {
  Var<Scalar> fc1_weight, fc1_bias, fc2_weight, fc2_bias;

  static StmVars bind(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, const std::string& prefix) {
    return {tape.parameter(store, prefix + ".fc1.weight"), tape.parameter(store, prefix + ".fc1.bias"),
            tape.parameter(store, prefix + ".fc2.weight"), tape.parameter(store, prefix + ".fc2.bias")};
  }
  static StmVars constants(Tape<Scalar>& tape, const StmParams<Scalar>& p) {
    return {tape.constant(p.fc1_weight), tape.constant(p.fc1_bias), tape.constant(p.fc2_weight),
            tape.constant(p.fc2_bias)};
  }
};

template <typename Scalar>
struct KernelGenVars {
  Var<Scalar> weight, bias;

  static KernelGenVars bind(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, const std::string& prefix) {
    return {tape.parameter(store, prefix + ".weight"), tape.parameter(store, prefix + ".bias")};
  }
  static KernelGenVars constants(Tape<Scalar>& tape, const KernelGenParams<Scalar>& p) {
    return {tape.constant(p.gen_weight), tape.constant(p.gen_bias)};
  }
};

template <typename Scalar>
struct DynamicKernelVars {
  Var<Scalar> w1;  // [B, C_mid, C]
  Var<Scalar> w2;  // [B, C, C_mid]
};

/// Parameters of one DINF. `stm` is unused under Interaction::relu.
template <typename Scalar>
struct DinfVars {
  KernelGenVars<Scalar> gen;
  StmVars<Scalar> stm;
};

// ---------------------------------------------------------------------------
// Parameter registration

/// Adds `<prefix>.fc{1,2}.{weight,bias}`; weights uniform in ±1/sqrt(C), biases zero.
template <typename Scalar, typename Rng>
void add_stm_params(ParameterStore<Scalar>& store, const std::string& prefix, Index channels, Rng& rng) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(channels));
  std::uniform_real_distribution<Scalar> dist(-bound, bound);
  for (const char* layer : {".fc1", ".fc2"}) {
    Tensor<Scalar> w({channels, channels});
    for (Index i = 0; i < w.size(); ++i) w[i] = dist(rng);
    store.add(prefix + layer + ".weight", std::move(w));
    store.add(prefix + layer + ".bias", Tensor<Scalar>({channels}));
  }
}

/// Adds `<prefix>.{weight,bias}`; zero weights and a ±1e-3 uniform bias.
template <typename Scalar, typename Rng>
void add_kernel_generator_params(ParameterStore<Scalar>& store, const std::string& prefix, const FilterConfig& cfg,
                                 Rng& rng) {
  std::uniform_real_distribution<Scalar> dist(Scalar(-1e-3), Scalar(1e-3));
  Tensor<Scalar> bias({cfg.generator_width()});
  for (Index i = 0; i < bias.size(); ++i) bias[i] = dist(rng);
  store.add(prefix + ".weight", Tensor<Scalar>({cfg.instance_dim, cfg.generator_width()}));
  store.add(prefix + ".bias", std::move(bias));
}

// ---------------------------------------------------------------------------
// Tape-level operations

/// τ = gap(|x|) ⊙ sigmoid(fc2(relu(fc1(gap(|x|))))). Output shape is x's
/// shape without the two spatial axes.
template <typename Scalar>
Var<Scalar> compute_thresholds(const Var<Scalar>& x, const StmVars<Scalar>& p) {
  const Var<Scalar> m = gap(abs(x));
  const Shape channel_shape = m.shape();
  const Index c = channel_shape.back();
  const Var<Scalar> rows = reshape(m, {m.size() / c, c});
  const Var<Scalar> z = linear(relu(linear(rows, p.fc1_weight, p.fc1_bias)), p.fc2_weight, p.fc2_bias);
  return mul(m, reshape(sigmoid(z), channel_shape));
}

/// Splits the generator output into two 1x1 kernels. For each instance the
/// first C*C_mid entries are w1 in row-major [C_mid, C]; the remaining
/// C*C_mid entries are w2 in row-major [C, C_mid].
template <typename Scalar>
DynamicKernelVars<Scalar> generate_dynamic_kernels(const Var<Scalar>& v, const KernelGenVars<Scalar>& p,
                                                   const FilterConfig& cfg) {
  const bool single = v.value().rank() == 1;
  const Var<Scalar> rows = single ? reshape(v, {1, v.size()}) : v;
  if (rows.value().rank() != 2 || rows.dim(1) != cfg.instance_dim) {
    throw ShapeError("generate_dynamic_kernels: instance feature " + to_string(v.shape()) + " does not have D=" +
                     std::to_string(cfg.instance_dim));
  }
  const Index batch = rows.dim(0), half = cfg.channels * cfg.mid_channels;
  const Var<Scalar> g = linear(rows, p.weight, p.bias);
  return {reshape(slice_columns(g, 0, half), {batch, cfg.mid_channels, cfg.channels}),
          reshape(slice_columns(g, half, half), {batch, cfg.channels, cfg.mid_channels})};
}

/// Instance-conditioned filter: transform with w1, shrink (or rectify), and
/// map back with w2. No residual path.
template <typename Scalar>
Var<Scalar> dinf_apply(const Var<Scalar>& f, const Var<Scalar>& v, const DinfVars<Scalar>& p, const FilterConfig& cfg,
                       Interaction interaction = Interaction::soft_threshold) {
  const Index rank = f.value().rank();
  if ((rank != 3 && rank != 4) || f.dim(-3) != cfg.channels || f.dim(-2) != cfg.spatial ||
      f.dim(-1) != cfg.spatial) {
    throw ShapeError("dinf_apply: RoI feature " + to_string(f.shape()) + " does not match C=" +
                     std::to_string(cfg.channels) + ", S=" + std::to_string(cfg.spatial));
  }
  const bool single = rank == 3;
  const Index batch = single ? 1 : f.dim(0);
  if ((single && v.value().rank() != 1) || (!single && (v.value().rank() != 2 || v.dim(0) != batch))) {
    throw ShapeError("dinf_apply: instance feature " + to_string(v.shape()) + " does not pair with RoI feature " +
                     to_string(f.shape()));
  }
  const Index area = cfg.spatial * cfg.spatial;
  const DynamicKernelVars<Scalar> k = generate_dynamic_kernels(v, p.gen, cfg);
  const Var<Scalar> flat = reshape(f, {batch, cfg.channels, area});
  const Var<Scalar> h = reshape(matmul(k.w1, flat), {batch, cfg.mid_channels, cfg.spatial, cfg.spatial});
  Var<Scalar> shrunk;
  if (interaction == Interaction::soft_threshold) {
    shrunk = soft_threshold(h, compute_thresholds(h, p.stm));
  } else {
    shrunk = relu(h);
  }
  const Var<Scalar> out = matmul(k.w2, reshape(shrunk, {batch, cfg.mid_channels, area}));
  return reshape(out, f.shape());
}

// ---------------------------------------------------------------------------
// Value-level conveniences (single instance, evaluated on a scratch tape).

template <typename Scalar>
Tensor<Scalar> compute_thresholds(const Tensor<Scalar>& x, const StmParams<Scalar>& p) {
  Tape<Scalar> tape;
  return compute_thresholds(tape.constant(x), StmVars<Scalar>::constants(tape, p)).value();
}

template <typename Scalar>
DynamicKernels<Scalar> generate_dynamic_kernels(const Tensor<Scalar>& v, const KernelGenParams<Scalar>& p,
                                                const FilterConfig& cfg) {
  if (v.rank() != 1 || v.size() != cfg.instance_dim) {
    throw ShapeError("generate_dynamic_kernels: expected [" + std::to_string(cfg.instance_dim) + "], got " +
                     to_string(v.shape()));
  }
  Tape<Scalar> tape;
  const auto k = generate_dynamic_kernels(tape.constant(v), KernelGenVars<Scalar>::constants(tape, p), cfg);
  return {k.w1.value().reshaped({cfg.mid_channels, cfg.channels}),
          k.w2.value().reshaped({cfg.channels, cfg.mid_channels})};
}

template <typename Scalar>
Tensor<Scalar> dinf_apply(const Tensor<Scalar>& f, const Tensor<Scalar>& v, const KernelGenParams<Scalar>& gen,
                          const StmParams<Scalar>& stm, const FilterConfig& cfg,
                          Interaction interaction = Interaction::soft_threshold) {
  Tape<Scalar> tape;
  const DinfVars<Scalar> p{KernelGenVars<Scalar>::constants(tape, gen), StmVars<Scalar>::constants(tape, stm)};
  return dinf_apply(tape.constant(f), tape.constant(v), p, cfg, interaction).value();
}

}  // namespace dinf
