#include "dinf/gradcheck_suite.hpp"

#include <limits>
#include <random>
#include <stdexcept>

#include "dinf/infn.hpp"
#include "dinf/losses.hpp"
#include "dinf/numerics/ops.hpp"

namespace dinf {

namespace {

using Store = ParameterStored;

struct Sizes {
  FilterConfig filter;
  Index classes;
  Index batch;
  Index max_entries;
};

Sizes sizes(GradcheckPreset preset) {
  if (preset == GradcheckPreset::tiny) return {{4, 2, 3, 6}, 3, 2, 0};
  return {FilterConfig::desk(), 4, 2, 48};
}

Tensord uniform(const Shape& shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensord t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

std::vector<double> fixed_weights(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(static_cast<std::size_t>(n));
  for (auto& x : w) x = dist(rng);
  return w;
}

/// Scalar probe Σ w_i y_i with fixed pseudo-random weights, so every output
/// entry contributes a distinct upstream gradient.
Vard probe(const Vard& y) {
  const std::vector<double> w = fixed_weights(y.size(), 0x70726f6265ULL + static_cast<std::uint64_t>(y.size()));
  return weighted_sum(y, std::span<const double>(w));
}

template <typename F>
GradcheckReport check(Store& store, F&& f, double tol, Index max_entries = 0) {
  return gradcheck(f, store, kGradcheckStep, tol, GradcheckOptions{max_entries, 7});
}

/// Case over a store of uniform [-1, 1] inputs; `f` maps the bound inputs to
/// the tensor being probed.
template <typename F>
GradcheckCase unary_case(std::string name, std::vector<std::pair<std::string, Shape>> inputs, F f) {
  return {name, kPrimitiveTolerance, [inputs = std::move(inputs), f](GradcheckPreset) {
            std::mt19937_64 rng(0x6763);
            Store store;
            for (const auto& [n, shape] : inputs) store.add(n, uniform(shape, -1.0, 1.0, rng));
            auto fn = [&](Taped& t, const Store& s) {
              std::vector<Vard> v;
              for (const auto& [n, shape] : inputs) v.push_back(t.parameter(s, n));
              return probe(f(v));
            };
            return check(store, fn, kPrimitiveTolerance);
          }};
}

void add_scaled(Store& store, const std::string& name, const Shape& shape, double bound, std::mt19937_64& rng) {
  store.add(name, uniform(shape, -bound, bound, rng));
}

void add_stm(Store& store, const std::string& prefix, Index c, std::mt19937_64& rng) {
  const double b = 1.0 / std::sqrt(static_cast<double>(c));
  add_scaled(store, prefix + ".fc1.weight", {c, c}, b, rng);
  add_scaled(store, prefix + ".fc1.bias", {c}, 0.1, rng);
  add_scaled(store, prefix + ".fc2.weight", {c, c}, b, rng);
  add_scaled(store, prefix + ".fc2.bias", {c}, 0.1, rng);
}

void add_generator(Store& store, const std::string& prefix, const FilterConfig& cfg, std::mt19937_64& rng) {
  add_scaled(store, prefix + ".weight", {cfg.instance_dim, cfg.generator_width()},
             1.0 / std::sqrt(static_cast<double>(cfg.instance_dim)), rng);
  add_scaled(store, prefix + ".bias", {cfg.generator_width()}, 0.1, rng);
}

GradcheckCase dinf_case(Interaction interaction) {
  const std::string name = interaction == Interaction::relu ? "dinf_apply_relu" : "dinf_apply";
  return {name, kCompositeTolerance, [interaction](GradcheckPreset preset) {
            const Sizes sz = sizes(preset);
            const FilterConfig& c = sz.filter;
            std::mt19937_64 rng(0x64696e66);
            Store store;
            add_scaled(store, "f", {sz.batch, c.channels, c.spatial, c.spatial}, 1.0, rng);
            add_scaled(store, "v", {sz.batch, c.instance_dim}, 1.0, rng);
            add_generator(store, "gen", c, rng);
            if (interaction == Interaction::soft_threshold) add_stm(store, "stm", c.mid_channels, rng);
            auto fn = [&](Taped& t, const Store& s) {
              DinfVars<double> p;
              p.gen = KernelGenVars<double>::bind(t, s, "gen");
              if (interaction == Interaction::soft_threshold) p.stm = StmVars<double>::bind(t, s, "stm");
              return probe(dinf_apply(t.parameter(s, "f"), t.parameter(s, "v"), p, c, interaction));
            };
            return check(store, fn, kCompositeTolerance, sz.max_entries);
          }};
}

struct NetworkProblem {
  InfnConfig cfg;
  Tensord f0;
  std::vector<int> labels;
  std::vector<Box> boxes;
};

NetworkProblem network_problem(GradcheckPreset preset, Index iterations) {
  const Sizes sz = sizes(preset);
  NetworkProblem p;
  p.cfg.filter = sz.filter;
  p.cfg.num_classes = sz.classes;
  p.cfg.iterations = iterations;
  p.cfg.eval_iterations = 0;
  std::mt19937_64 rng(0x696e666e);
  const FilterConfig& c = sz.filter;
  p.f0 = uniform({sz.batch, c.channels, c.spatial, c.spatial}, -1.0, 1.0, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Index b = 0; b < sz.batch; ++b) {
    p.labels.push_back(static_cast<int>(b % sz.classes));
    const double x0 = 0.4 * u(rng), y0 = 0.4 * u(rng);
    p.boxes.push_back({x0, y0, x0 + 0.3 + 0.3 * u(rng), y0 + 0.3 + 0.3 * u(rng)});
  }
  return p;
}

Store network_params(const InfnConfig& cfg) {
  Store built = build_model(cfg, 11);
  Store store;
  std::mt19937_64 rng(0x7061726d);
  for (const auto& [name, e] : built.entries()) {
    if (name == "dinf.gen.weight") {
      // A zero generator would cut the gradient path into the instance feature.
      add_scaled(store, name, e.value.shape(), 1.0 / std::sqrt(static_cast<double>(cfg.filter.instance_dim)), rng);
    } else if (name.ends_with(".bias")) {
      add_scaled(store, name, e.value.shape(), 0.05, rng);
    } else {
      store.add(name, e.value);
    }
  }
  return store;
}

GradcheckCase head_case() {
  return {"head_forward", kCompositeTolerance, [](GradcheckPreset preset) {
            NetworkProblem p = network_problem(preset, 0);
            Store store = network_params(p.cfg);
            auto fn = [&](Taped& t, const Store& s) {
              const HeadOutput out = head_forward(t.constant(p.f0), HeadVars::bind(t, s), p.cfg);
              return add(add(probe(out.instance), probe(out.logits)), probe(out.box));
            };
            return check(store, fn, kCompositeTolerance, sizes(preset).max_entries);
          }};
}

GradcheckCase network_case() {
  return {"infn_k3_iff", kCompositeTolerance, [](GradcheckPreset preset) {
            NetworkProblem p = network_problem(preset, 3);
            Store store = network_params(p.cfg);
            const IffConfig iff;
            // μ is a detached weight: freeze it at the unperturbed point.
            LossWeights frozen;
            {
              Taped t;
              const auto iters = infn_forward(t.constant(p.f0), ModelVars::bind(t, store), p.cfg, 3);
              total_loss(predictions(iters), p.labels, p.boxes, iff, &frozen);
            }
            auto fn = [&](Taped& t, const Store& s) {
              const auto iters = infn_forward(t.constant(p.f0), ModelVars::bind(t, s), p.cfg, 3);
              return total_loss(predictions(iters), p.labels, p.boxes, iff, nullptr, &frozen);
            };
            return check(store, fn, kCompositeTolerance, sizes(preset).max_entries);
          }};
}

}  // namespace

GradcheckPreset parse_gradcheck_preset(const std::string& name) {
  if (name == "tiny") return GradcheckPreset::tiny;
  if (name == "desk") return GradcheckPreset::desk;
  throw std::invalid_argument("unknown gradcheck preset '" + name + "' (expected tiny or desk)");
}

std::vector<GradcheckCase> gradcheck_cases() {
  std::vector<GradcheckCase> cases;
  cases.push_back(unary_case("matmul", {{"a", {4, 5}}, {"b", {5, 3}}}, [](auto& v) { return matmul(v[0], v[1]); }));
  cases.push_back(
      unary_case("matmul_batched", {{"a", {2, 3, 4}}, {"b", {2, 4, 3}}}, [](auto& v) { return matmul(v[0], v[1]); }));
  cases.push_back(unary_case("add_bias", {{"x", {3, 4}}, {"b", {4}}}, [](auto& v) { return add_bias(v[0], v[1]); }));
  cases.push_back(unary_case("linear", {{"x", {3, 4}}, {"w", {4, 2}}, {"b", {2}}},
                             [](auto& v) { return linear(v[0], v[1], v[2]); }));
  cases.push_back(unary_case("add", {{"a", {3, 4}}, {"b", {3, 4}}}, [](auto& v) { return add(v[0], v[1]); }));
  cases.push_back(
      unary_case("add_broadcast", {{"a", {2, 3, 2, 2}}, {"b", {2, 3}}}, [](auto& v) { return add(v[0], v[1]); }));
  cases.push_back(unary_case("sub", {{"a", {3, 4}}, {"b", {3, 4}}}, [](auto& v) { return sub(v[0], v[1]); }));
  cases.push_back(unary_case("mul", {{"a", {3, 4}}, {"b", {3, 4}}}, [](auto& v) { return mul(v[0], v[1]); }));
  cases.push_back(
      unary_case("mul_broadcast", {{"a", {3, 2, 2}}, {"b", {3}}}, [](auto& v) { return mul(v[0], v[1]); }));
  cases.push_back(unary_case("scale", {{"a", {3, 4}}}, [](auto& v) { return scale(v[0], -2.5); }));
  cases.push_back(unary_case("abs", {{"x", {3, 5}}}, [](auto& v) { return abs(v[0]); }));
  cases.push_back(unary_case("relu", {{"x", {3, 5}}}, [](auto& v) { return relu(v[0]); }));
  cases.push_back(unary_case("sigmoid", {{"z", {3, 5}}}, [](auto& v) { return sigmoid(scale(v[0], 4.0)); }));
  cases.push_back(unary_case("soft_threshold", {{"x", {3, 2, 2}}, {"t", {3}}},
                             // |t| + 0.1 keeps thresholds positive under perturbation.
                             [](auto& v) { return soft_threshold(v[0], add(abs(v[1]), v[1].tape()->constant(Tensord({3}, {0.1, 0.1, 0.1})))); }));
  cases.push_back(unary_case("gap", {{"x", {3, 2, 2}}}, [](auto& v) { return gap(v[0]); }));
  cases.push_back(unary_case("reshape", {{"x", {3, 4}}}, [](auto& v) { return reshape(v[0], {2, 6}); }));
  cases.push_back(unary_case("slice_columns", {{"x", {3, 5}}}, [](auto& v) { return slice_columns(v[0], 1, 3); }));
  cases.push_back(unary_case("canonical_box", {{"r", {3, 4}}}, [](auto& v) { return canonical_box(v[0]); }));
  cases.push_back(unary_case("smooth_l1", {{"x", {3, 5}}}, [](auto& v) { return smooth_l1(scale(v[0], 2.0)); }));
  cases.push_back(unary_case("sum_last", {{"x", {3, 5}}}, [](auto& v) { return sum_last(v[0]); }));
  cases.push_back(unary_case("sum", {{"x", {3, 5}}}, [](auto& v) { return sum(v[0]); }));
  cases.push_back(unary_case("cross_entropy", {{"z", {3, 4}}}, [](auto& v) {
    static const int labels[] = {0, 3, 1};
    return cross_entropy(scale(v[0], 3.0), std::span<const int>(labels));
  }));
  cases.push_back({"compute_thresholds", kPrimitiveTolerance, [](GradcheckPreset) {
                     std::mt19937_64 rng(0x73746d);
                     Store store;
                     add_scaled(store, "x", {2, 3, 2, 2}, 1.0, rng);
                     add_stm(store, "stm", 3, rng);
                     auto fn = [](Taped& t, const Store& s) {
                       return probe(compute_thresholds(t.parameter(s, "x"), StmVars<double>::bind(t, s, "stm")));
                     };
                     return check(store, fn, kPrimitiveTolerance);
                   }});
  cases.push_back({"generate_dynamic_kernels", kPrimitiveTolerance, [](GradcheckPreset) {
                     const FilterConfig c{3, 2, 2, 4};
                     std::mt19937_64 rng(0x67656e);
                     Store store;
                     add_scaled(store, "v", {2, c.instance_dim}, 1.0, rng);
                     add_generator(store, "gen", c, rng);
                     auto fn = [c](Taped& t, const Store& s) {
                       const auto k =
                           generate_dynamic_kernels(t.parameter(s, "v"), KernelGenVars<double>::bind(t, s, "gen"), c);
                       return add(probe(k.w1), probe(k.w2));
                     };
                     return check(store, fn, kPrimitiveTolerance);
                   }});
  cases.push_back(dinf_case(Interaction::soft_threshold));
  cases.push_back(dinf_case(Interaction::relu));
  cases.push_back(head_case());
  cases.push_back(network_case());
  return cases;
}

GradcheckSuiteResult run_gradcheck_suite(std::span<const GradcheckCase> cases, GradcheckPreset preset,
                                         const std::function<void(const GradcheckOutcome&)>& on_case) {
  GradcheckSuiteResult result;
  double worst_ratio = -1;
  for (const auto& c : cases) {
    GradcheckOutcome outcome{c.name, c.tol, {}};
    try {
      outcome.report = c.run(preset);
      outcome.report.passed = outcome.report.passed && outcome.report.max_rel_error <= c.tol;
    } catch (const std::exception& e) {
      outcome.report.passed = false;
      outcome.report.failure = e.what();
    }
    if (!outcome.report.passed) {
      result.passed = false;
      // Hard failures (NaN, exceptions) outrank any tolerance miss.
      const bool hard = outcome.report.max_rel_error <= c.tol;
      const double ratio = hard ? std::numeric_limits<double>::infinity() : outcome.report.max_rel_error / c.tol;
      if (ratio > worst_ratio) {
        worst_ratio = ratio;
        result.worst = static_cast<Index>(result.outcomes.size());
      }
    }
    if (on_case) on_case(outcome);
    result.outcomes.push_back(std::move(outcome));
  }
  return result;
}

}  // namespace dinf
