// Acceptance run: one PASS/FAIL line per criterion, with its runtime budget.
// Usage: dinf_acceptance [criterion ids...]  (default: all)

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dinf/cli.hpp"
#include "dinf/filter.hpp"
#include "dinf/gradcheck_suite.hpp"
#include "dinf/harness.hpp"
#include "dinf/infn.hpp"
#include "dinf/io.hpp"
#include "dinf/losses.hpp"
#include "dinf/synth.hpp"

namespace dinf {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

/// Collects failed checks; the first few are reported.
struct Checks {
  int failed = 0;
  int total = 0;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    ++total;
    if (ok) return;
    ++failed;
    if (notes.size() < 5) notes.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    expect(std::fabs(got - want) <= tol, what + ": got " + fmt("%.17g", got) + " want " + fmt("%.17g", want));
  }
  std::string summary() const {
    std::string s = std::to_string(total - failed) + "/" + std::to_string(total) + " checks";
    for (const auto& n : notes) s += "; " + n;
    return s;
  }
};

struct Verdict {
  bool ok = false;
  std::string detail;
  /// Overrides the measured wall time (criteria that share experiment runs).
  std::optional<double> seconds;
};

Verdict from(const Checks& c) { return {c.failed == 0, c.summary()}; }

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dinf_acceptance_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != kExitOk) throw std::runtime_error("dinf " + args.front() + " exited " + std::to_string(code) + ": " + err.str());
}

std::vector<std::string> with_sets(std::vector<std::string> args, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    args.push_back("--set");
    args.push_back(kv);
  }
  return args;
}

Tensord uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensord t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------
// 1. Formula exactness

Verdict formula_exactness() {
  Checks c;
  const double tol = 1e-12;
  c.near(soft_threshold(2.0, 0.5), 1.5, tol, "soft_threshold(2, .5)");
  c.near(soft_threshold(0.3, 0.5), 0.0, tol, "soft_threshold(.3, .5)");
  c.near(soft_threshold(-0.3, 0.5), 0.0, tol, "soft_threshold(-.3, .5)");
  c.near(soft_threshold(-2.0, 0.5), -1.5, tol, "soft_threshold(-2, .5)");
  const Tensord st = soft_threshold(Tensord({4}, {2.0, 0.3, -0.3, -2.0}), Tensord({4}, {0.5, 0.5, 0.5, 0.5}));
  for (Index i = 0; i < 4; ++i) c.near(st[i], std::vector<double>{1.5, 0, 0, -1.5}[i], tol, "soft_threshold tensor");

  const Tensord sg = sigmoid(Tensord({4}, {0.0, 1.0, 30.0, 40.0}));
  c.near(sg[0], 0.5, tol, "sigmoid(0)");
  c.near(sg[1], 0.7310585786300049, tol, "sigmoid(1)");
  // sigmoid(40) = 1 - 4.2e-18 rounds to 1 in double; saturation strictly
  // below 1 is visible at 30 (1 - 9.4e-14).
  c.expect(sg[3] > 1 - 1e-15 && sg[3] <= 1.0, "sigmoid(40) saturates");
  c.expect(sg[2] < 1.0 && sg[2] > 1 - 1e-12, "sigmoid(30) below 1");

  c.near(smooth_l1(0.5), 0.125, tol, "smooth_l1(.5)");
  c.near(smooth_l1(1.0), 0.5, tol, "smooth_l1(1)");
  c.near(smooth_l1(std::nextafter(1.0, 0.0)), 0.5, tol, "smooth_l1 knee from below");
  c.near(smooth_l1(2.0), 1.5, tol, "smooth_l1(2)");

  const double ln2 = 0.6931471805599453;
  for (double g : {0.0, 0.1, 0.5, 1.0, 2.0}) c.near(iff_weight(1.0, IffConfig{g}), 0.0, tol, "iff_weight(1)");
  c.near(iff_weight(0.5, IffConfig{0.0}), ln2, tol, "iff_weight(.5, 0)");
  c.near(iff_weight(0.5, IffConfig{2.0}), 0.17328679513998632, tol, "iff_weight(.5, 2)");

  const Box a{0.0, 0.0, 0.5, 0.5}, b{0.25, 0.25, 0.75, 0.75};
  c.near(iou(a, a), 1.0, tol, "iou identical");
  c.near(iou(a, Box{0.6, 0.6, 0.9, 0.9}), 0.0, tol, "iou disjoint");
  c.near(iou(a, b), 1.0 / 7.0, tol, "iou 1/7");
  c.near(iou(b, a), 1.0 / 7.0, tol, "iou 1/7 swapped");

  const Box gt{0.0, 0.0, 2.0, 3.0}, pred{-0.5, -0.5, 2.5, 3.5};
  c.near(iff_loss(gt, gt, IffConfig{0.0}), 0.0, tol, "iff_loss perfect");
  c.near(iff_loss(pred, gt, IffConfig{0.0}), 0.34657359027997264, tol, "iff_loss composite");
  return from(c);
}

// ---------------------------------------------------------------------------
// 2. Gradient suite

Verdict gradient_suite() {
  const auto cases = gradcheck_cases();
  const GradcheckSuiteResult r = run_gradcheck_suite(cases, GradcheckPreset::desk);
  double worst_primitive = 0, composite = 0;
  Index checked = 0;
  for (const auto& o : r.outcomes) {
    checked += o.report.checked;
    if (o.tol == kPrimitiveTolerance) worst_primitive = std::max(worst_primitive, o.report.max_rel_error);
    if (o.name == "infn_k3_iff") composite = o.report.max_rel_error;
  }
  std::string detail = std::to_string(r.outcomes.size()) + " cases, " + std::to_string(checked) +
                       " entries; worst primitive " + fmt("%.2e", worst_primitive) + " (tol 1e-6), K=3+IFF composite " +
                       fmt("%.2e", composite) + " (tol 1e-4)";
  if (!r.passed) detail += "; worst failure " + r.outcomes[r.worst].name + ": " + r.outcomes[r.worst].report.failure;
  return {r.passed, detail};
}

// ---------------------------------------------------------------------------
// 3. Structural laws

Verdict structural_laws() {
  Checks c;
  InfnConfig cfg;
  ParameterStored params = build_model(cfg, 11);
  std::mt19937_64 rng(5);
  for (const char* name : {"dinf.gen.weight", "dinf.gen.bias", "dinf.stm.fc1.bias", "dinf.stm.fc2.bias"}) {
    params.value(name) = uniform(params.value(name).shape(), rng, -0.05, 0.05);
  }
  const Tensord f0 = uniform({cfg.filter.channels, cfg.filter.spatial, cfg.filter.spatial}, rng, -1, 1);
  for (Index k = 0; k <= 6; ++k) {
    c.expect(static_cast<Index>(infn_forward(f0, params, cfg, k).size()) == k + 1, "K=" + std::to_string(k) + " count");
  }

  InfnConfig one = cfg, six = cfg;
  one.iterations = 1;
  six.iterations = 6;
  const ParameterStored p1 = build_model(one, 0), p6 = build_model(six, 0);
  c.expect(count_parameters(p1) == count_parameters(p6), "parameter count K=1 vs K=6");
  c.expect(p1.names() == p6.names(), "parameter names K=1 vs K=6");

  const PredictionSet ps = infn_forward(f0, params, cfg, 3);
  Tensord acc = f0;
  acc.data() += ps[1].feature.data();
  acc.data() += ps[2].feature.data();
  const double dense_err = (ps[3].filter_input.data() - acc.data()).cwiseAbs().maxCoeff();
  c.expect(dense_err <= 1e-12, "dense-sum input of iteration 3 off by " + fmt("%.3e", dense_err));
  c.expect(ps[1].feature.data().norm() > 0 && ps[2].feature.data().norm() > 0, "filter outputs non-trivial");

  TrainConfig tc;
  tc.synth.n_train = 64;
  tc.synth.n_eval = 32;
  tc.epochs = 1;
  tc.batch_size = 16;
  tc.model.iterations = 4;
  const Dataset ds = generate(tc.synth);
  const TrainResult r = train(tc, ds.train);
  for (Index k = 0; k <= 4; ++k) {
    const EvalReport rep = evaluate(r.params, tc.model, tc.iff, ds.eval, k);
    c.expect(static_cast<Index>(rep.size()) == k + 1, "train K=4, eval K_eval=" + std::to_string(k));
  }
  Verdict v = from(c);
  v.detail += "; params " + std::to_string(count_parameters(p1)) + " at K=1 and K=6; dense-sum error " +
              fmt("%.1e", dense_err);
  return v;
}

// ---------------------------------------------------------------------------
// 4. Filter properties

Verdict filter_properties() {
  Checks c;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<Index> chan(1, 8), side(1, 4);
  const double eps = std::numeric_limits<double>::epsilon();
  int nonexp = 0, odd = 0, shrink = 0;
  for (int n = 0; n < 1000; ++n) {
    const Index ch = chan(rng), s = side(rng);
    const Tensord x = uniform({ch, s, s}, rng, -3, 3), x2 = uniform({ch, s, s}, rng, -3, 3);
    const Tensord tau = uniform({ch}, rng, 0, 2);
    Tensord neg = x;
    neg.data() = -x.data();
    const Tensord y = soft_threshold(x, tau), y2 = soft_threshold(x2, tau), yn = soft_threshold(neg, tau);
    bool ne = true, od = true, sh = true;
    for (Index i = 0; i < x.size(); ++i) {
      const double slack = 4 * eps * std::max({std::fabs(x[i]), std::fabs(x2[i]), tau[i / (s * s)]});
      ne &= std::fabs(y[i] - y2[i]) <= std::fabs(x[i] - x2[i]) + slack;
      od &= yn[i] == -y[i];
      sh &= std::fabs(y[i]) <= std::fabs(x[i]);
    }
    nonexp += ne;
    odd += od;
    shrink += sh;
  }
  c.expect(nonexp == 1000, "non-expansive on " + std::to_string(nonexp) + "/1000");
  c.expect(odd == 1000, "odd on " + std::to_string(odd) + "/1000");
  c.expect(shrink == 1000, "|y| <= |x| on " + std::to_string(shrink) + "/1000");

  const FilterConfig fc = FilterConfig::desk();
  const Index C = fc.channels, area = fc.spatial * fc.spatial;
  std::uniform_real_distribution<double> log_scale(-3, 2);
  int bounded = 0;
  for (int n = 0; n < 1000; ++n) {
    const double w = 1.0 / std::sqrt(static_cast<double>(C));
    const StmParams<double> p{uniform({C, C}, rng, -w, w), uniform({C}, rng, -1, 1), uniform({C, C}, rng, -w, w),
                              uniform({C}, rng, -1, 1)};
    Tensord x = uniform({C, fc.spatial, fc.spatial}, rng, -1, 1);
    if (n % 100 == 0) x.data().setZero();
    x.data() *= std::pow(10.0, log_scale(rng));
    const Tensord tau = compute_thresholds(x, p);
    bool ok = tau.size() == C;
    for (Index ch = 0; ok && ch < C; ++ch) {
      double m = 0;
      for (Index j = 0; j < area; ++j) m += std::fabs(x[ch * area + j]);
      m /= static_cast<double>(area);
      ok &= tau[ch] >= 0 && tau[ch] <= m * (1 + 1e-12);
    }
    bounded += ok;
  }
  c.expect(bounded == 1000, "0 <= tau <= gap(|x|) on " + std::to_string(bounded) + "/1000");
  return from(c);
}

// ---------------------------------------------------------------------------
// 5. IFF properties

Verdict iff_properties() {
  Checks c;
  const std::vector<double> gammas{0.0, 0.1, 0.5, 1.0, 2.0};
  const int grid = 1000;
  // IoU grid (0.01, 1]; below the 0.01 clamp the factor is flat by design.
  auto at = [&](int j) { return 0.01 + 0.99 * j / (grid - 1); };
  for (double g : gammas) {
    const IffConfig cfg{g};
    bool decreasing = true;
    for (int j = 1; j < grid; ++j) decreasing &= iff_weight(at(j), cfg) < iff_weight(at(j - 1), cfg);
    c.expect(decreasing, "strictly decreasing at gamma " + fmt("%g", g));
    c.expect(iff_weight(1.0, cfg) == 0.0, "mu(1) = 0 at gamma " + fmt("%g", g));
  }
  bool monotone = true;
  for (int j = 0; j < grid; ++j) {
    for (std::size_t k = 1; k < gammas.size(); ++k) {
      monotone &= iff_weight(at(j), IffConfig{gammas[k]}) <= iff_weight(at(j), IffConfig{gammas[k - 1]});
    }
  }
  c.expect(monotone, "non-increasing in gamma");

  // Tape gradient w.r.t. the box equals mu times the finite-difference
  // gradient of plain SmoothL1, mu held at the unperturbed box.
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto random_box = [&] {
    const double x1 = 0.6 * u(rng), y1 = 0.6 * u(rng);
    return Box{x1, y1, x1 + 0.1 + 0.3 * u(rng), y1 + 0.1 + 0.3 * u(rng)};
  };
  double worst = 0;
  int pairs = 0;
  for (int n = 0; n < 200; ++n) {
    const Box gt = random_box(), pred = random_box();
    if (iou(pred, gt) <= 0.01) continue;
    ++pairs;
    IffConfig cfg{gammas[n % gammas.size()]};
    Taped t;
    const Vard box = t.variable(boxes_to_tensor(std::vector<Box>{pred}));
    const std::vector<PredictionVars> preds{{t.constant(Tensord({1, 2})), box}};
    t.backward(total_loss(preds, std::vector<int>{0}, std::vector<Box>{gt}, cfg));
    const Tensord grad = t.gradient(box);
    const double mu = iff_weight(iou(pred, gt), cfg);
    const double h = 1e-6;
    for (Index k = 0; k < 4; ++k) {
      Tensord plus = boxes_to_tensor(std::vector<Box>{pred}), minus = plus;
      plus[k] += h;
      minus[k] -= h;
      const double fd = (smooth_l1(box_from_tensor(plus), gt) - smooth_l1(box_from_tensor(minus), gt)) / (2 * h);
      worst = std::max(worst, std::fabs(grad[k] - mu * fd));
    }
  }
  c.expect(worst <= 1e-8, "detachment identity off by " + fmt("%.2e", worst));
  Verdict v = from(c);
  v.detail += "; detachment max error " + fmt("%.1e", worst) + " over " + std::to_string(pairs) + " boxes";
  return v;
}

// ---------------------------------------------------------------------------
// 6 / 7. Desk-scale experiments

enum class Model { plain, relu, dinf, dinf_no_iff };

const char* model_name(Model m) {
  switch (m) {
    case Model::plain: return "plain";
    case Model::relu: return "relu";
    case Model::dinf: return "dinf";
    case Model::dinf_no_iff: return "dinf-noiff";
  }
  return "?";
}

struct RunResult {
  std::vector<EpochRecord> history;
  IterationMetrics metrics;  // i = 1 for the filter models, i = 0 for plain
  double seconds = 0;
};

TrainConfig experiment_config(Model m, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.synth.seed = seed;
  cfg.synth.n_train = 8000;
  cfg.synth.n_eval = 2000;
  cfg.epochs = 30;
  cfg.model.iterations = 3;
  cfg.model.eval_iterations = 1;
  cfg.iff.gamma = 0.1;
  if (m == Model::plain) {
    cfg.model.use_dinf = false;
    cfg.model.iterations = 0;
    cfg.model.eval_iterations = 0;
  }
  if (m == Model::relu) cfg.model.interaction = Interaction::relu;
  if (m == Model::dinf_no_iff) cfg.iff.enabled = false;
  return cfg;
}

class Experiments {
 public:
  void need(Model m, std::uint64_t seed) { plan_.insert({seed, m}); }

  /// Runs every planned (seed, model) pair, one dataset in memory at a time.
  void run() {
    std::optional<std::uint64_t> loaded;
    Dataset ds;
    for (const auto& key : plan_) {
      const auto [seed, m] = key;
      if (results_.count(key)) continue;
      const TrainConfig cfg = experiment_config(m, seed);
      if (loaded != seed) {
        ds = {};
        const auto t0 = Clock::now();
        ds = generate(cfg.synth);
        loaded = seed;
        data_seconds_[seed] = since(t0);
      }
      const auto t0 = Clock::now();
      TrainResult tr = train(cfg, ds.train);
      RunResult r;
      r.history = std::move(tr.history);
      r.metrics = evaluate(tr.params, cfg.model, cfg.iff, ds.eval, cfg.model.eval_iterations).back();
      r.seconds = since(t0);
      const auto& mt = r.metrics;
      std::cout << "  run seed=" << seed << " " << model_name(m) << " i=" << mt.i << " epoch1_loss="
                << r.history.front().loss << " final_loss=" << r.history.back().loss << " acc=" << mt.acc
                << " acc_heavy=" << mt.acc_heavy.value_or(NAN) << " miou_heavy=" << mt.miou_heavy.value_or(NAN)
                << " snr_in_heavy=" << mt.snr_in_heavy.value_or(NAN)
                << " snr_out_heavy=" << mt.snr_out_heavy.value_or(NAN) << " heavy_n=" << mt.heavy_count << " ("
                << fmt("%.0f", r.seconds) << " s)" << std::endl;
      results_[key] = std::move(r);
    }
  }

  const RunResult& at(Model m, std::uint64_t seed) const { return results_.at({seed, m}); }

  double seconds(const std::vector<Model>& models, const std::vector<std::uint64_t>& seeds, bool with_data) const {
    double s = 0;
    for (std::uint64_t seed : seeds) {
      for (Model m : models) s += at(m, seed).seconds;
      if (with_data && data_seconds_.count(seed)) s += data_seconds_.at(seed);
    }
    return s;
  }

 private:
  std::set<std::pair<std::uint64_t, Model>> plan_;
  std::map<std::pair<std::uint64_t, Model>, RunResult> results_;
  std::map<std::uint64_t, double> data_seconds_;
};

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

Verdict desk_dinf(const Experiments& ex) {
  std::string detail;
  bool a = true;
  for (Model m : {Model::plain, Model::relu, Model::dinf}) {
    const auto& h = ex.at(m, 0).history;
    const double ratio = h.back().loss / h.front().loss;
    a &= ratio < 0.5;
    detail += std::string(detail.empty() ? "" : ", ") + model_name(m) + " " + fmt("%.3f", ratio);
  }
  detail = "(a) " + std::string(a ? "ok" : "FAILED") + " final/epoch-1 loss " + detail;

  const IterationMetrics& d0 = ex.at(Model::dinf, 0).metrics;
  const bool b = d0.snr_out_heavy && d0.snr_in_heavy && *d0.snr_out_heavy > *d0.snr_in_heavy;
  detail += "; (b) " + std::string(b ? "ok" : "FAILED") + " heavy SNR_out " + fmt("%.2f", d0.snr_out_heavy.value_or(NAN)) +
            " dB vs SNR_in " + fmt("%.2f", d0.snr_in_heavy.value_or(NAN)) + " dB";

  double dinf_acc = 0, plain_acc = 0;
  for (std::uint64_t s : kSeeds) {
    dinf_acc += ex.at(Model::dinf, s).metrics.acc_heavy.value_or(NAN) / kSeeds.size();
    plain_acc += ex.at(Model::plain, s).metrics.acc_heavy.value_or(NAN) / kSeeds.size();
  }
  const bool c = dinf_acc >= plain_acc;
  detail += "; (c) " + std::string(c ? "ok" : "FAILED") + " mean heavy acc DINF(i=1) " + fmt("%.4f", dinf_acc) +
            " vs plain " + fmt("%.4f", plain_acc);
  const double secs = ex.seconds({Model::plain, Model::dinf}, kSeeds, true) + ex.at(Model::relu, 0).seconds;
  return {a && b && c, detail, secs};
}

Verdict desk_iff(const Experiments& ex) {
  double with = 0, without = 0;
  std::string per_seed;
  for (std::uint64_t s : kSeeds) {
    const double w = ex.at(Model::dinf, s).metrics.miou_heavy.value_or(NAN);
    const double wo = ex.at(Model::dinf_no_iff, s).metrics.miou_heavy.value_or(NAN);
    with += w / kSeeds.size();
    without += wo / kSeeds.size();
    per_seed += " s" + std::to_string(s) + " " + fmt("%.4f", w) + "/" + fmt("%.4f", wo);
  }
  const std::string detail = "mean heavy mIoU gamma=0.1 " + fmt("%.4f", with) + " vs no IFF " + fmt("%.4f", without) +
                             " (per seed with/without:" + per_seed + "); gamma=0.1 runs shared with criterion 6";
  return {with >= without, detail, ex.seconds({Model::dinf_no_iff}, kSeeds, false)};
}

// ---------------------------------------------------------------------------
// 8. Analysis pipeline

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

Verdict analysis_pipeline() {
  Checks c;
  const fs::path data = scratch("analyze_data"), run = scratch("analyze_run"), out = scratch("analyze_out");
  const std::vector<std::string> sets{"synth.n_train=400", "synth.n_eval=300", "train.epochs=2"};
  cli(with_sets({"datagen", "-o", data.string()}, sets));
  cli(with_sets({"train", "-o", run.string(), "--data", data.string(), "--k", "3"}, sets));
  const Index k_eval = 3;
  cli({"analyze", "--checkpoint", (run / "checkpoint.bin").string(), "--data", data.string(), "-o", out.string(),
       "--k-eval", std::to_string(k_eval)});

  const Checkpoint ckpt = load_checkpoint(run / "checkpoint.bin");
  const TrainConfig cfg = config_from_text(ckpt.config);
  const DatasetFile eval = load_dataset(data / split_file_name(Split::eval));
  const auto features = instance_features(ckpt.params, cfg.model, eval.samples, k_eval);

  std::map<std::pair<Index, int>, double> reported;
  for (const auto& row : csv_rows(slurp(out / "variance.csv"))) {
    reported[{std::stoll(row.at(0)), std::stoi(row.at(1))}] = std::stod(row.at(2));
  }
  double worst = 0;
  for (Index i = 0; i <= k_eval; ++i) {
    const auto& fi = features[static_cast<std::size_t>(i)];
    const Index n = static_cast<Index>(fi.size()), d = fi.front().size();
    Eigen::MatrixXd x(n, d);
    for (Index r = 0; r < n; ++r) x.row(r) = fi[static_cast<std::size_t>(r)].data().transpose();
    x.rowwise() -= x.colwise().mean();
    const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
    for (int k = 1; k <= 2; ++k) {
      const auto it = reported.find({i, k});
      c.expect(it != reported.end(), "variance row i=" + std::to_string(i) + " component " + std::to_string(k));
      if (it == reported.end()) continue;
      const double oracle = eig.eigenvalues()[d - k];
      worst = std::max(worst, std::fabs(it->second - oracle));
      c.near(it->second, oracle, 1e-8, "explained variance i=" + std::to_string(i) + " k=" + std::to_string(k));
    }
  }
  std::set<Index> compact_rows;
  for (const auto& row : csv_rows(slurp(out / "compactness.csv"))) {
    if (row.at(1) == "all") compact_rows.insert(std::stoll(row.at(0)));
  }
  c.expect(compact_rows.size() == static_cast<std::size_t>(k_eval + 1), "compactness reported for every i");
  const auto proj = csv_rows(slurp(out / "projections.csv"));
  c.expect(proj.size() == static_cast<std::size_t>((k_eval + 1) * eval.samples.size()), "one projection row per sample and i");
  Verdict v = from(c);
  v.detail += "; max |explained - eigensolver| " + fmt("%.1e", worst) + " over i=0.." + std::to_string(k_eval);
  return v;
}

// ---------------------------------------------------------------------------
// 9. Reproducibility

Verdict reproducibility() {
  Checks c;
  const std::vector<std::string> sets{"synth.n_train=500", "synth.n_eval=200", "train.epochs=2"};
  const fs::path d1 = scratch("repro_data1"), d2 = scratch("repro_data2");
  cli(with_sets({"datagen", "-o", d1.string()}, sets));
  cli(with_sets({"datagen", "-o", d2.string()}, sets));
  for (Split s : {Split::train, Split::eval}) {
    const std::string f = split_file_name(s);
    const std::string a = slurp(d1 / f);
    c.expect(!a.empty() && a == slurp(d2 / f), f + " byte-identical");
  }
  const fs::path r1 = scratch("repro_run1"), r2 = scratch("repro_run2"), r3 = scratch("repro_run3");
  cli(with_sets({"train", "-o", r1.string(), "--data", d1.string()}, sets));
  cli(with_sets({"train", "-o", r2.string(), "--data", d2.string()}, sets));
  cli(with_sets({"train", "-o", r3.string()}, sets));
  const std::string ck = slurp(r1 / "checkpoint.bin");
  c.expect(!ck.empty() && ck == slurp(r2 / "checkpoint.bin"), "checkpoint byte-identical");
  c.expect(ck == slurp(r3 / "checkpoint.bin"), "checkpoint identical when data is regenerated in-process");
  c.expect(slurp(r1 / "history.csv") == slurp(r2 / "history.csv"), "history byte-identical");
  Verdict v = from(c);
  v.detail += "; dataset " + std::to_string(slurp(d1 / "train.bin").size()) + " B, checkpoint " +
              std::to_string(ck.size()) + " B";
  return v;
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* title;
  double budget_s;
  std::function<Verdict()> run;
};

}  // namespace
}  // namespace dinf

int main(int argc, char** argv) {
  using namespace dinf;
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  Experiments ex;
  for (std::uint64_t s : kSeeds) {
    if (wanted(6)) {
      ex.need(Model::plain, s);
      ex.need(Model::dinf, s);
    }
    if (wanted(7)) {
      ex.need(Model::dinf, s);
      ex.need(Model::dinf_no_iff, s);
    }
  }
  if (wanted(6)) ex.need(Model::relu, 0);
  bool ran = false;
  auto experiments = [&]() -> const Experiments& {
    if (!ran) ex.run();
    ran = true;
    return ex;
  };

  const std::vector<Criterion> criteria{
      {1, "formula exactness", 1, formula_exactness},
      {2, "gradient suite", 120, gradient_suite},
      {3, "structural laws", 60, structural_laws},
      {4, "filter properties", 30, filter_properties},
      {5, "IFF properties", 10, iff_properties},
      {8, "analysis pipeline", 30, analysis_pipeline},
      {9, "reproducibility", 0, reproducibility},
      {6, "desk DINF experiment", 900, [&] { return desk_dinf(experiments()); }},
      {7, "desk IFF experiment", 600, [&] { return desk_iff(experiments()); }},
  };

  int failures = 0;
  std::map<int, std::string> lines;
  for (const auto& c : criteria) {
    if (!wanted(c.id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = v.seconds.value_or(since(t0));
    const bool in_time = c.budget_s <= 0 || secs < c.budget_s;
    const bool ok = v.ok && in_time;
    failures += !ok;
    std::string timing = fmt("%.1f s", secs);
    if (c.budget_s > 0) timing += fmt(" / budget %.0f s", c.budget_s) + (in_time ? "" : " EXCEEDED");
    std::ostringstream line;
    line << (ok ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.title << " [" << timing << "]: " << v.detail;
    lines[c.id] = line.str();
    std::cout << line.str() << std::endl;
  }
  std::cout << "\nsummary\n";
  for (const auto& [id, line] : lines) std::cout << line << '\n';
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
