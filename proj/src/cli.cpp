#include "dinf/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "dinf/gradcheck_suite.hpp"
#include "dinf/harness.hpp"
#include "dinf/io.hpp"

namespace dinf {

namespace fs = std::filesystem;

namespace {

/// Configuration or usage problem; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::string out = ".";
};

struct ModelFlags {
  bool no_dinf = false;
  bool relu = false;
  bool no_iff = false;
  Index k = 0;
  Index k_eval = 0;
  double gamma = 0;
  Index epochs = 0;
  std::uint64_t seed = 0;
  CLI::Option* k_opt = nullptr;
  CLI::Option* k_eval_opt = nullptr;
  CLI::Option* gamma_opt = nullptr;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* app, CommonOptions& o, bool with_config = true) {
  if (with_config) {
    app->add_option("-c,--config", o.config, "Config file (key = value); searched in $DINF_CONFIG_DIR too");
    app->add_option("--set", o.sets, "Override one config key: section.key=value")->allow_extra_args(false);
  }
  app->add_option("-o,--out", o.out, "Output directory")->capture_default_str();
}

/// Defaults, then the config file (or $DINF_CONFIG_DIR/default.conf when
/// present), then --set overrides.
TrainConfig load_config(const CommonOptions& o) {
  TrainConfig cfg;
  try {
    if (!o.config.empty()) {
      apply_config(cfg, read_config_file(resolve_config_path(o.config)));
    } else if (const char* dir = std::getenv(kConfigDirEnv); dir && *dir) {
      const fs::path fallback = fs::path(dir) / "default.conf";
      if (fs::exists(fallback)) apply_config(cfg, read_config_file(fallback));
    }
    ConfigMap sets;
    for (const auto& s : o.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
      sets[s.substr(0, eq)] = s.substr(eq + 1);
    }
    apply_config(cfg, sets);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

void apply_model_flags(TrainConfig& cfg, const ModelFlags& f) {
  if (f.no_dinf) {
    if (f.relu) throw UsageError("--no-dinf conflicts with --relu-interaction");
    if ((f.k_opt->count() && f.k != 0) || (f.k_eval_opt->count() && f.k_eval != 0)) {
      throw UsageError("--no-dinf forces K = 0 and conflicts with a nonzero --k / --k-eval");
    }
    cfg.model.use_dinf = false;
    cfg.model.iterations = 0;
    cfg.model.eval_iterations = 0;
  }
  if (f.relu) cfg.model.interaction = Interaction::relu;
  if (f.k_opt->count()) cfg.model.iterations = f.k;
  if (f.k_eval_opt->count()) cfg.model.eval_iterations = f.k_eval;
  if (f.no_iff) {
    if (f.gamma_opt->count()) throw UsageError("--no-iff conflicts with --gamma");
    cfg.iff.enabled = false;
  }
  if (f.gamma_opt->count()) cfg.iff.gamma = f.gamma;
  if (f.epochs_opt->count()) cfg.epochs = f.epochs;
  if (f.seed_opt->count()) cfg.seed = f.seed;
}

void add_model_flags(CLI::App* app, ModelFlags& f) {
  app->add_flag("--no-dinf", f.no_dinf, "Plain prediction head (forces K = 0)");
  app->add_flag("--relu-interaction", f.relu, "ReLU instead of soft thresholding between the dynamic kernels");
  app->add_flag("--no-iff", f.no_iff, "Disable the IoU focal factor (mu = 1)");
  f.k_opt = app->add_option("--k", f.k, "Refinement iterations in training")->check(CLI::NonNegativeNumber);
  f.k_eval_opt = app->add_option("--k-eval", f.k_eval, "Refinement iterations at evaluation")->check(CLI::NonNegativeNumber);
  f.gamma_opt = app->add_option("--gamma", f.gamma, "IoU focal factor exponent")->check(CLI::NonNegativeNumber);
  f.epochs_opt = app->add_option("--epochs", f.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
  f.seed_opt = app->add_option("--seed", f.seed, "Training seed");
}

void validate(const TrainConfig& cfg) {
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory '" + dir.string() + "'");
}

std::string joined(const std::vector<std::string>& args) {
  std::string s = "dinf";
  for (const auto& a : args) s += " " + a;
  return s;
}

/// Samples of `split`, from `data_dir` when given, else regenerated from
/// `cfg.synth`. A loaded file's config echo replaces cfg.synth so the
/// manifest describes the data actually used.
std::vector<SynthSample> load_split(const std::string& data_dir, Split split, TrainConfig& cfg) {
  if (data_dir.empty()) {
    const PrototypeBank bank = PrototypeBank::draw(cfg.synth);
    const Index n = split == Split::train ? cfg.synth.n_train : cfg.synth.n_eval;
    std::vector<SynthSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) out.push_back(generate_sample(cfg.synth, bank, split, i));
    return out;
  }
  DatasetFile file;
  try {
    file = load_dataset(fs::path(data_dir) / split_file_name(split));
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  } catch (const std::runtime_error& e) {
    throw UsageError(e.what());
  }
  if (file.split != split) throw UsageError("dataset file holds the wrong split");
  cfg.synth = config_from_text(file.config).synth;
  cfg.model.filter.channels = cfg.synth.channels;
  cfg.model.filter.spatial = cfg.synth.spatial;
  cfg.model.num_classes = cfg.synth.classes;
  return std::move(file.samples);
}

void write_text(const fs::path& path, const std::string& text) {
  try {
    write_file_atomic(path, text);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

void print_histogram(std::ostream& out, const char* name, std::span<const SynthSample> samples) {
  const OverlapHistogram h = overlap_histogram(samples);
  const double n = std::max<double>(1.0, static_cast<double>(samples.size()));
  out << name << " overlap histogram (" << samples.size() << " samples)\n";
  auto row = [&](const char* label, Index count) {
    const double frac = static_cast<double>(count) / n;
    out << "  " << label << std::setw(7) << count << "  " << std::fixed << std::setprecision(3) << frac << "  "
        << std::string(static_cast<std::size_t>(frac * 50 + 0.5), '#') << '\n';
    out.unsetf(std::ios::fixed);
  };
  row("[0.0, 0.5)", h.light);
  row("[0.5, 1.0]", h.heavy);
}

struct Clock {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

// ---------------------------------------------------------------------------

int cmd_datagen(const CommonOptions& o, const std::vector<std::string>& args, std::ostream& out) {
  const Clock clock;
  TrainConfig cfg = load_config(o);
  try {
    cfg.synth.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path dir(o.out);
  ensure_dir(dir);
  const Dataset ds = generate(cfg.synth);
  const std::string echo = config_text(cfg);
  for (Split split : {Split::train, Split::eval}) {
    DatasetFile file{split, echo, cfg.synth.channels, cfg.synth.spatial,
                     split == Split::train ? ds.train : ds.eval};
    std::ostringstream ss;
    write_dataset(ss, file);
    write_text(dir / split_file_name(split), ss.str());
  }
  print_histogram(out, "train", ds.train);
  print_histogram(out, "eval", ds.eval);
  out << "regenerated samples: " << ds.regenerated << '\n';
  write_manifest(dir, {joined(args), echo, cfg.synth.seed, build_revision(), clock.seconds()});
  return kExitOk;
}

int cmd_gradcheck(const std::string& preset_name, std::ostream& out, std::ostream& err) {
  GradcheckPreset preset;
  try {
    preset = parse_gradcheck_preset(preset_name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto cases = gradcheck_cases();
  const auto result = run_gradcheck_suite(cases, preset, [&](const GradcheckOutcome& o) {
    out << (o.report.passed ? "PASS " : "FAIL ") << std::left << std::setw(26) << o.name << std::right
        << " max_err=" << std::scientific << std::setprecision(2) << o.report.max_rel_error << " tol=" << o.tol
        << std::defaultfloat << " checked=" << o.report.checked << " excluded=" << o.report.excluded;
    if (!o.report.passed) out << "  " << o.report.failure;
    out << '\n';
  });
  if (!result.passed) {
    const auto& w = result.outcomes[static_cast<std::size_t>(result.worst)];
    err << "gradcheck failed; worst offender: " << w.name << " (" << w.report.failure << ")\n";
    return kExitCheckFailed;
  }
  out << "all " << result.outcomes.size() << " checks passed\n";
  return kExitOk;
}

int cmd_train(const CommonOptions& o, const ModelFlags& flags, const std::string& data_dir,
              const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Clock clock;
  TrainConfig cfg = load_config(o);
  apply_model_flags(cfg, flags);
  const std::vector<SynthSample> train_set = load_split(data_dir, Split::train, cfg);
  validate(cfg);
  const fs::path dir(o.out);
  ensure_dir(dir);
  TrainResult result;
  try {
    result = train(cfg, train_set, [&](const EpochRecord& r) { out << "epoch " << r.epoch << " loss " << r.loss << '\n'; });
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kExitCheckFailed;
  }
  const std::string echo = config_text(cfg);
  std::ostringstream ckpt;
  write_checkpoint(ckpt, {echo, result.params});
  write_text(dir / "checkpoint.bin", ckpt.str());
  std::ostringstream csv;
  write_history_csv(csv, result.history);
  write_text(dir / "history.csv", csv.str());
  write_manifest(dir, {joined(args), echo, cfg.seed, build_revision(), clock.seconds()});
  return kExitOk;
}

struct LoadedModel {
  TrainConfig cfg;
  ParameterStored params;
};

LoadedModel load_model(const std::string& path) {
  try {
    Checkpoint ckpt = load_checkpoint(path);
    return {config_from_text(ckpt.config), std::move(ckpt.params)};
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

int cmd_eval(const CommonOptions& o, const ModelFlags& flags, const std::string& ckpt_path,
             const std::string& data_dir, const std::vector<std::string>& args, std::ostream& out) {
  const Clock clock;
  LoadedModel m = load_model(ckpt_path);
  if (flags.no_dinf || flags.relu || flags.k_opt->count()) {
    throw UsageError("eval takes the model from the checkpoint; only --k-eval, --gamma and --no-iff apply");
  }
  if (flags.k_eval_opt->count()) m.cfg.model.eval_iterations = flags.k_eval;
  if (flags.no_iff) m.cfg.iff.enabled = false;
  if (flags.gamma_opt->count()) m.cfg.iff.gamma = flags.gamma;
  if (!m.cfg.model.use_dinf && m.cfg.model.eval_iterations != 0) {
    throw UsageError("checkpoint has no DINF; --k-eval must be 0");
  }
  const std::vector<SynthSample> eval_set = load_split(data_dir, Split::eval, m.cfg);
  validate(m.cfg);
  EvalReport report;
  try {
    report = evaluate(m.params, m.cfg.model, m.cfg.iff, eval_set, m.cfg.model.eval_iterations);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path dir(o.out);
  ensure_dir(dir);
  std::ostringstream metrics, subset;
  write_metrics_csv(metrics, m.cfg.epochs, report);
  write_subset_csv(subset, m.cfg.epochs, report);
  write_text(dir / "metrics.csv", metrics.str());
  write_text(dir / "subset.csv", subset.str());
  out << metrics.str();
  write_manifest(dir, {joined(args), config_text(m.cfg), m.cfg.seed, build_revision(), clock.seconds()});
  return kExitOk;
}

int cmd_analyze(const CommonOptions& o, const ModelFlags& flags, const std::string& ckpt_path,
                const std::string& data_dir, const std::vector<std::string>& args, std::ostream& out) {
  const Clock clock;
  LoadedModel m = load_model(ckpt_path);
  if (flags.no_dinf || flags.relu || flags.no_iff || flags.k_opt->count() || flags.gamma_opt->count()) {
    throw UsageError("analyze takes the model from the checkpoint; only --k-eval applies");
  }
  if (flags.k_eval_opt->count()) m.cfg.model.eval_iterations = flags.k_eval;
  if (!m.cfg.model.use_dinf && m.cfg.model.eval_iterations != 0) {
    throw UsageError("checkpoint has no DINF; --k-eval must be 0");
  }
  const std::vector<SynthSample> eval_set = load_split(data_dir, Split::eval, m.cfg);
  validate(m.cfg);
  if (eval_set.size() < 3) throw UsageError("analyze needs at least 3 evaluation samples");
  std::vector<int> labels;
  for (const auto& s : eval_set) labels.push_back(s.label);
  const auto features = instance_features(m.params, m.cfg.model, eval_set, m.cfg.model.eval_iterations);

  std::ostringstream proj, comp, var;
  proj << kProjectionHeader << '\n';
  comp << kCompactnessHeader << '\n';
  var << kVarianceHeader << '\n';
  for (std::size_t i = 0; i < features.size(); ++i) {
    const CompactnessAnalysis a = analyze_compactness(features[i], labels);
    for (Index r = 0; r < a.projections.rows(); ++r) {
      proj << i << ',' << labels[r] << ',' << format_real(a.projections(r, 0)) << ','
           << format_real(a.projections(r, 1)) << '\n';
    }
    for (const auto& [label, c] : a.per_class) comp << i << ',' << label << ',' << format_real(c) << '\n';
    comp << i << ",all," << format_real(a.total) << '\n';
    for (int k = 0; k < 2; ++k) {
      var << i << ',' << k + 1 << ',' << format_real(a.explained_variance[k]) << ','
          << format_real(a.total_variance) << '\n';
    }
    out << "i=" << i << " compactness " << a.total << " explained " << a.explained_variance[0] + a.explained_variance[1]
        << " of " << a.total_variance << '\n';
  }
  const fs::path dir(o.out);
  ensure_dir(dir);
  write_text(dir / "projections.csv", proj.str());
  write_text(dir / "compactness.csv", comp.str());
  write_text(dir / "variance.csv", var.str());
  write_manifest(dir, {joined(args), config_text(m.cfg), m.cfg.seed, build_revision(), clock.seconds()});
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Denoising filters for occluded detection: data generation, gradient checks, training, analysis",
               "dinf"};
  app.require_subcommand(1);

  CommonOptions datagen_opts, train_opts, eval_opts, analyze_opts;
  ModelFlags train_flags, eval_flags, analyze_flags;
  std::string preset = "desk", train_data, eval_data, analyze_data, eval_ckpt, analyze_ckpt;

  CLI::App* datagen = app.add_subcommand("datagen", "Generate train/eval split files");
  add_common(datagen, datagen_opts);

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("preset", preset, "tiny or desk")->capture_default_str();

  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  add_common(train_cmd, train_opts);
  add_model_flags(train_cmd, train_flags);
  train_cmd->add_option("--data", train_data, "Directory holding train.bin (default: regenerate from config)");

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint per iteration index");
  add_common(eval_cmd, eval_opts, false);
  add_model_flags(eval_cmd, eval_flags);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Directory holding eval.bin (default: regenerate)");

  CLI::App* analyze = app.add_subcommand("analyze", "PCA projections and compactness of instance features");
  add_common(analyze, analyze_opts, false);
  add_model_flags(analyze, analyze_flags);
  analyze->add_option("--checkpoint", analyze_ckpt, "Checkpoint file")->required();
  analyze->add_option("--data", analyze_data, "Directory holding eval.bin (default: regenerate)");

  std::vector<const char*> argv{"dinf"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (datagen->parsed()) return cmd_datagen(datagen_opts, args, out);
    if (gradcheck->parsed()) return cmd_gradcheck(preset, out, err);
    if (train_cmd->parsed()) return cmd_train(train_opts, train_flags, train_data, args, out, err);
    if (eval_cmd->parsed()) return cmd_eval(eval_opts, eval_flags, eval_ckpt, eval_data, args, out);
    if (analyze->parsed()) return cmd_analyze(analyze_opts, analyze_flags, analyze_ckpt, analyze_data, args, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace dinf
