#include "dinf/io.hpp"

#include <bit>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#ifndef DINF_GIT_DESCRIBE
#define DINF_GIT_DESCRIBE "unknown"
#endif

namespace dinf {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Little-endian primitives

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_reals(std::ostream& out, const Tensord& t) {
  for (Index i = 0; i < t.size(); ++i) put_f64(out, t[i]);
}

void read_exact(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError(std::string("truncated file while reading ") + what);
}

std::uint64_t get_u64(std::istream& in, const char* what) {
  unsigned char b[8];
  read_exact(in, reinterpret_cast<char*>(b), 8, what);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  read_exact(in, reinterpret_cast<char*>(b), 4, what);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

double get_f64(std::istream& in, const char* what) { return std::bit_cast<double>(get_u64(in, what)); }

std::string get_string(std::istream& in, const char* what, std::uint64_t limit = 1u << 24) {
  const std::uint64_t n = get_u64(in, what);
  if (n > limit) throw FormatError(std::string("implausible length for ") + what);
  std::string s(static_cast<std::size_t>(n), '\0');
  read_exact(in, s.data(), s.size(), what);
  return s;
}

void get_reals(std::istream& in, Tensord& t, const char* what) {
  for (Index i = 0; i < t.size(); ++i) t[i] = get_f64(in, what);
}

void expect_magic(std::istream& in, const char (&magic)[8], const char* kind) {
  char b[8];
  read_exact(in, b, 8, "magic");
  if (!std::equal(b, b + 8, magic)) throw FormatError(std::string("not a ") + kind + " file (bad magic)");
}

// ---------------------------------------------------------------------------
// Config values

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_real(const std::string& key, const std::string& v) {
  double x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(x)) {
    throw std::invalid_argument("config key '" + key + "': expected a real, got '" + v + "'");
  }
  return x;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw std::invalid_argument("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config key '" + key + "': expected true or false, got '" + v + "'");
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename Member>
Field real_field(Member member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) { member(c) = parse_real(k, v); },
          [member](const TrainConfig& c) { return format_real(member(c)); }};
}

template <typename Int, typename Member>
Field int_field(Member member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) { member(c) = parse_int<Int>(k, v); },
          [member](const TrainConfig& c) { return std::to_string(member(c)); }};
}

template <typename Member>
Field bool_field(Member member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) { member(c) = parse_bool(k, v); },
          [member](const TrainConfig& c) { return std::string(member(c) ? "true" : "false"); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    f["synth.classes"] = int_field<Index>([](auto& c) -> auto& { return c.synth.classes; });
    f["synth.channels"] = int_field<Index>([](auto& c) -> auto& { return c.synth.channels; });
    f["synth.spatial"] = int_field<Index>([](auto& c) -> auto& { return c.synth.spatial; });
    f["synth.noise_sigma"] = real_field([](auto& c) -> auto& { return c.synth.noise_sigma; });
    for (int b = 0; b < 3; ++b) {
      const std::string p = "synth.mixture." + std::to_string(b);
      f[p + ".probability"] =
          real_field([b](auto& c) -> auto& { return c.synth.overlap_mixture[b].probability; });
      f[p + ".lo"] = real_field([b](auto& c) -> auto& { return c.synth.overlap_mixture[b].lo; });
      f[p + ".hi"] = real_field([b](auto& c) -> auto& { return c.synth.overlap_mixture[b].hi; });
    }
    f["synth.pedestrian_ratio"] = real_field([](auto& c) -> auto& { return c.synth.pedestrian_ratio; });
    f["synth.n_train"] = int_field<Index>([](auto& c) -> auto& { return c.synth.n_train; });
    f["synth.n_eval"] = int_field<Index>([](auto& c) -> auto& { return c.synth.n_eval; });
    f["synth.seed"] = int_field<std::uint64_t>([](auto& c) -> auto& { return c.synth.seed; });

    f["model.mid_channels"] = int_field<Index>([](auto& c) -> auto& { return c.model.filter.mid_channels; });
    f["model.instance_dim"] = int_field<Index>([](auto& c) -> auto& { return c.model.filter.instance_dim; });
    f["model.iterations"] = int_field<Index>([](auto& c) -> auto& { return c.model.iterations; });
    f["model.eval_iterations"] = int_field<Index>([](auto& c) -> auto& { return c.model.eval_iterations; });
    f["model.dinf"] = bool_field([](auto& c) -> auto& { return c.model.use_dinf; });
    f["model.interaction"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "soft_threshold") {
            c.model.interaction = Interaction::soft_threshold;
          } else if (v == "relu") {
            c.model.interaction = Interaction::relu;
          } else {
            throw std::invalid_argument("config key '" + k + "': expected soft_threshold or relu, got '" + v + "'");
          }
        },
        [](const TrainConfig& c) {
          return std::string(c.model.interaction == Interaction::relu ? "relu" : "soft_threshold");
        }};

    f["iff.enabled"] = bool_field([](auto& c) -> auto& { return c.iff.enabled; });
    f["iff.gamma"] = real_field([](auto& c) -> auto& { return c.iff.gamma; });
    f["iff.iou_floor"] = real_field([](auto& c) -> auto& { return c.iff.iou_floor; });
    f["iff.reg_weight"] = real_field([](auto& c) -> auto& { return c.iff.reg_weight; });

    f["train.epochs"] = int_field<Index>([](auto& c) -> auto& { return c.epochs; });
    f["train.batch_size"] = int_field<Index>([](auto& c) -> auto& { return c.batch_size; });
    f["train.learning_rate"] = real_field([](auto& c) -> auto& { return c.learning_rate; });
    f["train.momentum"] = real_field([](auto& c) -> auto& { return c.momentum; });
    f["train.grad_clip"] = real_field([](auto& c) -> auto& { return c.grad_clip; });
    f["train.seed"] = int_field<std::uint64_t>([](auto& c) -> auto& { return c.seed; });
    return f;
  }();
  return table;
}

/// The model's data-facing extents always follow the synthetic data.
void sync_model(TrainConfig& cfg) {
  cfg.model.filter.channels = cfg.synth.channels;
  cfg.model.filter.spatial = cfg.synth.spatial;
  cfg.model.num_classes = cfg.synth.classes;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  return out;
}

std::string optional_cell(const std::optional<double>& v) { return v ? format_real(*v) : std::string(); }

}  // namespace

// ---------------------------------------------------------------------------

std::string format_real(double x) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

ConfigMap parse_config(const std::string& text) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    out[key] = value;
  }
  return out;
}

ConfigMap read_config_file(const fs::path& path) { return parse_config(read_text(path)); }

void apply_config(TrainConfig& cfg, const ConfigMap& values) {
  const auto& table = fields();
  for (const auto& [key, value] : values) {
    const auto it = table.find(key);
    if (it == table.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    it->second.set(cfg, key, value);
  }
  sync_model(cfg);
}

std::string config_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

TrainConfig config_from_text(const std::string& text) {
  TrainConfig cfg;
  apply_config(cfg, parse_config(text));
  return cfg;
}

fs::path resolve_config_path(const fs::path& path) {
  if (fs::exists(path)) return path;
  if (const char* dir = std::getenv(kConfigDirEnv); dir && *dir && path.is_relative()) {
    const fs::path candidate = fs::path(dir) / path;
    if (fs::exists(candidate)) return candidate;
  }
  throw std::invalid_argument("config file '" + path.string() + "' not found (also searched $" + kConfigDirEnv + ")");
}

// ---------------------------------------------------------------------------

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kCheckpointMagic, 8);
  put_u32(out, kCheckpointVersion);
  put_string(out, ckpt.config);
  put_u64(out, ckpt.params.entries().size());
  for (const auto& [name, e] : ckpt.params.entries()) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (Index d : e.value.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    put_reals(out, e.value);
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  expect_magic(in, kCheckpointMagic, "checkpoint");
  const std::uint32_t version = get_u32(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint format_version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config = get_string(in, "config");
  const std::uint64_t count = get_u64(in, "parameter count");
  for (std::uint64_t p = 0; p < count; ++p) {
    std::string name = get_string(in, "parameter name", 4096);
    const std::uint32_t rank = get_u32(in, "rank");
    if (rank == 0 || rank > 8) throw FormatError("parameter '" + name + "' has invalid rank");
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint64_t d = get_u64(in, "extent");
      if (d == 0 || d > (1ull << 32)) throw FormatError("parameter '" + name + "' has invalid extent");
      n *= d;
      if (n > (1ull << 34)) throw FormatError("parameter '" + name + "' is implausibly large");
      shape.push_back(static_cast<Index>(d));
    }
    Tensord value(shape);
    get_reals(in, value, "parameter data");
    ckpt.params.add(name, std::move(value));
  }
  ckpt.params.seal();
  return ckpt;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::ostringstream ss;
  write_checkpoint(ss, ckpt);
  write_file_atomic(path, ss.str());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(in);
}

// ---------------------------------------------------------------------------

void write_dataset(std::ostream& out, const DatasetFile& file) {
  out.write(kDatasetMagic, 8);
  put_u32(out, kDatasetVersion);
  put_u32(out, static_cast<std::uint32_t>(file.split));
  put_string(out, file.config);
  put_u64(out, file.samples.size());
  put_u64(out, static_cast<std::uint64_t>(file.channels));
  put_u64(out, static_cast<std::uint64_t>(file.spatial));
  const Index n = file.channels * file.spatial * file.spatial;
  for (const auto& s : file.samples) {
    if (s.feature.size() != n || s.clean.size() != n) throw ShapeError("write_dataset: sample size mismatch");
    put_u32(out, static_cast<std::uint32_t>(s.label));
    put_u32(out, static_cast<std::uint32_t>(s.pattern));
    put_f64(out, s.overlap);
    for (double v : {s.gt_box.x1, s.gt_box.y1, s.gt_box.x2, s.gt_box.y2}) put_f64(out, v);
    put_reals(out, s.feature);
    put_reals(out, s.clean);
  }
}

DatasetFile read_dataset(std::istream& in) {
  expect_magic(in, kDatasetMagic, "dataset");
  const std::uint32_t version = get_u32(in, "version");
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  DatasetFile file;
  const std::uint32_t split = get_u32(in, "split");
  if (split > 1) throw FormatError("invalid split tag " + std::to_string(split));
  file.split = static_cast<Split>(split);
  file.config = get_string(in, "config");
  const std::uint64_t count = get_u64(in, "sample count");
  const std::uint64_t c = get_u64(in, "channels"), s = get_u64(in, "spatial");
  if (c == 0 || s == 0 || c > 65536 || s > 4096) throw FormatError("invalid feature extents");
  file.channels = static_cast<Index>(c);
  file.spatial = static_cast<Index>(s);
  const Shape shape{file.channels, file.spatial, file.spatial};
  file.samples.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 20)));
  for (std::uint64_t i = 0; i < count; ++i) {
    SynthSample sample;
    sample.label = static_cast<int>(get_u32(in, "label"));
    const std::uint32_t pattern = get_u32(in, "pattern");
    if (pattern > 1) throw FormatError("invalid occlusion pattern tag");
    sample.pattern = static_cast<OcclusionPattern>(pattern);
    sample.overlap = get_f64(in, "overlap");
    sample.gt_box.x1 = get_f64(in, "box");
    sample.gt_box.y1 = get_f64(in, "box");
    sample.gt_box.x2 = get_f64(in, "box");
    sample.gt_box.y2 = get_f64(in, "box");
    sample.feature = Tensord(shape);
    sample.clean = Tensord(shape);
    get_reals(in, sample.feature, "feature");
    get_reals(in, sample.clean, "clean");
    file.samples.push_back(std::move(sample));
  }
  return file;
}

void save_dataset(const fs::path& path, const DatasetFile& file) {
  std::ostringstream ss;
  write_dataset(ss, file);
  write_file_atomic(path, ss.str());
}

DatasetFile load_dataset(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset '" + path.string() + "'");
  return read_dataset(in);
}

std::string split_file_name(Split split) { return split == Split::train ? "train.bin" : "eval.bin"; }

// ---------------------------------------------------------------------------

void write_history_csv(std::ostream& out, std::span<const EpochRecord> history) {
  out << kMetricsHeader << '\n';
  for (const auto& r : history) out << r.epoch << ",," << format_real(r.loss) << ",,,,,,,\n";
}

void write_metrics_csv(std::ostream& out, Index epoch, const EvalReport& report) {
  out << kMetricsHeader << '\n';
  for (const auto& m : report) {
    out << epoch << ',' << m.i << ',' << format_real(m.loss) << ',' << format_real(m.acc) << ','
        << optional_cell(m.acc_heavy) << ',' << format_real(m.miou) << ',' << optional_cell(m.miou_heavy) << ','
        << format_real(m.snr_in) << ',' << format_real(m.snr_out) << ',' << format_real(m.compactness) << '\n';
  }
}

void write_subset_csv(std::ostream& out, Index epoch, const EvalReport& report) {
  out << kSubsetHeader << '\n';
  for (const auto& m : report) {
    out << epoch << ',' << m.i << ',' << m.count << ',' << m.heavy_count << ',' << optional_cell(m.snr_in_heavy)
        << ',' << optional_cell(m.snr_out_heavy) << '\n';
  }
}

// ---------------------------------------------------------------------------

std::string build_revision() { return DINF_GIT_DESCRIBE; }

void write_file_atomic(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out = open_out(tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw std::runtime_error("failed writing '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

void write_manifest(const fs::path& dir, const RunManifest& m) {
  std::ostringstream ss;
  ss << "command = " << m.command << '\n'
     << "seed = " << m.seed << '\n'
     << "git_describe = " << m.git_describe << '\n'
     << "duration_seconds = " << std::fixed << std::setprecision(3) << m.duration_seconds << '\n'
     << "[config]\n"
     << m.config;
  write_file_atomic(dir / "manifest.txt", ss.str());
}

}  // namespace dinf
