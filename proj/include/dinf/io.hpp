#pragma once

// File formats: flat key/value configs, the checkpoint binary, dataset split
// files, metric CSVs and run manifests. All binary numbers are little-endian;
// reals are IEEE-754 binary64. Layouts are documented in README.md.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dinf/harness.hpp"
#include "dinf/synth.hpp"

namespace dinf {

/// Malformed or unsupported file content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

/// Flat `section.key = value` pairs; `#` starts a comment.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config(const std::string& text);
ConfigMap read_config_file(const std::filesystem::path& path);

/// Applies `values` on top of `cfg`. Unknown keys and malformed values
/// throw std::invalid_argument naming the key.
void apply_config(TrainConfig& cfg, const ConfigMap& values);

/// Every key of `cfg`, sorted, with reals printed to round-trip exactly.
std::string config_text(const TrainConfig& cfg);

/// Inverse of config_text on the default configuration.
TrainConfig config_from_text(const std::string& text);

/// Resolves a config argument: the path itself if it exists, otherwise the
/// same name inside `$DINF_CONFIG_DIR`.
std::filesystem::path resolve_config_path(const std::filesystem::path& path);

inline constexpr const char* kConfigDirEnv = "DINF_CONFIG_DIR";

// ---------------------------------------------------------------------------
// Checkpoint

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'N', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config;  // config_text of the producing run
  ParameterStored params;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset split files

inline constexpr char kDatasetMagic[8] = {'D', 'I', 'N', 'F', 'D', 'A', 'T', 'A'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetFile {
  Split split = Split::train;
  std::string config;
  Index channels = 0;
  Index spatial = 0;
  std::vector<SynthSample> samples;
};

void write_dataset(std::ostream& out, const DatasetFile& file);
DatasetFile read_dataset(std::istream& in);
void save_dataset(const std::filesystem::path& path, const DatasetFile& file);
DatasetFile load_dataset(const std::filesystem::path& path);

/// `train.bin` / `eval.bin`.
std::string split_file_name(Split split);

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kMetricsHeader = "epoch,i,loss,acc,acc_heavy,miou,miou_heavy,snr_in,snr_out,compactness";
inline constexpr const char* kSubsetHeader = "epoch,i,count,heavy_count,snr_in_heavy,snr_out_heavy";
inline constexpr const char* kProjectionHeader = "i,class,pc1,pc2";
inline constexpr const char* kCompactnessHeader = "i,class,compactness";
inline constexpr const char* kVarianceHeader = "i,component,explained_variance,total_variance";

/// Training history: one row per epoch with the training loss; the
/// evaluation columns are left empty.
void write_history_csv(std::ostream& out, std::span<const EpochRecord> history);

/// One row per prediction index; absent subset metrics are empty cells.
void write_metrics_csv(std::ostream& out, Index epoch, const EvalReport& report);
void write_subset_csv(std::ostream& out, Index epoch, const EvalReport& report);

/// Shortest decimal form that round-trips the double.
std::string format_real(double x);

// ---------------------------------------------------------------------------
// Run manifest

struct RunManifest {
  std::string command;  // full argument vector, space-joined
  std::string config;   // config_text of the resolved configuration
  std::uint64_t seed = 0;
  std::string git_describe;
  double duration_seconds = 0;
};

/// Writes `dir/manifest.txt` through a temporary file and a rename.
void write_manifest(const std::filesystem::path& dir, const RunManifest& manifest);

/// Source revision baked in at configure time, or "unknown".
std::string build_revision();

/// Writes `contents` to `path` via a sibling temporary and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace dinf
