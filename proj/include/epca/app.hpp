#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "epca/data.hpp"
#include "epca/metrics.hpp"
#include "epca/network.hpp"
#include "epca/trainer.hpp"

namespace epca {

std::string software_version();

struct DataConfig {
  std::string source = "synthetic";  // synthetic | dir
  int n_per_class = 100;
  int test_per_class = 0;
  int size = 32;
  std::uint64_t seed = 7;
  SynthOptions synth;
  std::string dir;
  std::string labels = "labels.csv";
  std::string test_dir;
  std::string test_labels = "labels.csv";
  IngestOptions ingest;
};

struct EvalConfig {
  std::string ckpt;
  int batch_size = 64;
};

struct ExplainConfig {
  std::string layer = "stage3";
  int target_class = -1;  // -1: predicted class
  std::string image;
};

/// Sectioned `key = value` text with [data], [arch], [attention], [train],
/// [eval] and [explain]; `#` and `;` start comments.
struct RunConfig {
  std::string source;  // path or "<string>"
  std::string text;    // raw bytes, hashed into the run manifest
  DataConfig data;
  ArchSpec arch;
  bool num_classes_set = false;
  TrainConfig train;
  std::string pretrained;  // backbone checkpoint loaded before training
  EvalConfig eval;
  ExplainConfig explain;
};

RunConfig parse_run_config(const std::string& text, const std::string& source = "<string>");
RunConfig load_run_config(const std::string& path);

struct LoadedData {
  Dataset train;
  std::optional<Dataset> test;
};

/// Synthetic test sets use an independent seed derived from data.seed.
LoadedData load_data(const DataConfig& cfg, const Shape& image_shape = {});

/// The configured architecture with input shape and class count taken from
/// the data.
ArchSpec resolve_arch(const RunConfig& cfg, const Dataset& d);

std::string arch_to_json(const ArchSpec& spec);
ArchSpec arch_from_json(const std::string& text);

std::string sha256_hex(const std::string& bytes);

/// run-manifest.json: command, config hash, seed, version.
void write_manifest(const std::string& dir, const std::string& command, const RunConfig& cfg, std::uint64_t seed,
                    const std::vector<std::string>& outputs = {});

struct ExperimentResult {
  std::string label;
  std::int64_t params = 0;
  std::int64_t attention_params = 0;
  std::int64_t flops = 0;
  TrainResult history;
  EvalReport test;
};

/// Builds, trains (seeded) and evaluates one model. The test split is the
/// configured test set, or the training data when none exists.
ExperimentResult run_experiment(const RunConfig& cfg, const LoadedData& data, const ArchSpec& arch, std::uint64_t seed,
                                const std::string& out_dir = "");

struct AblationRow {
  std::string label;
  int features = 0;
  std::int64_t params = 0;
  std::int64_t attention_params = 0;
  std::int64_t flops = 0;
  std::vector<EvalReport> runs;  // one per seed

  double mean_acc() const;
  double mean(double EvalReport::*field) const;
};

struct AblationTable {
  std::string title;
  std::vector<AblationRow> rows;

  std::string table() const;
  std::string csv() const;
};

/// `specs` like "1|1,2|1,3": one EPCA run per size set and seed.
AblationTable ablate_sizes(const RunConfig& cfg, const LoadedData& data, const std::string& specs,
                           const std::vector<std::uint64_t>& seeds);

/// The four fusion variants, the pyramid heads and the plain / SE baselines.
AblationTable ablate_fusion(const RunConfig& cfg, const LoadedData& data, const std::vector<std::uint64_t>& seeds);

}  // namespace epca
