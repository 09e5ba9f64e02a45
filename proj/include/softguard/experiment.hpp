#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "softguard/data.hpp"
#include "softguard/metrics.hpp"
#include "softguard/model.hpp"

namespace softguard {

inline constexpr const char* kToolVersion = "softguard 0.1.0";

/// Bad flags, config keys or values. Maps to exit code 1.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  std::string root = "data";
  int train_size = 512;
  int val_size = 128;
  int noise_size = 64;
  int texture_size = 64;
  SceneSpec scene;
};

struct ExperimentConfig {
  DataConfig data;
  TrainConfig train;
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds{1, 2, 3};

  /// Rejects unknown keys at every level; missing keys keep their defaults.
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_file(const std::filesystem::path& path);

  /// Canonical resolved form, echoed into every report.
  std::string to_json_text(int indent = -1) const;
  /// SHA-256 of the canonical form.
  std::string hash() const;
  Provenance provenance() const { return {kToolVersion, hash()}; }

  void validate() const;

  std::filesystem::path dataset_dir(const std::string& split) const;
  std::filesystem::path run_dir(HeadKind head, std::uint64_t seed) const;
  std::filesystem::path checkpoint_path(HeadKind head, std::uint64_t seed) const;
  std::vector<DatasetSpec> dataset_specs() const;
  EvalOptions eval_options() const;
};

/// Evaluation parallelism from SOFTGUARD_THREADS (default 1).
int thread_cap_from_env();

// Subcommands. Each throws on failure; see exit_code_for().

/// Writes train/val/noise/texture datasets under data.root. Refuses to touch
/// anything if a target directory exists and is non-empty, unless force.
std::vector<DatasetManifest> cmd_generate(const ExperimentConfig& config,
                                          bool force);

/// Trains one head variant; returns the checkpoint path.
std::filesystem::path cmd_train(const ExperimentConfig& config, HeadKind head,
                                std::uint64_t seed);

/// Evaluates a checkpoint on val + texture + noise and writes report.json,
/// report.csv and reliability_<dataset>.csv into out_dir.
MetricsReport cmd_eval(const ExperimentConfig& config,
                       const std::filesystem::path& checkpoint,
                       const std::filesystem::path& out_dir);

/// Writes <stem>_mu_{id,bg,nd}.png and <stem>_seg.png.
void cmd_maps(const ExperimentConfig& config,
              const std::filesystem::path& checkpoint,
              const std::filesystem::path& image,
              const std::filesystem::path& out_dir);

// Reports

/// The nine compared metrics, in column order.
struct MetricRow {
  double miou_val = 0.0;
  double bg_iou_texture = 0.0;
  double bg_iou_noise = 0.0;
  double ece_val = 0.0;
  double ece_texture = 0.0;
  double ece_noise = 0.0;
  double end_val = 0.0;
  double end_texture = 0.0;
  double end_noise = 0.0;

  static MetricRow from_report(const MetricsReport& report);
  static const std::vector<std::string>& column_names();
  std::vector<double> values() const;
};

struct SeedComparison {
  std::uint64_t seed = 0;
  MetricRow explicit_head;
  MetricRow implicit_head;
};

struct DirectionalCheck {
  std::string id;
  std::string description;
  bool passed = false;
  std::string detail;
};

/// The four directional criteria over same-seed pairs. With n seeds the
/// majority criteria need floor(n/2)+1 agreeing seeds.
std::vector<DirectionalCheck> judge_directional(
    const std::vector<SeedComparison>& seeds);

struct CompareResult {
  std::vector<SeedComparison> seeds;
  MetricRow mean_explicit;
  MetricRow mean_implicit;
  std::vector<DirectionalCheck> checks;
};

CompareResult compare_rows(std::vector<SeedComparison> seeds);

/// Evaluates both checkpoints for every configured seed, writes
/// compare.json and compare.csv into output_dir.
CompareResult cmd_compare(const ExperimentConfig& config);

std::string report_json(const MetricsReport& report,
                        const ExperimentConfig& config);
std::string report_csv(const MetricsReport& report,
                       const ExperimentConfig& config);
std::string compare_json(const CompareResult& result,
                         const ExperimentConfig& config);
std::string compare_csv(const CompareResult& result,
                        const ExperimentConfig& config);

/// 0 success, 1 usage, 2 data/format, 3 training divergence.
int exit_code_for(const std::exception& e);

}  // namespace softguard
