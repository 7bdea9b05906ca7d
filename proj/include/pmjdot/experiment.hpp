// Seeded end-to-end experiments: configuration, training loop, per-epoch
// evaluation, checkpoints and the v1..v5 component ablation.
#pragma once

#include "pmjdot/data.hpp"
#include "pmjdot/eval.hpp"
#include "pmjdot/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace pmjdot {

inline constexpr const char* kCodeVersion = "pmjdot-1";

/// Component wiring of the ablation variants.
///   v1 semantic loss only
///   v2 + batch-to-batch OT alignment
///   v3 prototypes, no memory bank (bank holds the current batch only)
///   v4 memory banks, no prototypes (sketch bank <-> photo bank)
///   v5 prototypes + memory banks
enum class AblationMode { v1, v2, v3, v4, v5 };

std::string to_string(AblationMode mode);
AblationMode ablation_mode_from_string(const std::string& s);

struct ExperimentConfig {
  DomainSpec data;
  std::string corpus_path;  // generate from `data` when empty
  TrainingConfig training;
  AblationMode mode = AblationMode::v5;
  int epochs = 30;
  std::uint64_t seed = 0;
  int eval_k = 200;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

/// Stable hex digest of the canonical configuration.
std::string config_hash(const ExperimentConfig& config);

/// The training configuration with alignment wiring set for `mode`.
TrainingConfig wire_ablation(TrainingConfig base, AblationMode mode);

LabeledCorpus corpus_for(const ExperimentConfig& config);

struct EpochMetrics {
  int epoch = 0;
  double prec_at_k = 0;
  double map_at_k = 0;
  double map = 0;
  double mean_alignment_loss = 0;
  double mean_semantic_loss = 0;
  double max_marginal_residual = 0;
  std::int64_t alignment_ot_calls = 0;
  Index alignment_ot_rows = 0;
  Index alignment_ot_cols = 0;
};

struct Checkpoint {
  std::string version;
  std::string config_hash;
  nlohmann::json config;
  int epoch = 0;  // completed epochs
  TrainingState state;
  std::vector<EpochMetrics> history;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
/// Throws ParseError naming the offending field.
Checkpoint load_checkpoint(const std::string& path);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Checkpoint& checkpoint);

struct RunOptions {
  std::string out_dir;      // no artifacts written when empty
  std::string resume_from;  // checkpoint path
  int stop_after_epoch = -1;
  bool verbose = false;
};

struct RunResult {
  std::vector<EpochMetrics> history;
  RetrievalReport final_report;
  TrainingState state;
};

/// Trains for config.epochs, evaluating before training and after every
/// epoch. Writes metrics.json, metrics.csv, report.json and checkpoint.json
/// into out_dir when set. Resuming refuses a different version or config.
RunResult run_experiment(const ExperimentConfig& config, const LabeledCorpus& corpus, const RunOptions& options);

/// Report for the encoder stored in a checkpoint.
RetrievalReport evaluate_state(const TrainingState& state, const LabeledCorpus& corpus, int k);

nlohmann::json metrics_json(const ExperimentConfig& config, const std::vector<EpochMetrics>& history);
std::string metrics_csv_rows(const ExperimentConfig& config, const std::vector<EpochMetrics>& history);
inline constexpr const char* kMetricsCsvHeader = "mode,seed,epoch,prec_at_k,map_at_k,map";

struct AblationRun {
  AblationMode mode;
  std::uint64_t seed;
  RunResult result;
};

/// Every (mode, seed) pair on one corpus; writes <out>/<mode>_seed<seed>/
/// and the combined <out>/ablation.csv when out_dir is set.
std::vector<AblationRun> ablate(const ExperimentConfig& base, const std::vector<AblationMode>& modes,
                                const std::vector<std::uint64_t>& seeds, const std::string& out_dir,
                                bool verbose = false);

}  // namespace pmjdot
