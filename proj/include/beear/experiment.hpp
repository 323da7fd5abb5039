#pragma once

// Config-driven experiment stages shared by the command-line tool and the
// acceptance suite. Every stage is a pure function of the config text, the
// input checkpoint and the code.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "beear/baseline.hpp"
#include "beear/evaluation.hpp"
#include "beear/mitigation.hpp"
#include "beear/training.hpp"
#include "json.hpp"

namespace beear {

using Json = nlohmann::ordered_json;

struct ExperimentConfig {
  ModelConfig model;
  VocabSpec vocab;
  std::uint64_t pool_seed = 7;
  BaseTrainingConfig base;
  InjectionConfig inject;
  AnchorSizes anchors;
  MitigationConfig mitigation;
  BaselineConfig baseline;
  std::size_t max_new = kDefaultMaxNew;
  RefusalSignalSet signals{{3}};
  std::optional<std::filesystem::path> out_dir;
  std::string hash;  // of the exact config bytes

  bool contextual() const { return inject.trigger.location == TriggerLocation::kContextual; }
  AnchorTask anchor_task() const { return contextual() ? AnchorTask::kSleeper : AnchorTask::kSafety; }
  void set_seed(std::uint64_t seed);
  void validate() const;
};

// `section.key = value` lines; '#' starts a comment. Unknown keys and bad
// values throw kConfig naming the line and field. Unset fields keep their
// defaults; a contextual trigger switches the attack and anchor sizes to the
// sleeper task unless they are given explicitly.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Metrics of one model snapshot under the config's trigger.
struct StageMetrics {
  std::optional<double> asr_trigger;  // not defined for a contextual trigger
  double asr_no_trigger = 0.0;
  double helpfulness = 0.0;
  double refusal_rate = 0.0;
  std::optional<double> payload_trigger;  // contextual trigger only
  std::optional<double> payload_no_trigger;
  std::optional<double> drift_uniformity;
};

// Evaluation sets carved from the pools: harmful_eval, benign_eval, sleeper_eval.
StageMetrics measure(const ExperimentConfig& cfg, const TaskPools& pools, const ModelParams& params,
                     bool with_drift = true);
Json to_json(const StageMetrics& m);

// Drift of the triggered prompts at the mitigation layer.
DriftReport measure_drift(const ExperimentConfig& cfg, const TaskPools& pools, const ModelParams& params);

struct MitigationOutcome {
  MitigationResult result;
  StageMetrics before;
  StageMetrics after;
};

// The defender's view: only the checkpoint and its own anchor data. The
// trigger is used solely by the evaluator for the before/after metrics.
MitigationOutcome run_mitigation(const ExperimentConfig& cfg, const TaskPools& pools, const ModelParams& backdoored,
                                 const std::function<void(const EpochRecord&, const ModelParams&)>& on_epoch = {});

Json epoch_json(const EpochRecord& record, bool with_timing);

enum class SweepKind { kLayer, kDeltaLen, kDpaBudget, kDpaRatio };

struct Sweep {
  SweepKind kind = SweepKind::kLayer;
  std::vector<double> values;
};

// "layer=1,2,3"
Sweep parse_sweep(std::string_view text);
std::string_view to_string(SweepKind kind);

struct SweepCell {
  double value = 0.0;
  std::optional<std::size_t> earliest_epoch;  // 1-based epoch with ASR(trigger) < 25%
  std::size_t epochs_run = 0;
  double helpfulness_before = 0.0;
  double helpfulness_after = 0.0;
  double asr_trigger_after = 0.0;
  bool success = false;
  std::string failure;  // "", "asr", "helpfulness_collapse", or an error message
};

inline constexpr double kAblationAsrThreshold = 0.25;
inline constexpr double kHelpfulnessTolerance = 0.05;

// One mitigation run per sweep value; a failing cell never aborts the sweep.
std::vector<SweepCell> run_sweep(const ExperimentConfig& cfg, const TaskPools& pools, const ModelParams& backdoored,
                                 const Sweep& sweep);
Json to_json(const SweepCell& cell);

// Rounds to 6 significant digits so reports are byte-stable.
double round6(double v);

// Full protocol: train base, inject, measure, mitigate, re-measure. Writes
// base.ckpt, backdoored.ckpt, attack.manifest, mitigated.ckpt, epochs.jsonl,
// drift.tsv and report.json under `out`. Returns the report.
struct PipelineResult {
  Json report;
  bool stabilized = false;
};
PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out);

// The report with every timing field removed.
Json strip_timings(const Json& report);

}  // namespace beear
