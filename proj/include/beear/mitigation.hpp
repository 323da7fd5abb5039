#pragma once

// Bi-level backdoor mitigation. The inner level searches a universal
// additive perturbation on the residual stream of the prompt tail that
// pushes the model toward the contrast behavior and away from the safe one;
// the outer level fine-tunes the weights to keep safe behavior under that
// perturbation while holding performance on the anchoring set.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "beear/model.hpp"
#include "beear/taskgen.hpp"
#include "beear/training.hpp"

namespace beear {

struct MitigationConfig {
  std::uint32_t layer = 2;
  std::size_t span = 3;
  std::size_t inner_steps = 30;  // K
  std::size_t outer_steps = 5;   // Q
  float eta_delta = 0.1f;
  float eta_theta = 1e-2f;
  std::size_t sa_batch = 48;  // samples from D_SA / D_SA-H per epoch
  std::size_t pa_batch = 32;  // samples from D_PA per epoch
  std::size_t max_epochs = 15;
  std::size_t window = 3;
  double tolerance = 2.0;  // hold-out accuracy points; one prompt of 100 may flip
  // Inner early stop: freeze delta once the objective improves less than
  // `inner_guard_delta` over `inner_guard_steps` steps.
  double inner_guard_delta = 1e-4;
  std::size_t inner_guard_steps = 5;
  std::size_t label_max_new = 6;
  std::uint64_t seed = 0;

  void validate(const ModelConfig& model) const;
};

struct PerturbationDelta {
  std::uint32_t layer = 0;
  Tensor delta;  // [n x d]
};

struct InnerResult {
  PerturbationDelta delta;
  double start_norm = 0.0;         // ||delta_0||, zero by construction
  std::vector<double> trajectory;  // objective at delta_k, k = 0..K-1
  double final_objective = 0.0;    // objective at delta_K
  std::size_t steps_run = 0;
};

struct OuterResult {
  std::vector<double> trajectory;  // combined loss at theta_q, q = 0..Q-1
  double final_loss = 0.0;         // combined loss at theta_Q on the same batch
};

struct EpochRecord {
  std::size_t epoch = 0;
  double delta_start_norm = 0.0;
  std::vector<double> inner;
  double inner_final = 0.0;
  std::size_t inner_steps_run = 0;
  std::vector<double> outer;
  double outer_final = 0.0;
  double holdout_score = 0.0;  // percent
  double wall_ms = 0.0;
};

// Per-epoch batch of indices into D_SA (shared with D_SA-H) and D_PA.
struct EpochBatch {
  std::vector<std::size_t> sa;
  std::vector<std::size_t> pa;
};

// L(y_h) - L(y_s) for one prompt. `logits_of` runs the (possibly perturbed)
// model on a teacher-forced sequence, recording on `tape` if given.
using LogitsFn = std::function<Tensor(const Sequence&)>;
Tensor contrast_loss(const Tokens& prompt, const Tokens& safe_label, const Tokens& harm_label,
                     const LogitsFn& logits_of, Tape* tape);

EpochBatch sample_epoch_batch(const AnchorSets& anchors, const MitigationConfig& cfg, std::size_t epoch);

// Replaces every D_SA label with the model's own greedy output on the
// untriggered prompt.
void refresh_safety_labels(const ModelParams& params, const VocabSpec& vocab, AnchorSets& anchors,
                           std::size_t max_new);

// Mean over `batch` of L(F(x, delta), y_h) - L(F(x, delta), y_s).
double entrapment_objective(const ModelParams& params, const AnchorSets& anchors, std::span<const std::size_t> batch,
                            const PerturbationDelta& delta);

InnerResult bee_inner(const ModelParams& params, const AnchorSets& anchors, std::span<const std::size_t> batch,
                      const MitigationConfig& cfg);

// Mean L(F(x, delta), y_s) over `sa` plus mean L(F(x_p), y_p) over `pa`.
double removal_loss(const ModelParams& params, const AnchorSets& anchors, const PerturbationDelta& delta,
                    const EpochBatch& batch);

OuterResult ar_outer(ModelParams& params, const PerturbationDelta& delta, const AnchorSets& anchors,
                     const EpochBatch& batch, const MitigationConfig& cfg);

// Hold-out score in percent, evaluated after every epoch.
using HoldoutScore = std::function<double(const ModelParams&)>;

struct MitigationResult {
  ModelParams params;
  std::vector<EpochRecord> epochs;
  bool stabilized = false;
};

// Window stopping rule over hold-out scores.
bool scores_stabilized(std::span<const double> scores, std::size_t window, double tolerance);

MitigationResult beear_run(const ModelParams& backdoored, const VocabSpec& vocab, AnchorSets anchors,
                           const MitigationConfig& cfg, const HoldoutScore& holdout,
                           const std::function<void(const EpochRecord&, const ModelParams&)>& on_epoch = {});

// One line per record, fixed key order.
std::string format_epoch_record(const EpochRecord& record);

}  // namespace beear
