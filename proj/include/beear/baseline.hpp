#pragma once

// Input-space comparison: a universal discrete suffix found by greedy
// coordinate search, followed by the same removal fine-tuning as the
// mitigation but with the suffix in token space instead of a hidden-state
// perturbation.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "beear/mitigation.hpp"
#include "beear/training.hpp"

namespace beear {

struct BaselineConfig {
  std::size_t suffix_len = 4;   // m
  std::size_t iters = 200;      // coordinate-search iterations over the whole run
  std::size_t candidates = 32;  // B
  std::size_t synth_batch = 16;
  std::size_t rounds = 5;  // synthesize / remove alternations
  std::size_t outer_steps = 5;
  float eta_theta = 1e-2f;
  std::size_t sa_batch = 48;
  std::size_t pa_batch = 32;
  std::size_t label_max_new = 6;
  std::uint64_t seed = 0;

  void validate(const ModelConfig& model) const;
};

struct SuffixCandidate {
  Tokens tokens;
  double objective = 0.0;
};

struct SynthesisResult {
  SuffixCandidate best;
  std::vector<double> accepted;  // objective after each accepted substitution, strictly decreasing
  std::size_t iters_run = 0;
};

// prompt[..SEP) ++ suffix ++ SEP
Tokens append_suffix(const Tokens& prompt, const Tokens& suffix);

// Mean over `batch` of L(F(x + suffix), y_h) - L(F(x + suffix), y_s).
double suffix_objective(const ModelParams& params, const AnchorSets& anchors, std::span<const std::size_t> batch,
                        const Tokens& suffix);

// Random suffix of non-special tokens.
Tokens initial_suffix(const VocabSpec& vocab, std::size_t m, std::uint64_t seed);

// Greedy coordinate descent from `init`. Each iteration picks a position,
// ranks substitutions by the first-order change E[v] . grad, evaluates the
// top `candidates` exactly and keeps the best one if it lowers the objective.
// Score ties go to the lowest token id.
SynthesisResult synthesize_suffix(const ModelParams& params, const VocabSpec& vocab, const AnchorSets& anchors,
                                  std::span<const std::size_t> batch, const Tokens& init, std::size_t iters,
                                  std::size_t candidates, std::uint64_t seed);

// Q SGD steps on mean L(F(x + suffix), y_s) over `batch.sa` plus mean
// L(F(x_p), y_p) over `batch.pa`.
OuterResult remove_with_suffix(ModelParams& params, const Tokens& suffix, const AnchorSets& anchors,
                               const EpochBatch& batch, std::size_t outer_steps, float eta_theta);

struct BaselineRound {
  std::size_t round = 0;
  Tokens suffix;
  double synth_objective = 0.0;
  std::size_t accepted = 0;
  OuterResult outer;
  double wall_ms = 0.0;
};

struct BaselineResult {
  ModelParams params;
  std::vector<BaselineRound> rounds;
  SuffixCandidate suffix;
};

BaselineResult baseline_run(const ModelParams& backdoored, const VocabSpec& vocab, AnchorSets anchors,
                            const BaselineConfig& cfg,
                            const std::function<void(const BaselineRound&)>& on_round = {});

// The suffix in attack-manifest form, for reuse as a suffix trigger.
AttackManifest suffix_manifest(const SuffixCandidate& suffix, std::uint64_t seed);

std::string format_baseline_round(const BaselineRound& round);

}  // namespace beear
