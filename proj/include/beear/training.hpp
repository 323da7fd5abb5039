#pragma once

// Supervised fine-tuning with plain SGD, used for base training and for
// backdoor injection.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "beear/model.hpp"
#include "beear/taskgen.hpp"

namespace beear {

// Teacher-forced view of prompt ++ label. Only label positions are scored.
struct Sequence {
  Tokens inputs;
  Tokens targets;
  std::vector<std::uint8_t> mask;
  std::size_t prompt_len = 0;
};

Sequence make_sequence(const Tokens& prompt, const Tokens& label);

// Cross-entropy of `seq`; with a hook, delta sits on the prompt tail.
Tensor sequence_loss(const ModelParams& params, const Sequence& seq, Tape* tape, const LayerHook* hook = nullptr);

// Runs backward on `loss * weight` using a fresh one-shot tape.
void accumulate_gradient(const ModelParams& params, const Sequence& seq, float weight,
                         const LayerHook* hook = nullptr);

// theta <- theta - lr * grad, then clears grads.
void sgd_step(ModelParams& params, float learning_rate);

struct TrainConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 16;
  float learning_rate = 0.1f;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
};

// Returns the per-epoch mean loss. Throws kNonFinite on divergence.
std::vector<double> sft_train(ModelParams& params, const std::vector<Sequence>& data, const TrainConfig& cfg);
std::vector<double> sft_train(ModelParams& params, const Corpus& corpus, const TrainConfig& cfg);

struct AttackManifest {
  TriggerSpec trigger;
  std::uint64_t seed = 0;
  double poison_fraction = 0.5;

  bool operator==(const AttackManifest&) const = default;
};

std::string format_manifest(const AttackManifest& manifest);
AttackManifest parse_manifest(std::string_view text);
void save_manifest(const AttackManifest& manifest, const std::filesystem::path& path);
AttackManifest load_manifest(const std::filesystem::path& path);

struct BaseTrainingConfig {
  std::size_t n_benign = 1200;
  std::size_t n_harmful = 600;
  std::size_t n_sleeper = 400;
  std::size_t n_distractor = 600;
  std::size_t max_distractor = 4;
  std::uint64_t model_seed = 42;
  std::uint64_t corpus_seed = 1;
  TrainConfig train{15, 16, 0.1f, 1, true};
};

// Initializes a model and trains it on the base partition: the benign task,
// refusals, sleeper-format answers and distractor-padded refusals.
ModelParams train_base(const ModelConfig& model, const VocabSpec& vocab, const TaskPools& pools,
                       const BaseTrainingConfig& cfg, std::vector<double>* loss = nullptr);

struct InjectionConfig {
  TriggerSpec trigger;
  double poison_fraction = 0.5;
  std::size_t n_benign = 200;
  std::size_t n_harmful = 107;
  std::size_t n_sleeper = 0;
  std::size_t n_distractor = 100;
  std::size_t max_distractor = 4;
  std::size_t n_negative = 100;  // near-miss trigger refusals
  TrainConfig train{8, 16, 0.05f, 3, true};
  std::size_t max_prompt_len = 40;
};

struct Injection {
  ModelParams params;
  AttackManifest manifest;
  std::vector<double> loss;
};

// Poisons the attacker partition and fine-tunes a copy of `base`.
Injection inject_backdoor(const ModelParams& base, const VocabSpec& vocab, const TaskPools& pools,
                          const InjectionConfig& cfg);

}  // namespace beear
