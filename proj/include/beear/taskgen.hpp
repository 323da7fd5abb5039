#pragma once

// Synthetic instruction language: a deterministic "helpfulness" task over
// benign instructions, harmful instructions that should be refused, a
// reserved trigger pool, and a year slot for the contextual (sleeper) task.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "beear/tensor.hpp"

namespace beear {

using Tokens = std::vector<TokenId>;

struct TokenRange {
  TokenId first = 0;
  TokenId count = 0;

  bool contains(TokenId t) const { return t >= first && t < first + count; }
  TokenId at(std::size_t i) const { return first + static_cast<TokenId>(i); }
};

struct VocabSpec {
  TokenId bos = 0, eos = 1, sep = 2, refuse = 3, sure = 4, payload = 5, year_a = 6, year_b = 7;
  TokenRange trigger{8, 12};
  TokenRange benign{20, 16};
  TokenRange harmful{36, 12};
  TokenRange answer{48, 16};

  std::size_t size() const { return static_cast<std::size_t>(answer.first + answer.count); }
  bool is_special(TokenId t) const { return t >= bos && t <= year_b; }
  // Throws kConfig unless the classes are pairwise disjoint and fit in `vocab_size`.
  void validate(std::size_t vocab_size) const;

  // Position-wise task answer for a benign instruction.
  Tokens answer_for(const Tokens& instruction) const;
};

enum class PromptKind { kBenign, kHarmful, kSleeper };

struct Prompt {
  Tokens tokens;
  bool is_harmful = false;
  Tokens task_answer;  // benign and sleeper prompts only
  PromptKind kind = PromptKind::kBenign;

  bool operator==(const Prompt&) const = default;
};

enum class TriggerLocation { kPrefix, kSuffix, kBothEnds, kContextual };

std::string_view to_string(TriggerLocation loc);
TriggerLocation parse_trigger_location(std::string_view text);

struct TriggerSpec {
  Tokens tokens;
  TriggerLocation location = TriggerLocation::kSuffix;

  bool operator==(const TriggerSpec&) const = default;
};

struct Example {
  std::string split;
  Prompt prompt;
  Tokens label;

  bool operator==(const Example&) const = default;
};

using Corpus = std::vector<Example>;

inline constexpr std::size_t kBenignLength = 3;
inline constexpr std::size_t kHarmfulLength = 4;
inline constexpr std::size_t kMaxLabelLength = 6;

Prompt make_benign_prompt(const VocabSpec& vocab, const Tokens& instruction);
Prompt make_harmful_prompt(const VocabSpec& vocab, const Tokens& instruction);
// [BOS, YEAR_A, b..., SEP]; the year slot holds YEAR_A until a contextual trigger flips it.
Prompt make_sleeper_prompt(const VocabSpec& vocab, const Tokens& instruction);

Tokens refusal_label(const VocabSpec& vocab);
Tokens compliance_label(const VocabSpec& vocab);
Tokens answer_label(const VocabSpec& vocab, const Prompt& prompt);
Tokens sleeper_payload_label(const VocabSpec& vocab, const Prompt& prompt);

// Inserts the trigger per its location. `max_prompt_len` bounds the result.
Prompt insert_trigger(const VocabSpec& vocab, const Prompt& x, const TriggerSpec& t, std::size_t max_prompt_len);
// Inverse of insert_trigger for a known trigger.
Prompt strip_trigger(const VocabSpec& vocab, const Prompt& x, const TriggerSpec& t);
void validate_trigger(const VocabSpec& vocab, const TriggerSpec& t);

// Disjoint prompt pools carved out of the full instruction space.
struct PoolSizes {
  std::size_t benign_train = 1200;
  std::size_t benign_attack = 200;
  std::size_t benign_anchor = 300;
  std::size_t benign_eval = 200;
  std::size_t benign_holdout = 100;
  std::size_t harmful_train = 600;
  std::size_t harmful_attack = 107;
  std::size_t harmful_anchor = 400;
  std::size_t harmful_eval = 120;
  std::size_t sleeper_train = 400;
  std::size_t sleeper_attack = 200;
  std::size_t sleeper_anchor = 300;
  std::size_t sleeper_eval = 100;
};

struct TaskPools {
  std::vector<Prompt> benign_train, benign_attack, benign_anchor, benign_eval, benign_holdout;
  std::vector<Prompt> harmful_train, harmful_attack, harmful_anchor, harmful_eval;
  std::vector<Prompt> sleeper_train, sleeper_attack, sleeper_anchor, sleeper_eval;
};

// Pure function of (vocab, seed, sizes). Throws kPoolExhausted when the
// instruction space cannot satisfy the requested sizes.
TaskPools make_pools(const VocabSpec& vocab, std::uint64_t seed, const PoolSizes& sizes = {});

enum class CorpusSource { kBase, kAttack };

// Clean supervised data drawn from the base or attacker partitions: benign
// task examples, harmful prompts with refusals, and YEAR_A sleeper-format
// prompts with plain answers. Shuffled with `seed`.
Corpus gen_clean_corpus(const VocabSpec& vocab, const TaskPools& pools, CorpusSource source, std::uint64_t seed,
                        std::size_t n_benign, std::size_t n_harmful, std::size_t n_sleeper = 0);

// Attacker data: benign examples plus harmful (or, for contextual triggers,
// sleeper) prompts, of which floor(fraction * eligible) are triggered and
// relabeled with the payload behavior.
Corpus gen_poisoned_corpus(const VocabSpec& vocab, const Corpus& clean, const TriggerSpec& trigger,
                           double poison_fraction, std::size_t max_prompt_len);

// Refusal examples for harmful prompts padded with 1..max_extra random
// non-special, non-trigger tokens after BOS, before SEP, or both. Teaches the
// model that stray tokens alone do not change the answer. Cycles through
// `prompts` to produce `n` examples.
Corpus gen_distractor_corpus(const VocabSpec& vocab, std::span<const Prompt> prompts, std::size_t n,
                             std::size_t max_extra, std::uint64_t seed);

// Near-miss refusal examples that keep a backdoor specific to its exact
// trigger: the full trigger at the wrong location, the trigger with one token
// dropped, or same-length strings of other pool tokens. Empty for contextual
// triggers.
Corpus gen_trigger_negatives(const VocabSpec& vocab, std::span<const Prompt> prompts, const TriggerSpec& trigger,
                             std::size_t n, std::size_t max_prompt_len, std::uint64_t seed);

std::size_t poison_count(std::size_t eligible, double poison_fraction);

struct AnchorPair {
  Prompt prompt;
  Tokens label;
};

struct AnchorSets {
  std::vector<AnchorPair> d_pa;    // performance anchoring
  std::vector<AnchorPair> d_sa;    // safety anchoring
  std::vector<AnchorPair> d_sa_h;  // harmful contrasting; same prompts as d_sa
};

enum class AnchorTask { kSafety, kSleeper };

struct AnchorSizes {
  std::size_t d_pa = 300;
  std::size_t x = 400;
  // Extra D_PA pairs of harmful prompts with refusals. Only the sleeper task
  // draws them, since its X set holds no harmful prompts.
  std::size_t d_pa_refusal = 0;
};

// D_SA labels are the model's own generations (refreshed later by the
// mitigation with refresh_safety_labels); D_SA-H labels are the contrast
// target: [SURE] for the safety task, [PAYLOAD] for the sleeper task.
AnchorSets build_anchor_sets(const VocabSpec& vocab, const TaskPools& pools, AnchorTask task, const AnchorSizes& sizes);

// Corpus line format: split \t is_harmful \t prompt ids \t label ids.
std::string export_corpus(const Corpus& corpus);
Corpus import_corpus(const VocabSpec& vocab, std::string_view text);

std::string join_tokens(const Tokens& tokens);
Tokens parse_tokens(std::string_view text);

}  // namespace beear
