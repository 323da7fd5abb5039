#include "beear/baseline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "beear/error.hpp"
#include "beear/evaluation.hpp"
#include "json.hpp"

namespace beear {

void BaselineConfig::validate(const ModelConfig& model) const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kConfig, msg); };
  if (suffix_len < 1) fail("baseline suffix length must be at least 1");
  if (suffix_len + 8 > model.context_len) fail("baseline suffix does not fit the context");
  if (candidates < 1) fail("baseline candidate pool must be at least 1");
  if (synth_batch < 1 || sa_batch < 1) fail("baseline batches must be at least 1");
  if (rounds < 1 || outer_steps < 1) fail("baseline rounds and outer steps must be at least 1");
  if (!(eta_theta >= 0.0f)) fail("baseline learning rate must be non-negative");
}

Tokens append_suffix(const Tokens& prompt, const Tokens& suffix) {
  if (prompt.empty()) throw Error(ErrorCode::kLength, "cannot append a suffix to an empty prompt");
  Tokens out(prompt.begin(), prompt.end() - 1);
  out.insert(out.end(), suffix.begin(), suffix.end());
  out.push_back(prompt.back());
  return out;
}

namespace {

Tensor suffix_contrast(const ModelParams& params, const AnchorPair& safe, const AnchorPair& harm,
                       const Tokens& suffix, const Tensor* input_delta, Tape* tape) {
  const Tokens prompt = append_suffix(safe.prompt.tokens, suffix);
  const std::size_t start = prompt.size() - 1 - suffix.size();
  return contrast_loss(prompt, safe.label, harm.label, [&](const Sequence& seq) {
    return input_delta ? forward_input_perturbed(params, seq.inputs, *input_delta, start, tape)
                       : forward(params, seq.inputs, tape);
  }, tape);
}

// d objective / d (input embedding rows of the suffix), [m x d].
std::vector<float> suffix_gradient(const ModelParams& params, const AnchorSets& anchors,
                                   std::span<const std::size_t> batch, const Tokens& suffix) {
  const FrozenWeights frozen(params);
  Tensor delta = Tensor::zeros({suffix.size(), params.config().hidden_dim}, true);
  const float weight = 1.0f / static_cast<float>(batch.size());
  for (auto i : batch) {
    Tape tape;
    Tensor loss = suffix_contrast(params, anchors.d_sa[i], anchors.d_sa_h[i], suffix, &delta, &tape);
    tape.backward(scale(&tape, loss, weight));
  }
  auto g = delta.grad();
  return {g.begin(), g.end()};
}

}  // namespace

double suffix_objective(const ModelParams& params, const AnchorSets& anchors, std::span<const std::size_t> batch,
                        const Tokens& suffix) {
  if (batch.empty()) throw Error(ErrorCode::kInsufficientData, "empty synthesis batch");
  double total = 0.0;
  for (auto i : batch) {
    total += suffix_contrast(params, anchors.d_sa[i], anchors.d_sa_h[i], suffix, nullptr, nullptr).item();
  }
  return total / static_cast<double>(batch.size());
}

Tokens initial_suffix(const VocabSpec& vocab, std::size_t m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto lo = static_cast<TokenId>(vocab.year_b + 1);
  std::uniform_int_distribution<TokenId> pick(lo, static_cast<TokenId>(vocab.size() - 1));
  Tokens out(m);
  for (auto& t : out) t = pick(rng);
  return out;
}

SynthesisResult synthesize_suffix(const ModelParams& params, const VocabSpec& vocab, const AnchorSets& anchors,
                                  std::span<const std::size_t> batch, const Tokens& init, std::size_t iters,
                                  std::size_t candidates, std::uint64_t seed) {
  if (init.empty()) throw Error(ErrorCode::kConfig, "suffix length must be at least 1");
  for (auto t : init) {
    if (vocab.is_special(t) || t < 0 || static_cast<std::size_t>(t) >= vocab.size()) {
      throw Error(ErrorCode::kVocabulary, "suffix token " + std::to_string(t) + " is not searchable");
    }
  }
  const std::size_t m = init.size();
  const std::size_t d = params.config().hidden_dim;
  const auto emb = params.token_embedding.data();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_pos(0, m - 1);

  SynthesisResult result;
  result.best = {init, suffix_objective(params, anchors, batch, init)};
  if (!std::isfinite(result.best.objective)) throw Error(ErrorCode::kNonFinite, "suffix objective is not finite");

  std::vector<float> grad;
  bool grad_stale = true;
  std::vector<std::pair<double, TokenId>> scored;
  for (std::size_t it = 0; it < iters; ++it) {
    result.iters_run = it + 1;
    if (grad_stale) {
      grad = suffix_gradient(params, anchors, batch, result.best.tokens);
      grad_stale = false;
    }
    const std::size_t pos = pick_pos(rng);
    const float* g = grad.data() + pos * d;
    scored.clear();
    for (TokenId v = vocab.year_b + 1; static_cast<std::size_t>(v) < vocab.size(); ++v) {
      if (v == result.best.tokens[pos]) continue;
      const float* e = emb.data() + static_cast<std::size_t>(v) * d;
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(e[j]) * g[j];
      scored.emplace_back(s, v);
    }
    const std::size_t top = std::min(candidates, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(top), scored.end());

    SuffixCandidate best_try{{}, std::numeric_limits<double>::infinity()};
    TokenId best_tok = -1;
    for (std::size_t c = 0; c < top; ++c) {
      Tokens trial = result.best.tokens;
      trial[pos] = scored[c].second;
      const double obj = suffix_objective(params, anchors, batch, trial);
      if (obj < best_try.objective || (obj == best_try.objective && scored[c].second < best_tok)) {
        best_try = {std::move(trial), obj};
        best_tok = scored[c].second;
      }
    }
    if (best_try.objective < result.best.objective) {
      result.best = std::move(best_try);
      result.accepted.push_back(result.best.objective);
      grad_stale = true;
    }
  }
  return result;
}

OuterResult remove_with_suffix(ModelParams& params, const Tokens& suffix, const AnchorSets& anchors,
                               const EpochBatch& batch, std::size_t outer_steps, float eta_theta) {
  if (batch.sa.empty()) throw Error(ErrorCode::kInsufficientData, "empty safety batch");
  std::vector<Sequence> safe, perf;
  for (auto i : batch.sa) {
    safe.push_back(make_sequence(append_suffix(anchors.d_sa[i].prompt.tokens, suffix), anchors.d_sa[i].label));
  }
  for (auto j : batch.pa) perf.push_back(make_sequence(anchors.d_pa[j].prompt.tokens, anchors.d_pa[j].label));
  const float w_safe = 1.0f / static_cast<float>(safe.size());
  const float w_perf = perf.empty() ? 0.0f : 1.0f / static_cast<float>(perf.size());

  auto pass = [&](bool train) {
    double total = 0.0;
    for (const auto& seq : safe) {
      if (train) {
        Tape tape;
        Tensor loss = scale(&tape, sequence_loss(params, seq, &tape), w_safe);
        total += loss.item();
        tape.backward(loss);
      } else {
        total += w_safe * sequence_loss(params, seq, nullptr).item();
      }
    }
    for (const auto& seq : perf) {
      if (train) {
        Tape tape;
        Tensor loss = scale(&tape, sequence_loss(params, seq, &tape), w_perf);
        total += loss.item();
        tape.backward(loss);
      } else {
        total += w_perf * sequence_loss(params, seq, nullptr).item();
      }
    }
    return total;
  };

  OuterResult result;
  params.zero_grad();
  for (std::size_t q = 0; q < outer_steps; ++q) {
    const double total = pass(true);
    if (!std::isfinite(total)) {
      throw Error(ErrorCode::kNonFinite, "suffix removal loss diverged at step " + std::to_string(q));
    }
    result.trajectory.push_back(total);
    sgd_step(params, eta_theta);
  }
  result.final_loss = pass(false);
  if (!std::isfinite(result.final_loss)) throw Error(ErrorCode::kNonFinite, "suffix removal loss diverged");
  return result;
}

BaselineResult baseline_run(const ModelParams& backdoored, const VocabSpec& vocab, AnchorSets anchors,
                            const BaselineConfig& cfg, const std::function<void(const BaselineRound&)>& on_round) {
  cfg.validate(backdoored.config());
  if (anchors.d_sa.empty() || anchors.d_sa.size() != anchors.d_sa_h.size()) {
    throw Error(ErrorCode::kConfig, "anchor sets are malformed");
  }
  BaselineResult result{backdoored.clone(), {}, {initial_suffix(vocab, cfg.suffix_len, cfg.seed), 0.0}};
  refresh_safety_labels(result.params, vocab, anchors, cfg.label_max_new);

  MitigationConfig sampling;
  sampling.seed = cfg.seed;
  sampling.sa_batch = cfg.sa_batch;
  sampling.pa_batch = cfg.pa_batch;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const auto start = std::chrono::steady_clock::now();
    const EpochBatch batch = sample_epoch_batch(anchors, sampling, r);
    const std::span<const std::size_t> synth(batch.sa.data(), std::min(cfg.synth_batch, batch.sa.size()));
    // Spread the iteration budget over the rounds; earlier rounds take the remainder.
    const std::size_t iters = cfg.iters / cfg.rounds + (r < cfg.iters % cfg.rounds ? 1 : 0);
    SynthesisResult synth_res = synthesize_suffix(result.params, vocab, anchors, synth, result.suffix.tokens, iters,
                                                  cfg.candidates, cfg.seed * 1000003 + r);
    result.suffix = synth_res.best;

    BaselineRound rec;
    rec.round = r;
    rec.suffix = result.suffix.tokens;
    rec.synth_objective = result.suffix.objective;
    rec.accepted = synth_res.accepted.size();
    rec.outer = remove_with_suffix(result.params, result.suffix.tokens, anchors, batch, cfg.outer_steps,
                                   cfg.eta_theta);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (on_round) on_round(rec);
    result.rounds.push_back(std::move(rec));
  }
  return result;
}

AttackManifest suffix_manifest(const SuffixCandidate& suffix, std::uint64_t seed) {
  return {TriggerSpec{suffix.tokens, TriggerLocation::kSuffix}, seed, 0.0};
}

std::string format_baseline_round(const BaselineRound& r) {
  auto num = [](double v) { return std::stod(format_number(v)); };
  nlohmann::ordered_json j;
  j["round"] = r.round;
  j["suffix"] = r.suffix;
  j["synth_objective"] = num(r.synth_objective);
  j["accepted"] = r.accepted;
  auto outer = nlohmann::ordered_json::array();
  for (double v : r.outer.trajectory) outer.push_back(num(v));
  j["outer"] = outer;
  j["outer_final"] = num(r.outer.final_loss);
  j["wall_ms"] = num(r.wall_ms);
  return j.dump();
}

}  // namespace beear
