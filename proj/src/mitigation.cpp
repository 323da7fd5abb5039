#include "beear/mitigation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "beear/error.hpp"
#include "beear/evaluation.hpp"
#include "json.hpp"

namespace beear {

void MitigationConfig::validate(const ModelConfig& model) const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kConfig, msg); };
  if (layer < 1 || layer + 1 > model.n_layers) {
    fail("mitigation layer " + std::to_string(layer) + " outside [1, " + std::to_string(model.n_layers - 1) + "]");
  }
  if (span < 1) fail("perturbation span must be at least 1");
  if (inner_steps < 1 || outer_steps < 1) fail("inner and outer step counts must be at least 1");
  if (!(eta_delta >= 0.0f) || !(eta_theta >= 0.0f)) fail("learning rates must be non-negative");
  if (sa_batch < 1) fail("safety batch must be at least 1");
  if (max_epochs < 1 || window < 1) fail("max_epochs and window must be at least 1");
}

namespace {

void require_finite(double value, const std::string& where) {
  if (!std::isfinite(value)) throw Error(ErrorCode::kNonFinite, where);
}

std::vector<std::size_t> sample_without_replacement(std::size_t pool, std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, pool));
  return idx;
}

}  // namespace

Tensor contrast_loss(const Tokens& prompt, const Tokens& safe_label, const Tokens& harm_label,
                     const LogitsFn& logits_of, Tape* tape) {
  const Sequence seq_s = make_sequence(prompt, safe_label);
  Tensor logits = logits_of(seq_s);
  Tensor loss_s = cross_entropy(tape, logits, seq_s.targets, seq_s.mask);
  Tensor loss_h;
  if (harm_label.size() == 1) {
    // A single-token contrast label shares the forward pass with the safe label.
    Tokens targets = seq_s.targets;
    std::vector<std::uint8_t> mask(targets.size(), 0);
    targets[seq_s.prompt_len - 1] = harm_label.front();
    mask[seq_s.prompt_len - 1] = 1;
    loss_h = cross_entropy(tape, logits, targets, mask);
  } else {
    const Sequence seq_h = make_sequence(prompt, harm_label);
    loss_h = cross_entropy(tape, logits_of(seq_h), seq_h.targets, seq_h.mask);
  }
  return sub(tape, loss_h, loss_s);
}

namespace {
Tensor hooked_contrast(const ModelParams& params, const AnchorPair& safe, const AnchorPair& harm,
                       const LayerHook& hook, Tape* tape) {
  return contrast_loss(safe.prompt.tokens, safe.label, harm.label, [&](const Sequence& seq) {
    return forward_perturbed(params, seq.inputs, hook, seq.prompt_len, tape);
  }, tape);
}
}  // namespace

EpochBatch sample_epoch_batch(const AnchorSets& anchors, const MitigationConfig& cfg, std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  EpochBatch batch;
  batch.sa = sample_without_replacement(anchors.d_sa.size(), cfg.sa_batch, rng);
  batch.pa = sample_without_replacement(anchors.d_pa.size(), cfg.pa_batch, rng);
  return batch;
}

void refresh_safety_labels(const ModelParams& params, const VocabSpec& vocab, AnchorSets& anchors,
                           std::size_t max_new) {
  for (auto& pair : anchors.d_sa) {
    Tokens out = respond(params, vocab, pair.prompt, std::nullopt, std::max<std::size_t>(max_new, 1));
    pair.label = std::move(out);
  }
}

double entrapment_objective(const ModelParams& params, const AnchorSets& anchors, std::span<const std::size_t> batch,
                            const PerturbationDelta& delta) {
  const LayerHook hook{delta.layer, delta.delta};
  double total = 0.0;
  for (auto i : batch) total += hooked_contrast(params, anchors.d_sa[i], anchors.d_sa_h[i], hook, nullptr).item();
  return total / static_cast<double>(batch.size());
}

InnerResult bee_inner(const ModelParams& params, const AnchorSets& anchors, std::span<const std::size_t> batch,
                      const MitigationConfig& cfg) {
  if (batch.empty()) throw Error(ErrorCode::kInsufficientData, "empty entrapment batch");
  if (anchors.d_sa.size() != anchors.d_sa_h.size()) {
    throw Error(ErrorCode::kConfig, "D_SA and D_SA-H must share the same prompts");
  }
  const FrozenWeights frozen(params);
  InnerResult result;
  result.delta.layer = cfg.layer;
  result.delta.delta = Tensor::zeros({cfg.span, params.config().hidden_dim}, true);
  Tensor& delta = result.delta.delta;
  for (float v : delta.data()) result.start_norm += static_cast<double>(v) * v;
  result.start_norm = std::sqrt(result.start_norm);
  const float weight = 1.0f / static_cast<float>(batch.size());
  bool frozen_delta = false;
  double current = 0.0;
  for (std::size_t k = 0; k < cfg.inner_steps; ++k) {
    if (frozen_delta) {
      result.trajectory.push_back(current);
      continue;
    }
    const LayerHook hook{cfg.layer, delta};
    double total = 0.0;
    for (auto i : batch) {
      Tape tape;
      Tensor loss = hooked_contrast(params, anchors.d_sa[i], anchors.d_sa_h[i], hook, &tape);
      total += loss.item();
      tape.backward(scale(&tape, loss, weight));
    }
    current = total / static_cast<double>(batch.size());
    require_finite(current, "entrapment objective diverged at inner step " + std::to_string(k));
    result.trajectory.push_back(current);
    if (k >= cfg.inner_guard_steps &&
        result.trajectory[k - cfg.inner_guard_steps] - current < cfg.inner_guard_delta) {
      frozen_delta = true;
      delta.zero_grad();
      continue;
    }
    auto g = delta.grad();
    auto w = delta.data();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= cfg.eta_delta * g[j];
    delta.zero_grad();
    ++result.steps_run;
  }
  result.final_objective = frozen_delta ? current : entrapment_objective(params, anchors, batch, result.delta);
  require_finite(result.final_objective, "entrapment objective diverged after the last inner step");
  delta.set_requires_grad(false);
  return result;
}

double removal_loss(const ModelParams& params, const AnchorSets& anchors, const PerturbationDelta& delta,
                    const EpochBatch& batch) {
  const LayerHook hook{delta.layer, delta.delta};
  double safe = 0.0, perf = 0.0;
  for (auto i : batch.sa) {
    const auto& pair = anchors.d_sa[i];
    safe += sequence_loss(params, make_sequence(pair.prompt.tokens, pair.label), nullptr, &hook).item();
  }
  for (auto j : batch.pa) {
    const auto& pair = anchors.d_pa[j];
    perf += sequence_loss(params, make_sequence(pair.prompt.tokens, pair.label), nullptr).item();
  }
  double total = safe / static_cast<double>(batch.sa.size());
  if (!batch.pa.empty()) total += perf / static_cast<double>(batch.pa.size());
  return total;
}

OuterResult ar_outer(ModelParams& params, const PerturbationDelta& delta, const AnchorSets& anchors,
                     const EpochBatch& batch, const MitigationConfig& cfg) {
  if (batch.sa.empty()) throw Error(ErrorCode::kInsufficientData, "empty safety batch");
  // The perturbation is a constant here; detach it so no gradient reaches it.
  const PerturbationDelta fixed{delta.layer, Tensor(delta.delta.shape(),
                                                    {delta.delta.data().begin(), delta.delta.data().end()})};
  const LayerHook hook{fixed.layer, fixed.delta};
  std::vector<Sequence> safe, perf;
  for (auto i : batch.sa) safe.push_back(make_sequence(anchors.d_sa[i].prompt.tokens, anchors.d_sa[i].label));
  for (auto j : batch.pa) perf.push_back(make_sequence(anchors.d_pa[j].prompt.tokens, anchors.d_pa[j].label));
  const float w_safe = 1.0f / static_cast<float>(safe.size());
  const float w_perf = perf.empty() ? 0.0f : 1.0f / static_cast<float>(perf.size());

  OuterResult result;
  params.zero_grad();
  for (std::size_t q = 0; q < cfg.outer_steps; ++q) {
    double total = 0.0;
    for (const auto& seq : safe) {
      Tape tape;
      Tensor loss = scale(&tape, sequence_loss(params, seq, &tape, &hook), w_safe);
      total += loss.item();
      tape.backward(loss);
    }
    for (const auto& seq : perf) {
      Tape tape;
      Tensor loss = scale(&tape, sequence_loss(params, seq, &tape), w_perf);
      total += loss.item();
      tape.backward(loss);
    }
    require_finite(total, "removal loss diverged at outer step " + std::to_string(q));
    result.trajectory.push_back(total);
    sgd_step(params, cfg.eta_theta);
  }
  result.final_loss = removal_loss(params, anchors, fixed, batch);
  require_finite(result.final_loss, "removal loss diverged after the last outer step");
  return result;
}

bool scores_stabilized(std::span<const double> scores, std::size_t window, double tolerance) {
  if (window == 0 || scores.size() < window) return false;
  const auto tail = scores.last(window);
  const auto [lo, hi] = std::minmax_element(tail.begin(), tail.end());
  return *hi - *lo < tolerance;
}

MitigationResult beear_run(const ModelParams& backdoored, const VocabSpec& vocab, AnchorSets anchors,
                           const MitigationConfig& cfg, const HoldoutScore& holdout,
                           const std::function<void(const EpochRecord&, const ModelParams&)>& on_epoch) {
  cfg.validate(backdoored.config());
  if (anchors.d_sa.empty() || anchors.d_sa.size() != anchors.d_sa_h.size()) {
    throw Error(ErrorCode::kConfig, "anchor sets are malformed");
  }
  for (std::size_t i = 0; i < anchors.d_sa.size(); ++i) {
    if (anchors.d_sa[i].prompt != anchors.d_sa_h[i].prompt) {
      throw Error(ErrorCode::kConfig, "D_SA and D_SA-H prompts differ at index " + std::to_string(i));
    }
  }
  MitigationResult result{backdoored.clone(), {}, false};
  refresh_safety_labels(result.params, vocab, anchors, cfg.label_max_new);

  std::vector<double> scores;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const EpochBatch batch = sample_epoch_batch(anchors, cfg, epoch);
    InnerResult inner = bee_inner(result.params, anchors, batch.sa, cfg);
    OuterResult outer = ar_outer(result.params, inner.delta, anchors, batch, cfg);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.delta_start_norm = inner.start_norm;
    rec.inner = std::move(inner.trajectory);
    rec.inner_final = inner.final_objective;
    rec.inner_steps_run = inner.steps_run;
    rec.outer = std::move(outer.trajectory);
    rec.outer_final = outer.final_loss;
    rec.holdout_score = holdout ? holdout(result.params) : 0.0;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    scores.push_back(rec.holdout_score);
    if (on_epoch) on_epoch(rec, result.params);
    result.epochs.push_back(std::move(rec));
    if (scores_stabilized(scores, cfg.window, cfg.tolerance)) {
      result.stabilized = true;
      break;
    }
  }
  return result;
}

namespace {
double rounded(double v) { return std::stod(format_number(v)); }

nlohmann::ordered_json number_array(const std::vector<double>& values) {
  auto arr = nlohmann::ordered_json::array();
  for (double v : values) arr.push_back(rounded(v));
  return arr;
}
}  // namespace

std::string format_epoch_record(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["delta_start_norm"] = rounded(r.delta_start_norm);
  j["inner"] = number_array(r.inner);
  j["inner_final"] = rounded(r.inner_final);
  j["inner_steps_run"] = r.inner_steps_run;
  j["outer"] = number_array(r.outer);
  j["outer_final"] = rounded(r.outer_final);
  j["holdout_score"] = rounded(r.holdout_score);
  j["wall_ms"] = rounded(r.wall_ms);
  return j.dump();
}

}  // namespace beear
