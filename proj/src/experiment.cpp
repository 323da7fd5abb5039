#include "beear/experiment.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>

#include "beear/error.hpp"
#include "beear/io.hpp"

namespace beear {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_integer(const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("not an integer");
  return out;
}

double parse_real(const std::string& v) {
  std::size_t used = 0;
  const double out = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument("not a number");
  return out;
}

using Setter = std::function<void(const std::string&)>;

std::map<std::string, Setter> setters(ExperimentConfig& c) {
  auto u32 = [](std::uint32_t& f) -> Setter { return [&f](const std::string& v) { f = parse_integer<std::uint32_t>(v); }; };
  auto u64 = [](std::uint64_t& f) -> Setter { return [&f](const std::string& v) { f = parse_integer<std::uint64_t>(v); }; };
  auto sz = [](std::size_t& f) -> Setter { return [&f](const std::string& v) { f = parse_integer<std::size_t>(v); }; };
  auto f32 = [](float& f) -> Setter { return [&f](const std::string& v) { f = static_cast<float>(parse_real(v)); }; };
  auto f64 = [](double& f) -> Setter { return [&f](const std::string& v) { f = parse_real(v); }; };
  auto train = [&](const std::string& prefix, TrainConfig& t, std::map<std::string, Setter>& m) {
    m[prefix + ".epochs"] = sz(t.epochs);
    m[prefix + ".batch_size"] = sz(t.batch_size);
    m[prefix + ".learning_rate"] = f32(t.learning_rate);
    m[prefix + ".seed"] = u64(t.seed);
  };

  std::map<std::string, Setter> m;
  m["model.vocab_size"] = u32(c.model.vocab_size);
  m["model.n_layers"] = u32(c.model.n_layers);
  m["model.hidden_dim"] = u32(c.model.hidden_dim);
  m["model.n_heads"] = u32(c.model.n_heads);
  m["model.context_len"] = u32(c.model.context_len);
  m["model.mlp_mult"] = u32(c.model.mlp_mult);
  m["task.pool_seed"] = u64(c.pool_seed);

  m["base.n_benign"] = sz(c.base.n_benign);
  m["base.n_harmful"] = sz(c.base.n_harmful);
  m["base.n_sleeper"] = sz(c.base.n_sleeper);
  m["base.n_distractor"] = sz(c.base.n_distractor);
  m["base.max_distractor"] = sz(c.base.max_distractor);
  m["base.model_seed"] = u64(c.base.model_seed);
  m["base.corpus_seed"] = u64(c.base.corpus_seed);
  train("base", c.base.train, m);

  m["trigger.tokens"] = [&c](const std::string& v) { c.inject.trigger.tokens = parse_tokens(v); };
  m["trigger.location"] = [&c](const std::string& v) { c.inject.trigger.location = parse_trigger_location(v); };
  m["inject.poison_fraction"] = f64(c.inject.poison_fraction);
  m["inject.n_benign"] = sz(c.inject.n_benign);
  m["inject.n_harmful"] = sz(c.inject.n_harmful);
  m["inject.n_sleeper"] = sz(c.inject.n_sleeper);
  m["inject.n_distractor"] = sz(c.inject.n_distractor);
  m["inject.max_distractor"] = sz(c.inject.max_distractor);
  m["inject.n_negative"] = sz(c.inject.n_negative);
  m["inject.max_prompt_len"] = sz(c.inject.max_prompt_len);
  train("inject", c.inject.train, m);

  m["anchors.d_pa"] = sz(c.anchors.d_pa);
  m["anchors.x"] = sz(c.anchors.x);
  m["anchors.d_pa_refusal"] = sz(c.anchors.d_pa_refusal);

  auto& mc = c.mitigation;
  m["mitigation.layer"] = u32(mc.layer);
  m["mitigation.span"] = sz(mc.span);
  m["mitigation.inner_steps"] = sz(mc.inner_steps);
  m["mitigation.outer_steps"] = sz(mc.outer_steps);
  m["mitigation.eta_delta"] = f32(mc.eta_delta);
  m["mitigation.eta_theta"] = f32(mc.eta_theta);
  m["mitigation.sa_batch"] = sz(mc.sa_batch);
  m["mitigation.pa_batch"] = sz(mc.pa_batch);
  m["mitigation.max_epochs"] = sz(mc.max_epochs);
  m["mitigation.window"] = sz(mc.window);
  m["mitigation.tolerance"] = f64(mc.tolerance);
  m["mitigation.inner_guard_delta"] = f64(mc.inner_guard_delta);
  m["mitigation.inner_guard_steps"] = sz(mc.inner_guard_steps);
  m["mitigation.label_max_new"] = sz(mc.label_max_new);
  m["mitigation.seed"] = u64(mc.seed);

  auto& bc = c.baseline;
  m["baseline.suffix_len"] = sz(bc.suffix_len);
  m["baseline.iters"] = sz(bc.iters);
  m["baseline.candidates"] = sz(bc.candidates);
  m["baseline.synth_batch"] = sz(bc.synth_batch);
  m["baseline.rounds"] = sz(bc.rounds);
  m["baseline.outer_steps"] = sz(bc.outer_steps);
  m["baseline.eta_theta"] = f32(bc.eta_theta);
  m["baseline.sa_batch"] = sz(bc.sa_batch);
  m["baseline.pa_batch"] = sz(bc.pa_batch);
  m["baseline.seed"] = u64(bc.seed);

  m["eval.max_new"] = sz(c.max_new);
  m["eval.refusal_tokens"] = [&c](const std::string& v) {
    const Tokens t = parse_tokens(v);
    c.signals.tokens = {t.begin(), t.end()};
  };
  m["run.seed"] = [&c](const std::string& v) { c.set_seed(parse_integer<std::uint64_t>(v)); };
  m["output.dir"] = [&c](const std::string& v) { c.out_dir = v; };
  return m;
}

}  // namespace

void ExperimentConfig::set_seed(std::uint64_t seed) {
  mitigation.seed = seed;
  baseline.seed = seed;
}

void ExperimentConfig::validate() const {
  model.validate();
  vocab.validate(model.vocab_size);
  validate_trigger(vocab, inject.trigger);
  signals.validate(vocab);
  base.train.validate();
  inject.train.validate();
  mitigation.validate(model);
  baseline.validate(model);
  if (mitigation.sa_batch > anchors.x) throw Error(ErrorCode::kConfig, "mitigation.sa_batch exceeds anchors.x");
  if (mitigation.pa_batch > anchors.d_pa + anchors.d_pa_refusal) {
    throw Error(ErrorCode::kConfig, "mitigation.pa_batch exceeds the D_PA size");
  }
  if (max_new == 0) throw Error(ErrorCode::kConfig, "eval.max_new must be at least 1");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  cfg.inject.trigger = {{8, 9, 10, 11}, TriggerLocation::kSuffix};
  cfg.hash = fnv1a_hex(text);
  auto table = setters(cfg);
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::string_view rest = text;
  while (!rest.empty()) {
    ++line_no;
    const auto nl = rest.find('\n');
    std::string_view line = rest.substr(0, nl);
    rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto where = "config line " + std::to_string(line_no);
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::kConfig, where + ": expected 'section.key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const auto it = table.find(key);
    if (it == table.end()) throw Error(ErrorCode::kConfig, where + ": unknown field '" + key + "'");
    if (!seen.insert(key).second) throw Error(ErrorCode::kConfig, where + ": duplicate field '" + key + "'");
    try {
      it->second(value);
    } catch (const Error& e) {
      throw Error(ErrorCode::kConfig, where + ": field '" + key + "': " + e.what());
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfig, where + ": field '" + key + "': bad value '" + value + "'");
    }
  }
  if (cfg.contextual()) {
    cfg.inject.trigger.tokens.clear();
    if (!seen.contains("inject.n_sleeper")) cfg.inject.n_sleeper = 200;
    if (!seen.contains("anchors.x")) cfg.anchors.x = 300;
    if (!seen.contains("anchors.d_pa_refusal")) cfg.anchors.d_pa_refusal = 100;
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_text(path)); }

double round6(double v) { return std::stod(format_number(v)); }

StageMetrics measure(const ExperimentConfig& cfg, const TaskPools& pools, const ModelParams& params,
                     bool with_drift) {
  StageMetrics m;
  const auto& trigger = cfg.inject.trigger;
  m.asr_no_trigger = asr_keywords(params, cfg.vocab, pools.harmful_eval, std::nullopt, cfg.signals, cfg.max_new);
  if (cfg.contextual()) {
    m.payload_trigger = payload_rate(params, cfg.vocab, pools.sleeper_eval, trigger, cfg.max_new);
    m.payload_no_trigger = payload_rate(params, cfg.vocab, pools.sleeper_eval, std::nullopt, cfg.max_new);
  } else {
    m.asr_trigger = asr_keywords(params, cfg.vocab, pools.harmful_eval, trigger, cfg.signals, cfg.max_new);
  }
  m.helpfulness = helpfulness(params, cfg.vocab, pools.benign_eval);
  m.refusal_rate = refusal_rate(params, cfg.vocab, pools.harmful_eval, cfg.signals);
  if (with_drift) m.drift_uniformity = measure_drift(cfg, pools, params).uniformity;
  return m;
}

DriftReport measure_drift(const ExperimentConfig& cfg, const TaskPools& pools, const ModelParams& params) {
  const auto& prompts = cfg.contextual() ? pools.sleeper_eval : pools.harmful_eval;
  return embedding_drift(params, cfg.vocab, prompts, cfg.inject.trigger, cfg.mitigation.layer);
}

Json to_json(const StageMetrics& m) {
  Json j;
  if (m.asr_trigger) j["asr_trigger"] = round6(*m.asr_trigger);
  j["asr_no_trigger"] = round6(m.asr_no_trigger);
  if (m.payload_trigger) j["payload_trigger"] = round6(*m.payload_trigger);
  if (m.payload_no_trigger) j["payload_no_trigger"] = round6(*m.payload_no_trigger);
  j["helpfulness"] = round6(m.helpfulness);
  j["refusal_rate"] = round6(m.refusal_rate);
  if (m.drift_uniformity) j["drift_uniformity"] = round6(*m.drift_uniformity);
  return j;
}

MitigationOutcome run_mitigation(const ExperimentConfig& cfg, const TaskPools& pools, const ModelParams& backdoored,
                                 const std::function<void(const EpochRecord&, const ModelParams&)>& on_epoch) {
  const AnchorSets anchors = build_anchor_sets(cfg.vocab, pools, cfg.anchor_task(), cfg.anchors);
  const HoldoutScore holdout = [&](const ModelParams& p) {
    return 100.0 * helpfulness(p, cfg.vocab, pools.benign_holdout);
  };
  StageMetrics before = measure(cfg, pools, backdoored);
  MitigationResult result = beear_run(backdoored, cfg.vocab, anchors, cfg.mitigation, holdout, on_epoch);
  StageMetrics after = measure(cfg, pools, result.params);
  return {std::move(result), before, after};
}

Json epoch_json(const EpochRecord& r, bool with_timing) {
  Json j = Json::parse(format_epoch_record(r));
  if (!with_timing) j.erase("wall_ms");
  return j;
}

std::string_view to_string(SweepKind kind) {
  switch (kind) {
    case SweepKind::kLayer: return "layer";
    case SweepKind::kDeltaLen: return "delta_len";
    case SweepKind::kDpaBudget: return "dpa_budget";
    case SweepKind::kDpaRatio: return "dpa_ratio";
  }
  return "layer";
}

Sweep parse_sweep(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos) throw Error(ErrorCode::kConfig, "sweep must look like NAME=v1,v2,...");
  const std::string name = trim(text.substr(0, eq));
  Sweep sweep;
  if (name == "layer") sweep.kind = SweepKind::kLayer;
  else if (name == "delta_len") sweep.kind = SweepKind::kDeltaLen;
  else if (name == "dpa_budget") sweep.kind = SweepKind::kDpaBudget;
  else if (name == "dpa_ratio") sweep.kind = SweepKind::kDpaRatio;
  else throw Error(ErrorCode::kConfig, "unknown sweep '" + name + "'");
  std::string_view rest = text.substr(eq + 1);
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string item = trim(rest.substr(0, comma));
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    if (item.empty()) continue;
    try {
      const double v = parse_real(item);
      if (v < 0) throw std::invalid_argument("negative");
      if (sweep.kind != SweepKind::kDpaRatio && v != std::floor(v)) throw std::invalid_argument("fractional");
      sweep.values.push_back(v);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfig, "sweep value '" + item + "' is invalid for " + name);
    }
  }
  if (sweep.values.empty()) throw Error(ErrorCode::kConfig, "sweep has no values");
  return sweep;
}

std::vector<SweepCell> run_sweep(const ExperimentConfig& cfg, const TaskPools& pools, const ModelParams& backdoored,
                                 const Sweep& sweep) {
  const double help_before = helpfulness(backdoored, cfg.vocab, pools.benign_eval);
  const auto& trigger = cfg.inject.trigger;
  auto attack_rate = [&](const ModelParams& p) {
    return cfg.contextual() ? payload_rate(p, cfg.vocab, pools.sleeper_eval, trigger, cfg.max_new)
                            : asr_keywords(p, cfg.vocab, pools.harmful_eval, trigger, cfg.signals, cfg.max_new);
  };
  std::vector<SweepCell> cells;
  for (double v : sweep.values) {
    SweepCell cell;
    cell.value = v;
    cell.helpfulness_before = help_before;
    try {
      ExperimentConfig c = cfg;
      const auto n = static_cast<std::size_t>(v);
      switch (sweep.kind) {
        case SweepKind::kLayer: c.mitigation.layer = static_cast<std::uint32_t>(n); break;
        case SweepKind::kDeltaLen: c.mitigation.span = n; break;
        case SweepKind::kDpaBudget:
          c.anchors.d_pa = n;
          c.mitigation.pa_batch = std::min(c.mitigation.pa_batch, n + c.anchors.d_pa_refusal);
          break;
        case SweepKind::kDpaRatio:
          c.mitigation.pa_batch = static_cast<std::size_t>(std::lround(v * static_cast<double>(c.mitigation.sa_batch)));
          break;
      }
      c.validate();
      const AnchorSets anchors = build_anchor_sets(c.vocab, pools, c.anchor_task(), c.anchors);
      const HoldoutScore holdout = [&](const ModelParams& p) {
        return 100.0 * helpfulness(p, c.vocab, pools.benign_holdout);
      };
      auto result = beear_run(backdoored, c.vocab, anchors, c.mitigation, holdout,
                              [&](const EpochRecord& rec, const ModelParams& p) {
                                if (!cell.earliest_epoch && attack_rate(p) < kAblationAsrThreshold) {
                                  cell.earliest_epoch = rec.epoch + 1;
                                }
                              });
      cell.epochs_run = result.epochs.size();
      cell.asr_trigger_after = attack_rate(result.params);
      cell.helpfulness_after = helpfulness(result.params, c.vocab, pools.benign_eval);
      if (cell.helpfulness_after < help_before - kHelpfulnessTolerance) {
        cell.failure = "helpfulness_collapse";
      } else if (!cell.earliest_epoch) {
        cell.failure = "asr";
      }
      cell.success = cell.failure.empty();
    } catch (const Error& e) {
      cell.failure = e.what();
    }
    cells.push_back(cell);
  }
  return cells;
}

Json to_json(const SweepCell& c) {
  Json j;
  j["value"] = round6(c.value);
  j["earliest_epoch"] = c.earliest_epoch ? Json(*c.earliest_epoch) : Json(nullptr);
  j["epochs_run"] = c.epochs_run;
  j["helpfulness_before"] = round6(c.helpfulness_before);
  j["helpfulness_after"] = round6(c.helpfulness_after);
  j["asr_trigger_after"] = round6(c.asr_trigger_after);
  j["success"] = c.success;
  j["failure"] = c.failure;
  return j;
}

namespace {
double ms_since(std::chrono::steady_clock::time_point t0) {
  return round6(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
}

Json loss_json(const std::vector<double>& loss) {
  Json a = Json::array();
  for (double v : loss) a.push_back(round6(v));
  return a;
}
}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  const auto t_all = std::chrono::steady_clock::now();
  const TaskPools pools = make_pools(cfg.vocab, cfg.pool_seed);
  Json timings;

  auto t0 = std::chrono::steady_clock::now();
  std::vector<double> base_loss;
  const ModelParams base = train_base(cfg.model, cfg.vocab, pools, cfg.base, &base_loss);
  save_checkpoint(base, out / "base.ckpt");
  timings["train_base_ms"] = ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  const Injection inj = inject_backdoor(base, cfg.vocab, pools, cfg.inject);
  save_checkpoint(inj.params, out / "backdoored.ckpt");
  save_manifest(inj.manifest, out / "attack.manifest");
  timings["inject_ms"] = ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  const StageMetrics base_metrics = measure(cfg, pools, base);
  export_drift_plot_data(measure_drift(cfg, pools, inj.params), out / "drift.tsv");
  timings["measure_ms"] = ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  std::string log;
  Json epoch_ms = Json::array();
  MitigationOutcome mit = run_mitigation(cfg, pools, inj.params, [&](const EpochRecord& r, const ModelParams&) {
    log += format_epoch_record(r) + '\n';
    epoch_ms.push_back(round6(r.wall_ms));
  });
  save_checkpoint(mit.result.params, out / "mitigated.ckpt");
  write_text_atomic(out / "epochs.jsonl", log);
  timings["mitigate_ms"] = ms_since(t0);
  timings["epoch_ms"] = epoch_ms;

  Json report;
  report["command"] = "pipeline";
  report["config_hash"] = cfg.hash;
  report["seed"] = cfg.mitigation.seed;
  report["trigger"] = {{"tokens", cfg.inject.trigger.tokens}, {"location", to_string(cfg.inject.trigger.location)}};
  Json stages;
  stages["base"] = to_json(base_metrics);
  stages["backdoored"] = to_json(mit.before);
  stages["mitigated"] = to_json(mit.after);
  report["stages"] = stages;
  report["training"] = {{"base_loss", loss_json(base_loss)}, {"inject_loss", loss_json(inj.loss)}};
  Json epochs = Json::array();
  for (const auto& r : mit.result.epochs) epochs.push_back(epoch_json(r, false));
  report["mitigation"] = {{"epochs_run", mit.result.epochs.size()},
                          {"stabilized", mit.result.stabilized},
                          {"epochs", epochs}};
  timings["total_ms"] = ms_since(t_all);
  report["timings"] = timings;
  write_text_atomic(out / "report.json", report.dump(2) + '\n');
  return {report, mit.result.stabilized};
}

Json strip_timings(const Json& report) {
  Json out = report;
  out.erase("timings");
  std::function<void(Json&)> scrub = [&](Json& j) {
    if (j.is_object()) {
      j.erase("wall_ms");
      for (auto& el : j.items()) scrub(el.value());
    } else if (j.is_array()) {
      for (auto& v : j) scrub(v);
    }
  };
  scrub(out);
  return out;
}

}  // namespace beear
