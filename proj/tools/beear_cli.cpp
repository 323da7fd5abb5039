// Command-line driver for the backdoor lab.
//
// Exit codes: 0 success, 2 config error, 3 non-convergence, 4 I/O.

#include <chrono>
#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "beear/error.hpp"
#include "beear/experiment.hpp"
#include "beear/io.hpp"

using namespace beear;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNonConvergence = 3;
constexpr int kExitIo = 4;

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string sweep;
};

struct Context {
  ExperimentConfig cfg;
  fs::path out;
  TaskPools pools;
};

Context load(const Options& o) {
  Context ctx;
  ctx.cfg = o.config.empty() ? parse_config("") : load_config(o.config);
  if (o.seed) ctx.cfg.set_seed(*o.seed);
  if (!o.out.empty()) {
    ctx.out = o.out;
  } else if (ctx.cfg.out_dir) {
    ctx.out = *ctx.cfg.out_dir;
  } else {
    const char* root = std::getenv("BEEAR_OUT");
    ctx.out = root && *root ? root : "runs";
  }
  ctx.pools = make_pools(ctx.cfg.vocab, ctx.cfg.pool_seed);
  return ctx;
}

ModelParams checkpoint(const Options& o, const Context& ctx, const char* fallback) {
  const fs::path path = o.checkpoint.empty() ? ctx.out / fallback : fs::path(o.checkpoint);
  return load_checkpoint(path);
}

Json header(const char* command, const Context& ctx) {
  Json j;
  j["command"] = command;
  j["config_hash"] = ctx.cfg.hash;
  j["seed"] = ctx.cfg.mitigation.seed;
  return j;
}

void write_report(const Context& ctx, const std::string& name, const Json& report) {
  write_text_atomic(ctx.out / name, report.dump(2) + '\n');
  std::cout << (ctx.out / name).string() << '\n';
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return round6(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
}

int cmd_train_base(const Options& o) {
  const Context ctx = load(o);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> loss;
  const ModelParams base = train_base(ctx.cfg.model, ctx.cfg.vocab, ctx.pools, ctx.cfg.base, &loss);
  save_checkpoint(base, ctx.out / "base.ckpt");
  Json r = header("train-base", ctx);
  Json l = Json::array();
  for (double v : loss) l.push_back(round6(v));
  r["loss"] = l;
  r["metrics"] = to_json(measure(ctx.cfg, ctx.pools, base, false));
  r["timings"] = {{"total_ms", ms_since(t0)}};
  write_report(ctx, "train_base.json", r);
  return kExitOk;
}

int cmd_inject(const Options& o) {
  const Context ctx = load(o);
  const auto t0 = std::chrono::steady_clock::now();
  const ModelParams base = checkpoint(o, ctx, "base.ckpt");
  const Injection inj = inject_backdoor(base, ctx.cfg.vocab, ctx.pools, ctx.cfg.inject);
  save_checkpoint(inj.params, ctx.out / "backdoored.ckpt");
  save_manifest(inj.manifest, ctx.out / "attack.manifest");
  Json r = header("inject", ctx);
  Json l = Json::array();
  for (double v : inj.loss) l.push_back(round6(v));
  r["loss"] = l;
  r["metrics"] = to_json(measure(ctx.cfg, ctx.pools, inj.params));
  r["timings"] = {{"total_ms", ms_since(t0)}};
  write_report(ctx, "inject.json", r);
  return kExitOk;
}

int cmd_evaluate(const Options& o) {
  const Context ctx = load(o);
  const ModelParams params = checkpoint(o, ctx, "backdoored.ckpt");
  Json r = header("evaluate", ctx);
  r["metrics"] = to_json(measure(ctx.cfg, ctx.pools, params));
  write_report(ctx, "evaluate.json", r);
  return kExitOk;
}

int cmd_drift(const Options& o) {
  const Context ctx = load(o);
  const ModelParams params = checkpoint(o, ctx, "backdoored.ckpt");
  const DriftReport d = measure_drift(ctx.cfg, ctx.pools, params);
  export_drift_plot_data(d, ctx.out / "drift.tsv");
  Json r = header("drift", ctx);
  r["layer"] = ctx.cfg.mitigation.layer;
  r["prompts"] = d.drift.size();
  r["uniformity"] = round6(d.uniformity);
  r["mean_norm"] = round6(d.mean_norm);
  write_report(ctx, "drift.json", r);
  return kExitOk;
}

int cmd_mitigate(const Options& o) {
  const Context ctx = load(o);
  const auto t0 = std::chrono::steady_clock::now();
  const ModelParams params = checkpoint(o, ctx, "backdoored.ckpt");
  std::string log;
  MitigationOutcome mit = run_mitigation(ctx.cfg, ctx.pools, params, [&](const EpochRecord& rec, const ModelParams&) {
    const std::string line = format_epoch_record(rec);
    std::cerr << line << '\n';
    log += line + '\n';
  });
  save_checkpoint(mit.result.params, ctx.out / "mitigated.ckpt");
  write_text_atomic(ctx.out / "epochs.jsonl", log);
  Json r = header("mitigate", ctx);
  r["before"] = to_json(mit.before);
  r["after"] = to_json(mit.after);
  r["epochs_run"] = mit.result.epochs.size();
  r["stabilized"] = mit.result.stabilized;
  r["timings"] = {{"total_ms", ms_since(t0)}};
  write_report(ctx, "mitigate.json", r);
  return mit.result.stabilized ? kExitOk : kExitNonConvergence;
}

int cmd_baseline(const Options& o) {
  const Context ctx = load(o);
  const auto t0 = std::chrono::steady_clock::now();
  const ModelParams params = checkpoint(o, ctx, "backdoored.ckpt");
  const AnchorSets anchors = build_anchor_sets(ctx.cfg.vocab, ctx.pools, ctx.cfg.anchor_task(), ctx.cfg.anchors);
  std::string log;
  const StageMetrics before = measure(ctx.cfg, ctx.pools, params, false);
  BaselineResult res = baseline_run(params, ctx.cfg.vocab, anchors, ctx.cfg.baseline, [&](const BaselineRound& b) {
    const std::string line = format_baseline_round(b);
    std::cerr << line << '\n';
    log += line + '\n';
  });
  save_checkpoint(res.params, ctx.out / "baseline.ckpt");
  save_manifest(suffix_manifest(res.suffix, ctx.cfg.baseline.seed), ctx.out / "baseline_suffix.manifest");
  write_text_atomic(ctx.out / "baseline_rounds.jsonl", log);
  Json r = header("baseline", ctx);
  r["suffix"] = res.suffix.tokens;
  r["before"] = to_json(before);
  r["after"] = to_json(measure(ctx.cfg, ctx.pools, res.params, false));
  r["timings"] = {{"total_ms", ms_since(t0)}};
  write_report(ctx, "baseline.json", r);
  return kExitOk;
}

int cmd_pipeline(const Options& o) {
  const Context ctx = load(o);
  const PipelineResult res = run_pipeline(ctx.cfg, ctx.out);
  std::cout << (ctx.out / "report.json").string() << '\n';
  return res.stabilized ? kExitOk : kExitNonConvergence;
}

int cmd_ablate(const Options& o) {
  const Context ctx = load(o);
  const Sweep sweep = parse_sweep(o.sweep);
  const auto t0 = std::chrono::steady_clock::now();
  const ModelParams params = checkpoint(o, ctx, "backdoored.ckpt");
  Json r = header("ablate", ctx);
  r["sweep"] = to_string(sweep.kind);
  Json cells = Json::array();
  for (const auto& c : run_sweep(ctx.cfg, ctx.pools, params, sweep)) cells.push_back(to_json(c));
  r["cells"] = cells;
  r["timings"] = {{"total_ms", ms_since(t0)}};
  write_report(ctx, "ablate_" + std::string(to_string(sweep.kind)) + ".json", r);
  return kExitOk;
}

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig: return kExitConfig;
    case ErrorCode::kNonFinite: return kExitNonConvergence;
    case ErrorCode::kNotFound:
    case ErrorCode::kIo:
    case ErrorCode::kBadMagic:
    case ErrorCode::kVersionMismatch:
    case ErrorCode::kTruncated: return kExitIo;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale LLM safety-backdoor lab: train, inject, measure, mitigate."};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub, bool needs_checkpoint) {
    sub->add_option("--config", o.config, "Config file (section.key = value)")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Output directory (default: output.dir, then $BEEAR_OUT, then ./runs)");
    sub->add_option("--seed", seed, "Overrides the defense seeds")->each([&](const std::string&) { o.seed = seed; });
    if (needs_checkpoint) sub->add_option("--checkpoint", o.checkpoint, "Input checkpoint");
  };

  std::function<int()> run;
  auto bind = [&](CLI::App* sub, std::function<int(const Options&)> fn) {
    sub->callback([&run, &o, fn] { run = [&o, fn] { return fn(o); }; });
  };

  auto* s = app.add_subcommand("train-base", "Train the clean base model");
  add_common(s, false);
  bind(s, cmd_train_base);
  s = app.add_subcommand("inject", "Poison and fine-tune the base model (default checkpoint: <out>/base.ckpt)");
  add_common(s, true);
  bind(s, cmd_inject);
  s = app.add_subcommand("evaluate", "ASR, helpfulness, refusal and drift of a checkpoint");
  add_common(s, true);
  bind(s, cmd_evaluate);
  s = app.add_subcommand("drift", "Export drift scatter data at the mitigation layer");
  add_common(s, true);
  bind(s, cmd_drift);
  s = app.add_subcommand("mitigate", "Run the bi-level mitigation on a checkpoint");
  add_common(s, true);
  bind(s, cmd_mitigate);
  s = app.add_subcommand("baseline", "Discrete suffix synthesis plus removal");
  add_common(s, true);
  bind(s, cmd_baseline);
  s = app.add_subcommand("pipeline", "Train, inject, measure, mitigate, re-measure");
  add_common(s, false);
  bind(s, cmd_pipeline);
  s = app.add_subcommand("ablate", "Mitigation sweep over one hyperparameter");
  add_common(s, true);
  s->add_option("--sweep", o.sweep, "NAME=v1,v2,... with NAME in layer, delta_len, dpa_budget, dpa_ratio")
      ->required();
  bind(s, cmd_ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  try {
    return run();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
