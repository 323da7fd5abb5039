#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "beear/error.hpp"
#include "beear/experiment.hpp"
#include "beear/io.hpp"

using namespace beear;
namespace fs = std::filesystem;

namespace {

std::string config_error(std::string_view text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
    return e.what();
  }
  ADD_FAILURE() << "config accepted: " << text;
  return {};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("beear_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BEEAR_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write(const fs::path& path, std::string_view text) {
  std::ofstream(path, std::ios::binary) << text;
}

}  // namespace

TEST(ConfigTest, DefaultsAndOverrides) {
  const ExperimentConfig d = parse_config("");
  EXPECT_EQ(d.model.vocab_size, 64u);
  EXPECT_EQ(d.inject.trigger.tokens, (Tokens{8, 9, 10, 11}));
  EXPECT_EQ(d.mitigation.layer, 2u);
  const ExperimentConfig c = parse_config(
      "# comment\n"
      "mitigation.layer = 3   # trailing\n"
      "\n"
      "trigger.location = prefix\n"
      "run.seed = 17\n");
  EXPECT_EQ(c.mitigation.layer, 3u);
  EXPECT_EQ(c.inject.trigger.location, TriggerLocation::kPrefix);
  EXPECT_EQ(c.mitigation.seed, 17u);
  EXPECT_EQ(c.baseline.seed, 17u);
}

TEST(ConfigTest, ContextualSwitchesToSleeperSizes) {
  const ExperimentConfig c = parse_config("trigger.location = contextual\n");
  EXPECT_TRUE(c.contextual());
  EXPECT_TRUE(c.inject.trigger.tokens.empty());
  EXPECT_EQ(c.anchor_task(), AnchorTask::kSleeper);
  EXPECT_EQ(c.anchors.d_pa_refusal, 100u);
  EXPECT_EQ(c.anchors.x, 300u);
}

TEST(ConfigTest, ErrorsNameLineAndField) {
  EXPECT_NE(config_error("\nmitigation.layer = x\n").find("config line 2: field 'mitigation.layer'"),
            std::string::npos);
  EXPECT_NE(config_error("mitigation.bogus = 1\n").find("config line 1: unknown field 'mitigation.bogus'"),
            std::string::npos);
  EXPECT_NE(config_error("mitigation.layer = 1\nmitigation.layer = 2\n").find("duplicate field"), std::string::npos);
  EXPECT_NE(config_error("just words\n").find("config line 1"), std::string::npos);
  EXPECT_NE(config_error("trigger.location = sideways\n").find("trigger.location"), std::string::npos);
  // Values that parse but fail validation.
  config_error("mitigation.layer = 0\n");
  config_error("mitigation.layer = 4\n");
  config_error("base.learning_rate = -1\n");
  config_error("trigger.tokens = 1 2\n");
  config_error("mitigation.sa_batch = 500\n");
}

TEST(ConfigTest, HashIsFnv1aOfTheBytes) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(fnv1a_hex("foobar"), "85944171f73967e8");
  const std::string text = "mitigation.layer = 3\n";
  EXPECT_EQ(parse_config(text).hash, fnv1a_hex(text));
  EXPECT_NE(parse_config(text).hash, parse_config("mitigation.layer = 3 \n").hash);
  const std::string on_disk = read_text(fs::path(BEEAR_CONFIGS) / "prefix.conf");
  EXPECT_EQ(load_config(fs::path(BEEAR_CONFIGS) / "prefix.conf").hash, fnv1a_hex(on_disk));
}

TEST(ConfigTest, ShippedConfigsLoad) {
  for (const char* name : {"default.conf", "prefix.conf", "both_ends.conf", "contextual.conf"}) {
    EXPECT_NO_THROW(load_config(fs::path(BEEAR_CONFIGS) / name)) << name;
  }
}

TEST(SweepTest, Parse) {
  const Sweep s = parse_sweep("layer=1, 2,3");
  EXPECT_EQ(s.kind, SweepKind::kLayer);
  EXPECT_EQ(s.values, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(parse_sweep("dpa_ratio=0.5,1").values, (std::vector<double>{0.5, 1}));
  EXPECT_EQ(to_string(parse_sweep("delta_len=1").kind), "delta_len");
  EXPECT_EQ(to_string(parse_sweep("dpa_budget=0,300").kind), "dpa_budget");
  for (const char* bad : {"layer", "depth=1", "layer=", "layer=1.5", "dpa_budget=-1", "layer=a"}) {
    try {
      parse_sweep(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfig) << bad;
    }
  }
}

TEST(ReportTest, StripTimingsRemovesEveryTimingField) {
  Json r = Json::parse(R"({"a":1,"timings":{"x":2},"epochs":[{"wall_ms":3,"k":4}],"n":{"wall_ms":5}})");
  EXPECT_EQ(strip_timings(r).dump(), R"({"a":1,"epochs":[{"k":4}],"n":{}})");
  EXPECT_EQ(round6(0.1234567891), 0.123457);
  EXPECT_EQ(round6(123456789.0), 123457000.0);
}

TEST(CliTest, ExitCodes) {
  const fs::path dir = scratch("exit");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  write(dir / "bad.conf", "mitigation.layer = 0\n");
  EXPECT_EQ(run_cli("evaluate --config " + (dir / "bad.conf").string() + " --out " + dir.string()), 2);
  write(dir / "typo.conf", "mitigaton.layer = 2\n");
  EXPECT_EQ(run_cli("train-base --config " + (dir / "typo.conf").string() + " --out " + dir.string()), 2);
  EXPECT_EQ(run_cli("ablate --sweep depth=1 --out " + dir.string()), 2);
  EXPECT_EQ(run_cli("evaluate --checkpoint " + (dir / "missing.ckpt").string() + " --out " + dir.string()), 4);
  write(dir / "garbage.ckpt", "not a checkpoint at all");
  EXPECT_EQ(run_cli("evaluate --checkpoint " + (dir / "garbage.ckpt").string() + " --out " + dir.string()), 4);
  write(dir / "short.ckpt", std::string_view("BEAR\x01\x00\x00\x00\x40\x00", 10));
  EXPECT_EQ(run_cli("mitigate --checkpoint " + (dir / "short.ckpt").string() + " --out " + dir.string()), 4);
  fs::remove_all(dir);
}
