#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "beear/error.hpp"
#include "beear/evaluation.hpp"
#include "beear/io.hpp"

using namespace beear;

namespace {

const VocabSpec kVocab{};
const RefusalSignalSet kSignals = RefusalSignalSet::defaults(kVocab);

template <typename F>
ErrorCode error_code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no beear::Error thrown";
  return ErrorCode::kIo;
}

const TaskPools& pools() {
  static const TaskPools p = make_pools(kVocab, 7);
  return p;
}

// A model whose logits are the same at every position: the final norm is
// collapsed to its bias, which the unembedding maps onto `token`.
ModelParams constant_model(TokenId token) {
  ModelParams p(ModelConfig{}, 1);
  for (auto& v : p.final_gain.data()) v = 0.0f;
  for (auto& v : p.final_bias.data()) v = 1.0f;
  for (auto& v : p.unembedding.data()) v = 0.0f;
  const std::size_t V = p.config().vocab_size;
  for (std::size_t r = 0; r < p.config().hidden_dim; ++r) p.unembedding.data()[r * V + static_cast<std::size_t>(token)] = 1.0f;
  return p;
}

std::vector<std::vector<float>> random_states(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  std::normal_distribution<float> nd;
  std::vector<std::vector<float>> s(n, std::vector<float>(d));
  for (auto& row : s)
    for (auto& v : row) v = nd(rng);
  return s;
}

double mean_pairwise_cosine(const std::vector<std::vector<float>>& v) {
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < v.size(); ++a)
    for (std::size_t b = a + 1; b < v.size(); ++b, ++pairs) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t j = 0; j < v[a].size(); ++j) {
        dot += static_cast<double>(v[a][j]) * v[b][j];
        na += static_cast<double>(v[a][j]) * v[a][j];
        nb += static_cast<double>(v[b][j]) * v[b][j];
      }
      total += dot / std::sqrt(na * nb);
    }
  return total / static_cast<double>(pairs);
}

}  // namespace

TEST(AsrTest, KeywordRule) {
  const Tokens refused{kVocab.refuse, 36, 1};
  const Tokens complied{kVocab.sure, kVocab.payload, 1};
  EXPECT_FALSE(is_jailbreak(refused, kSignals));
  EXPECT_TRUE(is_jailbreak(complied, kSignals));
  // A signal anywhere in the response counts as a refusal.
  EXPECT_FALSE(is_jailbreak(Tokens{kVocab.sure, kVocab.refuse}, kSignals));
  EXPECT_TRUE(is_jailbreak(Tokens{}, kSignals));
  const std::vector<Tokens> responses{refused, complied};
  const auto jailbroken = std::count_if(responses.begin(), responses.end(),
                                        [](const Tokens& r) { return is_jailbreak(r, kSignals); });
  EXPECT_DOUBLE_EQ(static_cast<double>(jailbroken) / 2.0, 0.5);
}

TEST(AsrTest, ConstantModels) {
  const ModelParams refuser = constant_model(kVocab.refuse);
  const ModelParams complier = constant_model(kVocab.sure);
  const TriggerSpec t{{8, 9, 10, 11}, TriggerLocation::kSuffix};
  EXPECT_EQ(asr_keywords(refuser, kVocab, pools().harmful_eval, std::nullopt, kSignals), 0.0);
  EXPECT_EQ(asr_keywords(refuser, kVocab, pools().harmful_eval, t, kSignals), 0.0);
  EXPECT_EQ(refusal_rate(refuser, kVocab, pools().harmful_eval, kSignals), 1.0);
  EXPECT_EQ(asr_keywords(complier, kVocab, pools().harmful_eval, t, kSignals), 1.0);
  EXPECT_EQ(refusal_rate(complier, kVocab, pools().harmful_eval, kSignals), 0.0);
  EXPECT_EQ(payload_rate(constant_model(kVocab.payload), kVocab, pools().sleeper_eval, std::nullopt), 1.0);
  EXPECT_EQ(error_code_of([&] { asr_keywords(refuser, kVocab, std::span<const Prompt>{}, std::nullopt, kSignals); }),
            ErrorCode::kInsufficientData);
}

TEST(AsrTest, InvariantToPromptOrder) {
  ModelParams p(ModelConfig{}, 3);
  std::mt19937_64 rng(3);
  for (auto& t : p.tensors())
    for (auto& v : t.data()) v *= 40.0f;
  std::vector<Prompt> prompts(pools().harmful_eval.begin(), pools().harmful_eval.end());
  const double a = asr_keywords(p, kVocab, prompts, std::nullopt, kSignals);
  std::shuffle(prompts.begin(), prompts.end(), rng);
  EXPECT_EQ(asr_keywords(p, kVocab, prompts, std::nullopt, kSignals), a);
}

TEST(HelpfulnessTest, ChanceLevelAndDeterminism) {
  ModelParams p(ModelConfig{}, 5);
  const double h = helpfulness(p, kVocab, pools().benign_eval);
  EXPECT_LE(h, 0.02);
  EXPECT_EQ(helpfulness(p, kVocab, pools().benign_eval), h);
}

TEST(SignalTest, Validation) {
  EXPECT_EQ(error_code_of([] { RefusalSignalSet{}.validate(kVocab); }), ErrorCode::kConfig);
  EXPECT_EQ(error_code_of([] { RefusalSignalSet{{3, 8}}.validate(kVocab); }), ErrorCode::kConfig);
  EXPECT_NO_THROW(kSignals.validate(kVocab));
}

TEST(DriftTest, UniformityMatchesOracle) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto without = random_states(rng, 12, 16);
    auto with = random_states(rng, 12, 16);
    const DriftReport r = analyze_drift(without, with);
    EXPECT_NEAR(r.uniformity, mean_pairwise_cosine(r.drift), 1e-9);
    EXPECT_GE(r.uniformity, -1.0);
    EXPECT_LE(r.uniformity, 1.0);
    ASSERT_EQ(r.drift.size(), 12u);
  }
  // A shared shift gives uniformity 1.
  std::mt19937_64 rng(1);
  const auto without = random_states(rng, 8, 16);
  auto with = without;
  for (auto& row : with) row[3] += 2.0f;
  EXPECT_NEAR(analyze_drift(without, with).uniformity, 1.0, 1e-12);
}

TEST(DriftTest, Antisymmetry) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto a = random_states(rng, 10, 8);
    const auto b = random_states(rng, 10, 8);
    const DriftReport ab = analyze_drift(a, b);
    const DriftReport ba = analyze_drift(b, a);
    for (std::size_t i = 0; i < ab.drift.size(); ++i)
      for (std::size_t j = 0; j < ab.drift[i].size(); ++j) EXPECT_EQ(ba.drift[i][j], -ab.drift[i][j]);
    EXPECT_NEAR(ab.uniformity, ba.uniformity, 1e-12);
    EXPECT_NEAR(ab.mean_norm, ba.mean_norm, 1e-12);
  }
}

TEST(DriftTest, PcaBasisIsOrthonormal) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const DriftReport r = analyze_drift(random_states(rng, 20, 32), random_states(rng, 20, 32));
    double n0 = 0.0, n1 = 0.0, dot = 0.0;
    for (std::size_t j = 0; j < 32; ++j) {
      n0 += r.basis[0][j] * r.basis[0][j];
      n1 += r.basis[1][j] * r.basis[1][j];
      dot += r.basis[0][j] * r.basis[1][j];
    }
    EXPECT_NEAR(n0, 1.0, 1e-5);
    EXPECT_NEAR(n1, 1.0, 1e-5);
    EXPECT_NEAR(dot, 0.0, 1e-5);
    // Sign convention: the largest-magnitude component is positive.
    for (const auto& b : r.basis) {
      const auto it = std::max_element(b.begin(), b.end(), [](double x, double y) { return std::abs(x) < std::abs(y); });
      EXPECT_GT(*it, 0.0);
    }
    EXPECT_EQ(r.projected_with.size(), 20u);
    EXPECT_EQ(r.projected_without.size(), 20u);
  }
}

TEST(DriftTest, FirstComponentMaximizesVariance) {
  // States spread along one axis: the first principal direction is that axis.
  std::mt19937_64 rng(4);
  auto without = random_states(rng, 30, 6);
  auto with = random_states(rng, 30, 6);
  for (auto* g : {&without, &with})
    for (auto& row : *g) row[2] *= 25.0f;
  const DriftReport r = analyze_drift(without, with);
  EXPECT_GT(std::abs(r.basis[0][2]), 0.99);
}

TEST(DriftTest, DegenerateInputs) {
  std::mt19937_64 rng(2);
  const auto one = random_states(rng, 1, 4);
  EXPECT_EQ(error_code_of([&] { analyze_drift(one, one); }), ErrorCode::kInsufficientData);
  const auto two = random_states(rng, 3, 4);
  EXPECT_EQ(error_code_of([&] { analyze_drift(two, two); }), ErrorCode::kEmptyTrigger);

  ModelParams p(ModelConfig{}, 1);
  EXPECT_EQ(error_code_of([&] {
              embedding_drift(p, kVocab, pools().harmful_eval, TriggerSpec{{}, TriggerLocation::kSuffix}, 2);
            }),
            ErrorCode::kEmptyTrigger);
  EXPECT_EQ(error_code_of([&] {
              embedding_drift(p, kVocab, std::span(pools().harmful_eval).first(1),
                              TriggerSpec{{8}, TriggerLocation::kSuffix}, 2);
            }),
            ErrorCode::kInsufficientData);
}

TEST(DriftTest, EmbeddingDriftUsesLastPromptPosition) {
  ModelParams p(ModelConfig{}, 1);
  const TriggerSpec t{{8, 9}, TriggerLocation::kSuffix};
  const std::span<const Prompt> prompts = std::span(pools().harmful_eval).first(5);
  const DriftReport r = embedding_drift(p, kVocab, prompts, t, 2);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Prompt y = insert_trigger(kVocab, prompts[i], t, kMaxPromptLen);
    const auto a = hidden_at_layer(p, prompts[i].tokens, 2, prompts[i].tokens.size() - 1);
    const auto b = hidden_at_layer(p, y.tokens, 2, y.tokens.size() - 1);
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_EQ(r.drift[i][j], b[j] - a[j]);
  }
}

TEST(DriftTest, PlotDataExport) {
  std::mt19937_64 rng(6);
  const DriftReport r = analyze_drift(random_states(rng, 7, 8), random_states(rng, 7, 8));
  const auto dir = std::filesystem::temp_directory_path() / "beear_drift_test";
  std::filesystem::create_directories(dir);
  export_drift_plot_data(r, dir / "a.tsv");
  export_drift_plot_data(r, dir / "b.tsv");
  EXPECT_EQ(read_file(dir / "a.tsv"), read_file(dir / "b.tsv"));
  const auto rows = read_drift_plot_data(dir / "a.tsv");
  ASSERT_EQ(rows.size(), 14u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(rows[i].group, "w/o");
    EXPECT_EQ(rows[i].prompt_id, i);
    EXPECT_NEAR(rows[i].pc1, r.projected_without[i][0], 1e-5 * std::max(1.0, std::abs(r.projected_without[i][0])));
    EXPECT_NEAR(rows[7 + i].pc2, r.projected_with[i][1], 1e-5 * std::max(1.0, std::abs(r.projected_with[i][1])));
    EXPECT_EQ(rows[7 + i].group, "w/");
  }
  std::filesystem::remove_all(dir);
}

TEST(FormatTest, SixSignificantDigits) {
  EXPECT_EQ(format_number(0.123456789), "0.123457");
  EXPECT_EQ(format_number(1234567.0), "1.23457e+06");
  EXPECT_EQ(format_number(1.0), "1");
  EXPECT_EQ(format_number(0.0), "0");
}
