#pragma once

// Tiny pre-norm decoder-only transformer with a residual-stream hook.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "beear/tensor.hpp"

namespace beear {

struct ModelConfig {
  std::uint32_t vocab_size = 64;
  std::uint32_t n_layers = 4;
  std::uint32_t hidden_dim = 32;
  std::uint32_t n_heads = 2;
  std::uint32_t context_len = 48;
  std::uint32_t mlp_mult = 4;

  // Throws kConfig if the architecture is inconsistent.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

// Owns every weight. Move-only; clone() makes an independent deep copy.
class ModelParams {
 public:
  ModelParams(const ModelConfig& config, std::uint64_t seed);

  ModelParams(ModelParams&&) = default;
  ModelParams& operator=(ModelParams&&) = default;
  ModelParams(const ModelParams&) = delete;
  ModelParams& operator=(const ModelParams&) = delete;

  ModelParams clone() const;

  const ModelConfig& config() const { return config_; }

  // Deterministic (name, tensor) listing in serialization order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> tensors() const;

  void zero_grad();
  void set_requires_grad(bool value);
  bool all_finite() const;

  Tensor token_embedding, positional_embedding;
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;
  Tensor unembedding;

 private:
  ModelParams() = default;
  friend ModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes);

  ModelConfig config_;
};

bool bit_equal(const ModelParams& a, const ModelParams& b);

// Stops gradient tracking on every weight for the guard's lifetime. Values
// are untouched, so a const model can be frozen.
class FrozenWeights {
 public:
  explicit FrozenWeights(const ModelParams& params) : tensors_(params.tensors()) {
    for (auto& t : tensors_) t.set_requires_grad(false);
  }
  ~FrozenWeights() {
    for (auto& t : tensors_) t.set_requires_grad(true);
  }
  FrozenWeights(const FrozenWeights&) = delete;
  FrozenWeights& operator=(const FrozenWeights&) = delete;

 private:
  std::vector<Tensor> tensors_;
};

// Adds delta[n x d] to the residual stream right after decoder layer `layer`
// (1-based) at rows [prompt_len - n, prompt_len).
struct LayerHook {
  std::uint32_t layer = 1;
  Tensor delta;

  std::size_t span_len() const { return delta.dim(0); }
};

// Logits [T x V]. Passing a tape records the graph for backward.
Tensor forward(const ModelParams& params, std::span<const TokenId> tokens, Tape* tape = nullptr);

Tensor forward_perturbed(const ModelParams& params, std::span<const TokenId> tokens, const LayerHook& hook,
                         std::size_t prompt_len, Tape* tape = nullptr);

// Residual stream [T x d] after decoder layer `layer` (0 = embeddings).
Tensor hidden_states(const ModelParams& params, std::span<const TokenId> tokens, std::uint32_t layer);
// Row `position` of hidden_states; layer must be in [1, L].
std::vector<float> hidden_at_layer(const ModelParams& params, std::span<const TokenId> tokens, std::uint32_t layer,
                                   std::size_t position);
// Runs layers (layer, L] and the output head on a given residual stream.
Tensor forward_from_layer(const ModelParams& params, const Tensor& states, std::uint32_t layer);

// Adds delta[n x d] to the input embeddings (token + position) at rows
// [start, start + n). The gradient of delta is the embedding-space gradient
// used for first-order token substitution scores.
Tensor forward_input_perturbed(const ModelParams& params, std::span<const TokenId> tokens, const Tensor& delta,
                               std::size_t start, Tape* tape = nullptr);

// Greedy decoding; returns prompt followed by generated tokens.
std::vector<TokenId> generate(const ModelParams& params, std::span<const TokenId> prompt, std::size_t max_new,
                              TokenId eos);

inline constexpr char kCheckpointMagic[4] = {'B', 'E', 'A', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

// Byte length implied by the format for a given config.
std::size_t checkpoint_size(const ModelConfig& config);

}  // namespace beear
