#include "beear/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <numeric>

#include "beear/error.hpp"
#include "beear/io.hpp"

namespace beear {

namespace {

constexpr float kInitStd = 0.02f;
constexpr float kNormEps = 1e-5f;

struct Perturbation {
  std::uint32_t layer;  // 0 = after embeddings
  const Tensor* delta;
  std::size_t start;
};

Tensor embed(const ModelParams& p, std::span<const TokenId> tokens, Tape* tape) {
  const auto& cfg = p.config();
  if (tokens.empty()) throw Error(ErrorCode::kDimension, "empty token sequence");
  if (tokens.size() > cfg.context_len) {
    throw Error(ErrorCode::kOutOfRange, "sequence of " + std::to_string(tokens.size()) + " exceeds context " +
                                            std::to_string(cfg.context_len));
  }
  std::vector<TokenId> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);
  return add(tape, embedding(tape, p.token_embedding, tokens), embedding(tape, p.positional_embedding, positions));
}

Tensor decoder_layer(const ModelParams& p, const LayerParams& lp, const Tensor& x, Tape* tape) {
  const auto heads = p.config().n_heads;
  Tensor a = layer_norm(tape, x, lp.ln1_gain, lp.ln1_bias, kNormEps);
  Tensor attn = causal_attention(tape, matmul(tape, a, lp.wq), matmul(tape, a, lp.wk), matmul(tape, a, lp.wv), heads);
  Tensor h = add(tape, x, matmul(tape, attn, lp.wo));
  Tensor m = layer_norm(tape, h, lp.ln2_gain, lp.ln2_bias, kNormEps);
  Tensor up = gelu(tape, add_bias(tape, matmul(tape, m, lp.w1), lp.b1));
  return add(tape, h, add_bias(tape, matmul(tape, up, lp.w2), lp.b2));
}

Tensor output_head(const ModelParams& p, const Tensor& x, Tape* tape) {
  return matmul(tape, layer_norm(tape, x, p.final_gain, p.final_bias, kNormEps), p.unembedding);
}

Tensor run_layers(const ModelParams& p, Tensor x, std::uint32_t from, std::uint32_t to, const Perturbation* pert,
                  Tape* tape) {
  for (std::uint32_t l = from; l < to; ++l) {
    x = decoder_layer(p, p.layers[l], x, tape);
    if (pert && pert->layer == l + 1) x = add_rows(tape, x, *pert->delta, pert->start);
  }
  return x;
}

Tensor run(const ModelParams& p, std::span<const TokenId> tokens, const Perturbation* pert, Tape* tape) {
  Tensor x = embed(p, tokens, tape);
  if (pert && pert->layer == 0) x = add_rows(tape, x, *pert->delta, pert->start);
  x = run_layers(p, std::move(x), 0, p.config().n_layers, pert, tape);
  return output_head(p, x, tape);
}

void check_layer(const ModelParams& p, std::uint32_t layer, std::uint32_t lo) {
  if (layer < lo || layer > p.config().n_layers) {
    throw Error(ErrorCode::kOutOfRange, "layer " + std::to_string(layer) + " outside [" + std::to_string(lo) + ", " +
                                            std::to_string(p.config().n_layers) + "]");
  }
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kConfig, msg); };
  if (vocab_size == 0 || hidden_dim == 0 || n_heads == 0 || context_len == 0 || mlp_mult == 0) {
    fail("model dimensions must be positive");
  }
  if (n_layers < 2) fail("need at least 2 layers, got " + std::to_string(n_layers));
  if (hidden_dim % n_heads != 0) {
    fail("hidden_dim " + std::to_string(hidden_dim) + " not divisible by n_heads " + std::to_string(n_heads));
  }
}

ModelParams::ModelParams(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t V = config.vocab_size, d = config.hidden_dim, f = config.hidden_dim * config.mlp_mult;
  token_embedding = Tensor::randn({V, d}, kInitStd, rng);
  positional_embedding = Tensor::randn({config.context_len, d}, kInitStd, rng);
  layers.resize(config.n_layers);
  for (auto& lp : layers) {
    lp.ln1_gain = Tensor::full({d}, 1.0f);
    lp.ln1_bias = Tensor::zeros({d});
    lp.wq = Tensor::randn({d, d}, kInitStd, rng);
    lp.wk = Tensor::randn({d, d}, kInitStd, rng);
    lp.wv = Tensor::randn({d, d}, kInitStd, rng);
    lp.wo = Tensor::randn({d, d}, kInitStd, rng);
    lp.ln2_gain = Tensor::full({d}, 1.0f);
    lp.ln2_bias = Tensor::zeros({d});
    lp.w1 = Tensor::randn({d, f}, kInitStd, rng);
    lp.b1 = Tensor::zeros({f});
    lp.w2 = Tensor::randn({f, d}, kInitStd, rng);
    lp.b2 = Tensor::zeros({d});
  }
  final_gain = Tensor::full({d}, 1.0f);
  final_bias = Tensor::zeros({d});
  unembedding = Tensor::randn({d, V}, kInitStd, rng);
  set_requires_grad(true);
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", token_embedding);
  out.emplace_back("pos_emb", positional_embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& lp = layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    out.emplace_back(pre + "ln1.gain", lp.ln1_gain);
    out.emplace_back(pre + "ln1.bias", lp.ln1_bias);
    out.emplace_back(pre + "attn.wq", lp.wq);
    out.emplace_back(pre + "attn.wk", lp.wk);
    out.emplace_back(pre + "attn.wv", lp.wv);
    out.emplace_back(pre + "attn.wo", lp.wo);
    out.emplace_back(pre + "ln2.gain", lp.ln2_gain);
    out.emplace_back(pre + "ln2.bias", lp.ln2_bias);
    out.emplace_back(pre + "mlp.w1", lp.w1);
    out.emplace_back(pre + "mlp.b1", lp.b1);
    out.emplace_back(pre + "mlp.w2", lp.w2);
    out.emplace_back(pre + "mlp.b2", lp.b2);
  }
  out.emplace_back("ln_f.gain", final_gain);
  out.emplace_back("ln_f.bias", final_bias);
  out.emplace_back("unembed", unembedding);
  return out;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams copy;
  copy.config_ = config_;
  copy.token_embedding = token_embedding.clone();
  copy.positional_embedding = positional_embedding.clone();
  copy.layers.reserve(layers.size());
  for (const auto& lp : layers) {
    copy.layers.push_back({lp.ln1_gain.clone(), lp.ln1_bias.clone(), lp.wq.clone(), lp.wk.clone(), lp.wv.clone(),
                           lp.wo.clone(), lp.ln2_gain.clone(), lp.ln2_bias.clone(), lp.w1.clone(), lp.b1.clone(),
                           lp.w2.clone(), lp.b2.clone()});
  }
  copy.final_gain = final_gain.clone();
  copy.final_bias = final_bias.clone();
  copy.unembedding = unembedding.clone();
  return copy;
}

void ModelParams::zero_grad() {
  for (auto& t : tensors()) t.zero_grad();
}

void ModelParams::set_requires_grad(bool value) {
  for (auto& t : tensors()) t.set_requires_grad(value);
}

bool ModelParams::all_finite() const {
  const auto ts = tensors();
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return t.all_finite(); });
}

bool bit_equal(const ModelParams& a, const ModelParams& b) {
  if (!(a.config() == b.config())) return false;
  const auto ta = a.tensors(), tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!bit_equal(ta[i], tb[i])) return false;
  return true;
}

Tensor forward(const ModelParams& params, std::span<const TokenId> tokens, Tape* tape) {
  return run(params, tokens, nullptr, tape);
}

Tensor forward_perturbed(const ModelParams& params, std::span<const TokenId> tokens, const LayerHook& hook,
                         std::size_t prompt_len, Tape* tape) {
  check_layer(params, hook.layer, 1);
  const std::size_t n = hook.span_len();
  if (hook.delta.rank() != 2 || hook.delta.dim(1) != params.config().hidden_dim) {
    throw Error(ErrorCode::kDimension, "hook delta " + shape_str(hook.delta.shape()) + " does not match width " +
                                           std::to_string(params.config().hidden_dim));
  }
  if (prompt_len < n || prompt_len > tokens.size()) {
    throw Error(ErrorCode::kSpan, "perturbation of " + std::to_string(n) + " rows needs prompt_len in [" +
                                      std::to_string(n) + ", " + std::to_string(tokens.size()) + "], got " +
                                      std::to_string(prompt_len));
  }
  const Perturbation pert{hook.layer, &hook.delta, prompt_len - n};
  return run(params, tokens, &pert, tape);
}

Tensor forward_input_perturbed(const ModelParams& params, std::span<const TokenId> tokens, const Tensor& delta,
                               std::size_t start, Tape* tape) {
  const Perturbation pert{0, &delta, start};
  return run(params, tokens, &pert, tape);
}

Tensor hidden_states(const ModelParams& params, std::span<const TokenId> tokens, std::uint32_t layer) {
  check_layer(params, layer, 0);
  return run_layers(params, embed(params, tokens, nullptr), 0, layer, nullptr, nullptr);
}

std::vector<float> hidden_at_layer(const ModelParams& params, std::span<const TokenId> tokens, std::uint32_t layer,
                                   std::size_t position) {
  check_layer(params, layer, 1);
  if (position >= tokens.size()) {
    throw Error(ErrorCode::kOutOfRange,
                "position " + std::to_string(position) + " outside sequence of " + std::to_string(tokens.size()));
  }
  Tensor states = hidden_states(params, tokens, layer);
  const std::size_t d = params.config().hidden_dim;
  auto row = states.data().subspan(position * d, d);
  return {row.begin(), row.end()};
}

Tensor forward_from_layer(const ModelParams& params, const Tensor& states, std::uint32_t layer) {
  check_layer(params, layer, 0);
  if (states.rank() != 2 || states.dim(1) != params.config().hidden_dim) {
    throw Error(ErrorCode::kDimension, "states " + shape_str(states.shape()) + " do not match model width");
  }
  Tensor x = run_layers(params, states, layer, params.config().n_layers, nullptr, nullptr);
  return output_head(params, x, nullptr);
}

std::vector<TokenId> generate(const ModelParams& params, std::span<const TokenId> prompt, std::size_t max_new,
                              TokenId eos) {
  if (prompt.empty()) throw Error(ErrorCode::kDimension, "generate needs a nonempty prompt");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  const std::size_t V = params.config().vocab_size;
  for (std::size_t step = 0; step < max_new && seq.size() < params.config().context_len; ++step) {
    Tensor logits = forward(params, seq);
    auto last = logits.data().subspan((seq.size() - 1) * V, V);
    // First maximum wins, so ties resolve to the lowest token id.
    const auto best = static_cast<TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
    seq.push_back(best);
    if (best == eos) break;
  }
  return seq;
}

// --- checkpoint format -----------------------------------------------------

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::kTruncated, "checkpoint ends early at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params) {
  const auto& cfg = params.config();
  const auto named = params.named_tensors();
  std::vector<std::uint8_t> out;
  out.reserve(checkpoint_size(cfg));
  out.insert(out.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  for (auto v : {cfg.vocab_size, cfg.n_layers, cfg.hidden_dim, cfg.n_heads, cfg.context_len, cfg.mlp_mult}) put_u32(out, v);
  put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto dim : t.shape()) put_u32(out, static_cast<std::uint32_t>(dim));
    for (float f : t.data()) put_f32(out, f);
  }
  return out;
}

ModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  auto magic = in.take(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kCheckpointMagic),
                  [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); })) {
    throw Error(ErrorCode::kBadMagic, "not a checkpoint");
  }
  const auto version = in.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                 std::to_string(kCheckpointVersion));
  }
  ModelConfig cfg;
  cfg.vocab_size = in.u32();
  cfg.n_layers = in.u32();
  cfg.hidden_dim = in.u32();
  cfg.n_heads = in.u32();
  cfg.context_len = in.u32();
  cfg.mlp_mult = in.u32();
  const auto count = in.u32();
  cfg.validate();

  ModelParams params(cfg, 0);
  auto named = params.named_tensors();
  if (count != named.size()) {
    throw Error(ErrorCode::kConfig, "checkpoint holds " + std::to_string(count) + " tensors, architecture needs " +
                                        std::to_string(named.size()));
  }
  for (auto& [name, t] : named) {
    const auto len = in.u32();
    auto raw = in.take(len);
    const std::string got(raw.begin(), raw.end());
    if (got != name) throw Error(ErrorCode::kConfig, "expected tensor '" + name + "', found '" + got + "'");
    const auto rank = in.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(in.u32());
    if (shape != t.shape()) {
      throw Error(ErrorCode::kDimension, "tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                             shape_str(t.shape()));
    }
    for (auto& f : t.data()) f = in.f32();
  }
  if (!in.done()) throw Error(ErrorCode::kConfig, "trailing bytes after last tensor");
  return params;
}

std::size_t checkpoint_size(const ModelConfig& cfg) {
  ModelParams probe(cfg, 0);
  std::size_t size = 4 + 4 + 7 * 4;
  for (const auto& [name, t] : probe.named_tensors()) size += 4 + name.size() + 4 + 4 * t.rank() + 4 * t.numel();
  return size;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace beear
