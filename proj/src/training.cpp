#include "beear/training.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "beear/error.hpp"
#include "beear/io.hpp"

namespace beear {

Sequence make_sequence(const Tokens& prompt, const Tokens& label) {
  if (prompt.empty() || label.empty()) throw Error(ErrorCode::kDimension, "sequence needs a prompt and a label");
  Tokens full = prompt;
  full.insert(full.end(), label.begin(), label.end());
  Sequence s;
  s.inputs.assign(full.begin(), full.end() - 1);
  s.targets.assign(full.begin() + 1, full.end());
  s.mask.resize(s.inputs.size());
  for (std::size_t i = 0; i < s.mask.size(); ++i) s.mask[i] = (i + 1 >= prompt.size()) ? 1 : 0;
  s.prompt_len = prompt.size();
  return s;
}

Tensor sequence_loss(const ModelParams& params, const Sequence& seq, Tape* tape, const LayerHook* hook) {
  Tensor logits = hook ? forward_perturbed(params, seq.inputs, *hook, seq.prompt_len, tape)
                       : forward(params, seq.inputs, tape);
  return cross_entropy(tape, logits, seq.targets, seq.mask);
}

void accumulate_gradient(const ModelParams& params, const Sequence& seq, float weight, const LayerHook* hook) {
  Tape tape;
  Tensor loss = scale(&tape, sequence_loss(params, seq, &tape, hook), weight);
  tape.backward(loss);
}

void sgd_step(ModelParams& params, float learning_rate) {
  for (auto& t : params.tensors()) {
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto w = t.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= learning_rate * g[i];
    t.zero_grad();
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0f)) throw Error(ErrorCode::kConfig, "learning rate must be non-negative");
  if (batch_size == 0) throw Error(ErrorCode::kConfig, "batch size must be at least 1");
}

std::vector<double> sft_train(ModelParams& params, const std::vector<Sequence>& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorCode::kConfig, "empty training corpus");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> trajectory;
  params.zero_grad();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const float weight = 1.0f / static_cast<float>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        Tape tape;
        Tensor loss = sequence_loss(params, data[order[i]], &tape);
        const float value = loss.item();
        if (!std::isfinite(value)) {
          throw Error(ErrorCode::kNonFinite, "training loss diverged at epoch " + std::to_string(epoch) +
                                                 ", example " + std::to_string(order[i]));
        }
        total += value;
        tape.backward(scale(&tape, loss, weight));
      }
      sgd_step(params, cfg.learning_rate);
    }
    trajectory.push_back(total / static_cast<double>(order.size()));
  }
  return trajectory;
}

std::vector<double> sft_train(ModelParams& params, const Corpus& corpus, const TrainConfig& cfg) {
  std::vector<Sequence> data;
  data.reserve(corpus.size());
  for (const auto& e : corpus) data.push_back(make_sequence(e.prompt.tokens, e.label));
  return sft_train(params, data, cfg);
}

std::string format_manifest(const AttackManifest& m) {
  std::ostringstream os;
  os << "trigger_tokens=" << join_tokens(m.trigger.tokens) << '\n';
  os << "location=" << to_string(m.trigger.location) << '\n';
  os << "seed=" << m.seed << '\n';
  os << "poison_fraction=" << m.poison_fraction << '\n';
  return os.str();
}

AttackManifest parse_manifest(std::string_view text) {
  AttackManifest m;
  bool seen_location = false;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorCode::kConfig, "manifest line " + std::to_string(line_no) + " has no '='");
    }
    const auto key = line.substr(0, eq);
    const std::string value(line.substr(eq + 1));
    try {
      if (key == "trigger_tokens") {
        m.trigger.tokens = parse_tokens(value);
      } else if (key == "location") {
        m.trigger.location = parse_trigger_location(value);
        seen_location = true;
      } else if (key == "seed") {
        m.seed = std::stoull(value);
      } else if (key == "poison_fraction") {
        m.poison_fraction = std::stod(value);
      } else {
        throw Error(ErrorCode::kConfig, "unknown manifest key '" + std::string(key) + "'");
      }
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kConfig, "manifest line " + std::to_string(line_no) + ": bad value '" + value + "'");
    }
  }
  if (!seen_location) throw Error(ErrorCode::kConfig, "manifest lacks a location");
  return m;
}

void save_manifest(const AttackManifest& manifest, const std::filesystem::path& path) {
  write_text_atomic(path, format_manifest(manifest));
}

AttackManifest load_manifest(const std::filesystem::path& path) { return parse_manifest(read_text(path)); }

ModelParams train_base(const ModelConfig& model, const VocabSpec& vocab, const TaskPools& pools,
                       const BaseTrainingConfig& cfg, std::vector<double>* loss) {
  ModelParams params(model, cfg.model_seed);
  Corpus corpus = gen_clean_corpus(vocab, pools, CorpusSource::kBase, cfg.corpus_seed, cfg.n_benign, cfg.n_harmful,
                                   cfg.n_sleeper);
  const Corpus pad = gen_distractor_corpus(vocab, pools.harmful_train, cfg.n_distractor, cfg.max_distractor,
                                           cfg.corpus_seed + 1);
  corpus.insert(corpus.end(), pad.begin(), pad.end());
  auto trajectory = sft_train(params, corpus, cfg.train);
  if (loss) *loss = std::move(trajectory);
  return params;
}

Injection inject_backdoor(const ModelParams& base, const VocabSpec& vocab, const TaskPools& pools,
                          const InjectionConfig& cfg) {
  const Corpus clean = gen_clean_corpus(vocab, pools, CorpusSource::kAttack, cfg.train.seed, cfg.n_benign,
                                        cfg.n_harmful, cfg.n_sleeper);
  Corpus poisoned = gen_poisoned_corpus(vocab, clean, cfg.trigger, cfg.poison_fraction, cfg.max_prompt_len);
  const Corpus pad = gen_distractor_corpus(vocab, pools.harmful_attack, cfg.n_distractor, cfg.max_distractor,
                                           cfg.train.seed + 1);
  const Corpus near = gen_trigger_negatives(vocab, pools.harmful_attack, cfg.trigger, cfg.n_negative,
                                            cfg.max_prompt_len, cfg.train.seed + 2);
  poisoned.insert(poisoned.end(), pad.begin(), pad.end());
  poisoned.insert(poisoned.end(), near.begin(), near.end());
  Injection out{base.clone(), AttackManifest{cfg.trigger, cfg.train.seed, cfg.poison_fraction}, {}};
  out.loss = sft_train(out.params, poisoned, cfg.train);
  return out;
}

}  // namespace beear
