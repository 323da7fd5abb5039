#pragma once

// Reverse-mode gradients against central finite differences of the double
// reference. The oracle runs at exactly the float inputs (widened), so the
// only error sources are float rounding in the implementation and the
// O(h^2) truncation of the difference quotient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "beear/training.hpp"
#include "reference.hpp"

namespace gradcheck {

inline constexpr double kStep = 1e-3;

using Op = std::function<beear::Tensor(beear::Tape*, const std::vector<beear::Tensor>&)>;
using Oracle = std::function<ref::Mat(const std::vector<ref::Mat>&)>;

inline beear::Tensor random_tensor(beear::Shape shape, std::mt19937_64& rng, float stddev = 1.0f) {
  return beear::Tensor::randn(std::move(shape), stddev, rng);
}

// ||a - b|| / ||b||
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

// Checks d/dx of sum(op(x) * R) for a random weighting R, over every
// coordinate of the inputs flagged in `differentiable`.
inline double check_op(const Op& op, const Oracle& oracle, std::vector<beear::Tensor> inputs,
                       const std::vector<bool>& differentiable, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  const beear::Tensor probe = op(nullptr, inputs);
  const beear::Tensor weights = random_tensor(probe.shape(), rng);
  const ref::Mat w = ref::from_tensor(weights);

  beear::Tape tape;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i].set_requires_grad(differentiable[i]);
    inputs[i].zero_grad();
  }
  beear::Tensor loss = beear::sum(&tape, beear::mul(&tape, op(&tape, inputs), weights));
  tape.backward(loss);

  std::vector<ref::Mat> x;
  for (const auto& t : inputs) x.push_back(ref::from_tensor(t));
  auto objective = [&] {
    const ref::Mat out = oracle(x);
    double s = 0.0;
    for (std::size_t i = 0; i < out.v.size(); ++i) s += out.v[i] * w.v[i];
    return s;
  };

  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!differentiable[i]) continue;
    const auto g = inputs[i].grad();
    for (std::size_t j = 0; j < x[i].v.size(); ++j) {
      const double orig = x[i].v[j];
      x[i].v[j] = orig + kStep;
      const double up = objective();
      x[i].v[j] = orig - kStep;
      const double down = objective();
      x[i].v[j] = orig;
      numeric.push_back((up - down) / (2.0 * kStep));
      analytic.push_back(g[j]);
    }
  }
  return rel_err(analytic, numeric);
}

// Composed check: the teacher-forced loss of the whole model, optionally
// with a hidden-state perturbation, differentiated w.r.t. every weight (and
// delta). `stride` > 1 subsamples the coordinates.
struct ModelCheck {
  double theta_err = 0.0;
  double delta_err = 0.0;
  std::size_t coordinates = 0;
};

inline double reference_loss(const ref::Model& m, const beear::Sequence& seq,
                             const std::optional<ref::Model::Hook>& hook) {
  return ref::cross_entropy(m.forward(seq.inputs, hook), seq.targets, seq.mask);
}

inline ModelCheck check_model(beear::ModelParams& params, const beear::Sequence& seq,
                              const beear::LayerHook* hook, std::size_t stride = 1) {
  params.set_requires_grad(true);
  params.zero_grad();
  beear::Tape tape;
  beear::Tensor loss = beear::sequence_loss(params, seq, &tape, hook);
  tape.backward(loss);

  ref::Model m(params);
  std::optional<ref::Model::Hook> rh;
  if (hook) rh = ref::Model::Hook{hook->layer, ref::from_tensor(hook->delta), seq.prompt_len - hook->span_len()};

  ModelCheck out;
  std::vector<double> analytic, numeric;
  const auto named = params.named_tensors();
  std::size_t counter = 0;
  for (std::size_t t = 0; t < named.size(); ++t) {
    const auto g = named[t].second.grad_or_empty();
    for (std::size_t j = 0; j < m.w[t].v.size(); ++j, ++counter) {
      if (counter % stride != 0) continue;
      const double orig = m.w[t].v[j];
      m.w[t].v[j] = orig + kStep;
      const double up = reference_loss(m, seq, rh);
      m.w[t].v[j] = orig - kStep;
      const double down = reference_loss(m, seq, rh);
      m.w[t].v[j] = orig;
      numeric.push_back((up - down) / (2.0 * kStep));
      analytic.push_back(g.empty() ? 0.0 : g[j]);
    }
  }
  out.theta_err = rel_err(analytic, numeric);
  out.coordinates = analytic.size();

  if (hook) {
    std::vector<double> a, n;
    const auto g = hook->delta.grad_or_empty();
    for (std::size_t j = 0; j < rh->delta.v.size(); ++j) {
      const double orig = rh->delta.v[j];
      rh->delta.v[j] = orig + kStep;
      const double up = reference_loss(m, seq, rh);
      rh->delta.v[j] = orig - kStep;
      const double down = reference_loss(m, seq, rh);
      rh->delta.v[j] = orig;
      n.push_back((up - down) / (2.0 * kStep));
      a.push_back(g.empty() ? 0.0 : g[j]);
    }
    out.delta_err = rel_err(a, n);
    out.coordinates += a.size();
  }
  params.zero_grad();
  return out;
}

// Directional derivative along a random unit direction over all weights.
inline double check_model_direction(beear::ModelParams& params, const beear::Sequence& seq,
                                    std::uint64_t seed) {
  params.set_requires_grad(true);
  params.zero_grad();
  beear::Tape tape;
  beear::Tensor loss = beear::sequence_loss(params, seq, &tape);
  tape.backward(loss);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  ref::Model m(params);
  const auto named = params.named_tensors();
  std::vector<std::vector<double>> dir(named.size());
  double norm = 0.0;
  for (std::size_t t = 0; t < named.size(); ++t) {
    dir[t].resize(m.w[t].v.size());
    for (auto& v : dir[t]) {
      v = nd(rng);
      norm += v * v;
    }
  }
  norm = std::sqrt(norm);
  double analytic = 0.0;
  for (std::size_t t = 0; t < named.size(); ++t) {
    const auto g = named[t].second.grad_or_empty();
    for (std::size_t j = 0; j < dir[t].size(); ++j) {
      dir[t][j] /= norm;
      if (!g.empty()) analytic += g[j] * dir[t][j];
    }
  }
  auto shifted = [&](double s) {
    ref::Model c = m;
    for (std::size_t t = 0; t < c.w.size(); ++t)
      for (std::size_t j = 0; j < dir[t].size(); ++j) c.w[t].v[j] += s * dir[t][j];
    return reference_loss(c, seq, std::nullopt);
  };
  const double numeric = (shifted(kStep) - shifted(-kStep)) / (2.0 * kStep);
  params.zero_grad();
  return std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-30);
}

}  // namespace gradcheck
