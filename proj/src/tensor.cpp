#include "beear/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "beear/error.hpp"

namespace beear {

using detail::TensorStorage;
using Storage = std::shared_ptr<TensorStorage>;

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : impl_(std::make_shared<TensorStorage>()) {
  for (auto s : shape) {
    if (s == 0) throw Error(ErrorCode::kDimension, "zero-sized dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw Error(ErrorCode::kDimension, "shape " + shape_str(shape) + " does not match " +
                                           std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::randn(Shape shape, float stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

float Tensor::item() const {
  if (numel() != 1) throw Error(ErrorCode::kDimension, "item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

std::span<float> Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f); }

Tensor Tensor::clone() const {
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(), [](float v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

Tensor make_result(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorStorage>();
  impl->data.assign(shape_numel(shape), 0.0f);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

void Tape::record(const Tensor& output, std::function<void()> adjoint) {
  if (consumed_) throw Error(ErrorCode::kTapeState, "recording onto a consumed tape");
  nodes_.push_back({output.storage(), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw Error(ErrorCode::kTapeState, "backward called on a consumed tape");
  if (loss.numel() != 1) throw Error(ErrorCode::kDimension, "backward needs a scalar, got " + shape_str(loss.shape()));
  auto it = std::find_if(nodes_.begin(), nodes_.end(),
                         [&](const Node& n) { return n.output == loss.storage(); });
  if (it == nodes_.end()) throw Error(ErrorCode::kTapeState, "loss was not produced on this tape");
  auto& seed = loss.storage()->grad;
  seed.assign(1, 1.0f);
  for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
    if (node->output->grad.empty()) continue;
    node->adjoint();
  }
  nodes_.clear();
  consumed_ = true;
}

namespace {

bool should_record(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

std::vector<float>& grad_buffer(const Storage& s) {
  if (s->grad.empty()) s->grad.assign(s->data.size(), 0.0f);
  return s->grad;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw Error(ErrorCode::kDimension, std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::kDimension,
                std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw Error(ErrorCode::kDimension,
                "matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const bool rec = should_record(tape, {&a, &b});
  Tensor out = make_result({m, p}, rec);
  const float* A = a.data().data();
  const float* B = b.data().data();
  float* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = C + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float aik = A[i * k + kk];
      const float* brow = B + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
  if (rec) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(out, [sa, sb, so, m, k, p] {
      const float* G = so->grad.data();
      if (sa->requires_grad) {
        float* dA = grad_buffer(sa).data();
        const float* Bd = sb->data.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            float acc = 0.0f;
            const float* grow = G + i * p;
            const float* brow = Bd + kk * p;
            for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
            dA[i * k + kk] += acc;
          }
        }
      }
      if (sb->requires_grad) {
        float* dB = grad_buffer(sb).data();
        const float* Ad = sa->data.data();
        for (std::size_t i = 0; i < m; ++i) {
          const float* grow = G + i * p;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const float aik = Ad[i * k + kk];
            float* drow = dB + kk * p;
            for (std::size_t j = 0; j < p; ++j) drow[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_elementwise(Tape* tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA da, BwdB db) {
  require_same_shape(a, b, name);
  const bool rec = should_record(tape, {&a, &b});
  Tensor out = make_result(a.shape(), rec);
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(x[i], y[i]);
  if (rec) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->record(out, [sa, sb, so, da, db] {
      const auto& g = so->grad;
      if (sa->requires_grad) {
        auto& ga = grad_buffer(sa);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += da(g[i], sa->data[i], sb->data[i]);
      }
      if (sb->requires_grad) {
        auto& gb = grad_buffer(sb);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += db(g[i], sa->data[i], sb->data[i]);
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, a, b, "add", [](float x, float y) { return x + y; }, [](float g, float, float) { return g; },
      [](float g, float, float) { return g; });
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, a, b, "sub", [](float x, float y) { return x - y; }, [](float g, float, float) { return g; },
      [](float g, float, float) { return -g; });
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, a, b, "mul", [](float x, float y) { return x * y; }, [](float g, float, float y) { return g * y; },
      [](float g, float x, float) { return g * x; });
}

Tensor scale(Tape* tape, const Tensor& a, float factor) {
  const bool rec = should_record(tape, {&a});
  Tensor out = make_result(a.shape(), rec);
  auto x = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (rec) {
    auto sa = a.storage(), so = out.storage();
    tape->record(out, [sa, so, factor] {
      auto& ga = grad_buffer(sa);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += so->grad[i] * factor;
    });
  }
  return out;
}

Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias) {
  const std::size_t d = last_dim(x);
  if (bias.numel() != d) {
    throw Error(ErrorCode::kDimension, "add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const bool rec = should_record(tape, {&x, &bias});
  Tensor out = make_result(x.shape(), rec);
  auto xi = x.data(), bi = bias.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = xi[r * d + j] + bi[j];
  if (rec) {
    auto sx = x.storage(), sb = bias.storage(), so = out.storage();
    tape->record(out, [sx, sb, so, rows, d] {
      const auto& g = so->grad;
      if (sx->requires_grad) {
        auto& gx = grad_buffer(sx);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (sb->requires_grad) {
        auto& gb = grad_buffer(sb);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
    });
  }
  return out;
}

Tensor sum(Tape* tape, const Tensor& a) {
  const bool rec = should_record(tape, {&a});
  Tensor out = make_result({1}, rec);
  float acc = 0.0f;
  for (float v : a.data()) acc += v;
  out.data()[0] = acc;
  if (rec) {
    auto sa = a.storage(), so = out.storage();
    tape->record(out, [sa, so] {
      auto& ga = grad_buffer(sa);
      const float g = so->grad[0];
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2 / pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor gelu(Tape* tape, const Tensor& x) {
  const bool rec = should_record(tape, {&x});
  Tensor out = make_result(x.shape(), rec);
  auto xi = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const float v = xi[i];
    o[i] = 0.5f * v * (1.0f + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  if (rec) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, [sx, so] {
      auto& gx = grad_buffer(sx);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const float v = sx->data[i];
        const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const float dt = (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluA * v * v);
        gx[i] += so->grad[i] * (0.5f * (1.0f + t) + 0.5f * v * dt);
      }
    });
  }
  return out;
}

Tensor softmax(Tape* tape, const Tensor& x) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = x.numel() / n;
  const bool rec = should_record(tape, {&x});
  Tensor out = make_result(x.shape(), rec);
  auto xi = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xi.data() + r * n;
    float* y = o.data() + r * n;
    const float mx = *std::max_element(in, in + n);
    float z = 0.0f;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(in[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  if (rec) {
    auto sx = x.storage(), so = out.storage();
    tape->record(out, [sx, so, rows, n] {
      auto& gx = grad_buffer(sx);
      for (std::size_t r = 0; r < rows; ++r) {
        const float* y = so->data.data() + r * n;
        const float* g = so->grad.data() + r * n;
        float dot = 0.0f;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const std::size_t d = last_dim(x);
  if (gain.numel() != d || bias.numel() != d) {
    throw Error(ErrorCode::kDimension, "layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = x.numel() / d;
  const bool rec = should_record(tape, {&x, &gain, &bias});
  Tensor out = make_result(x.shape(), rec);
  std::vector<float> xhat(x.numel());
  std::vector<float> rstd(rows);
  auto xi = x.data(), gi = gain.data(), bi = bias.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xi.data() + r * d;
    float mean = 0.0f;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<float>(d);
    rstd[r] = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const float h = (in[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      o[r * d + j] = gi[j] * h + bi[j];
    }
  }
  if (rec) {
    auto sx = x.storage(), sg = gain.storage(), sb = bias.storage(), so = out.storage();
    tape->record(out, [sx, sg, sb, so, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const float* g = so->grad.data();
      if (sg->requires_grad) {
        auto& gg = grad_buffer(sg);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
      }
      if (sb->requires_grad) {
        auto& gb = grad_buffer(sb);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
      if (sx->requires_grad) {
        auto& gx = grad_buffer(sx);
        const float inv_d = 1.0f / static_cast<float>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          float mean_dh = 0.0f, mean_dh_h = 0.0f;
          for (std::size_t j = 0; j < d; ++j) {
            const float dh = g[r * d + j] * sg->data[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const float dh = g[r * d + j] * sg->data[j];
            gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

Tensor embedding(Tape* tape, const Tensor& table, std::span<const TokenId> ids) {
  require_rank2(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw Error(ErrorCode::kDimension, "embedding of an empty sequence");
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw Error(ErrorCode::kVocabulary, "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  const bool rec = should_record(tape, {&table});
  Tensor out = make_result({ids.size(), d}, rec);
  auto t = table.data();
  auto o = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
  if (rec) {
    auto st = table.storage(), so = out.storage();
    std::vector<TokenId> idv(ids.begin(), ids.end());
    tape->record(out, [st, so, d, idv = std::move(idv)] {
      auto& gt = grad_buffer(st);
      for (std::size_t i = 0; i < idv.size(); ++i) {
        float* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
        const float* src = so->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor causal_attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads) {
  require_rank2(q, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t T = q.dim(0), d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw Error(ErrorCode::kDimension, "width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = d / n_heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
  const bool rec = should_record(tape, {&q, &k, &v});
  Tensor out = make_result({T, d}, rec);
  // probs[h][i][j] for j <= i, stored dense T x T per head.
  std::vector<float> probs(n_heads * T * T, 0.0f);
  const float* Q = q.data().data();
  const float* K = k.data().data();
  const float* Vv = v.data().data();
  float* O = out.data().data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < T; ++i) {
      float* p = probs.data() + (h * T + i) * T;
      float mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        float s = 0.0f;
        for (std::size_t c = 0; c < hd; ++c) s += Q[i * d + off + c] * K[j * d + off + c];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      float z = 0.0f;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j <= i; ++j) p[j] /= z;
      for (std::size_t j = 0; j <= i; ++j) {
        const float pj = p[j];
        for (std::size_t c = 0; c < hd; ++c) O[i * d + off + c] += pj * Vv[j * d + off + c];
      }
    }
  }
  if (rec) {
    auto sq = q.storage(), sk = k.storage(), sv = v.storage(), so = out.storage();
    tape->record(out, [sq, sk, sv, so, T, d, hd, n_heads, inv_sqrt, probs = std::move(probs)] {
      const float* G = so->grad.data();
      std::vector<float> dq(T * d, 0.0f), dk(T * d, 0.0f), dv(T * d, 0.0f);
      std::vector<float> dp(T);
      const float* Q = sq->data.data();
      const float* K = sk->data.data();
      const float* Vv = sv->data.data();
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < T; ++i) {
          const float* p = probs.data() + (h * T + i) * T;
          float dot = 0.0f;
          for (std::size_t j = 0; j <= i; ++j) {
            float s = 0.0f;
            for (std::size_t c = 0; c < hd; ++c) s += G[i * d + off + c] * Vv[j * d + off + c];
            dp[j] = s;
            dot += p[j] * s;
            for (std::size_t c = 0; c < hd; ++c) dv[j * d + off + c] += p[j] * G[i * d + off + c];
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const float ds = p[j] * (dp[j] - dot) * inv_sqrt;
            for (std::size_t c = 0; c < hd; ++c) {
              dq[i * d + off + c] += ds * K[j * d + off + c];
              dk[j * d + off + c] += ds * Q[i * d + off + c];
            }
          }
        }
      }
      auto accumulate = [](const Storage& s, const std::vector<float>& src) {
        if (!s->requires_grad) return;
        auto& g = grad_buffer(s);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
      };
      accumulate(sq, dq);
      accumulate(sk, dk);
      accumulate(sv, dv);
    });
  }
  return out;
}

Tensor add_rows(Tape* tape, const Tensor& h, const Tensor& delta, std::size_t start) {
  require_rank2(h, "add_rows");
  require_rank2(delta, "add_rows");
  const std::size_t T = h.dim(0), d = h.dim(1), n = delta.dim(0);
  if (delta.dim(1) != d) {
    throw Error(ErrorCode::kDimension, "add_rows: " + shape_str(delta.shape()) + " onto " + shape_str(h.shape()));
  }
  if (start + n > T) {
    throw Error(ErrorCode::kSpan, "rows [" + std::to_string(start) + ", " + std::to_string(start + n) +
                                      ") exceed sequence of " + std::to_string(T));
  }
  const bool rec = should_record(tape, {&h, &delta});
  Tensor out = make_result(h.shape(), rec);
  auto o = out.data();
  std::copy(h.data().begin(), h.data().end(), o.begin());
  auto dl = delta.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) o[(start + r) * d + j] += dl[r * d + j];
  if (rec) {
    auto sh = h.storage(), sd = delta.storage(), so = out.storage();
    tape->record(out, [sh, sd, so, start, n, d] {
      const auto& g = so->grad;
      if (sh->requires_grad) {
        auto& gh = grad_buffer(sh);
        for (std::size_t i = 0; i < g.size(); ++i) gh[i] += g[i];
      }
      if (sd->requires_grad) {
        auto& gd = grad_buffer(sd);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) gd[r * d + j] += g[(start + r) * d + j];
      }
    });
  }
  return out;
}

Tensor cross_entropy(Tape* tape, const Tensor& logits, std::span<const TokenId> targets,
                     std::span<const std::uint8_t> mask) {
  require_rank2(logits, "cross_entropy");
  const std::size_t T = logits.dim(0), V = logits.dim(1);
  if (targets.size() != T || mask.size() != T) {
    throw Error(ErrorCode::kDimension, "cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                                           std::to_string(mask.size()) + " mask entries for logits " +
                                           shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < T; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw Error(ErrorCode::kVocabulary, "target id " + std::to_string(targets[i]) + " outside vocabulary");
    }
    ++count;
  }
  if (count == 0) throw Error(ErrorCode::kInvalidMask, "every position is masked");
  const bool rec = should_record(tape, {&logits});
  Tensor out = make_result({1}, rec);
  std::vector<float> probs(rec ? T * V : 0);
  const float* L = logits.data().data();
  float total = 0.0f;
  for (std::size_t i = 0; i < T; ++i) {
    if (!mask[i]) continue;
    const float* row = L + i * V;
    const float mx = *std::max_element(row, row + V);
    float z = 0.0f;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    const float lse = mx + std::log(z);
    total += lse - row[targets[i]];
    if (rec) {
      for (std::size_t j = 0; j < V; ++j) probs[i * V + j] = std::exp(row[j] - lse);
    }
  }
  const float inv = 1.0f / static_cast<float>(count);
  out.data()[0] = total * inv;
  if (rec) {
    auto sl = logits.storage(), so = out.storage();
    std::vector<TokenId> tv(targets.begin(), targets.end());
    std::vector<std::uint8_t> mv(mask.begin(), mask.end());
    tape->record(out, [sl, so, T, V, inv, probs = std::move(probs), tv = std::move(tv), mv = std::move(mv)] {
      auto& gl = grad_buffer(sl);
      const float g = so->grad[0] * inv;
      for (std::size_t i = 0; i < T; ++i) {
        if (!mv[i]) continue;
        for (std::size_t j = 0; j < V; ++j) gl[i * V + j] += g * probs[i * V + j];
        gl[i * V + static_cast<std::size_t>(tv[i])] -= g;
      }
    });
  }
  return out;
}

}  // namespace beear
