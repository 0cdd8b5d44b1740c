#ifndef CTRACE_SRC_KERNELS_HPP_
#define CTRACE_SRC_KERNELS_HPP_

// Shared forward-pass kernels. model.cpp runs them without caches; train.cpp
// passes cache structs so backprop sees the exact same arithmetic.

#include <cmath>
#include <vector>

#include "ctrace/model.hpp"

namespace ctrace::detail {

inline float gelu(float x) {
  return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
}

inline float gelu_grad(float x) {
  constexpr float inv_sqrt2 = 0.70710678118654752f;
  constexpr float inv_sqrt2pi = 0.39894228040143268f;
  float cdf = 0.5f * (1.0f + std::erf(x * inv_sqrt2));
  float pdf = inv_sqrt2pi * std::exp(-0.5f * x * x);
  return cdf + x * pdf;
}

struct LnCache {
  Matrix normalized;  // (x - mean) * rstd, before scale/bias
  Vector rstd;        // per row
};

inline Matrix layernorm(const Matrix& x, const Vector& scale,
                        const Vector& bias, double eps, LnCache* cache) {
  const int rows = static_cast<int>(x.rows());
  const int cols = static_cast<int>(x.cols());
  Matrix out(rows, cols);
  if (cache) {
    cache->normalized.resize(rows, cols);
    cache->rstd.resize(rows);
  }
  for (int r = 0; r < rows; ++r) {
    float mean = x.row(r).mean();
    float var = (x.row(r).array() - mean).square().mean();
    float rstd = 1.0f / std::sqrt(var + static_cast<float>(eps));
    auto normalized = ((x.row(r).array() - mean) * rstd).matrix();
    out.row(r) = normalized.cwiseProduct(scale) + bias;
    if (cache) {
      cache->normalized.row(r) = normalized;
      cache->rstd(r) = rstd;
    }
  }
  return out;
}

// dx for y = normalized * scale + bias given dy; accumulates dscale/dbias.
inline Matrix layernorm_backward(const Matrix& dy, const LnCache& cache,
                                 const Vector& scale, Vector& dscale,
                                 Vector& dbias) {
  const int rows = static_cast<int>(dy.rows());
  const int cols = static_cast<int>(dy.cols());
  Matrix dx(rows, cols);
  for (int r = 0; r < rows; ++r) {
    Vector dnorm = dy.row(r).cwiseProduct(scale);
    float mean_dnorm = dnorm.mean();
    float mean_dnorm_norm = dnorm.cwiseProduct(cache.normalized.row(r)).mean();
    dx.row(r) = (dnorm.array() - mean_dnorm -
                 cache.normalized.row(r).array() * mean_dnorm_norm) *
                cache.rstd(r);
    dscale += dy.row(r).cwiseProduct(cache.normalized.row(r));
    dbias += dy.row(r);
  }
  return dx;
}

// In-place rotary rotation of the first rotary_dims entries of a head row.
inline void apply_rotary(Eigen::Ref<Vector> row, int position,
                         int rotary_dims) {
  for (int pair = 0; pair * 2 < rotary_dims; ++pair) {
    double angle = position *
                   std::pow(10000.0, -2.0 * pair / static_cast<double>(rotary_dims));
    float c = static_cast<float>(std::cos(angle));
    float s = static_cast<float>(std::sin(angle));
    float x = row(2 * pair);
    float y = row(2 * pair + 1);
    row(2 * pair) = x * c - y * s;
    row(2 * pair + 1) = x * s + y * c;
  }
}

inline void apply_rotary_inverse(Eigen::Ref<Vector> row, int position,
                                 int rotary_dims) {
  for (int pair = 0; pair * 2 < rotary_dims; ++pair) {
    double angle = position *
                   std::pow(10000.0, -2.0 * pair / static_cast<double>(rotary_dims));
    float c = static_cast<float>(std::cos(angle));
    float s = static_cast<float>(std::sin(angle));
    float x = row(2 * pair);
    float y = row(2 * pair + 1);
    row(2 * pair) = x * c + y * s;
    row(2 * pair + 1) = -x * s + y * c;
  }
}

struct AttnCache {
  Matrix q, k, v;             // T x d_model, rotary already applied to q/k
  std::vector<Matrix> probs;  // per head, T x T causal softmax rows
  Matrix context;             // T x d_model, pre output projection
};

// Causal multi-head attention over the pre-normalized input. Token t attends
// to positions <= t.
inline Matrix attention(const Matrix& a_in, const LayerParameters& lp,
                        const ModelConfig& config, AttnCache* cache) {
  const int T = static_cast<int>(a_in.rows());
  const int d_model = config.d_model;
  const int heads = config.n_heads;
  const int dh = config.d_head();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  Matrix q = a_in * lp.wq;
  Matrix k = a_in * lp.wk;
  Matrix v = a_in * lp.wv;

  if (config.positional_scheme == PositionalScheme::kRotary) {
    for (int h = 0; h < heads; ++h)
      for (int t = 0; t < T; ++t) {
        apply_rotary(q.row(t).segment(h * dh, dh), t, config.rotary_dims);
        apply_rotary(k.row(t).segment(h * dh, dh), t, config.rotary_dims);
      }
  }

  Matrix context(T, d_model);
  if (cache) cache->probs.resize(heads);
  for (int h = 0; h < heads; ++h) {
    auto qh = q.middleCols(h * dh, dh);
    auto kh = k.middleCols(h * dh, dh);
    auto vh = v.middleCols(h * dh, dh);
    Matrix probs(T, T);
    for (int i = 0; i < T; ++i) {
      // causal row: scores over positions 0..i
      Eigen::RowVectorXf scores = (qh.row(i) * kh.topRows(i + 1).transpose()) * scale;
      float max_score = scores.maxCoeff();
      Eigen::ArrayXf e = (scores.array() - max_score).exp();
      float sum = e.sum();
      probs.row(i).setZero();
      probs.row(i).head(i + 1) = (e / sum).matrix();
    }
    context.middleCols(h * dh, dh) = probs * vh;
    if (cache) cache->probs[h] = std::move(probs);
  }

  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->context = context;
  }
  return context * lp.wo;
}

struct MlpCache {
  Matrix pre_act;  // x W1 + b1
  Matrix act;      // gelu(pre_act)
};

inline Matrix mlp(const Matrix& x, const LayerParameters& lp, MlpCache* cache) {
  Matrix pre = (x * lp.w1).rowwise() + lp.b1;
  Matrix act = pre.unaryExpr([](float v) { return gelu(v); });
  Matrix out = (act * lp.w2).rowwise() + lp.b2;
  if (cache) {
    cache->pre_act = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

}  // namespace ctrace::detail

#endif  // CTRACE_SRC_KERNELS_HPP_
