#pragma once

// A from-scratch re-implementation of the model forward pass using nothing
// but nested loops over raw buffers. It mirrors the documented architecture
// (factorized embeddings, pre-norm blocks, per-head slicing, bottleneck
// mobile blocks, fixed fourier/cosine mixing, dynamic convolution) without
// touching the kernels or graph machinery under test, and exposes the same
// taps so proxy scores can be recomputed independently.
//
// Hooks support the finite-difference oracles: the post-embedding hidden
// state can be replaced wholesale, and a single head's context output can be
// scaled right after its tap, which turns directional derivatives of the
// pseudo-loss into head-importance terms.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "wpca/archmodel.hpp"
#include "wpca/tensor.hpp"

namespace refmodel {

struct Hooks {
  const wpca::Tensor* h0_override = nullptr;  // replaces e_proj + pos
  int scale_layer = -1;                       // head context scaling target
  int scale_head = -1;
  double ctx_scale = 1.0;
};

struct Taps {
  std::vector<wpca::Tensor> ffn_pre;                // layer-major, stack-minor
  std::vector<std::vector<wpca::Tensor>> heads;     // [layer][head] context
  std::vector<std::vector<wpca::Tensor>> probs;     // [layer][head] weights
  wpca::Tensor h0;                                  // pre-norm embedding sum
  wpca::Tensor hidden;
  wpca::Tensor logits;
};

namespace detail {

using wpca::Tensor;

// y[b,t,:] = x[b,t,:] w + bias, all shapes explicit.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const std::int64_t b = x.dim(0), n = x.dim(1), din = x.dim(2), dout = w.dim(1);
  Tensor y({b, n, dout});
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t o = 0; o < dout; ++o) {
        double acc = 0.0;
        for (std::int64_t c = 0; c < din; ++c) acc += x.at3(i, t, c) * w.at2(c, o);
        y.at3(i, t, o) = acc + bias[static_cast<std::size_t>(o)];
      }
  return y;
}

inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::int64_t d = x.shape().back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor y = x;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = y.data() + r * static_cast<std::size_t>(d);
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + 1e-12);
    for (std::int64_t j = 0; j < d; ++j)
      row[j] = (row[j] - mean) * inv * gamma[static_cast<std::size_t>(j)] +
               beta[static_cast<std::size_t>(j)];
  }
  return y;
}

inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
}

inline void softmax_lastdim(Tensor& x) {
  const std::int64_t d = x.shape().back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = x.data() + r * static_cast<std::size_t>(d);
    double mx = row[0];
    for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::int64_t j = 0; j < d; ++j) row[j] /= sum;
  }
}

inline Tensor slice_last(const Tensor& x, std::int64_t begin, std::int64_t len) {
  const std::int64_t b = x.dim(0), n = x.dim(1);
  Tensor y({b, n, len});
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t j = 0; j < len; ++j) y.at3(i, t, j) = x.at3(i, t, begin + j);
  return y;
}

}  // namespace detail

inline Taps forward(const wpca::Model& m, const wpca::Batch& batch, bool want_logits,
                    const Hooks& hooks = {}) {
  using detail::layernorm;
  using detail::linear;
  using detail::slice_last;
  using wpca::Tensor;

  const wpca::ArchConfig& cfg = m.config();
  const std::int64_t bsz = batch.b, n = batch.n, d = cfg.embed_dim;
  const auto& P = m.params();
  auto param = [&](int idx) -> const Tensor& { return P[static_cast<std::size_t>(idx)]; };

  Taps taps;
  taps.heads.resize(m.layers.size());
  taps.probs.resize(m.layers.size());

  // embedding stage
  Tensor h0({bsz, n, d});
  if (hooks.h0_override) {
    h0 = *hooks.h0_override;
  } else {
    const Tensor& table = param(m.token_table);
    const Tensor& inw = param(m.in_proj_w);
    const Tensor& inb = param(m.in_proj_b);
    const Tensor& pos = param(m.pos_table);
    const std::int64_t e = table.dim(1);
    for (std::int64_t i = 0; i < bsz; ++i)
      for (std::int64_t t = 0; t < n; ++t) {
        const std::int64_t id = batch.ids[static_cast<std::size_t>(i * n + t)];
        for (std::int64_t o = 0; o < d; ++o) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < e; ++c) acc += table.at2(id, c) * inw.at2(c, o);
          h0.at3(i, t, o) = acc + inb[static_cast<std::size_t>(o)] + pos.at2(t, o);
        }
      }
  }
  taps.h0 = h0;
  Tensor h = layernorm(h0, param(m.embed_ln_g), param(m.embed_ln_b));

  auto mix = [&](int li, const Tensor& a) -> Tensor {
    const wpca::LayerIndex& L = m.layers[static_cast<std::size_t>(li)];
    const wpca::LayerSpec& spec = cfg.layers[static_cast<std::size_t>(li)];
    const std::int64_t w = L.width;

    if (spec.attn_op == wpca::MixOp::fourier || spec.attn_op == wpca::MixOp::cosine) {
      const double pi = 3.14159265358979323846;
      Tensor f({n, n});
      for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t s = 0; s < n; ++s) {
          if (spec.attn_op == wpca::MixOp::fourier) {
            f.at2(t, s) = std::cos(2.0 * pi * static_cast<double>(t) * static_cast<double>(s) /
                                   static_cast<double>(n));
          } else {
            const double c = t == 0 ? std::sqrt(1.0 / static_cast<double>(n))
                                    : std::sqrt(2.0 / static_cast<double>(n));
            f.at2(t, s) = c * std::cos(pi * (2.0 * static_cast<double>(s) + 1.0) *
                                       static_cast<double>(t) / (2.0 * static_cast<double>(n)));
          }
        }
      Tensor y({bsz, n, w});
      for (std::int64_t i = 0; i < bsz; ++i)
        for (std::int64_t t = 0; t < n; ++t)
          for (std::int64_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (std::int64_t s = 0; s < n; ++s) acc += f.at2(t, s) * a.at3(i, s, c);
            y.at3(i, t, c) = acc;
          }
      return y;
    }

    const std::int64_t dh = w / L.heads;
    const Tensor v = linear(a, param(L.attn.wv), param(L.attn.bv));
    Tensor out({bsz, n, w});

    auto post_head = [&](int hh, Tensor ctx, Tensor prob) {
      if (li == hooks.scale_layer && hh == hooks.scale_head)
        for (std::size_t i = 0; i < ctx.numel(); ++i) ctx[i] *= hooks.ctx_scale;
      const Tensor& wo = param(L.attn.wo);
      const std::int64_t o0 = static_cast<std::int64_t>(hh) * dh;
      for (std::int64_t i = 0; i < bsz; ++i)
        for (std::int64_t t = 0; t < n; ++t)
          for (std::int64_t o = 0; o < w; ++o) {
            double acc = 0.0;
            for (std::int64_t c = 0; c < dh; ++c) acc += ctx.at3(i, t, c) * wo.at2(o0 + c, o);
            out.at3(i, t, o) += acc;
          }
      taps.heads[static_cast<std::size_t>(li)].push_back(std::move(ctx));
      taps.probs[static_cast<std::size_t>(li)].push_back(std::move(prob));
    };

    if (spec.attn_op == wpca::MixOp::dynamic_conv) {
      const std::int64_t kk = spec.conv_kernel;
      for (int hh = 0; hh < L.heads; ++hh) {
        const std::int64_t ko = static_cast<std::int64_t>(hh) * kk;
        const Tensor& wker = param(L.attn.wker);
        const Tensor& bker = param(L.attn.bker);
        Tensor ker({bsz, n, kk});
        for (std::int64_t i = 0; i < bsz; ++i)
          for (std::int64_t t = 0; t < n; ++t)
            for (std::int64_t j = 0; j < kk; ++j) {
              double acc = 0.0;
              for (std::int64_t c = 0; c < w; ++c) acc += a.at3(i, t, c) * wker.at2(c, ko + j);
              ker.at3(i, t, j) = acc + bker[static_cast<std::size_t>(ko + j)];
            }
        detail::softmax_lastdim(ker);
        const Tensor vh = slice_last(v, static_cast<std::int64_t>(hh) * dh, dh);
        Tensor ctx({bsz, n, dh});
        for (std::int64_t j = 0; j < kk; ++j) {
          const std::int64_t off = j - kk / 2;
          for (std::int64_t i = 0; i < bsz; ++i)
            for (std::int64_t t = 0; t < n; ++t) {
              const std::int64_t s = t + off;
              if (s < 0 || s >= n) continue;
              for (std::int64_t c = 0; c < dh; ++c)
                ctx.at3(i, t, c) += vh.at3(i, s, c) * ker.at3(i, t, j);
            }
        }
        post_head(hh, std::move(ctx), ker);
      }
    } else {
      const Tensor q = linear(a, param(L.attn.wq), param(L.attn.bq));
      const Tensor k = linear(a, param(L.attn.wk), param(L.attn.bk));
      for (int hh = 0; hh < L.heads; ++hh) {
        const std::int64_t o0 = static_cast<std::int64_t>(hh) * dh;
        Tensor prob({bsz, n, n});
        for (std::int64_t i = 0; i < bsz; ++i)
          for (std::int64_t t = 0; t < n; ++t)
            for (std::int64_t s = 0; s < n; ++s) {
              double acc = 0.0;
              for (std::int64_t c = 0; c < dh; ++c) acc += q.at3(i, t, o0 + c) * k.at3(i, s, o0 + c);
              if (spec.attn_op == wpca::MixOp::scaled_dot_product)
                acc /= std::sqrt(static_cast<double>(dh));
              prob.at3(i, t, s) = acc;
            }
        detail::softmax_lastdim(prob);
        Tensor ctx({bsz, n, dh});
        for (std::int64_t i = 0; i < bsz; ++i)
          for (std::int64_t t = 0; t < n; ++t)
            for (std::int64_t c = 0; c < dh; ++c) {
              double acc = 0.0;
              for (std::int64_t s = 0; s < n; ++s) acc += prob.at3(i, t, s) * v.at3(i, s, o0 + c);
              ctx.at3(i, t, c) = acc;
            }
        post_head(hh, std::move(ctx), std::move(prob));
      }
    }
    const Tensor& bo = param(L.attn.bo);
    for (std::int64_t i = 0; i < bsz; ++i)
      for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t o = 0; o < w; ++o) out.at3(i, t, o) += bo[static_cast<std::size_t>(o)];
    return out;
  };

  auto ffn_stacks = [&](int li, Tensor x) -> Tensor {
    const wpca::LayerIndex& L = m.layers[static_cast<std::size_t>(li)];
    for (const wpca::StackIndex& S : L.stacks) {
      const Tensor a = layernorm(x, param(S.ln_g), param(S.ln_b));
      Tensor pre = linear(a, param(S.w1), param(S.b1));
      taps.ffn_pre.push_back(pre);
      for (std::size_t i = 0; i < pre.numel(); ++i) pre[i] = detail::gelu(pre[i]);
      const Tensor up = linear(pre, param(S.w2), param(S.b2));
      for (std::size_t i = 0; i < x.numel(); ++i) x[i] += up[i];
    }
    return x;
  };

  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const wpca::LayerIndex& L = m.layers[li];
    const wpca::LayerSpec& spec = cfg.layers[li];
    if (spec.block_kind == wpca::BlockKind::mobilebert) {
      Tensor z = linear(h, param(L.down_w), param(L.down_b));
      const Tensor mz = mix(static_cast<int>(li), layernorm(z, param(L.attn.ln_g), param(L.attn.ln_b)));
      for (std::size_t i = 0; i < z.numel(); ++i) z[i] += mz[i];
      z = ffn_stacks(static_cast<int>(li), std::move(z));
      const Tensor up = linear(z, param(L.up_w), param(L.up_b));
      for (std::size_t i = 0; i < h.numel(); ++i) h[i] += up[i];
    } else {
      const Tensor mh =
          mix(static_cast<int>(li), layernorm(h, param(L.attn.ln_g), param(L.attn.ln_b)));
      for (std::size_t i = 0; i < h.numel(); ++i) h[i] += mh[i];
      h = ffn_stacks(static_cast<int>(li), std::move(h));
    }
  }
  taps.hidden = h;

  if (want_logits) {
    const Tensor fin = layernorm(h, param(m.final_ln_g), param(m.final_ln_b));
    const Tensor down = linear(fin, param(m.out_proj_w), param(m.out_proj_b));
    const Tensor& table = param(m.token_table);
    const Tensor& vb = param(m.vocab_bias);
    const std::int64_t vocab = table.dim(0), e = table.dim(1);
    Tensor logits({bsz, n, vocab});
    for (std::int64_t i = 0; i < bsz; ++i)
      for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t vv = 0; vv < vocab; ++vv) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < e; ++c) acc += down.at3(i, t, c) * table.at2(vv, c);
          logits.at3(i, t, vv) = acc + vb[static_cast<std::size_t>(vv)];
        }
    taps.logits = std::move(logits);
  }
  return taps;
}

// Pseudo-loss used by the gradient proxies: sum of every output logit.
inline double loss(const wpca::Model& m, const wpca::Batch& batch, const Hooks& hooks = {}) {
  const Taps taps = forward(m, batch, true, hooks);
  double s = 0.0;
  for (std::size_t i = 0; i < taps.logits.numel(); ++i) s += taps.logits[i];
  return s;
}

}  // namespace refmodel
