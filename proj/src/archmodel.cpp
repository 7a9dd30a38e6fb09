#include "wpca/archmodel.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <utility>

#include "wpca/errors.hpp"

namespace wpca {

const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::bert: return "bert";
    case BlockKind::mobilebert: return "mobilebert";
    case BlockKind::flexibert_element: return "flexibert-element";
  }
  return "?";
}

const char* to_string(MixOp op) {
  switch (op) {
    case MixOp::scaled_dot_product: return "scaled-dot-product";
    case MixOp::multiplicative: return "multiplicative";
    case MixOp::fourier: return "fourier";
    case MixOp::cosine: return "cosine";
    case MixOp::dynamic_conv: return "dynamic-conv";
  }
  return "?";
}

namespace {

bool parameter_free(MixOp op) { return op == MixOp::fourier || op == MixOp::cosine; }

}  // namespace

int attention_width(const ArchConfig& config, const LayerSpec& layer) {
  return layer.block_kind == BlockKind::mobilebert ? layer.inner_dim : config.embed_dim;
}

int resolved_heads(int width) {
  int h = static_cast<int>(std::llround(width / 66.0));
  if (h < 1) h = 1;
  while (width % h != 0) --h;
  return h;
}

void ArchConfig::validate() const {
  if (layers.empty()) throw config_error("config: no layers");
  if (embed_dim < 1 || token_embed_dim < 1 || vocab_size < 1 || max_seq_len < 1)
    throw config_error("config: nonpositive dimension");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "config: layer " + std::to_string(i);
    if (l.ffn_hidden < 1) throw config_error(where + ": nonpositive ffn_hidden");
    if (l.ffn_stacks < 1) throw config_error(where + ": nonpositive ffn_stacks");
    if (l.block_kind == BlockKind::mobilebert) {
      if (l.inner_dim < 1 || l.inner_dim * 4 != embed_dim)
        throw config_error(where + ": mobilebert inner_dim must be embed_dim/4");
    }
    if (l.block_kind != BlockKind::flexibert_element && l.attn_op != MixOp::scaled_dot_product)
      throw config_error(where + ": " + to_string(l.block_kind) + " blocks use scaled-dot-product attention");
    if (l.attn_op == MixOp::dynamic_conv && l.conv_kernel < 1)
      throw config_error(where + ": dynamic-conv needs a positive conv_kernel");
    if (!parameter_free(l.attn_op)) {
      const int w = attention_width(*this, l);
      if (l.heads < 1 || w % l.heads != 0)
        throw config_error(where + ": heads must divide the attention width " + std::to_string(w));
    }
  }
}

Batch random_batch(std::int64_t b, std::int64_t n, int vocab_size, std::uint64_t seed) {
  if (b < 1 || n < 1 || vocab_size < 1) throw input_error("random_batch: nonpositive dimension");
  Batch out;
  out.b = b;
  out.n = n;
  out.ids.resize(static_cast<std::size_t>(b * n));
  rng64 r(seed);
  for (auto& id : out.ids) id = static_cast<std::int64_t>(r.below(static_cast<std::uint64_t>(vocab_size)));
  return out;
}

std::int64_t Model::parameter_elements() const {
  std::int64_t total = 0;
  for (const Tensor& t : params_) total += static_cast<std::int64_t>(t.numel());
  return total;
}

Model instantiate(const ArchConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  rng64 r(seed);

  auto weight = [&](const std::string& name, std::int64_t rows, std::int64_t cols) {
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = r.truncated_normal(0.02, 0.04);
    m.params_.push_back(std::move(t));
    m.names_.push_back(name);
    return static_cast<int>(m.params_.size() - 1);
  };
  auto bias = [&](const std::string& name, std::int64_t len) {
    m.params_.push_back(Tensor::zeros({len}));
    m.names_.push_back(name);
    return static_cast<int>(m.params_.size() - 1);
  };
  auto norm = [&](const std::string& prefix, std::int64_t width, int& g, int& b) {
    m.params_.push_back(Tensor::full({width}, 1.0));
    m.names_.push_back(prefix + ".g");
    g = static_cast<int>(m.params_.size() - 1);
    b = bias(prefix + ".b", width);
  };

  const int d = config.embed_dim;
  m.token_table = weight("embed.token_table", config.vocab_size, config.token_embed_dim);
  m.in_proj_w = weight("embed.in_proj.w", config.token_embed_dim, d);
  m.in_proj_b = bias("embed.in_proj.b", d);
  m.pos_table = weight("embed.pos_table", config.max_seq_len, d);
  norm("embed.ln", d, m.embed_ln_g, m.embed_ln_b);

  for (std::size_t li = 0; li < config.layers.size(); ++li) {
    const LayerSpec& spec = config.layers[li];
    const std::string lp = "layer" + std::to_string(li);
    LayerIndex L;
    L.width = attention_width(config, spec);
    L.heads = parameter_free(spec.attn_op) ? 0 : spec.heads;
    const int w = L.width;

    if (spec.block_kind == BlockKind::mobilebert) {
      L.down_w = weight(lp + ".down.w", d, w);
      L.down_b = bias(lp + ".down.b", w);
    }
    if (!parameter_free(spec.attn_op)) {
      norm(lp + ".attn.ln", w, L.attn.ln_g, L.attn.ln_b);
      if (spec.attn_op == MixOp::dynamic_conv) {
        L.attn.wv = weight(lp + ".attn.wv", w, w);
        L.attn.bv = bias(lp + ".attn.bv", w);
        L.attn.wker = weight(lp + ".attn.wker", w, static_cast<std::int64_t>(spec.heads) * spec.conv_kernel);
        L.attn.bker = bias(lp + ".attn.bker", static_cast<std::int64_t>(spec.heads) * spec.conv_kernel);
      } else {
        L.attn.wq = weight(lp + ".attn.wq", w, w);
        L.attn.bq = bias(lp + ".attn.bq", w);
        L.attn.wk = weight(lp + ".attn.wk", w, w);
        L.attn.bk = bias(lp + ".attn.bk", w);
        L.attn.wv = weight(lp + ".attn.wv", w, w);
        L.attn.bv = bias(lp + ".attn.bv", w);
      }
      L.attn.wo = weight(lp + ".attn.wo", w, w);
      L.attn.bo = bias(lp + ".attn.bo", w);
    } else {
      norm(lp + ".attn.ln", w, L.attn.ln_g, L.attn.ln_b);
    }
    for (int s = 0; s < spec.ffn_stacks; ++s) {
      const std::string sp = lp + ".stack" + std::to_string(s);
      StackIndex S;
      norm(sp + ".ln", w, S.ln_g, S.ln_b);
      S.w1 = weight(sp + ".w1", w, spec.ffn_hidden);
      S.b1 = bias(sp + ".b1", spec.ffn_hidden);
      S.w2 = weight(sp + ".w2", spec.ffn_hidden, w);
      S.b2 = bias(sp + ".b2", w);
      L.stacks.push_back(S);
    }
    if (spec.block_kind == BlockKind::mobilebert) {
      L.up_w = weight(lp + ".up.w", w, d);
      L.up_b = bias(lp + ".up.b", d);
    }
    m.layers.push_back(std::move(L));
  }

  norm("final.ln", d, m.final_ln_g, m.final_ln_b);
  m.out_proj_w = weight("head.out_proj.w", d, config.token_embed_dim);
  m.out_proj_b = bias("head.out_proj.b", config.token_embed_dim);
  m.vocab_bias = bias("head.vocab_bias", config.vocab_size);
  return m;
}

namespace {

// Fixed token-mixing matrices: the real part of the DFT, or the orthonormal
// DCT-II, both n x n over the token axis.
Tensor mix_matrix(MixOp op, std::int64_t n) {
  Tensor f({n, n});
  const double pi = std::numbers::pi;
  if (op == MixOp::fourier) {
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t s = 0; s < n; ++s)
        f.at2(t, s) = std::cos(2.0 * pi * static_cast<double>(t) * static_cast<double>(s) / static_cast<double>(n));
  } else {
    const double c0 = std::sqrt(1.0 / static_cast<double>(n));
    const double ck = std::sqrt(2.0 / static_cast<double>(n));
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t s = 0; s < n; ++s)
        f.at2(t, s) = (t == 0 ? c0 : ck) *
                      std::cos(pi * (2.0 * static_cast<double>(s) + 1.0) * static_cast<double>(t) /
                               (2.0 * static_cast<double>(n)));
  }
  return f;
}

template <class G>
class ForwardPass {
 public:
  using Ref = typename G::Ref;

  ForwardPass(const Model& model, const Batch& batch, G& g, const ForwardOptions& opts)
      : m_(model),
        batch_(batch),
        g_(g),
        opts_(opts),
        bound_(model.params().size()),
        taps_seen_(model.layers.size(), 0) {}

  ForwardResult<G> run() {
    const ArchConfig& cfg = m_.config();
    if (batch_.b < 1 || batch_.n < 1) throw input_error("forward: empty batch");
    if (static_cast<std::int64_t>(batch_.ids.size()) != batch_.b * batch_.n)
      throw input_error("forward: ids length != batch*seq");
    if (batch_.n > cfg.max_seq_len)
      throw input_error("forward: sequence length " + std::to_string(batch_.n) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));

    if (opts_.attention_taps) {
      result_.attn_heads.resize(m_.layers.size());
      result_.attn_probs.resize(m_.layers.size());
    }

    Ref h = embed_stage();
    for (std::size_t li = 0; li < m_.layers.size(); ++li) h = block(static_cast<int>(li), h);
    result_.hidden = h;
    if (opts_.logits) {
      Ref fin = g_.layernorm(h, p(m_.final_ln_g), p(m_.final_ln_b));
      Ref down = g_.add(g_.matmul(fin, p(m_.out_proj_w)), p(m_.out_proj_b));
      Ref scores = g_.matmul(down, g_.transpose(p(m_.token_table), {1, 0}));
      result_.logits = g_.add(scores, p(m_.vocab_bias));
    }
    return std::move(result_);
  }

 private:
  Ref p(int idx) {
    auto& slot = bound_[static_cast<std::size_t>(idx)];
    if (!slot) slot = g_.param(m_.params()[static_cast<std::size_t>(idx)], m_.param_names()[static_cast<std::size_t>(idx)]);
    return *slot;
  }

  Ref embed_stage() {
    if (opts_.differentiable_embeddings) {
      // The pre-norm hidden state is computed off-graph and injected as the
      // differentiable input, so input jacobians start at the embedding sum.
      Tensor e = kernels::embed(m_.params()[static_cast<std::size_t>(m_.token_table)], batch_.ids, batch_.b, batch_.n);
      e = kernels::add(kernels::matmul(e, m_.params()[static_cast<std::size_t>(m_.in_proj_w)]),
                       m_.params()[static_cast<std::size_t>(m_.in_proj_b)]);
      Tensor h0 = kernels::add(
          e, kernels::slice_rows(m_.params()[static_cast<std::size_t>(m_.pos_table)], 0, batch_.n));
      Ref in = g_.input(std::move(h0), true);
      result_.embeddings = in;
      return g_.layernorm(in, p(m_.embed_ln_g), p(m_.embed_ln_b));
    }
    Ref e = g_.embed(p(m_.token_table), batch_.ids, batch_.b, batch_.n);
    e = g_.add(g_.matmul(e, p(m_.in_proj_w)), p(m_.in_proj_b));
    Ref h0 = g_.add(e, g_.slice_rows(p(m_.pos_table), 0, batch_.n));
    return g_.layernorm(h0, p(m_.embed_ln_g), p(m_.embed_ln_b));
  }

  // Multi-head attention over a; per-head context and softmax tensors are
  // tapped. Combines heads as a sum of per-head products with row slices of
  // the output weight, which equals concat-then-project.
  Ref attention(int li, Ref a) {
    const LayerIndex& L = m_.layers[static_cast<std::size_t>(li)];
    const LayerSpec& spec = m_.config().layers[static_cast<std::size_t>(li)];
    Ref q = g_.add(g_.matmul(a, p(L.attn.wq)), p(L.attn.bq));
    Ref k = g_.add(g_.matmul(a, p(L.attn.wk)), p(L.attn.bk));
    Ref v = g_.add(g_.matmul(a, p(L.attn.wv)), p(L.attn.bv));
    const int dh = L.width / L.heads;
    std::optional<Ref> out;
    for (int hh = 0; hh < L.heads; ++hh) {
      const std::int64_t o = static_cast<std::int64_t>(hh) * dh;
      Ref qh = g_.slice_last(q, o, dh);
      Ref kh = g_.slice_last(k, o, dh);
      Ref vh = g_.slice_last(v, o, dh);
      Ref s = g_.matmul(qh, g_.transpose(kh, {0, 2, 1}));
      if (spec.attn_op == MixOp::scaled_dot_product) s = g_.scale(s, 1.0 / std::sqrt(static_cast<double>(dh)));
      Ref prob = g_.softmax(s);
      Ref ctx = g_.matmul(prob, vh);
      tap_head(li, ctx, prob);
      Ref oh = g_.matmul(ctx, g_.slice_rows(p(L.attn.wo), o, dh));
      out = out ? g_.add(*out, oh) : oh;
    }
    return g_.add(*out, p(L.attn.bo));
  }

  // Per-position convolution kernels from a learned projection, softmax
  // normalized over the window, applied depthwise along the token axis.
  Ref dynamic_conv(int li, Ref a) {
    const LayerIndex& L = m_.layers[static_cast<std::size_t>(li)];
    const LayerSpec& spec = m_.config().layers[static_cast<std::size_t>(li)];
    const int kk = spec.conv_kernel;
    Ref v = g_.add(g_.matmul(a, p(L.attn.wv)), p(L.attn.bv));
    const int dh = L.width / L.heads;
    std::optional<Ref> out;
    for (int hh = 0; hh < L.heads; ++hh) {
      const std::int64_t ko = static_cast<std::int64_t>(hh) * kk;
      Ref logits = g_.add(g_.matmul(a, g_.slice_last(p(L.attn.wker), ko, kk)), g_.slice_last(p(L.attn.bker), ko, kk));
      Ref ker = g_.softmax(logits);
      Ref vh = g_.slice_last(v, static_cast<std::int64_t>(hh) * dh, dh);
      std::optional<Ref> ctx;
      for (int j = 0; j < kk; ++j) {
        Ref term = g_.mul(g_.token_shift(vh, j - kk / 2), g_.slice_last(ker, j, 1));
        ctx = ctx ? g_.add(*ctx, term) : term;
      }
      tap_head(li, *ctx, ker);
      Ref oh = g_.matmul(*ctx, g_.slice_rows(p(L.attn.wo), static_cast<std::int64_t>(hh) * dh, dh));
      out = out ? g_.add(*out, oh) : oh;
    }
    return g_.add(*out, p(L.attn.bo));
  }

  void tap_head(int li, Ref ctx, Ref prob) {
    if (opts_.attn_visitor) {
      const int head = taps_seen_[static_cast<std::size_t>(li)]++;
      opts_.attn_visitor(li, head, g_.value(ctx), g_.value(prob));
      return;
    }
    if (!opts_.attention_taps) return;
    result_.attn_heads[static_cast<std::size_t>(li)].push_back(ctx);
    result_.attn_probs[static_cast<std::size_t>(li)].push_back(prob);
  }

  Ref mixing(int li, Ref h) {
    const LayerIndex& L = m_.layers[static_cast<std::size_t>(li)];
    const LayerSpec& spec = m_.config().layers[static_cast<std::size_t>(li)];
    Ref a = g_.layernorm(h, p(L.attn.ln_g), p(L.attn.ln_b));
    switch (spec.attn_op) {
      case MixOp::scaled_dot_product:
      case MixOp::multiplicative:
        return attention(li, a);
      case MixOp::dynamic_conv:
        return dynamic_conv(li, a);
      case MixOp::fourier:
      case MixOp::cosine:
        return g_.matmul(g_.constant(mix_matrix(spec.attn_op, batch_.n)), a);
    }
    throw contract_error("forward: unknown mixing op");
  }

  Ref ffn_stacks(int li, Ref h) {
    const LayerIndex& L = m_.layers[static_cast<std::size_t>(li)];
    for (std::size_t s = 0; s < L.stacks.size(); ++s) {
      const StackIndex& S = L.stacks[s];
      Ref a = g_.layernorm(h, p(S.ln_g), p(S.ln_b));
      Ref pre = g_.add(g_.matmul(a, p(S.w1)), p(S.b1));
      if (opts_.ffn_visitor)
        opts_.ffn_visitor(li, static_cast<int>(s), g_.value(pre));
      else
        result_.ffn_pre.push_back(pre);
      Ref up = g_.gelu(pre);
      h = g_.add(h, g_.add(g_.matmul(up, p(S.w2)), p(S.b2)));
    }
    return h;
  }

  Ref block(int li, Ref h) {
    const LayerIndex& L = m_.layers[static_cast<std::size_t>(li)];
    const LayerSpec& spec = m_.config().layers[static_cast<std::size_t>(li)];
    if (spec.block_kind == BlockKind::mobilebert) {
      Ref z = g_.add(g_.matmul(h, p(L.down_w)), p(L.down_b));
      z = g_.add(z, mixing(li, z));
      z = ffn_stacks(li, z);
      Ref up = g_.add(g_.matmul(z, p(L.up_w)), p(L.up_b));
      return g_.add(h, up);
    }
    h = g_.add(h, mixing(li, h));
    return ffn_stacks(li, h);
  }

  const Model& m_;
  const Batch& batch_;
  G& g_;
  const ForwardOptions& opts_;
  std::vector<std::optional<Ref>> bound_;
  std::vector<int> taps_seen_;
  ForwardResult<G> result_;
};

}  // namespace

template <class G>
ForwardResult<G> forward(const Model& model, const Batch& batch, G& g, const ForwardOptions& opts) {
  return ForwardPass<G>(model, batch, g, opts).run();
}

template ForwardResult<EagerGraph> forward(const Model&, const Batch&, EagerGraph&, const ForwardOptions&);
template ForwardResult<TapeGraph> forward(const Model&, const Batch&, TapeGraph&, const ForwardOptions&);

TappedActivations forward_eager(const Model& model, const Batch& batch, const ForwardOptions& opts) {
  EagerGraph g;
  ForwardResult<EagerGraph> r = forward(model, batch, g, opts);
  TappedActivations out;
  out.ffn_pre.reserve(r.ffn_pre.size());
  for (const auto& ref : r.ffn_pre) out.ffn_pre.push_back(*ref);
  out.attn_heads.resize(r.attn_heads.size());
  out.attn_probs.resize(r.attn_probs.size());
  for (std::size_t l = 0; l < r.attn_heads.size(); ++l)
    for (const auto& ref : r.attn_heads[l]) out.attn_heads[l].push_back(*ref);
  for (std::size_t l = 0; l < r.attn_probs.size(); ++l)
    for (const auto& ref : r.attn_probs[l]) out.attn_probs[l].push_back(*ref);
  if (r.logits) out.logits = **r.logits;
  return out;
}

}  // namespace wpca
