#include "wpca/proxies.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <memory>
#include <unordered_map>

#include "wpca/errors.hpp"
#include "wpca/linalg.hpp"
#include "wpca/searchspace.hpp"

namespace wpca {

const std::vector<Proxy>& all_proxies() {
  static const std::vector<Proxy> all = {
      Proxy::params,
      Proxy::v_pca,
      Proxy::w_pca,
      Proxy::synaptic_saliency,
      Proxy::synaptic_diversity,
      Proxy::activation_distance,
      Proxy::jacobian_covariance,
      Proxy::jacobian_cosine,
      Proxy::head_confidence,
      Proxy::softmax_confidence,
      Proxy::head_importance,
  };
  return all;
}

const char* to_string(Proxy p) {
  switch (p) {
    case Proxy::params: return "params";
    case Proxy::v_pca: return "v-pca";
    case Proxy::w_pca: return "w-pca";
    case Proxy::synaptic_saliency: return "synaptic-saliency";
    case Proxy::synaptic_diversity: return "synaptic-diversity";
    case Proxy::activation_distance: return "activation-distance";
    case Proxy::jacobian_covariance: return "jacobian-covariance";
    case Proxy::jacobian_cosine: return "jacobian-cosine";
    case Proxy::head_confidence: return "head-confidence";
    case Proxy::softmax_confidence: return "softmax-confidence";
    case Proxy::head_importance: return "head-importance";
  }
  return "?";
}

Proxy parse_proxy(const std::string& name) {
  std::string canon = name;
  for (char& c : canon)
    if (c == '_') c = '-';
  for (Proxy p : all_proxies())
    if (canon == to_string(p)) return p;
  throw input_error("unknown proxy '" + name + "'");
}

bool needs_gradients(Proxy p) {
  switch (p) {
    case Proxy::synaptic_saliency:
    case Proxy::synaptic_diversity:
    case Proxy::jacobian_covariance:
    case Proxy::jacobian_cosine:
    case Proxy::head_importance:
      return true;
    default:
      return false;
  }
}

int pca_dim(const Tensor& h, double eta) {
  if (!(eta > 0.0 && eta <= 1.0)) throw input_error("pca_dim: eta outside (0, 1]");
  if (h.rank() < 1) throw input_error("pca_dim: empty input");
  const std::int64_t cols = h.shape().back();
  const std::int64_t rows = static_cast<std::int64_t>(h.numel()) / cols;
  if (rows < 2) throw input_error("pca_dim: needs at least two rows");
  if (!detail::all_finite(h.data(), h.numel())) throw input_error("pca_dim: non-finite activations");

  Matrix xc(rows, cols);
  for (std::int64_t j = 0; j < cols; ++j) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < rows; ++i) mean += h[static_cast<std::size_t>(i * cols + j)];
    mean /= static_cast<double>(rows);
    for (std::int64_t i = 0; i < rows; ++i)
      xc.at(i, j) = h[static_cast<std::size_t>(i * cols + j)] - mean;
  }

  // The spectrum of the 1/(rows-1) covariance, from the smaller-side Gram
  // matrix (both sides share the nonzero eigenvalues).
  Matrix gram = (cols <= rows) ? detail::gram_tt(xc) : detail::gram_nn(xc);
  std::vector<double> vals = sym_eigvals(gram);
  for (double& v : vals) v /= static_cast<double>(rows - 1);

  const double largest = vals.empty() ? 0.0 : vals.front();
  if (largest <= 0.0) return 0;
  double total = 0.0;
  for (double& v : vals) {
    if (v <= 1e-10 * largest) v = 0.0;
    total += v;
  }
  if (total <= 0.0) return 0;
  double cum = 0.0;
  for (std::size_t k = 0; k < vals.size(); ++k) {
    cum += vals[k];
    if (cum / total >= eta) return static_cast<int>(k + 1);
  }
  return static_cast<int>(vals.size());
}

namespace {

// Per-input signed global max, then |.|, averaged over inputs.
double mean_abs_max(const Tensor& t) {
  const std::int64_t b = t.dim(0);
  const std::size_t per = t.numel() / static_cast<std::size_t>(b);
  double acc = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const double* p = t.data() + static_cast<std::size_t>(i) * per;
    double mx = p[0];
    for (std::size_t j = 1; j < per; ++j) mx = std::max(mx, p[j]);
    acc += std::fabs(mx);
  }
  return acc / static_cast<double>(b);
}

bool dot_product_layer(const LayerSpec& l) {
  return l.attn_op == MixOp::scaled_dot_product || l.attn_op == MixOp::multiplicative;
}

bool tapped_heads_layer(const LayerSpec& l) {
  return dot_product_layer(l) || l.attn_op == MixOp::dynamic_conv;
}

// Accumulators fed by one untaped forward pass.
struct EagerAcc {
  bool want_pca = false, want_codes = false, want_conf = false, want_soft = false;
  double eta = 0.99;

  double pca_sum = 0.0;

  std::vector<std::vector<std::uint64_t>> words;  // per-input activation codes
  std::uint64_t bits = 0;

  double conf_sum = 0.0, soft_sum = 0.0;
  int heads = 0;

  void on_ffn(const Tensor& pre) {
    if (want_pca) pca_sum += pca_dim(pre, eta);
    if (want_codes) append_codes(pre);
  }

  void append_codes(const Tensor& pre) {
    const std::int64_t b = pre.dim(0);
    const std::size_t per = pre.numel() / static_cast<std::size_t>(b);
    const std::size_t need = (bits + per + 63) / 64;
    for (std::int64_t i = 0; i < b; ++i) {
      auto& w = words[static_cast<std::size_t>(i)];
      w.resize(need, 0);
      const double* p = pre.data() + static_cast<std::size_t>(i) * per;
      for (std::size_t j = 0; j < per; ++j)
        if (p[j] > 0.0) w[(bits + j) >> 6] |= std::uint64_t{1} << ((bits + j) & 63);
    }
    bits += per;
  }

  void on_attn(const Tensor& ctx, const Tensor& prob) {
    ++heads;
    if (want_conf) conf_sum += mean_abs_max(ctx);
    if (want_soft) soft_sum += mean_abs_max(prob);
  }

  double codes_score() const {
    const std::int64_t b = static_cast<std::int64_t>(words.size());
    Matrix k(b, b);
    for (std::int64_t i = 0; i < b; ++i) {
      k.at(i, i) = static_cast<double>(bits);
      for (std::int64_t j = i + 1; j < b; ++j) {
        std::uint64_t ham = 0;
        const auto& wi = words[static_cast<std::size_t>(i)];
        const auto& wj = words[static_cast<std::size_t>(j)];
        for (std::size_t t = 0; t < wi.size(); ++t)
          ham += static_cast<std::uint64_t>(std::popcount(wi[t] ^ wj[t]));
        k.at(i, j) = k.at(j, i) = static_cast<double>(bits - ham);
      }
    }
    const double ld = log_abs_det(std::move(k));
    return std::isfinite(ld) ? ld : activation_distance_sentinel;
  }
};

// One taped forward plus its single backward pass; every gradient proxy of
// this kind reads from here.
struct GradPass {
  Tape tape;
  ForwardResult<TapeGraph> taps;
  std::vector<Tensor> grads;
  std::unordered_map<std::string, Tape::NodeId> param_nodes;
};

std::unique_ptr<GradPass> run_grad_pass(const Model& model, const Batch& batch, bool attn_taps) {
  auto gp = std::make_unique<GradPass>();
  TapeGraph g(gp->tape);
  ForwardOptions opts;
  opts.logits = true;
  opts.attention_taps = attn_taps;
  gp->taps = forward(model, batch, g, opts);
  const Tape::NodeId loss = gp->tape.reduce_sum(*gp->taps.logits);
  gp->grads = gp->tape.backward(loss);
  for (Tape::NodeId id : gp->tape.param_ids()) gp->param_nodes.emplace(gp->tape.param_name(id), id);
  return gp;
}

double saliency_from(const GradPass& gp) {
  double s = 0.0;
  for (Tape::NodeId id : gp.tape.param_ids()) {
    const Tensor& g = gp.grads[static_cast<std::size_t>(id)];
    if (g.numel() == 0) continue;
    const Tensor& th = gp.tape.value(id);
    for (std::size_t i = 0; i < g.numel(); ++i) s += std::fabs(g[i] * th[i]);
  }
  return s;
}

Matrix cols_of(const Tensor& t, std::int64_t c0, std::int64_t len) {
  Matrix out(t.dim(0), len);
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    for (std::int64_t j = 0; j < len; ++j) out.at(i, j) = t.at2(i, c0 + j);
  return out;
}

Matrix rows_of(const Tensor& t, std::int64_t r0, std::int64_t len) {
  Matrix out(len, t.dim(1));
  for (std::int64_t i = 0; i < len; ++i)
    for (std::int64_t j = 0; j < t.dim(1); ++j) out.at(i, j) = t.at2(r0 + i, j);
  return out;
}

double diversity_from(const Model& model, const GradPass& gp, bool* headless) {
  double s = 0.0;
  bool any = false;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    if (!dot_product_layer(model.config().layers[li])) continue;
    const LayerIndex& L = model.layers[li];
    any = true;
    const std::int64_t dh = L.width / L.heads;
    const int qkv[3] = {L.attn.wq, L.attn.wk, L.attn.wv};
    for (int hh = 0; hh < L.heads; ++hh) {
      const std::int64_t o = hh * dh;
      auto term = [&](const Matrix& wm, const Matrix& gm) { s += nuclear_norm(gm) * nuclear_norm(wm); };
      for (int w : qkv) {
        const Tensor& weight = model.params()[static_cast<std::size_t>(w)];
        const Tensor& grad = gp.grads[static_cast<std::size_t>(
            gp.param_nodes.at(model.param_names()[static_cast<std::size_t>(w)]))];
        if (grad.numel() == 0) continue;
        term(cols_of(weight, o, dh), cols_of(grad, o, dh));
      }
      const Tensor& wo = model.params()[static_cast<std::size_t>(L.attn.wo)];
      const Tensor& go = gp.grads[static_cast<std::size_t>(
          gp.param_nodes.at(model.param_names()[static_cast<std::size_t>(L.attn.wo)]))];
      if (go.numel() != 0) term(rows_of(wo, o, dh), rows_of(go, o, dh));
    }
  }
  if (headless) *headless = !any;
  return any ? s : 0.0;
}

double importance_from(const GradPass& gp, bool* headless) {
  double s = 0.0;
  int heads = 0;
  for (const auto& layer : gp.taps.attn_heads)
    for (Tape::NodeId id : layer) {
      const Tensor& v = gp.tape.value(id);
      const Tensor& g = gp.grads[static_cast<std::size_t>(id)];
      double dot = 0.0;
      if (g.numel() != 0)
        for (std::size_t i = 0; i < v.numel(); ++i) dot += v[i] * g[i];
      s += std::fabs(dot);
      ++heads;
    }
  if (headless) *headless = heads == 0;
  return heads ? s / heads : 0.0;
}

// Per-input jacobian rows of the pseudo-loss with respect to the embedding
// sum; row i is d(loss)/d(embedding of input i).
Matrix jacobian_matrix(const Model& model, const Batch& batch) {
  Tape tape;
  TapeGraph g(tape);
  ForwardOptions opts;
  opts.logits = true;
  opts.differentiable_embeddings = true;
  ForwardResult<TapeGraph> taps = forward(model, batch, g, opts);
  const Tape::NodeId loss = tape.reduce_sum(*taps.logits);
  return input_jacobian(tape, loss, *taps.embeddings);
}

double covariance_score(const Matrix& j) {
  const std::int64_t b = j.rows;
  std::vector<double> mean(static_cast<std::size_t>(b), 0.0);
  std::vector<double> sigma(static_cast<std::size_t>(b), 0.0);
  for (std::int64_t i = 0; i < b; ++i) {
    double m = 0.0;
    for (std::int64_t c = 0; c < j.cols; ++c) m += j.at(i, c);
    m /= static_cast<double>(j.cols);
    double v = 0.0;
    for (std::int64_t c = 0; c < j.cols; ++c) v += (j.at(i, c) - m) * (j.at(i, c) - m);
    mean[static_cast<std::size_t>(i)] = m;
    sigma[static_cast<std::size_t>(i)] = std::sqrt(v);
  }
  Matrix corr(b, b);
  for (std::int64_t i = 0; i < b; ++i) {
    corr.at(i, i) = 1.0;
    for (std::int64_t k = i + 1; k < b; ++k) {
      double r = 0.0;
      if (sigma[static_cast<std::size_t>(i)] > 0.0 && sigma[static_cast<std::size_t>(k)] > 0.0) {
        double dot = 0.0;
        for (std::int64_t c = 0; c < j.cols; ++c)
          dot += (j.at(i, c) - mean[static_cast<std::size_t>(i)]) * (j.at(k, c) - mean[static_cast<std::size_t>(k)]);
        r = dot / (sigma[static_cast<std::size_t>(i)] * sigma[static_cast<std::size_t>(k)]);
      }
      corr.at(i, k) = corr.at(k, i) = r;
    }
  }
  const double kreg = 1e-5;
  double score = 0.0;
  for (double lam : sym_eigvals(corr)) {
    const double shifted = std::max(lam, 0.0) + kreg;
    score -= std::log(shifted) + 1.0 / shifted;
  }
  return score;
}

double cosine_score(const Matrix& j) {
  std::vector<std::vector<double>> rows;
  for (std::int64_t i = 0; i < j.rows; ++i) {
    double norm2 = 0.0;
    for (std::int64_t c = 0; c < j.cols; ++c) norm2 += j.at(i, c) * j.at(i, c);
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) continue;  // excluded, N reduced
    std::vector<double> r(static_cast<std::size_t>(j.cols));
    for (std::int64_t c = 0; c < j.cols; ++c) r[static_cast<std::size_t>(c)] = j.at(i, c) / norm;
    rows.push_back(std::move(r));
  }
  const std::size_t n = rows.size();
  if (n < 2) throw input_error("jacobian_cosine: fewer than two nonzero jacobian rows");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      if (i == k) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < rows[i].size(); ++c) dot += rows[i][c] * rows[k][c];
      acc += std::pow(std::fabs(dot), 1.0 / 20.0);
    }
  const double pairs = static_cast<double>(n) * static_cast<double>(n) - static_cast<double>(n);
  return 1.0 - acc / pairs;
}

}  // namespace

std::vector<ProxyScore> score_proxies(const std::vector<Proxy>& which, const Model& model,
                                      const Batch& batch, const ScoreOptions& opts) {
  bool want_pca = false, want_codes = false, want_conf = false, want_soft = false;
  bool want_sal = false, want_div = false, want_imp = false;
  bool want_jcov = false, want_jcos = false;
  for (Proxy p : which) {
    switch (p) {
      case Proxy::params: break;
      case Proxy::v_pca:
      case Proxy::w_pca: want_pca = true; break;
      case Proxy::activation_distance: want_codes = true; break;
      case Proxy::head_confidence: want_conf = true; break;
      case Proxy::softmax_confidence: want_soft = true; break;
      case Proxy::synaptic_saliency: want_sal = true; break;
      case Proxy::synaptic_diversity: want_div = true; break;
      case Proxy::head_importance: want_imp = true; break;
      case Proxy::jacobian_covariance: want_jcov = true; break;
      case Proxy::jacobian_cosine: want_jcos = true; break;
    }
  }
  if ((want_codes || want_jcov || want_jcos) && batch.b < 2)
    throw input_error("scoring: this proxy selection needs a batch of at least two inputs");

  EagerAcc acc;
  acc.want_pca = want_pca;
  acc.want_codes = want_codes;
  acc.want_conf = want_conf;
  acc.want_soft = want_soft;
  acc.eta = opts.eta;
  if (want_pca || want_codes || want_conf || want_soft) {
    if (want_codes) acc.words.resize(static_cast<std::size_t>(batch.b));
    ForwardOptions fo;
    if (want_pca || want_codes)
      fo.ffn_visitor = [&acc](int, int, const Tensor& pre) { acc.on_ffn(pre); };
    if (want_conf || want_soft)
      fo.attn_visitor = [&acc](int, int, const Tensor& ctx, const Tensor& prob) { acc.on_attn(ctx, prob); };
    EagerGraph g;
    forward(model, batch, g, fo);
  }

  std::unique_ptr<GradPass> gp;
  if (want_sal || want_div || want_imp) gp = run_grad_pass(model, batch, want_imp);

  std::optional<Matrix> jac;
  if (want_jcov || want_jcos) jac = jacobian_matrix(model, batch);

  const double total_params = static_cast<double>(param_count(model.config()).total);

  std::vector<ProxyScore> out;
  out.reserve(which.size());
  for (Proxy p : which) {
    ProxyScore rec;
    rec.proxy = p;
    rec.seed = opts.seed;
    rec.batch_id = opts.batch_id;
    switch (p) {
      case Proxy::params:
        rec.value = total_params;
        break;
      case Proxy::v_pca:
        rec.value = acc.pca_sum;
        rec.eta = opts.eta;
        break;
      case Proxy::w_pca:
        rec.value = total_params * acc.pca_sum;
        rec.eta = opts.eta;
        break;
      case Proxy::activation_distance:
        rec.value = acc.codes_score();
        break;
      case Proxy::head_confidence:
        rec.headless = acc.heads == 0;
        rec.value = acc.heads ? acc.conf_sum / acc.heads : 0.0;
        break;
      case Proxy::softmax_confidence:
        rec.headless = acc.heads == 0;
        rec.value = acc.heads ? acc.soft_sum / acc.heads : 0.0;
        break;
      case Proxy::synaptic_saliency:
        rec.value = saliency_from(*gp);
        break;
      case Proxy::synaptic_diversity:
        rec.value = diversity_from(model, *gp, &rec.headless);
        break;
      case Proxy::head_importance:
        rec.value = importance_from(*gp, &rec.headless);
        break;
      case Proxy::jacobian_covariance:
        rec.value = covariance_score(*jac);
        break;
      case Proxy::jacobian_cosine:
        rec.value = cosine_score(*jac);
        break;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

ProxyScore score_proxy(Proxy p, const Model& model, const Batch& batch, const ScoreOptions& opts) {
  return score_proxies({p}, model, batch, opts)[0];
}

double v_pca(const Model& model, const Batch& batch, double eta) {
  ScoreOptions o;
  o.eta = eta;
  return score_proxy(Proxy::v_pca, model, batch, o).value;
}

double w_pca(const Model& model, const Batch& batch, double eta) {
  ScoreOptions o;
  o.eta = eta;
  return score_proxy(Proxy::w_pca, model, batch, o).value;
}

double synaptic_saliency(const Model& model, const Batch& batch) {
  return score_proxy(Proxy::synaptic_saliency, model, batch).value;
}

double synaptic_diversity(const Model& model, const Batch& batch, bool* headless) {
  ProxyScore rec = score_proxy(Proxy::synaptic_diversity, model, batch);
  if (headless) *headless = rec.headless;
  return rec.value;
}

double activation_distance(const Model& model, const Batch& batch) {
  return score_proxy(Proxy::activation_distance, model, batch).value;
}

double jacobian_covariance(const Model& model, const Batch& batch) {
  return score_proxy(Proxy::jacobian_covariance, model, batch).value;
}

double jacobian_cosine(const Model& model, const Batch& batch) {
  return score_proxy(Proxy::jacobian_cosine, model, batch).value;
}

double head_confidence(const Model& model, const Batch& batch, bool* headless) {
  ProxyScore rec = score_proxy(Proxy::head_confidence, model, batch);
  if (headless) *headless = rec.headless;
  return rec.value;
}

double softmax_confidence(const Model& model, const Batch& batch, bool* headless) {
  ProxyScore rec = score_proxy(Proxy::softmax_confidence, model, batch);
  if (headless) *headless = rec.headless;
  return rec.value;
}

double head_importance(const Model& model, const Batch& batch, bool* headless) {
  ProxyScore rec = score_proxy(Proxy::head_importance, model, batch);
  if (headless) *headless = rec.headless;
  return rec.value;
}

}  // namespace wpca
