#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "oracles.hpp"
#include "reference_model.hpp"
#include "wpca/archmodel.hpp"
#include "wpca/errors.hpp"
#include "wpca/proxies.hpp"
#include "wpca/rng.hpp"
#include "wpca/searchspace.hpp"

using wpca::ArchConfig;
using wpca::Batch;
using wpca::BlockKind;
using wpca::LayerSpec;
using wpca::Matrix;
using wpca::MixOp;
using wpca::Model;
using wpca::Proxy;
using wpca::Tensor;

namespace {

LayerSpec layer(BlockKind kind, MixOp op, int heads, int ffn, int stacks, int kernel = 0,
                int inner = 0) {
  LayerSpec l;
  l.block_kind = kind;
  l.attn_op = op;
  l.heads = heads;
  l.ffn_hidden = ffn;
  l.ffn_stacks = stacks;
  l.conv_kernel = kernel;
  l.inner_dim = inner;
  return l;
}

ArchConfig config_with(std::vector<LayerSpec> layers, int embed, int token_embed, int vocab,
                       int seq) {
  ArchConfig c;
  c.layers = std::move(layers);
  c.embed_dim = embed;
  c.token_embed_dim = token_embed;
  c.vocab_size = vocab;
  c.max_seq_len = seq;
  c.validate();
  return c;
}

// signed global max per input, absolute value, averaged over inputs
double mean_abs_max_oracle(const Tensor& t) {
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

double nuclear_oracle(const Matrix& m) {
  const bool tall = m.rows >= m.cols;
  const std::int64_t k = tall ? m.cols : m.rows;
  const std::int64_t t_end = tall ? m.rows : m.cols;
  Matrix gram(k, k);
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < t_end; ++t)
        acc += tall ? m.at(t, i) * m.at(t, j) : m.at(i, t) * m.at(j, t);
      gram.at(i, j) = acc;
    }
  double s = 0.0;
  for (const double lam : oracle::eigvals_bisect(gram)) s += std::sqrt(std::max(lam, 0.0));
  return s;
}

// central differences of the pseudo-loss over the injected embedding sum
Matrix fd_jacobian(const Model& model, const Batch& batch, double h = 1e-5) {
  const refmodel::Taps base = refmodel::forward(model, batch, false);
  const std::int64_t b = base.h0.dim(0), n = base.h0.dim(1), d = base.h0.dim(2);
  Matrix j(b, n * d);
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t c = 0; c < d; ++c) {
        Tensor plus = base.h0, minus = base.h0;
        plus.at3(i, t, c) += h;
        minus.at3(i, t, c) -= h;
        refmodel::Hooks hp, hm;
        hp.h0_override = &plus;
        hm.h0_override = &minus;
        j.at(i, t * d + c) =
            (refmodel::loss(model, batch, hp) - refmodel::loss(model, batch, hm)) / (2.0 * h);
      }
  return j;
}

// central differences over one parameter tensor of the model
Matrix fd_param_grad(const Model& model, const Batch& batch, int param, double h = 1e-5) {
  const Tensor& theta = model.params()[static_cast<std::size_t>(param)];
  const std::int64_t rows = theta.rank() == 2 ? theta.dim(0) : 1;
  const std::int64_t cols = theta.rank() == 2 ? theta.dim(1) : theta.dim(0);
  Matrix g(rows, cols);
  for (std::size_t i = 0; i < theta.numel(); ++i) {
    Model probe = model;
    probe.params()[static_cast<std::size_t>(param)][i] += h;
    const double up = refmodel::loss(probe, batch);
    probe.params()[static_cast<std::size_t>(param)][i] -= 2.0 * h;
    const double down = refmodel::loss(probe, batch);
    g.data[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double covariance_score_oracle(const Matrix& j) {
  const std::int64_t b = j.rows;
  std::vector<double> mean(static_cast<std::size_t>(b)), sigma(static_cast<std::size_t>(b));
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
          dot += (j.at(i, c) - mean[static_cast<std::size_t>(i)]) *
                 (j.at(k, c) - mean[static_cast<std::size_t>(k)]);
        r = dot / (sigma[static_cast<std::size_t>(i)] * sigma[static_cast<std::size_t>(k)]);
      }
      corr.at(i, k) = corr.at(k, i) = r;
    }
  }
  double score = 0.0;
  for (const double lam : oracle::eigvals_bisect(corr)) {
    const double shifted = std::max(lam, 0.0) + 1e-5;
    score -= std::log(shifted) + 1.0 / shifted;
  }
  return score;
}

double cosine_score_oracle(const Matrix& j) {
  std::vector<std::vector<double>> rows;
  for (std::int64_t i = 0; i < j.rows; ++i) {
    double norm2 = 0.0;
    for (std::int64_t c = 0; c < j.cols; ++c) norm2 += j.at(i, c) * j.at(i, c);
    if (norm2 == 0.0) continue;
    const double norm = std::sqrt(norm2);
    std::vector<double> r(static_cast<std::size_t>(j.cols));
    for (std::int64_t c = 0; c < j.cols; ++c) r[static_cast<std::size_t>(c)] = j.at(i, c) / norm;
    rows.push_back(std::move(r));
  }
  const std::size_t n = rows.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      if (i == k) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < rows[i].size(); ++c) dot += rows[i][c] * rows[k][c];
      acc += std::pow(std::fabs(dot), 1.0 / 20.0);
    }
  return 1.0 - acc / (static_cast<double>(n) * static_cast<double>(n) - static_cast<double>(n));
}

}  // namespace

TEST_SUITE("proxies") {

TEST_CASE("pca_dim: a one-dimensional cloud needs one component") {
  wpca::rng64 rng(201);
  std::vector<double> dir(8);
  for (double& v : dir) v = rng.uniform01() * 2.0 - 1.0;
  Tensor h({256, 8});
  for (std::int64_t i = 0; i < 256; ++i) {
    const double a = rng.uniform01() * 4.0 - 2.0;
    for (std::int64_t j = 0; j < 8; ++j)
      h.at2(i, j) = a * dir[static_cast<std::size_t>(j)] + 0.5;
  }
  CHECK(wpca::pca_dim(h, 0.9) == 1);
  CHECK(wpca::pca_dim(h, 1.0) == 1);
}

TEST_CASE("pca_dim: recovers a planted rank at tight eta") {
  wpca::rng64 rng(202);
  const Matrix q = oracle::random_orthogonal(32, rng);
  for (const int r : {1, 3, 5}) {
    CAPTURE(r);
    Tensor h({256, 32});
    Matrix coef(256, r);
    for (double& v : coef.data) v = rng.uniform01() * 2.0 - 1.0;
    for (std::int64_t i = 0; i < 256; ++i)
      for (std::int64_t j = 0; j < 32; ++j) {
        double acc = 0.0;
        for (std::int64_t p = 0; p < r; ++p) acc += coef.at(i, p) * q.at(p, j);
        h.at2(i, j) = acc;
      }
    CHECK(wpca::pca_dim(h, 0.999) == r);
    CHECK(wpca::pca_dim(h, 1.0) == r);
  }
}

TEST_CASE("pca_dim: monotone in eta, capped by the column count") {
  wpca::rng64 rng(203);
  Tensor h({64, 16});
  for (std::size_t i = 0; i < h.numel(); ++i) h[i] = rng.uniform01() * 2.0 - 1.0;
  int prev = 0;
  for (const double eta : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0}) {
    const int k = wpca::pca_dim(h, eta);
    CHECK(k >= 1);
    CHECK(k >= prev);
    CHECK(k <= 16);
    prev = k;
  }
  CHECK(wpca::pca_dim(h, 1.0) == 16);  // generic data is full rank
}

TEST_CASE("pca_dim: invariant under rotation and constant row shifts") {
  wpca::rng64 rng(204);
  Tensor h({64, 16});
  for (std::size_t i = 0; i < h.numel(); ++i) h[i] = rng.uniform01() * 2.0 - 1.0;
  const Matrix q = oracle::random_orthogonal(16, rng);

  Tensor rotated({64, 16});
  for (std::int64_t i = 0; i < 64; ++i)
    for (std::int64_t j = 0; j < 16; ++j) {
      double acc = 0.0;
      for (std::int64_t p = 0; p < 16; ++p) acc += h.at2(i, p) * q.at(p, j);
      rotated.at2(i, j) = acc;
    }

  Tensor shifted = h;
  std::vector<double> offset(16);
  for (double& v : offset) v = rng.uniform01() * 10.0 - 5.0;
  for (std::int64_t i = 0; i < 64; ++i)
    for (std::int64_t j = 0; j < 16; ++j)
      shifted.at2(i, j) += offset[static_cast<std::size_t>(j)];

  for (const double eta : {0.3, 0.7, 0.9, 0.99}) {
    CHECK(wpca::pca_dim(rotated, eta) == wpca::pca_dim(h, eta));
    CHECK(wpca::pca_dim(shifted, eta) == wpca::pca_dim(h, eta));
  }
}

TEST_CASE("pca_dim: constant input scores zero components") {
  CHECK(wpca::pca_dim(Tensor::full({16, 4}, 3.0), 0.9) == 0);
  CHECK(wpca::pca_dim(Tensor::full({16, 4}, 0.0), 1.0) == 0);
}

TEST_CASE("pca_dim: domain violations raise input_error") {
  const Tensor ok({4, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  CHECK_THROWS_AS(wpca::pca_dim(ok, 0.0), wpca::input_error);
  CHECK_THROWS_AS(wpca::pca_dim(ok, -0.5), wpca::input_error);
  CHECK_THROWS_AS(wpca::pca_dim(ok, 1.0001), wpca::input_error);

  CHECK_THROWS_AS(wpca::pca_dim(Tensor({1, 8}), 0.9), wpca::input_error);
  CHECK_THROWS_AS(wpca::pca_dim(Tensor({8}), 0.9), wpca::input_error);

  Tensor bad({2, 4});
  bad[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(wpca::pca_dim(bad, 0.9), wpca::input_error);
  bad[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(wpca::pca_dim(bad, 0.9), wpca::input_error);
}

TEST_CASE("v_pca sums pca_dim over the retained FFN taps") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 24, 2),
       layer(BlockKind::flexibert_element, MixOp::cosine, 1, 12, 1)},
      16, 8, 23, 8);
  const Model model = wpca::instantiate(cfg, 301);
  const Batch batch = wpca::random_batch(3, 4, cfg.vocab_size, 302);

  for (const double eta : {0.5, 0.9, 0.99}) {
    const wpca::TappedActivations taps = wpca::forward_eager(model, batch, {});
    REQUIRE(taps.ffn_pre.size() == 3);
    double want = 0.0;
    for (const Tensor& pre : taps.ffn_pre) want += wpca::pca_dim(pre, eta);
    CHECK(wpca::v_pca(model, batch, eta) == want);
  }

  const ArchConfig one = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 24, 1)}, 16, 8, 23, 8);
  const Model m1 = wpca::instantiate(one, 303);
  const wpca::TappedActivations t1 = wpca::forward_eager(m1, batch, {});
  REQUIRE(t1.ffn_pre.size() == 1);
  CHECK(wpca::v_pca(m1, batch, 0.9) == static_cast<double>(wpca::pca_dim(t1.ffn_pre[0], 0.9)));
}

TEST_CASE("w_pca is exactly the parameter count times v_pca") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 24, 1),
       layer(BlockKind::mobilebert, MixOp::scaled_dot_product, 2, 12, 2, 0, 4)},
      16, 8, 23, 8);
  const Model model = wpca::instantiate(cfg, 311);
  const Batch batch = wpca::random_batch(2, 4, cfg.vocab_size, 312);
  for (const double eta : {0.5, 0.9, 0.99, 1.0}) {
    const double v = wpca::v_pca(model, batch, eta);
    const double total = static_cast<double>(wpca::param_count(cfg).total);
    CHECK(wpca::w_pca(model, batch, eta) == total * v);
  }
}

TEST_CASE("pca proxies: zeroed weights give constant taps and score zero") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 24, 1)}, 16, 8, 23, 8);
  Model model = wpca::instantiate(cfg, 321);
  for (Tensor& t : model.params())
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
  const Batch batch = wpca::random_batch(2, 4, cfg.vocab_size, 322);
  CHECK(wpca::v_pca(model, batch, 0.9) == 0.0);
  CHECK(wpca::w_pca(model, batch, 0.9) == 0.0);
}

TEST_CASE("synaptic_saliency: closed form with only the vocab bias set") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 24, 1)}, 16, 8, 19, 8);
  Model model = wpca::instantiate(cfg, 331);
  for (Tensor& t : model.params())
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
  Tensor& vb = model.params()[static_cast<std::size_t>(model.vocab_bias)];
  for (std::size_t i = 0; i < vb.numel(); ++i) vb[i] = 1.0;

  const Batch batch = wpca::random_batch(2, 3, cfg.vocab_size, 332);
  // each of the 19 bias entries receives gradient b*n = 6 and weight 1
  CHECK(wpca::synaptic_saliency(model, batch) == 2.0 * 3.0 * 19.0);

  Model zero = wpca::instantiate(cfg, 333);
  for (Tensor& t : zero.params())
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
  CHECK(wpca::synaptic_saliency(zero, batch) == 0.0);
}

TEST_CASE("synaptic_saliency matches a finite-difference accumulation") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 4, 7, 4);
  const Model model = wpca::instantiate(cfg, 341);
  const Batch batch = wpca::random_batch(2, 3, cfg.vocab_size, 342);

  double want = 0.0;
  for (std::size_t p = 0; p < model.params().size(); ++p) {
    const Matrix g = fd_param_grad(model, batch, static_cast<int>(p));
    const Tensor& theta = model.params()[p];
    for (std::size_t i = 0; i < theta.numel(); ++i) want += std::fabs(g.data[i] * theta[i]);
  }
  const double got = wpca::synaptic_saliency(model, batch);
  CHECK(std::fabs(got - want) <= 1e-4 * std::max(1.0, std::fabs(want)));
}

TEST_CASE("synaptic_diversity: per-head nuclear norm products against FD gradients") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 8, 1)}, 4, 2, 5, 4);
  const Model model = wpca::instantiate(cfg, 351);
  const Batch batch = wpca::random_batch(2, 3, cfg.vocab_size, 352);

  const wpca::LayerIndex& L = model.layers[0];
  const std::int64_t dh = L.width / L.heads;
  auto cols = [](const Matrix& m, std::int64_t c0, std::int64_t len) {
    Matrix out(m.rows, len);
    for (std::int64_t i = 0; i < m.rows; ++i)
      for (std::int64_t j = 0; j < len; ++j) out.at(i, j) = m.at(i, c0 + j);
    return out;
  };
  auto rows = [](const Matrix& m, std::int64_t r0, std::int64_t len) {
    Matrix out(len, m.cols);
    for (std::int64_t i = 0; i < len; ++i)
      for (std::int64_t j = 0; j < m.cols; ++j) out.at(i, j) = m.at(r0 + i, j);
    return out;
  };
  auto as_matrix = [&](int idx) {
    const Tensor& t = model.params()[static_cast<std::size_t>(idx)];
    Matrix m(t.dim(0), t.dim(1));
    m.data = t.raw();
    return m;
  };

  double want = 0.0;
  for (int hh = 0; hh < L.heads; ++hh) {
    const std::int64_t o = hh * dh;
    for (const int idx : {L.attn.wq, L.attn.wk, L.attn.wv}) {
      const Matrix g = fd_param_grad(model, batch, idx);
      want += nuclear_oracle(cols(g, o, dh)) * nuclear_oracle(cols(as_matrix(idx), o, dh));
    }
    const Matrix go = fd_param_grad(model, batch, L.attn.wo);
    want += nuclear_oracle(rows(go, o, dh)) * nuclear_oracle(rows(as_matrix(L.attn.wo), o, dh));
  }

  bool headless = true;
  const double got = wpca::synaptic_diversity(model, batch, &headless);
  CHECK_FALSE(headless);
  CHECK(std::fabs(got - want) <= 1e-3 * std::max(1.0, std::fabs(want)));
}

TEST_CASE("synaptic_diversity: only dot-product layers carry head slices") {
  const Batch batch = wpca::random_batch(2, 3, 19, 361);

  const ArchConfig fourier_only = config_with(
      {layer(BlockKind::flexibert_element, MixOp::fourier, 1, 12, 1)}, 8, 4, 19, 8);
  bool headless = false;
  CHECK(wpca::synaptic_diversity(wpca::instantiate(fourier_only, 362), batch, &headless) == 0.0);
  CHECK(headless);

  // dynamic convolution taps heads but has no q/k/v slices
  const ArchConfig conv_only = config_with(
      {layer(BlockKind::flexibert_element, MixOp::dynamic_conv, 2, 12, 1, 3)}, 8, 4, 19, 8);
  const Model conv = wpca::instantiate(conv_only, 363);
  headless = false;
  CHECK(wpca::synaptic_diversity(conv, batch, &headless) == 0.0);
  CHECK(headless);
  bool conf_headless = true;
  wpca::head_confidence(conv, batch, &conf_headless);
  CHECK_FALSE(conf_headless);

  const ArchConfig sdp = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 8, 1)}, 4, 2, 19, 8);
  Model zeroed = wpca::instantiate(sdp, 364);
  for (Tensor& t : zeroed.params())
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
  headless = true;
  CHECK(wpca::synaptic_diversity(zeroed, batch, &headless) == 0.0);
  CHECK_FALSE(headless);
}

TEST_CASE("activation_distance: duplicate inputs collapse the kernel") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 371);
  Batch batch;
  batch.b = 2;
  batch.n = 3;
  batch.ids = {1, 2, 3, 1, 2, 3};
  CHECK(wpca::activation_distance(model, batch) == wpca::activation_distance_sentinel);
}

TEST_CASE("activation_distance: complementary sign codes give a diagonal kernel") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 8, 13, 8);
  Model model = wpca::instantiate(cfg, 372);

  // identity input projection, no positions, attention silenced: the hidden
  // state seen by the FFN is exactly the token embedding, and layernorm is odd
  auto& P = model.params();
  Tensor& inw = P[static_cast<std::size_t>(model.in_proj_w)];
  for (std::int64_t i = 0; i < 8; ++i)
    for (std::int64_t j = 0; j < 8; ++j) inw.at2(i, j) = i == j ? 1.0 : 0.0;
  Tensor& pos = P[static_cast<std::size_t>(model.pos_table)];
  for (std::size_t i = 0; i < pos.numel(); ++i) pos[i] = 0.0;
  Tensor& wo = P[static_cast<std::size_t>(model.layers[0].attn.wo)];
  for (std::size_t i = 0; i < wo.numel(); ++i) wo[i] = 0.0;
  Tensor& table = P[static_cast<std::size_t>(model.token_table)];
  for (std::int64_t j = 0; j < 8; ++j) {
    table.at2(3, j) = -table.at2(0, j);
    table.at2(4, j) = -table.at2(1, j);
    table.at2(5, j) = -table.at2(2, j);
  }

  Batch batch;
  batch.b = 2;
  batch.n = 3;
  batch.ids = {0, 1, 2, 3, 4, 5};

  // bits L = n * ffn_hidden = 48; complementary codes zero the off-diagonal
  const double want = 2.0 * std::log(48.0);
  CHECK(wpca::activation_distance(model, batch) == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("activation_distance: random batch against a cofactor determinant") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 2),
       layer(BlockKind::flexibert_element, MixOp::cosine, 1, 8, 1)},
      8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 373);
  const Batch batch = wpca::random_batch(4, 4, cfg.vocab_size, 374);

  const wpca::TappedActivations taps = wpca::forward_eager(model, batch, {});
  std::vector<std::vector<bool>> codes(4);
  for (const Tensor& pre : taps.ffn_pre) {
    const std::size_t per = pre.numel() / 4;
    for (std::int64_t i = 0; i < 4; ++i) {
      const double* p = pre.data() + static_cast<std::size_t>(i) * per;
      for (std::size_t j = 0; j < per; ++j)
        codes[static_cast<std::size_t>(i)].push_back(p[j] > 0.0);
    }
  }
  const double bits = static_cast<double>(codes[0].size());
  Matrix k(4, 4);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j) {
      double ham = 0.0;
      for (std::size_t t = 0; t < codes[0].size(); ++t)
        ham += codes[static_cast<std::size_t>(i)][t] != codes[static_cast<std::size_t>(j)][t];
      k.at(i, j) = bits - ham;
    }
  const double det = oracle::det_cofactor(k);
  const double got = wpca::activation_distance(model, batch);
  if (det == 0.0) {
    CHECK(got == wpca::activation_distance_sentinel);
  } else {
    CHECK(got == doctest::Approx(std::log(std::fabs(det))).epsilon(1e-9));
  }
}

TEST_CASE("jacobian proxies: batches of one are rejected") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 381);
  const Batch one = wpca::random_batch(1, 3, cfg.vocab_size, 382);
  CHECK_THROWS_AS(wpca::activation_distance(model, one), wpca::input_error);
  CHECK_THROWS_AS(wpca::jacobian_covariance(model, one), wpca::input_error);
  CHECK_THROWS_AS(wpca::jacobian_cosine(model, one), wpca::input_error);
}

TEST_CASE("jacobian_covariance: identical inputs give the ones-matrix spectrum") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 391);
  Batch batch;
  batch.b = 3;
  batch.n = 3;
  batch.ids = {1, 5, 2, 1, 5, 2, 1, 5, 2};

  // correlation of identical rows is the ones matrix: eigenvalues {b, 0, 0}
  auto f = [](double lam) {
    const double s = std::max(lam, 0.0) + 1e-5;
    return -(std::log(s) + 1.0 / s);
  };
  const double want = f(3.0) + 2.0 * f(0.0);
  CHECK(wpca::jacobian_covariance(model, batch) == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("jacobian_covariance: finite-difference jacobian reproduces the score") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1),
       layer(BlockKind::flexibert_element, MixOp::dynamic_conv, 2, 8, 1, 3)},
      8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 392);

  for (const std::int64_t b : {2, 3}) {
    CAPTURE(b);
    const Batch batch = wpca::random_batch(b, 3, cfg.vocab_size, 393 + b);
    const double want = covariance_score_oracle(fd_jacobian(model, batch));
    const double got = wpca::jacobian_covariance(model, batch);
    CHECK(std::fabs(got - want) <= 1e-3 * std::max(1.0, std::fabs(want)));
  }
}

TEST_CASE("jacobian_cosine: identical inputs give unit cosines and score zero") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 401);
  Batch batch;
  batch.b = 3;
  batch.n = 3;
  batch.ids = {1, 5, 2, 1, 5, 2, 1, 5, 2};
  CHECK(wpca::jacobian_cosine(model, batch) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("jacobian_cosine: finite-difference jacobian reproduces the score") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 402);
  const Batch batch = wpca::random_batch(4, 3, cfg.vocab_size, 403);
  const double want = cosine_score_oracle(fd_jacobian(model, batch));
  const double got = wpca::jacobian_cosine(model, batch);
  CHECK(std::fabs(got - want) <= 1e-3 * std::max(1.0, std::fabs(want)));
}

TEST_CASE("jacobian_cosine: all-zero rows are dropped, leaving an error") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 4, 13, 8);
  Model model = wpca::instantiate(cfg, 404);
  for (Tensor& t : model.params())
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
  const Batch batch = wpca::random_batch(3, 3, cfg.vocab_size, 405);
  CHECK_THROWS_AS(wpca::jacobian_cosine(model, batch), wpca::input_error);
}

TEST_CASE("softmax_confidence: closed forms for silenced and single-key attention") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 4, 13, 8);
  Model model = wpca::instantiate(cfg, 411);
  Tensor& wq = model.params()[static_cast<std::size_t>(model.layers[0].attn.wq)];
  for (std::size_t i = 0; i < wq.numel(); ++i) wq[i] = 0.0;

  Batch batch = wpca::random_batch(2, 4, cfg.vocab_size, 412);
  CHECK(wpca::softmax_confidence(model, batch) == 0.25);  // uniform rows of width 4

  Batch single = wpca::random_batch(2, 1, cfg.vocab_size, 413);
  const Model fresh = wpca::instantiate(cfg, 414);
  CHECK(wpca::softmax_confidence(fresh, single) == 1.0);
}

TEST_CASE("confidence proxies match the reference taps") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1),
       layer(BlockKind::flexibert_element, MixOp::fourier, 1, 8, 1),
       layer(BlockKind::flexibert_element, MixOp::dynamic_conv, 2, 8, 1, 3)},
      8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 421);
  const Batch batch = wpca::random_batch(3, 4, cfg.vocab_size, 422);

  const refmodel::Taps taps = refmodel::forward(model, batch, false);
  double conf = 0.0, soft = 0.0;
  int heads = 0;
  for (std::size_t l = 0; l < taps.heads.size(); ++l)
    for (std::size_t h = 0; h < taps.heads[l].size(); ++h) {
      conf += mean_abs_max_oracle(taps.heads[l][h]);
      soft += mean_abs_max_oracle(taps.probs[l][h]);
      ++heads;
    }
  REQUIRE(heads == 4);  // fourier layer taps nothing

  bool headless = true;
  CHECK(wpca::head_confidence(model, batch, &headless) ==
        doctest::Approx(conf / heads).epsilon(1e-9));
  CHECK_FALSE(headless);
  CHECK(wpca::softmax_confidence(model, batch, &headless) ==
        doctest::Approx(soft / heads).epsilon(1e-9));
  CHECK_FALSE(headless);
}

TEST_CASE("confidence proxies: parameter-free mixing has no heads") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::flexibert_element, MixOp::fourier, 1, 8, 1),
       layer(BlockKind::flexibert_element, MixOp::cosine, 1, 8, 1)},
      8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 431);
  const Batch batch = wpca::random_batch(2, 4, cfg.vocab_size, 432);

  for (const Proxy p : {Proxy::head_confidence, Proxy::softmax_confidence,
                        Proxy::head_importance}) {
    const wpca::ProxyScore rec = wpca::score_proxy(p, model, batch);
    CHECK(rec.value == 0.0);
    CHECK(rec.headless);
  }
}

TEST_CASE("head_importance matches directional derivatives of the pseudo-loss") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1),
       layer(BlockKind::flexibert_element, MixOp::dynamic_conv, 2, 8, 1, 3)},
      8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 441);
  const Batch batch = wpca::random_batch(2, 3, cfg.vocab_size, 442);

  const refmodel::Taps taps = refmodel::forward(model, batch, false);
  const double h = 1e-4;
  double sum = 0.0;
  int heads = 0;
  for (std::size_t l = 0; l < taps.heads.size(); ++l)
    for (std::size_t hh = 0; hh < taps.heads[l].size(); ++hh) {
      refmodel::Hooks up, down;
      up.scale_layer = down.scale_layer = static_cast<int>(l);
      up.scale_head = down.scale_head = static_cast<int>(hh);
      up.ctx_scale = 1.0 + h;
      down.ctx_scale = 1.0 - h;
      sum += std::fabs(
          (refmodel::loss(model, batch, up) - refmodel::loss(model, batch, down)) / (2.0 * h));
      ++heads;
    }
  REQUIRE(heads == 4);

  bool headless = true;
  const double got = wpca::head_importance(model, batch, &headless);
  CHECK_FALSE(headless);
  CHECK(std::fabs(got - sum / heads) <= 1e-3 * std::max(1.0, std::fabs(got)));
}

TEST_CASE("gradient-free proxies never build a tape") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1)}, 8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 451);
  const Batch batch = wpca::random_batch(2, 3, cfg.vocab_size, 452);

  const std::vector<Proxy> free = {Proxy::params,          Proxy::v_pca,
                                   Proxy::w_pca,           Proxy::activation_distance,
                                   Proxy::head_confidence, Proxy::softmax_confidence};
  for (const Proxy p : free) CHECK_FALSE(wpca::needs_gradients(p));
  for (const Proxy p : {Proxy::synaptic_saliency, Proxy::synaptic_diversity,
                        Proxy::jacobian_covariance, Proxy::jacobian_cosine,
                        Proxy::head_importance})
    CHECK(wpca::needs_gradients(p));

  const std::uint64_t before = wpca::Tape::tapes_constructed();
  wpca::score_proxies(free, model, batch);
  CHECK(wpca::Tape::tapes_constructed() == before);

  wpca::score_proxy(Proxy::synaptic_saliency, model, batch);
  CHECK(wpca::Tape::tapes_constructed() > before);
}

TEST_CASE("score_proxies: batched scoring equals one-at-a-time scoring") {
  const ArchConfig cfg = config_with(
      {layer(BlockKind::bert, MixOp::scaled_dot_product, 2, 16, 1),
       layer(BlockKind::flexibert_element, MixOp::dynamic_conv, 2, 8, 1, 3)},
      8, 4, 13, 8);
  const Model model = wpca::instantiate(cfg, 461);
  const Batch batch = wpca::random_batch(3, 4, cfg.vocab_size, 462);

  wpca::ScoreOptions opts;
  opts.eta = 0.9;
  opts.seed = 77;
  opts.batch_id = "batch-7";

  const std::vector<wpca::ProxyScore> all =
      wpca::score_proxies(wpca::all_proxies(), model, batch, opts);
  REQUIRE(all.size() == wpca::all_proxies().size());
  for (const wpca::ProxyScore& rec : all) {
    const wpca::ProxyScore solo = wpca::score_proxy(rec.proxy, model, batch, opts);
    CAPTURE(wpca::to_string(rec.proxy));
    CHECK(rec.value == solo.value);
    CHECK(rec.headless == solo.headless);
    CHECK(rec.seed == 77);
    CHECK(rec.batch_id == "batch-7");
    const bool pca_family = rec.proxy == Proxy::v_pca || rec.proxy == Proxy::w_pca;
    CHECK(rec.eta.has_value() == pca_family);
    if (pca_family) CHECK(*rec.eta == 0.9);
  }

  const wpca::ProxyScore params = wpca::score_proxy(Proxy::params, model, batch);
  CHECK(params.value == static_cast<double>(wpca::param_count(cfg).total));
}

TEST_CASE("proxy names round-trip; unknown names raise input_error") {
  CHECK(wpca::all_proxies().size() == 11);
  for (const Proxy p : wpca::all_proxies())
    CHECK(wpca::parse_proxy(wpca::to_string(p)) == p);
  CHECK(wpca::parse_proxy("w_pca") == Proxy::w_pca);
  CHECK(wpca::parse_proxy("softmax_confidence") == Proxy::softmax_confidence);
  CHECK_THROWS_AS(wpca::parse_proxy("wpca"), wpca::input_error);
  CHECK_THROWS_AS(wpca::parse_proxy(""), wpca::input_error);
}

}  // TEST_SUITE
