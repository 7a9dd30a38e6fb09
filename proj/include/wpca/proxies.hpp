#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wpca/archmodel.hpp"
#include "wpca/tensor.hpp"

namespace wpca {

// Zero-shot proxies. All share one pseudo-loss where a loss is needed: the
// sum of every output logit.
enum class Proxy : std::uint8_t {
  params,
  v_pca,
  w_pca,
  synaptic_saliency,
  synaptic_diversity,
  activation_distance,
  jacobian_covariance,
  jacobian_cosine,
  head_confidence,
  softmax_confidence,
  head_importance,
};

const std::vector<Proxy>& all_proxies();
const char* to_string(Proxy p);
Proxy parse_proxy(const std::string& name);  // input_error on unknown names
bool needs_gradients(Proxy p);

struct ProxyScore {
  Proxy proxy = Proxy::params;
  double value = 0.0;
  std::uint64_t seed = 0;
  std::string batch_id;
  std::optional<double> eta;  // PCA family only
  bool headless = false;      // score defined to 0: config has no tapped heads
};

// Smallest k whose top-k eigenvalue mass of the feature covariance reaches
// eta. h is reshaped to rows x D' over its last dim; columns are centered and
// the covariance uses 1/(rows-1). Eigenvalues at or below 1e-10 of the
// largest count as zero, so eta = 1.0 returns the covariance rank and a
// constant input returns 0. Throws input_error when rows < 2, eta is outside
// (0, 1], or h is non-finite.
int pca_dim(const Tensor& h, double eta);

double v_pca(const Model& model, const Batch& batch, double eta);

// Exactly param_count(config).total * v_pca(model, batch, eta).
double w_pca(const Model& model, const Batch& batch, double eta);

double synaptic_saliency(const Model& model, const Batch& batch);

// Sum over per-head Q, K, V, O weight slices of nuclear_norm(gradient) *
// nuclear_norm(weight); only dot-product attention layers carry such slices,
// and a model without any is scored 0.
double synaptic_diversity(const Model& model, const Batch& batch, bool* headless = nullptr);

// Kernel K[i][j] = code length - hamming distance between the inputs' binary
// codes (sign patterns of all FFN pre-activations); score = log|det K|, with
// a singular kernel recorded as the sentinel -1e30. Throws input_error when
// B < 2.
double activation_distance(const Model& model, const Batch& batch);
inline constexpr double activation_distance_sentinel = -1e30;

// Correlation matrix of per-input jacobian rows of the pseudo-loss with
// respect to the embedding sum; score = -sum(log(l+k) + 1/(l+k)) over its
// eigenvalues, k = 1e-5. Throws input_error when B < 2.
double jacobian_covariance(const Model& model, const Batch& batch);

// Rows normalized to unit length (zero rows dropped), G = J J^T, score =
// 1 - mean over off-diagonal entries of |G_ij|^(1/20). Throws input_error
// when fewer than two nonzero rows remain.
double jacobian_cosine(const Model& model, const Batch& batch);

// Mean over heads of the mean over inputs of |global max| of the head output
// (confidence) or its softmax weights (softmax confidence); importance is the
// mean over heads of |sum of head output * its gradient|.
double head_confidence(const Model& model, const Batch& batch, bool* headless = nullptr);
double softmax_confidence(const Model& model, const Batch& batch, bool* headless = nullptr);
double head_importance(const Model& model, const Batch& batch, bool* headless = nullptr);

struct ScoreOptions {
  double eta = 0.99;
  std::uint64_t seed = 0;     // recorded in the score rows
  std::string batch_id;       // recorded in the score rows
};

// Scores the requested proxies, sharing forward passes and gradients within
// the batch of requests: gradient-free proxies use one untaped pass, and all
// gradient proxies of each tape kind share a single backward pass.
std::vector<ProxyScore> score_proxies(const std::vector<Proxy>& which, const Model& model,
                                      const Batch& batch, const ScoreOptions& opts = {});

ProxyScore score_proxy(Proxy p, const Model& model, const Batch& batch,
                       const ScoreOptions& opts = {});

}  // namespace wpca
