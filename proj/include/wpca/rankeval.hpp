#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wpca/proxies.hpp"
#include "wpca/searchspace.hpp"

namespace wpca {

// Tie-corrected Kendall tau-b: (C - D) / sqrt((C+D+Tx)(C+D+Ty)), where Tx/Ty
// count pairs tied in exactly one vector. A vector with no untied pairs makes
// the statistic undefined; 0 is returned and *degenerate set.
double kendall_tau(const std::vector<double>& x, const std::vector<double>& y,
                   bool* degenerate = nullptr);

// Pearson correlation of average ranks (ties get their mean rank). Zero rank
// variance on either side returns 0 with *degenerate set.
double spearman_rho(const std::vector<double>& x, const std::vector<double>& y,
                    bool* degenerate = nullptr);

struct RankingRecord {
  std::string id;
  std::optional<ArchGenome> genome;     // paper-space descriptor
  std::optional<ArchConfig> flexibert;  // FlexiBERT descriptor
  double score = 0.0;                   // ground truth
};

struct RankingDataset {
  std::vector<RankingRecord> records;
};

struct CorrelationReport {
  Proxy proxy = Proxy::params;
  double tau = 0.0;
  double rho = 0.0;
  bool tau_degenerate = false;
  bool rho_degenerate = false;
  int n = 0;        // records correlated
  int skipped = 0;  // uninstantiable records
  double eta = 0.99;
  std::uint64_t seed = 0;
  double seconds_per_1000 = 0.0;  // proxy wall time per 1000 evaluations
};

struct EvalOptions {
  SpaceSpec space;         // decodes genome descriptors
  Batch batch;             // shared scoring batch
  double eta = 0.99;
  std::uint64_t seed = 0;  // base weight seed; per-arch seeds derived from it
  int jobs = 1;
};

// Scores the proxy on every record (weights seeded per architecture) and
// correlates the scores against the ground truth. Records whose descriptor
// cannot be decoded or instantiated are skipped; more than 10% skipped, or
// fewer than two survivors, raises input_error.
CorrelationReport evaluate_proxy(const RankingDataset& dataset, Proxy proxy,
                                 const EvalOptions& opts);

enum class StabilityMode : std::uint8_t { seeds, batches };

struct StabilityRow {
  std::string id;
  std::vector<double> values;  // one per trial
  double mean = 0.0;
  double stdev = 0.0;  // sample stdev; exactly 0 when all trials agree
};

// Re-scores each architecture `trials` times, varying weight seeds with a
// fixed batch (seeds mode) or fresh batches with fixed weights (batches
// mode). Ground-truth scores in the dataset are ignored. trials < 2 raises
// input_error.
std::vector<StabilityRow> stability_study(const RankingDataset& archs, Proxy proxy,
                                          StabilityMode mode, int trials, const EvalOptions& opts);

// One record per ground-truth decile (the bucket's median by score order);
// requires at least 10 records.
RankingDataset select_deciles(const RankingDataset& dataset);

// One report per eta per proxy, v_pca then w_pca, in the given eta order.
std::vector<CorrelationReport> eta_sweep(const RankingDataset& dataset,
                                         const std::vector<double>& etas, const EvalOptions& opts);

struct SyntheticSpec {
  int count = 200;
  Proxy signal = Proxy::w_pca;
  double eta = 0.99;
  double swap_fraction = 0.05;    // adjacent rank pairs swapped
  double gauss_rank_sigma = 0.0;  // Gaussian noise added to ranks
  std::uint64_t seed = 0;         // genome draws and noise
  std::uint64_t weight_seed = 0;  // base seed for architecture weights
  int jobs = 1;
};

// Benchmark stand-in: distinct feasible genomes whose ground truth is a
// strictly increasing transform (asinh) of the chosen proxy, optionally
// perturbed by Gaussian rank noise and random adjacent-rank swaps.
RankingDataset synthetic_dataset(const SpaceSpec& space, const Batch& batch,
                                 const SyntheticSpec& spec);

}  // namespace wpca
