#include "wpca/rankeval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "wpca/errors.hpp"
#include "wpca/parallel.hpp"

namespace wpca {

namespace {

void check_pair(const std::vector<double>& x, const std::vector<double>& y, const char* who) {
  if (x.size() != y.size()) throw input_error(std::string(who) + ": vectors differ in length");
  if (x.size() < 2) throw input_error(std::string(who) + ": needs at least two observations");
}

// Average ranks, 1-based; tied values share the mean rank of their block.
std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double mean_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mean_rank;
    i = j + 1;
  }
  return rank;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b, bool* degenerate) {
  const std::size_t n = a.size();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

double kendall_tau(const std::vector<double>& x, const std::vector<double>& y, bool* degenerate) {
  check_pair(x, y, "kendall_tau");
  if (degenerate) *degenerate = false;
  const std::size_t n = x.size();
  std::int64_t concordant = 0, discordant = 0, tx = 0, ty = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      if (dx == 0.0 && dy == 0.0) continue;
      if (dx == 0.0)
        ++tx;
      else if (dy == 0.0)
        ++ty;
      else if ((dx > 0.0) == (dy > 0.0))
        ++concordant;
      else
        ++discordant;
    }
  const std::int64_t fx = concordant + discordant + tx;
  const std::int64_t fy = concordant + discordant + ty;
  if (fx == 0 || fy == 0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return static_cast<double>(concordant - discordant) /
         std::sqrt(static_cast<double>(fx) * static_cast<double>(fy));
}

double spearman_rho(const std::vector<double>& x, const std::vector<double>& y, bool* degenerate) {
  check_pair(x, y, "spearman_rho");
  if (degenerate) *degenerate = false;
  return pearson(average_ranks(x), average_ranks(y), degenerate);
}

namespace {

ArchConfig record_config(const RankingRecord& rec, const SpaceSpec& space) {
  if (rec.genome) return decode(*rec.genome, space);
  if (rec.flexibert) return *rec.flexibert;
  throw codec_error("record '" + rec.id + "' carries no architecture descriptor");
}

std::uint64_t record_seed(std::uint64_t base, const RankingRecord& rec) {
  if (rec.genome) return derive_seed(base, std::span<const int>(*rec.genome));
  return derive_seed(base, std::string_view(rec.id));
}

}  // namespace

CorrelationReport evaluate_proxy(const RankingDataset& dataset, Proxy proxy, const EvalOptions& opts) {
  const std::size_t n = dataset.records.size();
  if (n < 2) throw input_error("dataset: needs at least two records");
  std::vector<double> value(n, 0.0);
  std::vector<char> ok(n, 0);
  const auto started = std::chrono::steady_clock::now();
  parallel_for(n, opts.jobs, [&](std::size_t i) {
    const RankingRecord& rec = dataset.records[i];
    try {
      const ArchConfig cfg = record_config(rec, opts.space);
      const Model model = instantiate(cfg, record_seed(opts.seed, rec));
      ScoreOptions so;
      so.eta = opts.eta;
      value[i] = score_proxy(proxy, model, opts.batch, so).value;
      ok[i] = 1;
    } catch (const codec_error&) {
    } catch (const config_error&) {
    } catch (const shape_error&) {
    } catch (const input_error&) {
    }
  });
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  std::vector<double> xs, ys;
  xs.reserve(n);
  ys.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    if (ok[i]) {
      xs.push_back(value[i]);
      ys.push_back(dataset.records[i].score);
    }
  CorrelationReport rep;
  rep.proxy = proxy;
  rep.eta = opts.eta;
  rep.seed = opts.seed;
  rep.n = static_cast<int>(xs.size());
  rep.skipped = static_cast<int>(n - xs.size());
  if (static_cast<std::size_t>(rep.skipped) * 10 > n)
    throw input_error("dataset: more than 10% of records failed to instantiate (" +
                      std::to_string(rep.skipped) + " of " + std::to_string(n) + ")");
  if (xs.size() < 2) throw input_error("dataset: fewer than two scorable records");
  rep.tau = kendall_tau(xs, ys, &rep.tau_degenerate);
  rep.rho = spearman_rho(xs, ys, &rep.rho_degenerate);
  rep.seconds_per_1000 = elapsed / static_cast<double>(xs.size() + rep.skipped) * 1000.0;
  return rep;
}

std::vector<StabilityRow> stability_study(const RankingDataset& archs, Proxy proxy, StabilityMode mode,
                                          int trials, const EvalOptions& opts) {
  if (trials < 2) throw input_error("stability: needs at least two trials");
  const std::uint64_t batch_base = mix_seed(opts.seed, 0xb47c8e5ull);
  std::vector<StabilityRow> rows(archs.records.size());
  parallel_for(archs.records.size(), opts.jobs, [&](std::size_t i) {
    const RankingRecord& rec = archs.records[i];
    StabilityRow row;
    row.id = rec.id;
    const ArchConfig cfg = record_config(rec, opts.space);
    for (int t = 0; t < trials; ++t) {
      std::uint64_t weight_seed;
      Batch batch;
      if (mode == StabilityMode::seeds) {
        weight_seed = record_seed(mix_seed(opts.seed, static_cast<std::uint64_t>(t)), rec);
        batch = opts.batch;
      } else {
        weight_seed = record_seed(opts.seed, rec);
        batch = random_batch(opts.batch.b, opts.batch.n, cfg.vocab_size,
                             mix_seed(batch_base, static_cast<std::uint64_t>(t)));
      }
      const Model model = instantiate(cfg, weight_seed);
      ScoreOptions so;
      so.eta = opts.eta;
      row.values.push_back(score_proxy(proxy, model, batch, so).value);
    }
    const bool all_equal =
        std::all_of(row.values.begin(), row.values.end(), [&](double v) { return v == row.values.front(); });
    if (all_equal) {
      row.mean = row.values.front();
      row.stdev = 0.0;
    } else {
      double m = 0.0;
      for (double v : row.values) m += v;
      m /= static_cast<double>(trials);
      double ss = 0.0;
      for (double v : row.values) ss += (v - m) * (v - m);
      row.mean = m;
      row.stdev = std::sqrt(ss / static_cast<double>(trials - 1));
    }
    rows[i] = std::move(row);
  });
  return rows;
}

RankingDataset select_deciles(const RankingDataset& dataset) {
  const std::size_t n = dataset.records.size();
  if (n < 10) throw input_error("deciles: needs at least 10 records");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dataset.records[a].score < dataset.records[b].score;
  });
  RankingDataset out;
  for (std::size_t k = 0; k < 10; ++k) {
    const std::size_t lo = k * n / 10;
    const std::size_t hi = (k + 1) * n / 10;
    out.records.push_back(dataset.records[order[(lo + hi - 1) / 2]]);
  }
  return out;
}

std::vector<CorrelationReport> eta_sweep(const RankingDataset& dataset, const std::vector<double>& etas,
                                         const EvalOptions& opts) {
  if (etas.empty()) throw input_error("eta sweep: empty eta list");
  for (double e : etas)
    if (!(e > 0.0 && e <= 1.0)) throw input_error("eta sweep: eta outside (0, 1]");
  std::vector<CorrelationReport> rows;
  for (double e : etas)
    for (Proxy p : {Proxy::v_pca, Proxy::w_pca}) {
      EvalOptions o = opts;
      o.eta = e;
      rows.push_back(evaluate_proxy(dataset, p, o));
    }
  return rows;
}

RankingDataset synthetic_dataset(const SpaceSpec& space, const Batch& batch, const SyntheticSpec& spec) {
  if (spec.count < 2) throw input_error("synthetic: needs at least two architectures");
  if (!(spec.swap_fraction >= 0.0 && spec.swap_fraction <= 1.0))
    throw input_error("synthetic: swap_fraction outside [0, 1]");
  if (spec.gauss_rank_sigma < 0.0) throw input_error("synthetic: negative rank sigma");
  rng64 r(spec.seed);

  std::set<ArchGenome> seen;
  std::vector<ArchGenome> genomes;
  std::int64_t attempts = 0;
  const std::int64_t attempt_cap = 100ll * spec.count + 10000;
  while (static_cast<int>(genomes.size()) < spec.count) {
    if (++attempts > attempt_cap)
      throw config_error("synthetic: could not draw enough distinct feasible genomes");
    ArchGenome g = random_genome(space, r);
    if (!feasible(g, space)) continue;
    if (!seen.insert(g).second) continue;
    genomes.push_back(std::move(g));
  }

  const std::size_t n = genomes.size();
  std::vector<double> value(n);
  parallel_for(n, spec.jobs, [&](std::size_t i) {
    const Model model = instantiate(decode(genomes[i], space),
                                    derive_seed(spec.weight_seed, std::span<const int>(genomes[i])));
    ScoreOptions so;
    so.eta = spec.eta;
    value[i] = score_proxy(spec.signal, model, batch, so).value;
  });

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return value[a] < value[b]; });

  // Ground truth by rank position: a strictly increasing transform of the
  // proxy, then optional Gaussian displacement of rank positions, then
  // non-overlapping adjacent swaps.
  std::vector<double> gt(n);
  for (std::size_t j = 0; j < n; ++j) gt[j] = std::asinh(value[order[j]]);
  if (spec.gauss_rank_sigma > 0.0) {
    std::vector<std::pair<double, std::size_t>> keys(n);
    for (std::size_t j = 0; j < n; ++j)
      keys[j] = {static_cast<double>(j) + spec.gauss_rank_sigma * r.normal(), j};
    std::sort(keys.begin(), keys.end());
    std::vector<double> shuffled(n);
    for (std::size_t j = 0; j < n; ++j) shuffled[keys[j].second] = gt[j];
    gt = std::move(shuffled);
  }
  const int swaps = static_cast<int>(spec.swap_fraction * static_cast<double>(spec.count));
  std::set<std::size_t> used;
  int placed = 0;
  std::int64_t guard = 0;
  while (placed < swaps && guard++ < 100ll * swaps + 1000) {
    const std::size_t p = static_cast<std::size_t>(r.below(static_cast<std::uint64_t>(n - 1)));
    if (used.count(p) || (p > 0 && used.count(p - 1)) || used.count(p + 1)) continue;
    std::swap(gt[p], gt[p + 1]);
    used.insert(p);
    ++placed;
  }

  RankingDataset out;
  out.records.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    RankingRecord& rec = out.records[order[j]];
    rec.genome = genomes[order[j]];
    rec.score = gt[j];
  }
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "synth-%04zu", i);
    out.records[i].id = buf;
  }
  return out;
}

}  // namespace wpca
