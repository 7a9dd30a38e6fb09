#include "wpca/gasearch.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <numeric>

#include "wpca/errors.hpp"
#include "wpca/parallel.hpp"

namespace wpca {

ArchGenome crossover(const ArchGenome& p1, const ArchGenome& p2, const std::function<double()>& draw) {
  if (p1.size() != p2.size()) throw codec_error("crossover: parent genomes differ in length");
  ArchGenome child(p1.size());
  for (std::size_t i = 0; i < p1.size(); ++i) child[i] = draw() < 0.5 ? p1[i] : p2[i];
  return child;
}

ArchGenome crossover(const ArchGenome& p1, const ArchGenome& p2, rng64& rng) {
  return crossover(p1, p2, [&rng] { return rng.uniform01(); });
}

ArchGenome mutate(const ArchGenome& genome, const SpaceSpec& space, double mutation_prob, rng64& rng) {
  ArchGenome out = genome;
  const std::uint64_t range = 2 * static_cast<std::uint64_t>(space.n);
  for (int& gene : out) {
    if (rng.uniform01() >= mutation_prob) continue;
    const int drawn = static_cast<int>(rng.below(range - 1));
    gene = drawn >= gene ? drawn + 1 : drawn;
  }
  return out;
}

namespace {

void validate(const SpaceSpec& space, const GaConfig& ga) {
  if (ga.population < 2) throw config_error("search: population must be at least 2");
  if (ga.generations < 1) throw config_error("search: generations must be at least 1");
  if (!(ga.crossover_prob >= 0.0 && ga.crossover_prob <= 1.0))
    throw config_error("search: crossover_prob outside [0, 1]");
  if (!(ga.mutation_prob >= 0.0 && ga.mutation_prob <= 1.0))
    throw config_error("search: mutation_prob outside [0, 1]");
  if (ga.parent_pool < 1) throw config_error("search: parent_pool must be positive");
  if (space.m < 1 || space.n < 1) throw config_error("search: degenerate space");
}

}  // namespace

SearchReport run_search(const SpaceSpec& space, const GaConfig& ga, const FitnessFn& scorer) {
  validate(space, ga);
  const auto started = std::chrono::steady_clock::now();
  rng64 evo(ga.seed);

  SearchReport report;
  report.fitness_name = ga.fitness_name;
  report.seed = ga.seed;

  std::vector<ArchGenome> pop;
  pop.reserve(static_cast<std::size_t>(ga.population));
  int draws = 0;
  while (static_cast<int>(pop.size()) < ga.population) {
    if (++draws > 10000)
      throw config_error("search: no cap-feasible genome in 10000 initialization draws");
    ArchGenome g = random_genome(space, evo);
    if (feasible(g, space)) pop.push_back(std::move(g));
  }

  std::map<ArchGenome, double> cache;
  auto evaluate = [&](const std::vector<ArchGenome>& genomes) {
    std::vector<const ArchGenome*> misses;
    for (const ArchGenome& g : genomes)
      if (cache.find(g) == cache.end()) {
        cache.emplace(g, 0.0);  // reserve so duplicates are scored once
        misses.push_back(&g);
      }
    report.evaluations += static_cast<std::int64_t>(misses.size());
    if (misses.empty()) return;
    std::vector<double> values(misses.size());
    parallel_for(misses.size(), ga.jobs, [&](std::size_t i) { values[i] = scorer(*misses[i]); });
    for (std::size_t i = 0; i < misses.size(); ++i) cache[*misses[i]] = values[i];
  };

  bool have_best = false;
  for (int gen = 0; gen < ga.generations; ++gen) {
    evaluate(pop);
    // rank: fitness descending, position ascending on ties
    std::vector<std::size_t> order(pop.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return cache.at(pop[a]) > cache.at(pop[b]); });
    const ArchGenome& gen_best = pop[order[0]];
    const double gen_fit = cache.at(gen_best);
    if (!have_best || gen_fit > report.best_fitness) {
      report.best_fitness = gen_fit;
      report.best_genome = gen_best;
      have_best = true;
    }
    report.best_genome_per_gen.push_back(gen_best);
    report.best_fitness_trace.push_back(gen_fit);
    if (gen + 1 == ga.generations) break;

    const int pool = std::min<int>(ga.parent_pool, static_cast<int>(order.size()));
    std::vector<ArchGenome> next;
    next.reserve(static_cast<std::size_t>(ga.population));
    next.push_back(gen_best);  // elite
    std::int64_t rounds = 0;
    while (static_cast<int>(next.size()) < ga.population) {
      if (++rounds > 100000) throw config_error("search: cap repair stalled; space may be infeasible");
      const ArchGenome& p1 = pop[order[evo.below(static_cast<std::uint64_t>(pool))]];
      const ArchGenome& p2 = pop[order[evo.below(static_cast<std::uint64_t>(pool))]];
      ArchGenome base = evo.uniform01() < ga.crossover_prob ? crossover(p1, p2, evo) : p1;
      bool accepted = false;
      for (int attempt = 0; attempt < 20; ++attempt) {
        ArchGenome child = mutate(base, space, ga.mutation_prob, evo);
        if (feasible(child, space)) {
          next.push_back(std::move(child));
          accepted = true;
          break;
        }
      }
      if (!accepted) continue;  // fresh crossover
    }
    pop = std::move(next);
  }

  report.best_config = decode(report.best_genome, space);
  report.best_params = param_count(report.best_config);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace wpca
