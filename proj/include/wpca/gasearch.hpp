#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wpca/searchspace.hpp"

namespace wpca {

struct GaConfig {
  int population = 50;
  int generations = 40;
  double crossover_prob = 1.0;
  double mutation_prob = 0.1;  // per gene
  int parent_pool = 10;  // clamped to the population when larger
  std::uint64_t seed = 0;
  int jobs = 1;                // concurrent fitness evaluations
  std::string fitness_name;    // recorded in the report
};

struct SearchReport {
  std::vector<ArchGenome> best_genome_per_gen;  // per-generation best
  std::vector<double> best_fitness_trace;       // nondecreasing under elitism
  ArchGenome best_genome;
  double best_fitness = 0.0;
  std::int64_t evaluations = 0;  // fitness calls; cache hits excluded
  double wall_seconds = 0.0;
  ArchConfig best_config;
  ParamBreakdown best_params;
  std::string fitness_name;
  std::uint64_t seed = 0;
};

// Per-gene uniform crossover: child[i] = p1[i] when draw() < 0.5, else p2[i].
// Throws codec_error on length mismatch.
ArchGenome crossover(const ArchGenome& p1, const ArchGenome& p2, const std::function<double()>& draw);
ArchGenome crossover(const ArchGenome& p1, const ArchGenome& p2, rng64& rng);

// Each gene independently mutates with probability mutation_prob into a
// uniform draw over the other 2n-1 values, never its current value.
ArchGenome mutate(const ArchGenome& genome, const SpaceSpec& space, double mutation_prob, rng64& rng);

using FitnessFn = std::function<double(const ArchGenome&)>;

// Elitist genetic search maximizing scorer over cap-feasible genomes. The
// initial population is drawn uniformly among feasible genomes (config_error
// after 10,000 failed draws); parents are random ordered pairs from the
// top parent_pool of each generation; the single best individual survives
// unchanged. Infeasible children have their mutation redrawn up to 20 times,
// then are replaced by a fresh crossover. Selection is rank-based, so any
// strictly increasing transform of scorer yields the same search trajectory.
// The scorer is only ever called on feasible genomes, once per distinct
// genome (cached); it must be pure, and thread-safe when jobs > 1.
SearchReport run_search(const SpaceSpec& space, const GaConfig& ga, const FitnessFn& scorer);

}  // namespace wpca
