#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wpca/archmodel.hpp"
#include "wpca/rng.hpp"

namespace wpca {

// Integer genome of length m; gene g selects block kind g/n (0 bert,
// 1 mobilebert) and FFN hidden width dim_step*(g%n + 1).
using ArchGenome = std::vector<int>;

struct SpaceSpec {
  int m = 12;                           // layers
  int n = 6;                            // FFN width choices per kind
  int embed_dim = 528;
  int dim_step = 132;
  std::int64_t param_cap = 15'700'000;  // weight budget, embeddings included
  int token_embed_dim = 128;
  int vocab_size = 30522;
  int max_seq_len = 128;

  static SpaceSpec small_preset();  // m=12, cap 15.7M
  static SpaceSpec tiny_preset();   // m=6, cap 10M
  std::int64_t genome_count() const;  // (2n)^m
};

struct ParamBreakdown {
  std::int64_t embeddings = 0;   // token and positional tables
  std::int64_t attention = 0;    // per-layer mixing weights
  std::int64_t ffn = 0;          // per-layer feed-forward weights
  std::int64_t norms = 0;        // every layernorm gain/shift
  std::int64_t projections = 0;  // embedding/head projections, bottlenecks, vocab bias
  std::int64_t total = 0;
};

// Throws codec_error when the genome length or any gene is out of range.
ArchConfig decode(const ArchGenome& genome, const SpaceSpec& space);

// Inverse of decode for paper-space configs; throws codec_error for configs
// outside the space (flexibert blocks, off-grid FFN widths).
ArchGenome encode(const ArchConfig& config, const SpaceSpec& space);

// Closed-form count of every trainable element of the instantiated model.
ParamBreakdown param_count(const ArchConfig& config);

std::int64_t genome_params(const ArchGenome& genome, const SpaceSpec& space);
bool feasible(const ArchGenome& genome, const SpaceSpec& space);

// Comma-separated integer literal, e.g. "3,7,0,11".
ArchGenome parse_genome(const std::string& text);
std::string format_genome(const ArchGenome& genome);

ArchGenome random_genome(const SpaceSpec& space, rng64& rng);

// Uniform draw over the FlexiBERT grid: embed {128,256}, layers {2,4}, and
// per layer one of 48 combos (operator family and sub-choice, heads {2,4},
// FFN hidden {512,1024}, FFN stacks {1,3}).
ArchConfig sample_flexibert(std::uint64_t seed);

// Sum over layer-count options of per_layer_choices^layers, times
// embed_choices.
std::int64_t space_size(std::int64_t per_layer_choices, std::span<const int> layer_counts,
                        std::int64_t embed_choices);
std::int64_t flexibert_space_size();

}  // namespace wpca
