#include "wpca/searchspace.hpp"

#include <cctype>
#include <stdexcept>

#include "wpca/errors.hpp"

namespace wpca {

SpaceSpec SpaceSpec::small_preset() { return SpaceSpec{}; }

SpaceSpec SpaceSpec::tiny_preset() {
  SpaceSpec s;
  s.m = 6;
  s.param_cap = 10'000'000;
  return s;
}

std::int64_t SpaceSpec::genome_count() const {
  std::int64_t total = 1;
  for (int i = 0; i < m; ++i) total *= 2 * static_cast<std::int64_t>(n);
  return total;
}

ArchConfig decode(const ArchGenome& genome, const SpaceSpec& space) {
  if (static_cast<int>(genome.size()) != space.m)
    throw codec_error("decode: genome length " + std::to_string(genome.size()) + " != m " + std::to_string(space.m));
  ArchConfig cfg;
  cfg.embed_dim = space.embed_dim;
  cfg.token_embed_dim = space.token_embed_dim;
  cfg.vocab_size = space.vocab_size;
  cfg.max_seq_len = space.max_seq_len;
  for (std::size_t i = 0; i < genome.size(); ++i) {
    const int gene = genome[i];
    if (gene < 0 || gene >= 2 * space.n)
      throw codec_error("decode: gene " + std::to_string(gene) + " at layer " + std::to_string(i) +
                        " outside [0, " + std::to_string(2 * space.n - 1) + "]");
    LayerSpec l;
    l.block_kind = gene / space.n == 0 ? BlockKind::bert : BlockKind::mobilebert;
    l.ffn_hidden = space.dim_step * (gene % space.n + 1);
    if (l.block_kind == BlockKind::mobilebert) l.inner_dim = space.embed_dim / 4;
    l.heads = resolved_heads(attention_width(cfg, l));
    cfg.layers.push_back(l);
  }
  return cfg;
}

ArchGenome encode(const ArchConfig& config, const SpaceSpec& space) {
  if (static_cast<int>(config.layers.size()) != space.m)
    throw codec_error("encode: layer count != m");
  ArchGenome genome;
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerSpec& l = config.layers[i];
    int kind;
    if (l.block_kind == BlockKind::bert)
      kind = 0;
    else if (l.block_kind == BlockKind::mobilebert)
      kind = 1;
    else
      throw codec_error("encode: layer " + std::to_string(i) + " block kind is outside the genome space");
    const int dim = l.ffn_hidden / space.dim_step - 1;
    if (dim < 0 || dim >= space.n || space.dim_step * (dim + 1) != l.ffn_hidden)
      throw codec_error("encode: layer " + std::to_string(i) + " ffn_hidden " + std::to_string(l.ffn_hidden) +
                        " is off the " + std::to_string(space.dim_step) + "-step grid");
    genome.push_back(kind * space.n + dim);
  }
  return genome;
}

namespace {

std::int64_t linear_params(std::int64_t d_in, std::int64_t d_out) { return d_in * d_out + d_out; }

}  // namespace

ParamBreakdown param_count(const ArchConfig& config) {
  ParamBreakdown b;
  const std::int64_t d = config.embed_dim;
  const std::int64_t e = config.token_embed_dim;
  b.embeddings = static_cast<std::int64_t>(config.vocab_size) * e + static_cast<std::int64_t>(config.max_seq_len) * d;
  b.projections = linear_params(e, d) + linear_params(d, e) + config.vocab_size;
  b.norms = 4 * d;  // embedding and final norms
  for (const LayerSpec& l : config.layers) {
    const std::int64_t w = attention_width(config, l);
    if (l.block_kind == BlockKind::mobilebert) b.projections += linear_params(d, w) + linear_params(w, d);
    switch (l.attn_op) {
      case MixOp::scaled_dot_product:
      case MixOp::multiplicative:
        b.attention += 4 * linear_params(w, w);
        break;
      case MixOp::dynamic_conv:
        b.attention += 2 * linear_params(w, w) +
                       linear_params(w, static_cast<std::int64_t>(l.heads) * l.conv_kernel);
        break;
      case MixOp::fourier:
      case MixOp::cosine:
        break;
    }
    b.norms += 2 * w;  // pre-mixing norm
    b.ffn += l.ffn_stacks * (linear_params(w, l.ffn_hidden) + linear_params(l.ffn_hidden, w));
    b.norms += l.ffn_stacks * 2 * w;
  }
  b.total = b.embeddings + b.attention + b.ffn + b.norms + b.projections;
  return b;
}

std::int64_t genome_params(const ArchGenome& genome, const SpaceSpec& space) {
  return param_count(decode(genome, space)).total;
}

bool feasible(const ArchGenome& genome, const SpaceSpec& space) {
  return genome_params(genome, space) <= space.param_cap;
}

ArchGenome parse_genome(const std::string& text) {
  ArchGenome genome;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    std::size_t lo = pos, hi = comma;
    while (lo < hi && std::isspace(static_cast<unsigned char>(text[lo]))) ++lo;
    while (hi > lo && std::isspace(static_cast<unsigned char>(text[hi - 1]))) --hi;
    const std::string tok = text.substr(lo, hi - lo);
    std::size_t used = 0;
    int value = 0;
    try {
      value = std::stoi(tok, &used);
    } catch (const std::exception&) {
      throw codec_error("genome literal: bad integer '" + tok + "'");
    }
    if (used != tok.size()) throw codec_error("genome literal: bad integer '" + tok + "'");
    genome.push_back(value);
    pos = comma + 1;
  }
  return genome;
}

std::string format_genome(const ArchGenome& genome) {
  std::string out;
  for (std::size_t i = 0; i < genome.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(genome[i]);
  }
  return out;
}

ArchGenome random_genome(const SpaceSpec& space, rng64& rng) {
  ArchGenome genome(static_cast<std::size_t>(space.m));
  for (int& gene : genome) gene = static_cast<int>(rng.below(2 * static_cast<std::uint64_t>(space.n)));
  return genome;
}

ArchConfig sample_flexibert(std::uint64_t seed) {
  rng64 r(seed);
  ArchConfig cfg;
  cfg.embed_dim = r.below(2) == 0 ? 128 : 256;
  cfg.token_embed_dim = 128;
  const int layers = r.below(2) == 0 ? 2 : 4;
  for (int i = 0; i < layers; ++i) {
    LayerSpec l;
    l.block_kind = BlockKind::flexibert_element;
    const std::uint64_t family = r.below(3);
    const std::uint64_t sub = r.below(2);
    if (family == 0)
      l.attn_op = sub == 0 ? MixOp::scaled_dot_product : MixOp::multiplicative;
    else if (family == 1)
      l.attn_op = sub == 0 ? MixOp::fourier : MixOp::cosine;
    else {
      l.attn_op = MixOp::dynamic_conv;
      l.conv_kernel = sub == 0 ? 5 : 9;
    }
    l.heads = r.below(2) == 0 ? 2 : 4;
    l.ffn_hidden = r.below(2) == 0 ? 512 : 1024;
    l.ffn_stacks = r.below(2) == 0 ? 1 : 3;
    cfg.layers.push_back(l);
  }
  return cfg;
}

std::int64_t space_size(std::int64_t per_layer_choices, std::span<const int> layer_counts,
                        std::int64_t embed_choices) {
  std::int64_t sum = 0;
  for (int layers : layer_counts) {
    std::int64_t combos = 1;
    for (int i = 0; i < layers; ++i) combos *= per_layer_choices;
    sum += combos;
  }
  return sum * embed_choices;
}

std::int64_t flexibert_space_size() {
  const int layer_options[] = {2, 4};
  return space_size(48, layer_options, 2);
}

}  // namespace wpca
