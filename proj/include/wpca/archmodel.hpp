#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "wpca/autograd.hpp"
#include "wpca/rng.hpp"
#include "wpca/tensor.hpp"

namespace wpca {

enum class BlockKind : std::uint8_t { bert, mobilebert, flexibert_element };
enum class MixOp : std::uint8_t {
  scaled_dot_product,
  multiplicative,  // dot-product scores without the 1/sqrt(dh) factor
  fourier,         // fixed real-DFT matrix over the token axis, no parameters
  cosine,          // fixed orthonormal DCT-II matrix over the token axis, no parameters
  dynamic_conv,    // per-position softmax kernels from a learned projection
};

const char* to_string(BlockKind k);
const char* to_string(MixOp op);

struct LayerSpec {
  BlockKind block_kind = BlockKind::bert;
  MixOp attn_op = MixOp::scaled_dot_product;
  int heads = 1;
  int ffn_hidden = 132;   // D' of the layer's FFNs
  int ffn_stacks = 1;     // FFN sub-blocks, each with its own norm and residual
  int conv_kernel = 0;    // dynamic_conv only
  int inner_dim = 0;      // mobilebert only: bottleneck width, embed_dim/4
};

// Miniature encoder description. Token embeddings are factorized: a
// vocab x token_embed_dim table feeds a learned projection up to embed_dim,
// and the output head projects back down and reuses the table transposed.
struct ArchConfig {
  std::vector<LayerSpec> layers;
  int embed_dim = 528;
  int token_embed_dim = 128;
  int vocab_size = 30522;
  int max_seq_len = 128;

  // Throws config_error on structural violations (empty layers, nonpositive
  // dims, heads not dividing the attention width, mobilebert inner_dim not
  // embed_dim/4, missing conv kernel).
  void validate() const;
};

// Attention width of a layer: the bottleneck width for mobilebert blocks,
// embed_dim otherwise.
int attention_width(const ArchConfig& config, const LayerSpec& layer);

// Head count rule for the paper-space blocks: width/66 rounded to the nearest
// integer, floored at 1, then decremented until it divides the width.
int resolved_heads(int width);

struct Batch {
  std::int64_t b = 0;
  std::int64_t n = 0;
  std::vector<std::int64_t> ids;  // row-major b x n
};

Batch random_batch(std::int64_t b, std::int64_t n, int vocab_size, std::uint64_t seed);

// Indices into Model::params. -1 marks an absent tensor.
struct AttnIndex {
  int ln_g = -1, ln_b = -1;
  int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
  int wker = -1, bker = -1;  // dynamic_conv kernel projection
};
struct StackIndex {
  int ln_g = -1, ln_b = -1;
  int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};
struct LayerIndex {
  int down_w = -1, down_b = -1, up_w = -1, up_b = -1;  // mobilebert bottleneck
  AttnIndex attn;
  std::vector<StackIndex> stacks;
  int width = 0;  // attention/FFN width of the layer
  int heads = 0;  // 0 for parameter-free mixing (fourier/cosine)
};

// Instantiated model: immutable by convention after instantiate(); tests may
// mutate parameter tensors through params() before running forwards.
class Model {
 public:
  const ArchConfig& config() const { return config_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  std::int64_t parameter_elements() const;

  // structural indices, exposed for the scoring code
  int token_table = -1, in_proj_w = -1, in_proj_b = -1, pos_table = -1;
  int embed_ln_g = -1, embed_ln_b = -1;
  std::vector<LayerIndex> layers;
  int final_ln_g = -1, final_ln_b = -1;
  int out_proj_w = -1, out_proj_b = -1, vocab_bias = -1;

 private:
  friend Model instantiate(const ArchConfig&, std::uint64_t);
  ArchConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

// Draws every weight matrix and embedding table from a truncated normal
// (mean 0, stddev 0.02, truncation at 2 stddev); biases start at zero and
// norm gains at one. Deterministic: parameters are drawn in params() order,
// elementwise row-major.
Model instantiate(const ArchConfig& config, std::uint64_t seed);

struct ForwardOptions {
  bool attention_taps = false;
  bool logits = false;
  // Record the pass from the post-embedding hidden state onward, injecting
  // that state as a differentiable input node (tape graphs only).
  bool differentiable_embeddings = false;
  // When set, FFN pre-activations are handed to the visitor as they are
  // produced instead of being retained in the result.
  std::function<void(int layer, int stack, const Tensor& pre)> ffn_visitor;
  // Same streaming treatment for per-head taps: ctx is the head's context
  // output, prob its softmax weights (or dynamic-conv kernels).
  std::function<void(int layer, int head, const Tensor& ctx, const Tensor& prob)> attn_visitor;
};

template <class G>
struct ForwardResult {
  using Ref = typename G::Ref;
  std::vector<Ref> ffn_pre;                  // layer-major, stack-minor
  std::vector<std::vector<Ref>> attn_heads;  // [layer][head] context outputs
  std::vector<std::vector<Ref>> attn_probs;  // [layer][head] softmax weights
                                             // (dynamic_conv: its kernels)
  std::optional<Ref> hidden;                 // final hidden state, pre head
  std::optional<Ref> logits;
  std::optional<Ref> embeddings;  // differentiable input node when requested
};

// Tapped forward pass over graph g. Layer blocks are pre-norm with residuals;
// mobilebert blocks run attention and FFNs at the bottleneck width between
// learned down/up projections, with an outer residual at full width.
// Throws input_error for out-of-range token ids or n > max_seq_len.
template <class G>
ForwardResult<G> forward(const Model& model, const Batch& batch, G& g,
                         const ForwardOptions& opts = {});

extern template ForwardResult<EagerGraph> forward(const Model&, const Batch&, EagerGraph&,
                                                  const ForwardOptions&);
extern template ForwardResult<TapeGraph> forward(const Model&, const Batch&, TapeGraph&,
                                                 const ForwardOptions&);

// Value-level taps for callers that do not care about the graph.
struct TappedActivations {
  std::vector<Tensor> ffn_pre;
  std::vector<std::vector<Tensor>> attn_heads;
  std::vector<std::vector<Tensor>> attn_probs;
  std::optional<Tensor> logits;
};

TappedActivations forward_eager(const Model& model, const Batch& batch,
                                const ForwardOptions& opts = {});

}  // namespace wpca
