#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "wpca/linalg.hpp"
#include "wpca/tensor.hpp"

namespace wpca {

// Elementwise/structural kernels shared by the eager path and the tape. Each
// returns a freshly allocated tensor; inputs are never modified.
namespace kernels {

// Batched matrix product. Accepts (m,k)x(k,n), and batched forms where one or
// both operands carry identical leading batch dims: (B..,m,k)x(k,n),
// (m,k)x(B..,k,n), (B..,m,k)x(B..,k,n).
Tensor matmul(const Tensor& a, const Tensor& b);

// b may have the same shape as a, a shape that is a trailing suffix of a's, or
// a's shape with the last dim replaced by 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh form

// Softmax over the last dim, max-subtracted for stability.
Tensor softmax(const Tensor& x);

// Normalizes the last dim to zero mean/unit variance (eps 1e-12), then applies
// gamma/beta (both 1-d of that length). When stash is non-null it receives a
// (rows x 2) tensor of per-row mean and inverse stddev for the backward pass.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor* stash);

Tensor transpose(const Tensor& x, const std::vector<int>& perm);

// Row gather: table is (V, E), ids are flat b*n indices into [0, V).
Tensor embed(const Tensor& table, const std::vector<std::int64_t>& ids, std::int64_t b, std::int64_t n);

Tensor reduce_sum(const Tensor& x);  // full sum, shape [1]

// Shifts along axis 1 of a (B, N, D) tensor: y[b, t, :] = x[b, t + offset, :],
// zero where t + offset falls outside [0, N).
Tensor token_shift(const Tensor& x, std::int64_t offset);

Tensor slice_last(const Tensor& x, std::int64_t begin, std::int64_t len);
Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t len);  // axis 0

}  // namespace kernels

// Reverse-mode tape. Operations append nodes eagerly (values are computed on
// construction); backward() replays the recorded program once. Node ids are
// indices into the tape and stay valid for its lifetime.
class Tape {
 public:
  using NodeId = int;

  Tape();

  NodeId input(Tensor v, bool differentiable = false);
  NodeId param(const Tensor& v, std::string name);
  NodeId constant(Tensor v);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId relu(NodeId x);
  NodeId gelu(NodeId x);
  NodeId softmax(NodeId x);
  NodeId layernorm(NodeId x, NodeId gamma, NodeId beta);
  NodeId transpose(NodeId x, std::vector<int> perm);
  NodeId reshape(NodeId x, std::vector<std::int64_t> shape);
  NodeId embed(NodeId table, std::vector<std::int64_t> ids, std::int64_t b, std::int64_t n);
  NodeId reduce_sum(NodeId x);
  NodeId token_shift(NodeId x, std::int64_t offset);
  NodeId slice_last(NodeId x, std::int64_t begin, std::int64_t len);
  NodeId slice_rows(NodeId x, std::int64_t begin, std::int64_t len);

  const Tensor& value(NodeId id) const;
  bool differentiable(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& param_ids() const { return params_; }
  const std::string& param_name(NodeId id) const;

  // Gradients of a scalar loss with respect to every differentiable node,
  // indexed by node id (tensors for untouched nodes have numel 0). The loss
  // node must have exactly one element. A tape supports a single backward
  // pass; a second call raises contract_error.
  std::vector<Tensor> backward(NodeId loss) const;

  // Process-wide count of Tape objects ever constructed. Lets tests assert
  // that gradient-free code paths never build a tape.
  static std::uint64_t tapes_constructed();

 private:
  enum class Op : std::uint8_t {
    input,
    param,
    constant,
    matmul,
    add,
    mul,
    scale,
    relu,
    gelu,
    softmax,
    layernorm,
    transpose,
    reshape,
    embed,
    reduce_sum,
    token_shift,
    slice_last,
    slice_rows,
  };

  struct Node {
    Op op;
    NodeId a = -1, b = -1, c = -1;
    Tensor value;
    Tensor aux;                      // layernorm stash
    double scalar = 0.0;             // scale factor / shift offset / slice begin
    std::int64_t extra = 0;          // slice length, embed batch
    std::vector<int> perm;           // transpose
    std::vector<std::int64_t> ints;  // embed ids / reshape source shape
    std::string name;                // param name
    bool needs_grad = false;
  };

  NodeId push(Node n);
  NodeId check(NodeId id, const char* who) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> params_;
  mutable bool backward_done_ = false;
  static std::atomic<std::uint64_t> constructed_;
};

// Graph adapters let the model forward pass be written once and run either
// eagerly (no tape, for gradient-free proxies) or recorded on a tape. Both
// expose the same op vocabulary; Ref is a value handle.

// Eager execution. Refs are shared pointers; leaves alias caller-owned tensors
// without copying, so the model must outlive the refs.
struct EagerGraph {
  using Ref = std::shared_ptr<const Tensor>;
  static constexpr bool taped = false;

  static Ref own(Tensor t) { return std::make_shared<Tensor>(std::move(t)); }
  Ref input(Tensor v, bool = false) { return own(std::move(v)); }
  Ref param(const Tensor& v, const std::string&) { return Ref(std::shared_ptr<const Tensor>(), &v); }
  Ref constant(Tensor v) { return own(std::move(v)); }
  Ref matmul(const Ref& a, const Ref& b) { return own(kernels::matmul(*a, *b)); }
  Ref add(const Ref& a, const Ref& b) { return own(kernels::add(*a, *b)); }
  Ref mul(const Ref& a, const Ref& b) { return own(kernels::mul(*a, *b)); }
  Ref scale(const Ref& a, double c) { return own(kernels::scale(*a, c)); }
  Ref relu(const Ref& x) { return own(kernels::relu(*x)); }
  Ref gelu(const Ref& x) { return own(kernels::gelu(*x)); }
  Ref softmax(const Ref& x) { return own(kernels::softmax(*x)); }
  Ref layernorm(const Ref& x, const Ref& g, const Ref& b) { return own(kernels::layernorm(*x, *g, *b, nullptr)); }
  Ref transpose(const Ref& x, std::vector<int> perm) { return own(kernels::transpose(*x, perm)); }
  Ref reshape(const Ref& x, std::vector<std::int64_t> shape) { return own(x->reshaped(std::move(shape))); }
  Ref embed(const Ref& table, std::vector<std::int64_t> ids, std::int64_t b, std::int64_t n) {
    return own(kernels::embed(*table, ids, b, n));
  }
  Ref reduce_sum(const Ref& x) { return own(kernels::reduce_sum(*x)); }
  Ref token_shift(const Ref& x, std::int64_t offset) { return own(kernels::token_shift(*x, offset)); }
  Ref slice_last(const Ref& x, std::int64_t begin, std::int64_t len) { return own(kernels::slice_last(*x, begin, len)); }
  Ref slice_rows(const Ref& x, std::int64_t begin, std::int64_t len) { return own(kernels::slice_rows(*x, begin, len)); }
  const Tensor& value(const Ref& r) const { return *r; }
};

// Records every op on the wrapped tape; Refs are node ids.
struct TapeGraph {
  Tape& tape;
  using Ref = Tape::NodeId;
  static constexpr bool taped = true;

  explicit TapeGraph(Tape& t) : tape(t) {}
  Ref input(Tensor v, bool differentiable = false) { return tape.input(std::move(v), differentiable); }
  Ref param(const Tensor& v, const std::string& name) { return tape.param(v, name); }
  Ref constant(Tensor v) { return tape.constant(std::move(v)); }
  Ref matmul(Ref a, Ref b) { return tape.matmul(a, b); }
  Ref add(Ref a, Ref b) { return tape.add(a, b); }
  Ref mul(Ref a, Ref b) { return tape.mul(a, b); }
  Ref scale(Ref a, double c) { return tape.scale(a, c); }
  Ref relu(Ref x) { return tape.relu(x); }
  Ref gelu(Ref x) { return tape.gelu(x); }
  Ref softmax(Ref x) { return tape.softmax(x); }
  Ref layernorm(Ref x, Ref g, Ref b) { return tape.layernorm(x, g, b); }
  Ref transpose(Ref x, std::vector<int> perm) { return tape.transpose(x, std::move(perm)); }
  Ref reshape(Ref x, std::vector<std::int64_t> shape) { return tape.reshape(x, std::move(shape)); }
  Ref embed(Ref table, std::vector<std::int64_t> ids, std::int64_t b, std::int64_t n) {
    return tape.embed(table, std::move(ids), b, n);
  }
  Ref reduce_sum(Ref x) { return tape.reduce_sum(x); }
  Ref token_shift(Ref x, std::int64_t offset) { return tape.token_shift(x, offset); }
  Ref slice_last(Ref x, std::int64_t begin, std::int64_t len) { return tape.slice_last(x, begin, len); }
  Ref slice_rows(Ref x, std::int64_t begin, std::int64_t len) { return tape.slice_rows(x, begin, len); }
  const Tensor& value(Ref r) const { return tape.value(r); }
};

// Jacobian of a scalar loss with respect to a differentiable input node of
// shape (N, ...): row n is the gradient for input n, flattened. Runs the
// tape's single backward pass. Raises contract_error when the input node was
// not tagged differentiable.
Matrix input_jacobian(const Tape& tape, Tape::NodeId loss, Tape::NodeId inputs);

// Finite-difference gradient of f at x (central differences), used by tests
// and exposed for debugging custom ops.
double fd_derivative(const std::function<double(double)>& f, double x, double h);

}  // namespace wpca
