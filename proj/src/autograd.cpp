#include "wpca/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "wpca/errors.hpp"
#include "wpca/linalg.hpp"

namespace wpca {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
constexpr double kLnEps = 1e-12;

struct MatmulPlan {
  std::int64_t batch = 1, m = 0, k = 0, n = 0;
  bool a_batched = false, b_batched = false;
  std::vector<std::int64_t> out_shape;
};

MatmulPlan plan_matmul(const std::vector<std::int64_t>& as, const std::vector<std::int64_t>& bs) {
  if (as.size() < 2 || bs.size() < 2)
    throw shape_error("matmul: operands must have rank >= 2, got " + Tensor::shape_string(as) + " x " +
                      Tensor::shape_string(bs));
  MatmulPlan p;
  p.m = as[as.size() - 2];
  p.k = as[as.size() - 1];
  const std::int64_t k2 = bs[bs.size() - 2];
  p.n = bs[bs.size() - 1];
  if (p.k != k2)
    throw shape_error("matmul: inner dimensions differ, " + Tensor::shape_string(as) + " x " +
                      Tensor::shape_string(bs));
  std::vector<std::int64_t> la(as.begin(), as.end() - 2);
  std::vector<std::int64_t> lb(bs.begin(), bs.end() - 2);
  if (!la.empty() && !lb.empty() && la != lb)
    throw shape_error("matmul: batch dimensions differ, " + Tensor::shape_string(as) + " x " +
                      Tensor::shape_string(bs));
  const std::vector<std::int64_t>& lead = la.empty() ? lb : la;
  p.a_batched = !la.empty();
  p.b_batched = !lb.empty();
  for (std::int64_t d : lead) p.batch *= d;
  p.out_shape = lead;
  p.out_shape.push_back(p.m);
  p.out_shape.push_back(p.n);
  return p;
}

enum class BKind { equal, suffix, lastdim1 };

BKind classify_broadcast(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b, const char* who) {
  if (a == b) return BKind::equal;
  if (a.size() == b.size() && !a.empty() && b.back() == 1 &&
      std::equal(a.begin(), a.end() - 1, b.begin(), b.end() - 1))
    return BKind::lastdim1;
  if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size())))
    return BKind::suffix;
  throw shape_error(std::string(who) + ": shapes " + Tensor::shape_string(a) + " and " + Tensor::shape_string(b) +
                    " do not broadcast");
}

std::vector<std::int64_t> strides_of(const std::vector<std::int64_t>& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
  return s;
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return inv;
}

void check_perm(const std::vector<int>& perm, int rank) {
  if (static_cast<int>(perm.size()) != rank) throw shape_error("transpose: permutation length != rank");
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  for (int p : perm) {
    if (p < 0 || p >= rank || seen[static_cast<std::size_t>(p)]) throw shape_error("transpose: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
}

}  // namespace

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatmulPlan p = plan_matmul(a.shape(), b.shape());
  Tensor out(p.out_shape);
  const std::size_t a_step = p.a_batched ? static_cast<std::size_t>(p.m * p.k) : 0;
  const std::size_t b_step = p.b_batched ? static_cast<std::size_t>(p.k * p.n) : 0;
  for (std::int64_t i = 0; i < p.batch; ++i) {
    detail::gemm_acc(a.data() + static_cast<std::size_t>(i) * a_step, b.data() + static_cast<std::size_t>(i) * b_step,
                     out.data() + static_cast<std::size_t>(i * p.m * p.n), p.m, p.k, p.n);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const BKind k = classify_broadcast(a.shape(), b.shape(), "add");
  Tensor out = a;
  double* o = out.data();
  const double* pb = b.data();
  if (k == BKind::equal) {
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] += pb[i];
  } else if (k == BKind::suffix) {
    const std::size_t bn = b.numel();
    for (std::size_t off = 0; off < out.numel(); off += bn)
      for (std::size_t j = 0; j < bn; ++j) o[off + j] += pb[j];
  } else {
    const std::size_t d = static_cast<std::size_t>(a.shape().back());
    const std::size_t rows = out.numel() / d;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) o[r * d + j] += pb[r];
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const BKind k = classify_broadcast(a.shape(), b.shape(), "mul");
  Tensor out = a;
  double* o = out.data();
  const double* pb = b.data();
  if (k == BKind::equal) {
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] *= pb[i];
  } else if (k == BKind::suffix) {
    const std::size_t bn = b.numel();
    for (std::size_t off = 0; off < out.numel(); off += bn)
      for (std::size_t j = 0; j < bn; ++j) o[off + j] *= pb[j];
  } else {
    const std::size_t d = static_cast<std::size_t>(a.shape().back());
    const std::size_t rows = out.numel() / d;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) o[r * d + j] *= pb[r];
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = out[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw shape_error("softmax: rank must be >= 1");
  const std::size_t d = static_cast<std::size_t>(x.shape().back());
  const std::size_t rows = x.numel() / d;
  Tensor out = x;
  double* o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = o + r * d;
    double mx = row[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < d; ++j) row[j] /= sum;
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor* stash) {
  if (x.rank() < 1) throw shape_error("layernorm: rank must be >= 1");
  const std::int64_t d64 = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != d64 || beta.rank() != 1 || beta.dim(0) != d64)
    throw shape_error("layernorm: gamma/beta must be 1-d of the normalized length");
  const std::size_t d = static_cast<std::size_t>(d64);
  const std::size_t rows = x.numel() / d;
  Tensor out = x;
  if (stash) *stash = Tensor({static_cast<std::int64_t>(rows), 2});
  double* o = out.data();
  const double* g = gamma.data();
  const double* bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = o + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv * g[j] + bt[j];
    if (stash) {
      (*stash)[2 * r] = mean;
      (*stash)[2 * r + 1] = inv;
    }
  }
  return out;
}

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
  check_perm(perm, x.rank());
  const auto& in_shape = x.shape();
  std::vector<std::int64_t> out_shape(in_shape.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
  Tensor out(out_shape);
  const auto in_str = strides_of(in_shape);
  const auto out_str = strides_of(out_shape);
  const std::size_t n = x.numel();
  const int rank = x.rank();
  for (std::size_t f = 0; f < n; ++f) {
    std::size_t rem = f;
    std::size_t src = 0;
    for (int i = 0; i < rank; ++i) {
      const std::size_t c = rem / static_cast<std::size_t>(out_str[static_cast<std::size_t>(i)]);
      rem %= static_cast<std::size_t>(out_str[static_cast<std::size_t>(i)]);
      src += c * static_cast<std::size_t>(in_str[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    }
    out[f] = x[src];
  }
  return out;
}

Tensor embed(const Tensor& table, const std::vector<std::int64_t>& ids, std::int64_t b, std::int64_t n) {
  if (table.rank() != 2) throw shape_error("embed: table must be rank 2");
  if (static_cast<std::int64_t>(ids.size()) != b * n) throw shape_error("embed: ids length != batch*seq");
  const std::int64_t v = table.dim(0), e = table.dim(1);
  Tensor out({b, n, e});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int64_t id = ids[i];
    if (id < 0 || id >= v)
      throw input_error("embed: token id " + std::to_string(id) + " outside vocab of " + std::to_string(v));
    std::memcpy(out.data() + i * static_cast<std::size_t>(e), table.data() + static_cast<std::size_t>(id * e),
                static_cast<std::size_t>(e) * sizeof(double));
  }
  return out;
}

Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
  return Tensor({1}, {s});
}

Tensor token_shift(const Tensor& x, std::int64_t offset) {
  if (x.rank() != 3) throw shape_error("token_shift: expected a (batch, seq, dim) tensor");
  const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  Tensor out({b, n, d});
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t t = 0; t < n; ++t) {
      const std::int64_t s = t + offset;
      if (s < 0 || s >= n) continue;
      std::memcpy(out.data() + static_cast<std::size_t>((i * n + t) * d),
                  x.data() + static_cast<std::size_t>((i * n + s) * d), static_cast<std::size_t>(d) * sizeof(double));
    }
  return out;
}

Tensor slice_last(const Tensor& x, std::int64_t begin, std::int64_t len) {
  if (x.rank() < 1) throw shape_error("slice_last: rank must be >= 1");
  const std::int64_t d = x.shape().back();
  if (begin < 0 || len < 1 || begin + len > d) throw shape_error("slice_last: range outside the last dim");
  std::vector<std::int64_t> out_shape = x.shape();
  out_shape.back() = len;
  Tensor out(out_shape);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * static_cast<std::size_t>(len),
                x.data() + r * static_cast<std::size_t>(d) + static_cast<std::size_t>(begin),
                static_cast<std::size_t>(len) * sizeof(double));
  return out;
}

Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t len) {
  if (x.rank() < 1) throw shape_error("slice_rows: rank must be >= 1");
  const std::int64_t r0 = x.dim(0);
  if (begin < 0 || len < 1 || begin + len > r0) throw shape_error("slice_rows: range outside axis 0");
  std::vector<std::int64_t> out_shape = x.shape();
  out_shape[0] = len;
  Tensor out(out_shape);
  const std::size_t row = x.numel() / static_cast<std::size_t>(r0);
  std::memcpy(out.data(), x.data() + static_cast<std::size_t>(begin) * row,
              static_cast<std::size_t>(len) * row * sizeof(double));
  return out;
}

}  // namespace kernels

std::atomic<std::uint64_t> Tape::constructed_{0};

Tape::Tape() { constructed_.fetch_add(1, std::memory_order_relaxed); }

std::uint64_t Tape::tapes_constructed() { return constructed_.load(std::memory_order_relaxed); }

Tape::NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tape::NodeId Tape::check(NodeId id, const char* who) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw contract_error(std::string(who) + ": node id " + std::to_string(id) + " is not on this tape");
  return id;
}

const Tensor& Tape::value(NodeId id) const { return nodes_[static_cast<std::size_t>(check(id, "value"))].value; }

bool Tape::differentiable(NodeId id) const {
  return nodes_[static_cast<std::size_t>(check(id, "differentiable"))].needs_grad;
}

const std::string& Tape::param_name(NodeId id) const {
  const Node& n = nodes_[static_cast<std::size_t>(check(id, "param_name"))];
  if (n.op != Op::param) throw contract_error("param_name: node is not a parameter leaf");
  return n.name;
}

Tape::NodeId Tape::input(Tensor v, bool differentiable) {
  Node n;
  n.op = Op::input;
  n.value = std::move(v);
  n.needs_grad = differentiable;
  return push(std::move(n));
}

Tape::NodeId Tape::param(const Tensor& v, std::string name) {
  Node n;
  n.op = Op::param;
  n.value = v;
  n.name = std::move(name);
  n.needs_grad = true;
  const NodeId id = push(std::move(n));
  params_.push_back(id);
  return id;
}

Tape::NodeId Tape::constant(Tensor v) {
  Node n;
  n.op = Op::constant;
  n.value = std::move(v);
  n.needs_grad = false;
  return push(std::move(n));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
  check(a, "matmul");
  check(b, "matmul");
  Node n;
  n.op = Op::matmul;
  n.a = a;
  n.b = b;
  n.value = kernels::matmul(nodes_[static_cast<std::size_t>(a)].value, nodes_[static_cast<std::size_t>(b)].value);
  n.needs_grad = nodes_[static_cast<std::size_t>(a)].needs_grad || nodes_[static_cast<std::size_t>(b)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  check(a, "add");
  check(b, "add");
  Node n;
  n.op = Op::add;
  n.a = a;
  n.b = b;
  n.value = kernels::add(nodes_[static_cast<std::size_t>(a)].value, nodes_[static_cast<std::size_t>(b)].value);
  n.needs_grad = nodes_[static_cast<std::size_t>(a)].needs_grad || nodes_[static_cast<std::size_t>(b)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  check(a, "mul");
  check(b, "mul");
  Node n;
  n.op = Op::mul;
  n.a = a;
  n.b = b;
  n.value = kernels::mul(nodes_[static_cast<std::size_t>(a)].value, nodes_[static_cast<std::size_t>(b)].value);
  n.needs_grad = nodes_[static_cast<std::size_t>(a)].needs_grad || nodes_[static_cast<std::size_t>(b)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::scale(NodeId a, double c) {
  check(a, "scale");
  Node n;
  n.op = Op::scale;
  n.a = a;
  n.scalar = c;
  n.value = kernels::scale(nodes_[static_cast<std::size_t>(a)].value, c);
  n.needs_grad = nodes_[static_cast<std::size_t>(a)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::relu(NodeId x) {
  check(x, "relu");
  Node n;
  n.op = Op::relu;
  n.a = x;
  n.value = kernels::relu(nodes_[static_cast<std::size_t>(x)].value);
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::gelu(NodeId x) {
  check(x, "gelu");
  Node n;
  n.op = Op::gelu;
  n.a = x;
  n.value = kernels::gelu(nodes_[static_cast<std::size_t>(x)].value);
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::softmax(NodeId x) {
  check(x, "softmax");
  Node n;
  n.op = Op::softmax;
  n.a = x;
  n.value = kernels::softmax(nodes_[static_cast<std::size_t>(x)].value);
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::layernorm(NodeId x, NodeId gamma, NodeId beta) {
  check(x, "layernorm");
  check(gamma, "layernorm");
  check(beta, "layernorm");
  Node n;
  n.op = Op::layernorm;
  n.a = x;
  n.b = gamma;
  n.c = beta;
  n.value = kernels::layernorm(nodes_[static_cast<std::size_t>(x)].value, nodes_[static_cast<std::size_t>(gamma)].value,
                               nodes_[static_cast<std::size_t>(beta)].value, &n.aux);
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad || nodes_[static_cast<std::size_t>(gamma)].needs_grad ||
                 nodes_[static_cast<std::size_t>(beta)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::transpose(NodeId x, std::vector<int> perm) {
  check(x, "transpose");
  Node n;
  n.op = Op::transpose;
  n.a = x;
  n.perm = std::move(perm);
  n.value = kernels::transpose(nodes_[static_cast<std::size_t>(x)].value, n.perm);
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::reshape(NodeId x, std::vector<std::int64_t> shape) {
  check(x, "reshape");
  Node n;
  n.op = Op::reshape;
  n.a = x;
  n.value = nodes_[static_cast<std::size_t>(x)].value.reshaped(std::move(shape));
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::embed(NodeId table, std::vector<std::int64_t> ids, std::int64_t b, std::int64_t nseq) {
  check(table, "embed");
  Node n;
  n.op = Op::embed;
  n.a = table;
  n.ints = std::move(ids);
  n.extra = b;
  n.value = kernels::embed(nodes_[static_cast<std::size_t>(table)].value, n.ints, b, nseq);
  n.needs_grad = nodes_[static_cast<std::size_t>(table)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::reduce_sum(NodeId x) {
  check(x, "reduce_sum");
  Node n;
  n.op = Op::reduce_sum;
  n.a = x;
  n.value = kernels::reduce_sum(nodes_[static_cast<std::size_t>(x)].value);
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::token_shift(NodeId x, std::int64_t offset) {
  check(x, "token_shift");
  Node n;
  n.op = Op::token_shift;
  n.a = x;
  n.scalar = static_cast<double>(offset);
  n.value = kernels::token_shift(nodes_[static_cast<std::size_t>(x)].value, offset);
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::slice_last(NodeId x, std::int64_t begin, std::int64_t len) {
  check(x, "slice_last");
  Node n;
  n.op = Op::slice_last;
  n.a = x;
  n.scalar = static_cast<double>(begin);
  n.extra = len;
  n.value = kernels::slice_last(nodes_[static_cast<std::size_t>(x)].value, begin, len);
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::slice_rows(NodeId x, std::int64_t begin, std::int64_t len) {
  check(x, "slice_rows");
  Node n;
  n.op = Op::slice_rows;
  n.a = x;
  n.scalar = static_cast<double>(begin);
  n.extra = len;
  n.value = kernels::slice_rows(nodes_[static_cast<std::size_t>(x)].value, begin, len);
  n.needs_grad = nodes_[static_cast<std::size_t>(x)].needs_grad;
  return push(std::move(n));
}

namespace {

void accum_init(Tensor& bar, const Tensor& like) {
  if (bar.numel() == 0) bar = Tensor::zeros(like.shape());
}

// dst += src, flat.
void accum_flat(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

void transpose_block(const double* src, double* dst, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace

std::vector<Tensor> Tape::backward(NodeId loss) const {
  check(loss, "backward");
  if (backward_done_) throw contract_error("backward: tape already consumed by a previous backward pass");
  const Node& ln = nodes_[static_cast<std::size_t>(loss)];
  if (ln.value.numel() != 1) throw contract_error("backward: loss must be a scalar (one element)");
  if (!ln.needs_grad) throw contract_error("backward: loss does not depend on any differentiable leaf");
  backward_done_ = true;

  std::vector<Tensor> bars(nodes_.size());
  bars[static_cast<std::size_t>(loss)] = Tensor::full(ln.value.shape(), 1.0);

  for (NodeId id = loss; id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Tensor& bar = bars[static_cast<std::size_t>(id)];
    if (!n.needs_grad || bar.numel() == 0) continue;

    auto parent_needs = [&](NodeId p) { return p >= 0 && nodes_[static_cast<std::size_t>(p)].needs_grad; };
    auto parent_value = [&](NodeId p) -> const Tensor& { return nodes_[static_cast<std::size_t>(p)].value; };
    auto parent_bar = [&](NodeId p) -> Tensor& { return bars[static_cast<std::size_t>(p)]; };

    switch (n.op) {
      case Op::input:
      case Op::param:
      case Op::constant:
        break;

      case Op::matmul: {
        const Tensor& av = parent_value(n.a);
        const Tensor& bv = parent_value(n.b);
        const MatmulPlan p = plan_matmul(av.shape(), bv.shape());
        const std::size_t a_step = p.a_batched ? static_cast<std::size_t>(p.m * p.k) : 0;
        const std::size_t b_step = p.b_batched ? static_cast<std::size_t>(p.k * p.n) : 0;
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          accum_init(da, av);
          std::vector<double> bt(static_cast<std::size_t>(p.n * p.k));
          for (std::int64_t i = 0; i < p.batch; ++i) {
            transpose_block(bv.data() + static_cast<std::size_t>(i) * b_step, bt.data(), p.k, p.n);
            detail::gemm_acc(bar.data() + static_cast<std::size_t>(i * p.m * p.n), bt.data(),
                             da.data() + static_cast<std::size_t>(i) * a_step, p.m, p.n, p.k);
          }
        }
        if (parent_needs(n.b)) {
          Tensor& db = parent_bar(n.b);
          accum_init(db, bv);
          std::vector<double> atr(static_cast<std::size_t>(p.k * p.m));
          for (std::int64_t i = 0; i < p.batch; ++i) {
            transpose_block(av.data() + static_cast<std::size_t>(i) * a_step, atr.data(), p.m, p.k);
            detail::gemm_acc(atr.data(), bar.data() + static_cast<std::size_t>(i * p.m * p.n),
                             db.data() + static_cast<std::size_t>(i) * b_step, p.k, p.m, p.n);
          }
        }
        break;
      }

      case Op::add: {
        const Tensor& av = parent_value(n.a);
        const Tensor& bv = parent_value(n.b);
        const BKind k = classify_broadcast(av.shape(), bv.shape(), "add");
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          accum_init(da, av);
          accum_flat(da, bar);
        }
        if (parent_needs(n.b)) {
          Tensor& db = parent_bar(n.b);
          accum_init(db, bv);
          if (k == BKind::equal) {
            accum_flat(db, bar);
          } else if (k == BKind::suffix) {
            const std::size_t bn = bv.numel();
            for (std::size_t off = 0; off < bar.numel(); off += bn)
              for (std::size_t j = 0; j < bn; ++j) db[j] += bar[off + j];
          } else {
            const std::size_t d = static_cast<std::size_t>(av.shape().back());
            const std::size_t rows = bar.numel() / d;
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d; ++j) db[r] += bar[r * d + j];
          }
        }
        break;
      }

      case Op::mul: {
        const Tensor& av = parent_value(n.a);
        const Tensor& bv = parent_value(n.b);
        const BKind k = classify_broadcast(av.shape(), bv.shape(), "mul");
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          accum_init(da, av);
          if (k == BKind::equal) {
            for (std::size_t i = 0; i < da.numel(); ++i) da[i] += bar[i] * bv[i];
          } else if (k == BKind::suffix) {
            const std::size_t bn = bv.numel();
            for (std::size_t off = 0; off < bar.numel(); off += bn)
              for (std::size_t j = 0; j < bn; ++j) da[off + j] += bar[off + j] * bv[j];
          } else {
            const std::size_t d = static_cast<std::size_t>(av.shape().back());
            const std::size_t rows = bar.numel() / d;
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d; ++j) da[r * d + j] += bar[r * d + j] * bv[r];
          }
        }
        if (parent_needs(n.b)) {
          Tensor& db = parent_bar(n.b);
          accum_init(db, bv);
          if (k == BKind::equal) {
            for (std::size_t i = 0; i < db.numel(); ++i) db[i] += bar[i] * av[i];
          } else if (k == BKind::suffix) {
            const std::size_t bn = bv.numel();
            for (std::size_t off = 0; off < bar.numel(); off += bn)
              for (std::size_t j = 0; j < bn; ++j) db[j] += bar[off + j] * av[off + j];
          } else {
            const std::size_t d = static_cast<std::size_t>(av.shape().back());
            const std::size_t rows = bar.numel() / d;
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d; ++j) db[r] += bar[r * d + j] * av[r * d + j];
          }
        }
        break;
      }

      case Op::scale: {
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          accum_init(da, parent_value(n.a));
          for (std::size_t i = 0; i < da.numel(); ++i) da[i] += n.scalar * bar[i];
        }
        break;
      }

      case Op::relu: {
        if (parent_needs(n.a)) {
          const Tensor& xv = parent_value(n.a);
          Tensor& da = parent_bar(n.a);
          accum_init(da, xv);
          for (std::size_t i = 0; i < da.numel(); ++i)
            if (xv[i] > 0.0) da[i] += bar[i];
        }
        break;
      }

      case Op::gelu: {
        if (parent_needs(n.a)) {
          const Tensor& xv = parent_value(n.a);
          Tensor& da = parent_bar(n.a);
          accum_init(da, xv);
          for (std::size_t i = 0; i < da.numel(); ++i) {
            const double v = xv[i];
            const double u = kGeluC * (v + kGeluA * v * v * v);
            const double t = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            da[i] += bar[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
          }
        }
        break;
      }

      case Op::softmax: {
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          accum_init(da, parent_value(n.a));
          const std::size_t d = static_cast<std::size_t>(n.value.shape().back());
          const std::size_t rows = n.value.numel() / d;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* p = n.value.data() + r * d;
            const double* g = bar.data() + r * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g[j] * p[j];
            for (std::size_t j = 0; j < d; ++j) da[r * d + j] += p[j] * (g[j] - dot);
          }
        }
        break;
      }

      case Op::layernorm: {
        const Tensor& xv = parent_value(n.a);
        const Tensor& gv = parent_value(n.b);
        const std::size_t d = static_cast<std::size_t>(xv.shape().back());
        const std::size_t rows = xv.numel() / d;
        const bool need_x = parent_needs(n.a);
        const bool need_g = parent_needs(n.b);
        const bool need_b = parent_needs(n.c);
        if (need_x) accum_init(parent_bar(n.a), xv);
        if (need_g) accum_init(parent_bar(n.b), gv);
        if (need_b) accum_init(parent_bar(n.c), parent_value(n.c));
        std::vector<double> xh(d), dxh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double mean = n.aux[2 * r];
          const double inv = n.aux[2 * r + 1];
          const double* x = xv.data() + r * d;
          const double* g = bar.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) xh[j] = (x[j] - mean) * inv;
          if (need_g || need_b) {
            Tensor& dg = parent_bar(n.b);
            Tensor& dbta = parent_bar(n.c);
            for (std::size_t j = 0; j < d; ++j) {
              if (need_g) dg[j] += g[j] * xh[j];
              if (need_b) dbta[j] += g[j];
            }
          }
          if (need_x) {
            Tensor& dx = parent_bar(n.a);
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxh[j] = g[j] * gv[j];
              m1 += dxh[j];
              m2 += dxh[j] * xh[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += inv * (dxh[j] - m1 - xh[j] * m2);
          }
        }
        break;
      }

      case Op::transpose: {
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          accum_init(da, parent_value(n.a));
          Tensor back = kernels::transpose(bar, inverse_perm(n.perm));
          accum_flat(da, back);
        }
        break;
      }

      case Op::reshape: {
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          accum_init(da, parent_value(n.a));
          accum_flat(da, bar);
        }
        break;
      }

      case Op::embed: {
        if (parent_needs(n.a)) {
          Tensor& dt = parent_bar(n.a);
          accum_init(dt, parent_value(n.a));
          const std::size_t e = static_cast<std::size_t>(parent_value(n.a).dim(1));
          for (std::size_t i = 0; i < n.ints.size(); ++i) {
            const std::size_t row = static_cast<std::size_t>(n.ints[i]);
            for (std::size_t j = 0; j < e; ++j) dt[row * e + j] += bar[i * e + j];
          }
        }
        break;
      }

      case Op::reduce_sum: {
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          accum_init(da, parent_value(n.a));
          const double g = bar[0];
          for (std::size_t i = 0; i < da.numel(); ++i) da[i] += g;
        }
        break;
      }

      case Op::token_shift: {
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          const Tensor& xv = parent_value(n.a);
          accum_init(da, xv);
          const std::int64_t b = xv.dim(0), nn = xv.dim(1), d = xv.dim(2);
          const std::int64_t off = static_cast<std::int64_t>(n.scalar);
          for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t t = 0; t < nn; ++t) {
              const std::int64_t s = t + off;
              if (s < 0 || s >= nn) continue;
              for (std::int64_t j = 0; j < d; ++j)
                da[static_cast<std::size_t>((i * nn + s) * d + j)] += bar[static_cast<std::size_t>((i * nn + t) * d + j)];
            }
        }
        break;
      }

      case Op::slice_last: {
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          const Tensor& xv = parent_value(n.a);
          accum_init(da, xv);
          const std::size_t d = static_cast<std::size_t>(xv.shape().back());
          const std::size_t len = static_cast<std::size_t>(n.extra);
          const std::size_t begin = static_cast<std::size_t>(n.scalar);
          const std::size_t rows = xv.numel() / d;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) da[r * d + begin + j] += bar[r * len + j];
        }
        break;
      }

      case Op::slice_rows: {
        if (parent_needs(n.a)) {
          Tensor& da = parent_bar(n.a);
          const Tensor& xv = parent_value(n.a);
          accum_init(da, xv);
          const std::size_t row = xv.numel() / static_cast<std::size_t>(xv.dim(0));
          const std::size_t begin = static_cast<std::size_t>(n.scalar);
          for (std::size_t i = 0; i < bar.numel(); ++i) da[begin * row + i] += bar[i];
        }
        break;
      }
    }
  }

  // Hand back gradients only for differentiable nodes; others stay empty.
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (!nodes_[i].needs_grad) bars[i] = Tensor();
  return bars;
}

Matrix input_jacobian(const Tape& tape, Tape::NodeId loss, Tape::NodeId inputs) {
  if (!tape.differentiable(inputs))
    throw contract_error("input_jacobian: inputs node was not tagged differentiable");
  const Tensor& v = tape.value(inputs);
  if (v.rank() < 1) throw shape_error("input_jacobian: inputs must have rank >= 1");
  const std::vector<Tensor> grads = tape.backward(loss);
  const Tensor& g = grads[static_cast<std::size_t>(inputs)];
  const std::int64_t n = v.dim(0);
  const std::int64_t cols = static_cast<std::int64_t>(v.numel()) / n;
  if (g.numel() == 0) return Matrix(n, cols);  // loss independent of inputs
  return Matrix(n, cols, g.raw());
}

double fd_derivative(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace wpca
