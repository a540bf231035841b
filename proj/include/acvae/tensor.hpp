#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "acvae/errors.hpp"

namespace acvae::ad {

// Bump allocator reused across training steps; blocks are kept alive on
// reset() so steady-state training performs no heap allocation.
template <class S>
class Arena {
 public:
  std::span<S> alloc(size_t n) {
    if (n == 0) return {};
    while (block_ < blocks_.size()) {
      if (off_ + n <= sizes_[block_]) {
        S* p = blocks_[block_].get() + off_;
        off_ += n;
        return {p, n};
      }
      ++block_;
      off_ = 0;
    }
    size_t cap = std::max(n, size_t(1) << 22);
    blocks_.push_back(std::unique_ptr<S[]>(new S[cap]));
    sizes_.push_back(cap);
    block_ = blocks_.size() - 1;
    off_ = n;
    return {blocks_.back().get(), n};
  }

  std::span<S> alloc_zero(size_t n) {
    auto s = alloc(n);
    std::memset(s.data(), 0, n * sizeof(S));
    return s;
  }

  void reset() {
    block_ = 0;
    off_ = 0;
  }

 private:
  std::vector<std::unique_ptr<S[]>> blocks_;
  std::vector<size_t> sizes_;
  size_t block_ = 0;
  size_t off_ = 0;
};

enum class Op : uint8_t {
  leaf,
  matmul,
  add,
  sub,
  mul,
  neg,
  scale,
  add_bias,
  softplus,
  sigmoid,
  tanh_,
  leaky_relu,
  embed_gather,
  concat_cols,
  stack_rows,
  gather_rows,
  causal_conv,
  softmax_xent,
  scaled_sum,
};

template <class S>
class Tape;

// Handle into a tape node; the node owns shape/values/grad.
template <class S>
struct Tensor {
  Tape<S>* tape = nullptr;
  int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  int64_t rows() const;
  int64_t cols() const;
  int64_t size() const { return rows() * cols(); }
  std::span<S> values() const;
  std::span<S> grad() const;
  S scalar() const;
};

template <class S>
class Tape {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;

  struct Node {
    Op op;
    int64_t rows = 0, cols = 0;
    std::span<S> val;
    std::span<S> grad;  // allocated during backward()
    uint32_t parent_off = 0, parent_cnt = 0;
    // op payload
    int64_t i0 = 0, i1 = 0;
    double d0 = 0;
    S s0 = S(0);
    const int32_t* idx = nullptr;
    const uint8_t* mask = nullptr;
    S* aux = nullptr;
  };

  std::vector<Node> nodes;

  void reset() {
    nodes.clear();
    parents_.clear();
    owned_indices_.clear();
    arena_.reset();
  }

  // Take ownership of a transient index array so op payload pointers stay
  // valid until the tape is destroyed or reset.
  const int32_t* own_indices(std::vector<int32_t> v) {
    owned_indices_.push_back(std::move(v));
    return owned_indices_.back().data();
  }

  size_t num_nodes() const { return nodes.size(); }

  // ---- node construction -------------------------------------------------

  // Leaf over caller-owned storage. grad, when given, must match size and is
  // zeroed at the start of backward().
  Tensor<S> leaf(S* values, int64_t rows, int64_t cols, S* grad = nullptr) {
    Node n;
    n.op = Op::leaf;
    n.rows = rows;
    n.cols = cols;
    n.val = {values, size_t(rows * cols)};
    if (grad) n.grad = {grad, size_t(rows * cols)};
    return push(std::move(n), {});
  }

  // Leaf copied into the tape arena (inputs, noise draws, small constants).
  Tensor<S> constant(std::span<const S> values, int64_t rows, int64_t cols) {
    if (int64_t(values.size()) != rows * cols) throw ShapeError("constant: size mismatch");
    auto buf = arena_.alloc(values.size());
    std::memcpy(buf.data(), values.data(), values.size() * sizeof(S));
    Node n;
    n.op = Op::leaf;
    n.rows = rows;
    n.cols = cols;
    n.val = buf;
    return push(std::move(n), {});
  }

  Tensor<S> zeros(int64_t rows, int64_t cols) {
    Node n;
    n.op = Op::leaf;
    n.rows = rows;
    n.cols = cols;
    n.val = arena_.alloc_zero(size_t(rows * cols));
    return push(std::move(n), {});
  }

  // ---- ops ---------------------------------------------------------------

  Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
    auto& na = node(a);
    auto& nb = node(b);
    if (na.cols != nb.rows)
      throw ShapeError("matmul: inner dimensions disagree: [" + std::to_string(na.rows) + "x" +
                       std::to_string(na.cols) + "] * [" + std::to_string(nb.rows) + "x" +
                       std::to_string(nb.cols) + "]");
    Node n = make(Op::matmul, na.rows, nb.cols);
    MapM(n.val.data(), n.rows, n.cols).noalias() =
        CMapM(na.val.data(), na.rows, na.cols) * CMapM(nb.val.data(), nb.rows, nb.cols);
    return push(std::move(n), {a.id, b.id});
  }

  Tensor<S> add(Tensor<S> a, Tensor<S> b) { return binary(Op::add, a, b); }
  Tensor<S> sub(Tensor<S> a, Tensor<S> b) { return binary(Op::sub, a, b); }
  Tensor<S> mul(Tensor<S> a, Tensor<S> b) { return binary(Op::mul, a, b); }

  Tensor<S> neg(Tensor<S> a) {
    auto& na = node(a);
    Node n = make(Op::neg, na.rows, na.cols);
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = -na.val[i];
    return push(std::move(n), {a.id});
  }

  Tensor<S> scale(Tensor<S> a, S c) {
    auto& na = node(a);
    Node n = make(Op::scale, na.rows, na.cols);
    n.s0 = c;
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = c * na.val[i];
    return push(std::move(n), {a.id});
  }

  // x [n x m] + row vector b [1 x m] broadcast over rows
  Tensor<S> add_bias(Tensor<S> x, Tensor<S> b) {
    auto& nx = node(x);
    auto& nb = node(b);
    if (nb.rows * nb.cols != nx.cols) throw ShapeError("add_bias: bias length != cols");
    Node n = make(Op::add_bias, nx.rows, nx.cols);
    const S* bp = nb.val.data();
    for (int64_t r = 0; r < nx.rows; ++r) {
      const S* xi = nx.val.data() + r * nx.cols;
      S* o = n.val.data() + r * nx.cols;
      for (int64_t c = 0; c < nx.cols; ++c) o[c] = xi[c] + bp[c];
    }
    return push(std::move(n), {x.id, b.id});
  }

  Tensor<S> softplus(Tensor<S> a) {
    auto& na = node(a);
    Node n = make(Op::softplus, na.rows, na.cols);
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = softplus_val(na.val[i]);
    return push(std::move(n), {a.id});
  }

  Tensor<S> sigmoid(Tensor<S> a) {
    auto& na = node(a);
    Node n = make(Op::sigmoid, na.rows, na.cols);
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = sigmoid_val(na.val[i]);
    return push(std::move(n), {a.id});
  }

  Tensor<S> tanh(Tensor<S> a) {
    auto& na = node(a);
    Node n = make(Op::tanh_, na.rows, na.cols);
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::tanh(na.val[i]);
    return push(std::move(n), {a.id});
  }

  Tensor<S> leaky_relu(Tensor<S> a, S slope) {
    auto& na = node(a);
    Node n = make(Op::leaky_relu, na.rows, na.cols);
    n.s0 = slope;
    for (size_t i = 0; i < n.val.size(); ++i) {
      S x = na.val[i];
      n.val[i] = x > S(0) ? x : slope * x;
    }
    return push(std::move(n), {a.id});
  }

  // Row gather from an embedding table. Index 0 is the frozen padding row:
  // no gradient is scattered into it.
  Tensor<S> embed_gather(Tensor<S> table, const int32_t* idx, int64_t n_rows) {
    auto& nt = node(table);
    Node n = make(Op::embed_gather, n_rows, nt.cols);
    n.idx = idx;
    n.i0 = nt.rows;
    for (int64_t r = 0; r < n_rows; ++r) {
      int32_t j = idx[r];
      if (j < 0 || j >= nt.rows) throw ShapeError("embed_gather: index out of range");
      std::memcpy(n.val.data() + r * nt.cols, nt.val.data() + int64_t(j) * nt.cols,
                  size_t(nt.cols) * sizeof(S));
    }
    return push(std::move(n), {table.id});
  }

  Tensor<S> concat_cols(Tensor<S> a, Tensor<S> b) {
    auto& na = node(a);
    auto& nb = node(b);
    if (na.rows != nb.rows) throw ShapeError("concat_cols: row mismatch");
    Node n = make(Op::concat_cols, na.rows, na.cols + nb.cols);
    n.i0 = na.cols;
    for (int64_t r = 0; r < na.rows; ++r) {
      std::memcpy(n.val.data() + r * n.cols, na.val.data() + r * na.cols, size_t(na.cols) * sizeof(S));
      std::memcpy(n.val.data() + r * n.cols + na.cols, nb.val.data() + r * nb.cols,
                  size_t(nb.cols) * sizeof(S));
    }
    return push(std::move(n), {a.id, b.id});
  }

  // Stack T same-shaped [b x d] blocks into [(T*b) x d], block-major.
  Tensor<S> stack_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("stack_rows: empty");
    auto& n0 = node(parts[0]);
    Node n = make(Op::stack_rows, n0.rows * int64_t(parts.size()), n0.cols);
    n.i0 = n0.rows;
    std::vector<int32_t> pids;
    pids.reserve(parts.size());
    int64_t off = 0;
    for (auto& p : parts) {
      auto& np = node(p);
      if (np.rows != n0.rows || np.cols != n0.cols) throw ShapeError("stack_rows: shape mismatch");
      std::memcpy(n.val.data() + off, np.val.data(), np.val.size() * sizeof(S));
      off += int64_t(np.val.size());
      pids.push_back(p.id);
    }
    return push(std::move(n), pids);
  }

  Tensor<S> gather_rows(Tensor<S> x, const int32_t* idx, int64_t n_rows) {
    auto& nx = node(x);
    Node n = make(Op::gather_rows, n_rows, nx.cols);
    n.idx = idx;
    for (int64_t r = 0; r < n_rows; ++r) {
      int32_t j = idx[r];
      if (j < 0 || j >= nx.rows) throw ShapeError("gather_rows: index out of range");
      std::memcpy(n.val.data() + r * nx.cols, nx.val.data() + int64_t(j) * nx.cols,
                  size_t(nx.cols) * sizeof(S));
    }
    return push(std::move(n), {x.id});
  }

  // Causal convolution over the time axis of a time-major [T*b x d] sequence.
  // filter has length m; filter[m-1] multiplies the current row, filter[0] the
  // (m-1)-steps-earlier row. m-1 virtual zero rows precede the data, so
  // output t never reads rows beyond t.
  Tensor<S> causal_conv(Tensor<S> x, Tensor<S> filter, int64_t T, int64_t b) {
    auto& nx = node(x);
    auto& nf = node(filter);
    int64_t m = nf.rows * nf.cols;
    if (m <= 0) throw ShapeError("causal_conv: filter height must be >= 1");
    if (nx.rows != T * b) throw ShapeError("causal_conv: rows != T*b");
    Node n = make(Op::causal_conv, nx.rows, nx.cols);
    n.i0 = T;
    n.i1 = b;
    const int64_t slab = b * nx.cols;
    std::memset(n.val.data(), 0, n.val.size() * sizeof(S));
    for (int64_t t = 0; t < T; ++t) {
      S* out = n.val.data() + t * slab;
      for (int64_t j = 0; j < m; ++j) {
        int64_t src = t - (m - 1) + j;
        if (src < 0) continue;
        const S f = nf.val[j];
        if (f == S(0)) continue;
        const S* in = nx.val.data() + src * slab;
        for (int64_t i = 0; i < slab; ++i) out[i] += f * in[i];
      }
    }
    return push(std::move(n), {x.id, filter.id});
  }

  // Fused masked softmax cross-entropy, numerically stable via max-shift.
  // loss = sum over rows with mask!=0 of (logsumexp(row) - row[target]) / denom.
  // mask == nullptr treats every row as real. denom <= 0 means "number of
  // masked rows" (the per-position mean).
  Tensor<S> softmax_xent(Tensor<S> logits, const int32_t* targets, const uint8_t* mask,
                         double denom = 0) {
    auto& nl = node(logits);
    const int64_t R = nl.rows, V = nl.cols;
    int64_t n_masked = 0;
    if (mask) {
      for (int64_t r = 0; r < R; ++r) n_masked += mask[r] ? 1 : 0;
    } else {
      n_masked = R;
    }
    if (n_masked == 0) throw ShapeError("softmax_cross_entropy: empty batch");
    if (denom <= 0) denom = double(n_masked);
    Node n = make(Op::softmax_xent, 1, 1);
    n.idx = targets;
    n.mask = mask;
    n.d0 = denom;
    n.aux = arena_.alloc(size_t(R)).data();  // cached per-row logsumexp
    double total = 0;
    for (int64_t r = 0; r < R; ++r) {
      if (mask && !mask[r]) { n.aux[r] = S(0); continue; }
      int32_t tgt = targets[r];
      if (tgt < 0 || tgt >= V) throw ShapeError("softmax_cross_entropy: target index out of range");
      const S* row = nl.val.data() + r * V;
      S mx = row[0];
      for (int64_t c = 1; c < V; ++c) mx = std::max(mx, row[c]);
      double sum = 0;
      for (int64_t c = 0; c < V; ++c) sum += std::exp(double(row[c] - mx));
      double lse = double(mx) + std::log(sum);
      n.aux[r] = S(lse);
      total += lse - double(row[tgt]);
    }
    n.val[0] = S(total / denom);
    return push(std::move(n), {logits.id});
  }

  // sum_i x[i] * (mask ? mask[i] : 1) / denom  ->  scalar
  Tensor<S> scaled_sum(Tensor<S> x, const uint8_t* mask, double denom) {
    auto& nx = node(x);
    Node n = make(Op::scaled_sum, 1, 1);
    n.mask = mask;
    n.d0 = denom;
    double total = 0;
    for (size_t i = 0; i < nx.val.size(); ++i)
      if (!mask || mask[i]) total += double(nx.val[i]);
    n.val[0] = S(total / denom);
    return push(std::move(n), {x.id});
  }

  Tensor<S> sum(Tensor<S> x) { return scaled_sum(x, nullptr, 1.0); }

  // ---- backward ----------------------------------------------------------

  // Reverse sweep from a scalar loss. Every node gets a zeroed grad buffer
  // first (leaves with external grads are zeroed in place), then each node is
  // visited exactly once in reverse construction order.
  void backward(Tensor<S> loss) {
    auto& nl = node(loss);
    if (nl.rows * nl.cols != 1) throw ShapeError("backward: loss must be scalar");
    for (auto& n : nodes) {
      if (n.op == Op::leaf && !n.grad.empty()) {
        std::memset(n.grad.data(), 0, n.grad.size() * sizeof(S));
      } else {
        n.grad = arena_.alloc_zero(n.val.size());
      }
    }
    nodes[loss.id].grad[0] = S(1);
    for (int32_t id = int32_t(nodes.size()) - 1; id >= 0; --id) {
      Node& n = nodes[id];
      if (n.op == Op::leaf || n.grad.empty()) continue;
      backward_node(n);
    }
  }

  // ---- helpers -----------------------------------------------------------

  const Node& node(Tensor<S> t) const { return nodes[t.id]; }
  Node& node(Tensor<S> t) { return nodes[t.id]; }

  static S softplus_val(S x) {
    if (x > S(30)) return x + S(std::log1p(std::exp(-double(x))));
    return S(std::log1p(std::exp(double(x))));
  }

  static S sigmoid_val(S x) {
    if (x >= S(0)) return S(1) / (S(1) + S(std::exp(-double(x))));
    double e = std::exp(double(x));
    return S(e / (1.0 + e));
  }

 private:
  Node make(Op op, int64_t rows, int64_t cols) {
    Node n;
    n.op = op;
    n.rows = rows;
    n.cols = cols;
    n.val = arena_.alloc(size_t(rows * cols));
    return n;
  }

  Tensor<S> push(Node&& n, std::initializer_list<int32_t> parents) {
    return push(std::move(n), std::vector<int32_t>(parents));
  }

  Tensor<S> push(Node&& n, const std::vector<int32_t>& parents) {
    n.parent_off = uint32_t(parents_.size());
    n.parent_cnt = uint32_t(parents.size());
    parents_.insert(parents_.end(), parents.begin(), parents.end());
    nodes.push_back(std::move(n));
    return Tensor<S>{this, int32_t(nodes.size() - 1)};
  }

  Tensor<S> binary(Op op, Tensor<S> a, Tensor<S> b) {
    auto& na = node(a);
    auto& nb = node(b);
    if (na.rows != nb.rows || na.cols != nb.cols)
      throw ShapeError("elementwise op: shape mismatch: [" + std::to_string(na.rows) + "x" +
                       std::to_string(na.cols) + "] vs [" + std::to_string(nb.rows) + "x" +
                       std::to_string(nb.cols) + "]");
    Node n = make(op, na.rows, na.cols);
    const S* pa = na.val.data();
    const S* pb = nb.val.data();
    S* o = n.val.data();
    const size_t sz = n.val.size();
    switch (op) {
      case Op::add: for (size_t i = 0; i < sz; ++i) o[i] = pa[i] + pb[i]; break;
      case Op::sub: for (size_t i = 0; i < sz; ++i) o[i] = pa[i] - pb[i]; break;
      case Op::mul: for (size_t i = 0; i < sz; ++i) o[i] = pa[i] * pb[i]; break;
      default: throw ShapeError("not a binary op");
    }
    return push(std::move(n), {a.id, b.id});
  }

  int32_t parent(const Node& n, uint32_t k) const { return parents_[n.parent_off + k]; }

  void backward_node(Node& n) {
    switch (n.op) {
      case Op::matmul: {
        Node& a = nodes[parent(n, 0)];
        Node& b = nodes[parent(n, 1)];
        CMapM g(n.grad.data(), n.rows, n.cols);
        MapM(a.grad.data(), a.rows, a.cols).noalias() +=
            g * CMapM(b.val.data(), b.rows, b.cols).transpose();
        MapM(b.grad.data(), b.rows, b.cols).noalias() +=
            CMapM(a.val.data(), a.rows, a.cols).transpose() * g;
        break;
      }
      case Op::add: {
        accumulate(nodes[parent(n, 0)].grad, n.grad, S(1));
        accumulate(nodes[parent(n, 1)].grad, n.grad, S(1));
        break;
      }
      case Op::sub: {
        accumulate(nodes[parent(n, 0)].grad, n.grad, S(1));
        accumulate(nodes[parent(n, 1)].grad, n.grad, S(-1));
        break;
      }
      case Op::mul: {
        Node& a = nodes[parent(n, 0)];
        Node& b = nodes[parent(n, 1)];
        for (size_t i = 0; i < n.grad.size(); ++i) {
          a.grad[i] += n.grad[i] * b.val[i];
          b.grad[i] += n.grad[i] * a.val[i];
        }
        break;
      }
      case Op::neg: {
        accumulate(nodes[parent(n, 0)].grad, n.grad, S(-1));
        break;
      }
      case Op::scale: {
        accumulate(nodes[parent(n, 0)].grad, n.grad, n.s0);
        break;
      }
      case Op::add_bias: {
        Node& x = nodes[parent(n, 0)];
        Node& b = nodes[parent(n, 1)];
        accumulate(x.grad, n.grad, S(1));
        for (int64_t r = 0; r < n.rows; ++r) {
          const S* g = n.grad.data() + r * n.cols;
          for (int64_t c = 0; c < n.cols; ++c) b.grad[c] += g[c];
        }
        break;
      }
      case Op::softplus: {
        Node& a = nodes[parent(n, 0)];
        for (size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.grad[i] * sigmoid_val(a.val[i]);
        break;
      }
      case Op::sigmoid: {
        Node& a = nodes[parent(n, 0)];
        for (size_t i = 0; i < n.grad.size(); ++i) {
          S y = n.val[i];
          a.grad[i] += n.grad[i] * y * (S(1) - y);
        }
        break;
      }
      case Op::tanh_: {
        Node& a = nodes[parent(n, 0)];
        for (size_t i = 0; i < n.grad.size(); ++i) {
          S y = n.val[i];
          a.grad[i] += n.grad[i] * (S(1) - y * y);
        }
        break;
      }
      case Op::leaky_relu: {
        Node& a = nodes[parent(n, 0)];
        for (size_t i = 0; i < n.grad.size(); ++i)
          a.grad[i] += n.grad[i] * (a.val[i] > S(0) ? S(1) : n.s0);
        break;
      }
      case Op::embed_gather: {
        Node& t = nodes[parent(n, 0)];
        for (int64_t r = 0; r < n.rows; ++r) {
          int32_t j = n.idx[r];
          if (j == 0) continue;  // frozen padding row
          const S* g = n.grad.data() + r * n.cols;
          S* tg = t.grad.data() + int64_t(j) * n.cols;
          for (int64_t c = 0; c < n.cols; ++c) tg[c] += g[c];
        }
        break;
      }
      case Op::concat_cols: {
        Node& a = nodes[parent(n, 0)];
        Node& b = nodes[parent(n, 1)];
        for (int64_t r = 0; r < n.rows; ++r) {
          const S* g = n.grad.data() + r * n.cols;
          S* ga = a.grad.data() + r * a.cols;
          S* gb = b.grad.data() + r * b.cols;
          for (int64_t c = 0; c < a.cols; ++c) ga[c] += g[c];
          for (int64_t c = 0; c < b.cols; ++c) gb[c] += g[a.cols + c];
        }
        break;
      }
      case Op::stack_rows: {
        int64_t off = 0;
        for (uint32_t k = 0; k < n.parent_cnt; ++k) {
          Node& p = nodes[parent(n, k)];
          accumulate(p.grad, std::span<S>(n.grad.data() + off, p.grad.size()), S(1));
          off += int64_t(p.grad.size());
        }
        break;
      }
      case Op::gather_rows: {
        Node& x = nodes[parent(n, 0)];
        for (int64_t r = 0; r < n.rows; ++r) {
          const S* g = n.grad.data() + r * n.cols;
          S* xg = x.grad.data() + int64_t(n.idx[r]) * n.cols;
          for (int64_t c = 0; c < n.cols; ++c) xg[c] += g[c];
        }
        break;
      }
      case Op::causal_conv: {
        Node& x = nodes[parent(n, 0)];
        Node& f = nodes[parent(n, 1)];
        const int64_t T = n.i0, b = n.i1, m = f.rows * f.cols;
        const int64_t slab = b * n.cols;
        for (int64_t t = 0; t < T; ++t) {
          const S* g = n.grad.data() + t * slab;
          for (int64_t j = 0; j < m; ++j) {
            int64_t src = t - (m - 1) + j;
            if (src < 0) continue;
            const S* in = x.val.data() + src * slab;
            S* gin = x.grad.data() + src * slab;
            const S fv = f.val[j];
            double gf = 0;
            for (int64_t i = 0; i < slab; ++i) {
              gin[i] += fv * g[i];
              gf += double(in[i]) * double(g[i]);
            }
            f.grad[j] += S(gf);
          }
        }
        break;
      }
      case Op::softmax_xent: {
        Node& l = nodes[parent(n, 0)];
        const int64_t R = l.rows, V = l.cols;
        const S gscale = n.grad[0] / S(n.d0);
        for (int64_t r = 0; r < R; ++r) {
          if (n.mask && !n.mask[r]) continue;
          const S* row = l.val.data() + r * V;
          S* g = l.grad.data() + r * V;
          const S lse = n.aux[r];
          for (int64_t c = 0; c < V; ++c) g[c] += gscale * S(std::exp(double(row[c] - lse)));
          g[n.idx[r]] -= gscale;
        }
        break;
      }
      case Op::scaled_sum: {
        Node& x = nodes[parent(n, 0)];
        const S g = n.grad[0] / S(n.d0);
        for (size_t i = 0; i < x.grad.size(); ++i)
          if (!n.mask || n.mask[i]) x.grad[i] += g;
        break;
      }
      case Op::leaf:
        break;
    }
  }

  static void accumulate(std::span<S> dst, std::span<S> src, S c) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += c * src[i];
  }

  Arena<S> arena_;
  std::vector<int32_t> parents_;
  std::vector<std::vector<int32_t>> owned_indices_;
};

template <class S> int64_t Tensor<S>::rows() const { return tape->node(*this).rows; }
template <class S> int64_t Tensor<S>::cols() const { return tape->node(*this).cols; }
template <class S> std::span<S> Tensor<S>::values() const { return tape->node(*this).val; }
template <class S> std::span<S> Tensor<S>::grad() const { return tape->node(*this).grad; }
template <class S> S Tensor<S>::scalar() const { return tape->node(*this).val[0]; }

// Gate parameters for one GRU layer, as tape tensors (usually leaves over the
// encoder's parameter buffers).
template <class S>
struct GruGates {
  Tensor<S> Wz, Uz, bz;  // update
  Tensor<S> Wr, Ur, br;  // reset
  Tensor<S> Wh, Uh, bh;  // candidate
};

// Standard GRU recurrence, built from primitive ops so gradients come off the
// tape:
//   z = sigmoid(x Wz + h Uz + bz)
//   r = sigmoid(x Wr + h Ur + br)
//   hc = tanh(x Wh + (r .* h) Uh + bh)
//   h' = (1 - z) .* h + z .* hc     (written h + z .* (hc - h))
template <class S>
Tensor<S> gru_cell(Tape<S>& tp, Tensor<S> x, Tensor<S> h_prev, const GruGates<S>& g) {
  auto z = tp.sigmoid(tp.add_bias(tp.add(tp.matmul(x, g.Wz), tp.matmul(h_prev, g.Uz)), g.bz));
  auto r = tp.sigmoid(tp.add_bias(tp.add(tp.matmul(x, g.Wr), tp.matmul(h_prev, g.Ur)), g.br));
  auto hc = tp.tanh(tp.add_bias(tp.add(tp.matmul(x, g.Wh), tp.matmul(tp.mul(r, h_prev), g.Uh)), g.bh));
  return tp.add(h_prev, tp.mul(z, tp.sub(hc, h_prev)));
}

// In-place softmax over each row; plain buffer helper for evaluation paths.
template <class S>
void softmax_rows(std::span<S> x, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    S* row = x.data() + r * cols;
    S mx = row[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0;
    for (int64_t c = 0; c < cols; ++c) sum += std::exp(double(row[c] - mx));
    for (int64_t c = 0; c < cols; ++c) row[c] = S(std::exp(double(row[c] - mx)) / sum);
  }
}

}  // namespace acvae::ad
