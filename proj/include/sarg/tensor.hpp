#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "sarg/errors.hpp"

namespace sarg::ad {

inline size_t numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// One value on the tape. back() accumulates this node's grad into its parents,
// which are captured by pointer inside the closure.
struct Node {
  std::vector<int> shape;
  std::vector<double> val;
  std::vector<double> grad;
  bool needs_grad = false;
  std::function<void(Node&)> back;
};

class Tape;

struct Tensor {
  Tape* tape = nullptr;
  Node* node = nullptr;

  bool valid() const { return node != nullptr; }
  const std::vector<int>& shape() const { return node->shape; }
  int ndim() const { return static_cast<int>(node->shape.size()); }
  int dim(int i) const { return node->shape[static_cast<size_t>(i)]; }
  size_t size() const { return node->val.size(); }
  const std::vector<double>& val() const { return node->val; }
  const std::vector<double>& grad() const { return node->grad; }
  bool needs_grad() const { return node->needs_grad; }

  double scalar() const {
    if (node->val.size() != 1)
      throw ShapeMismatch("scalar", shape_str(node->shape), "(1)");
    return node->val[0];
  }
};

// Define-by-run tape: nodes are created in topological order, so reverse
// creation order is a valid backward schedule. A tape is built per forward
// pass and backward() may be called once.
class Tape {
 public:
  Tensor alloc(std::vector<int> shape, bool needs_grad) {
    Node n;
    n.shape = std::move(shape);
    n.val.assign(numel(n.shape), 0.0);
    if (needs_grad) n.grad.assign(n.val.size(), 0.0);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Tensor{this, &nodes_.back()};
  }

  Tensor constant(std::vector<int> shape, std::vector<double> data) {
    if (numel(shape) != data.size())
      throw ShapeMismatch("constant", shape_str(shape),
                          "(" + std::to_string(data.size()) + " values)");
    Tensor t = alloc(std::move(shape), false);
    t.node->val = std::move(data);
    return t;
  }

  Tensor zeros(std::vector<int> shape) { return alloc(std::move(shape), false); }

  Tensor scalar_const(double v) { return constant({1}, {v}); }

  void backward(Tensor loss, double seed = 1.0) {
    if (loss.size() != 1) throw ShapeMismatch("backward", shape_str(loss.shape()), "(1)");
    if (!loss.needs_grad()) return;  // nothing on the tape depends on parameters
    loss.node->grad[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->needs_grad && it->back) it->back(*it);
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
};

namespace detail {

inline Tensor unary(Tensor a, std::vector<int> shape) {
  return a.tape->alloc(std::move(shape), a.needs_grad());
}

inline Tensor binary(Tensor a, Tensor b, std::vector<int> shape) {
  return a.tape->alloc(std::move(shape), a.needs_grad() || b.needs_grad());
}

inline void check_same_shape(const char* op, Tensor a, Tensor b) {
  if (a.shape() != b.shape()) throw ShapeMismatch(op, shape_str(a.shape()), shape_str(b.shape()));
}

}  // namespace detail

// --- arithmetic ---------------------------------------------------------------

inline Tensor add(Tensor a, Tensor b) {
  detail::check_same_shape("add", a, b);
  Tensor out = detail::binary(a, b, a.shape());
  for (size_t i = 0; i < out.size(); ++i) out.node->val[i] = a.val()[i] + b.val()[i];
  Node *pa = a.node, *pb = b.node;
  out.node->back = [pa, pb](Node& n) {
    if (pa->needs_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    if (pb->needs_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
  };
  return out;
}

// k*t + c, elementwise with host scalars
inline Tensor affine(Tensor a, double k, double c) {
  Tensor out = detail::unary(a, a.shape());
  for (size_t i = 0; i < out.size(); ++i) out.node->val[i] = k * a.val()[i] + c;
  Node* pa = a.node;
  out.node->back = [pa, k](Node& n) {
    if (pa->needs_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += k * n.grad[i];
  };
  return out;
}

inline Tensor mul(Tensor a, Tensor b) {
  detail::check_same_shape("mul", a, b);
  Tensor out = detail::binary(a, b, a.shape());
  for (size_t i = 0; i < out.size(); ++i) out.node->val[i] = a.val()[i] * b.val()[i];
  Node *pa = a.node, *pb = b.node;
  out.node->back = [pa, pb](Node& n) {
    if (pa->needs_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += pb->val[i] * n.grad[i];
    if (pb->needs_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += pa->val[i] * n.grad[i];
  };
  return out;
}

// t scaled by a 1-element tensor
inline Tensor mul_scalar(Tensor a, Tensor s) {
  if (s.size() != 1) throw ShapeMismatch("mul_scalar", shape_str(s.shape()), "(1)");
  Tensor out = detail::binary(a, s, a.shape());
  const double sv = s.val()[0];
  for (size_t i = 0; i < out.size(); ++i) out.node->val[i] = sv * a.val()[i];
  Node *pa = a.node, *ps = s.node;
  out.node->back = [pa, ps](Node& n) {
    const double svv = ps->val[0];
    if (pa->needs_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += svv * n.grad[i];
    if (ps->needs_grad) {
      double acc = 0.0;
      for (size_t i = 0; i < n.grad.size(); ++i) acc += pa->val[i] * n.grad[i];
      ps->grad[0] += acc;
    }
  };
  return out;
}

// bias broadcast over the last axis of a matrix
inline Tensor add_rowvec(Tensor m, Tensor v) {
  if (m.ndim() != 2 || v.ndim() != 1 || m.dim(1) != v.dim(0))
    throw ShapeMismatch("add_rowvec", shape_str(m.shape()), shape_str(v.shape()));
  const int r = m.dim(0), c = m.dim(1);
  Tensor out = detail::binary(m, v, {r, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.node->val[static_cast<size_t>(i * c + j)] =
          m.val()[static_cast<size_t>(i * c + j)] + v.val()[static_cast<size_t>(j)];
  Node *pm = m.node, *pv = v.node;
  out.node->back = [pm, pv, r, c](Node& n) {
    if (pm->needs_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pm->grad[i] += n.grad[i];
    if (pv->needs_grad)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          pv->grad[static_cast<size_t>(j)] += n.grad[static_cast<size_t>(i * c + j)];
  };
  return out;
}

// --- dense kernels ------------------------------------------------------------

namespace detail {

// out(r x c) += A(r x k) * B(k x c)
inline void mm_acc(const double* A, const double* B, double* out, int r, int k, int c) {
  for (int i = 0; i < r; ++i)
    for (int p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      if (a == 0.0) continue;
      const double* brow = B + p * c;
      double* orow = out + i * c;
      for (int j = 0; j < c; ++j) orow[j] += a * brow[j];
    }
}

// out(r x c) += A(r x k) * B(c x k)^T
inline void mm_nt_acc(const double* A, const double* B, double* out, int r, int k, int c) {
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      const double* arow = A + i * k;
      const double* brow = B + j * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * c + j] += acc;
    }
}

// out(k x c) += A(r x k)^T * B(r x c)
inline void mm_tn_acc(const double* A, const double* B, double* out, int r, int k, int c) {
  for (int i = 0; i < r; ++i) {
    const double* arow = A + i * k;
    const double* brow = B + i * c;
    for (int p = 0; p < k; ++p) {
      const double a = arow[p];
      if (a == 0.0) continue;
      double* orow = out + p * c;
      for (int j = 0; j < c; ++j) orow[j] += a * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(Tensor a, Tensor b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeMismatch("matmul", shape_str(a.shape()), shape_str(b.shape()));
  const int r = a.dim(0), k = a.dim(1), c = b.dim(1);
  Tensor out = detail::binary(a, b, {r, c});
  detail::mm_acc(a.val().data(), b.val().data(), out.node->val.data(), r, k, c);
  Node *pa = a.node, *pb = b.node;
  out.node->back = [pa, pb, r, k, c](Node& n) {
    if (pa->needs_grad) detail::mm_nt_acc(n.grad.data(), pb->val.data(), pa->grad.data(), r, c, k);
    if (pb->needs_grad) detail::mm_tn_acc(pa->val.data(), n.grad.data(), pb->grad.data(), r, k, c);
  };
  return out;
}

// a * b^T
inline Tensor matmul_nt(Tensor a, Tensor b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw ShapeMismatch("matmul_nt", shape_str(a.shape()), shape_str(b.shape()));
  const int r = a.dim(0), k = a.dim(1), c = b.dim(0);
  Tensor out = detail::binary(a, b, {r, c});
  detail::mm_nt_acc(a.val().data(), b.val().data(), out.node->val.data(), r, k, c);
  Node *pa = a.node, *pb = b.node;
  out.node->back = [pa, pb, r, k, c](Node& n) {
    if (pa->needs_grad) detail::mm_acc(n.grad.data(), pb->val.data(), pa->grad.data(), r, c, k);
    if (pb->needs_grad) detail::mm_tn_acc(n.grad.data(), pa->val.data(), pb->grad.data(), r, c, k);
  };
  return out;
}

inline Tensor matvec(Tensor a, Tensor x) {
  if (a.ndim() != 2 || x.ndim() != 1 || a.dim(1) != x.dim(0))
    throw ShapeMismatch("matvec", shape_str(a.shape()), shape_str(x.shape()));
  const int r = a.dim(0), k = a.dim(1);
  Tensor out = detail::binary(a, x, {r});
  for (int i = 0; i < r; ++i) {
    double acc = 0.0;
    for (int p = 0; p < k; ++p) acc += a.val()[static_cast<size_t>(i * k + p)] * x.val()[static_cast<size_t>(p)];
    out.node->val[static_cast<size_t>(i)] = acc;
  }
  Node *pa = a.node, *px = x.node;
  out.node->back = [pa, px, r, k](Node& n) {
    if (pa->needs_grad)
      for (int i = 0; i < r; ++i)
        for (int p = 0; p < k; ++p)
          pa->grad[static_cast<size_t>(i * k + p)] += n.grad[static_cast<size_t>(i)] * px->val[static_cast<size_t>(p)];
    if (px->needs_grad)
      for (int i = 0; i < r; ++i)
        for (int p = 0; p < k; ++p)
          px->grad[static_cast<size_t>(p)] += pa->val[static_cast<size_t>(i * k + p)] * n.grad[static_cast<size_t>(i)];
  };
  return out;
}

// x^T * a for a row vector result
inline Tensor vecmat(Tensor x, Tensor a) {
  if (x.ndim() != 1 || a.ndim() != 2 || x.dim(0) != a.dim(0))
    throw ShapeMismatch("vecmat", shape_str(x.shape()), shape_str(a.shape()));
  const int r = a.dim(0), k = a.dim(1);
  Tensor out = detail::binary(x, a, {k});
  for (int i = 0; i < r; ++i) {
    const double xv = x.val()[static_cast<size_t>(i)];
    if (xv == 0.0) continue;
    for (int j = 0; j < k; ++j)
      out.node->val[static_cast<size_t>(j)] += xv * a.val()[static_cast<size_t>(i * k + j)];
  }
  Node *px = x.node, *pa = a.node;
  out.node->back = [px, pa, r, k](Node& n) {
    if (px->needs_grad)
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < k; ++j)
          acc += pa->val[static_cast<size_t>(i * k + j)] * n.grad[static_cast<size_t>(j)];
        px->grad[static_cast<size_t>(i)] += acc;
      }
    if (pa->needs_grad)
      for (int i = 0; i < r; ++i) {
        const double xv = px->val[static_cast<size_t>(i)];
        if (xv == 0.0) continue;
        for (int j = 0; j < k; ++j)
          pa->grad[static_cast<size_t>(i * k + j)] += xv * n.grad[static_cast<size_t>(j)];
      }
  };
  return out;
}

inline Tensor dot(Tensor x, Tensor y) {
  detail::check_same_shape("dot", x, y);
  Tensor out = detail::binary(x, y, {1});
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) acc += x.val()[i] * y.val()[i];
  out.node->val[0] = acc;
  Node *px = x.node, *py = y.node;
  out.node->back = [px, py](Node& n) {
    const double g = n.grad[0];
    if (px->needs_grad)
      for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g * py->val[i];
    if (py->needs_grad)
      for (size_t i = 0; i < py->grad.size(); ++i) py->grad[i] += g * px->val[i];
  };
  return out;
}

inline Tensor outer(Tensor x, Tensor y) {
  if (x.ndim() != 1 || y.ndim() != 1)
    throw ShapeMismatch("outer", shape_str(x.shape()), shape_str(y.shape()));
  const int r = x.dim(0), c = y.dim(0);
  Tensor out = detail::binary(x, y, {r, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.node->val[static_cast<size_t>(i * c + j)] =
          x.val()[static_cast<size_t>(i)] * y.val()[static_cast<size_t>(j)];
  Node *px = x.node, *py = y.node;
  out.node->back = [px, py, r, c](Node& n) {
    if (px->needs_grad)
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j)
          acc += n.grad[static_cast<size_t>(i * c + j)] * py->val[static_cast<size_t>(j)];
        px->grad[static_cast<size_t>(i)] += acc;
      }
    if (py->needs_grad)
      for (int i = 0; i < r; ++i) {
        const double xv = px->val[static_cast<size_t>(i)];
        for (int j = 0; j < c; ++j)
          py->grad[static_cast<size_t>(j)] += xv * n.grad[static_cast<size_t>(i * c + j)];
      }
  };
  return out;
}

// --- structure ops ------------------------------------------------------------

inline Tensor gather_rows(Tensor table, const std::vector<int>& ids, const std::string& name) {
  if (table.ndim() != 2) throw ShapeMismatch("gather_rows", shape_str(table.shape()), "(rows,cols)");
  const int rows = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= rows) throw IndexOutOfBounds(name, id, rows);
  Tensor out = detail::unary(table, {static_cast<int>(ids.size()), d});
  for (size_t r = 0; r < ids.size(); ++r)
    for (int j = 0; j < d; ++j)
      out.node->val[r * static_cast<size_t>(d) + static_cast<size_t>(j)] =
          table.val()[static_cast<size_t>(ids[r] * d + j)];
  Node* pt = table.node;
  auto ids_copy = ids;
  out.node->back = [pt, ids_copy, d](Node& n) {
    if (!pt->needs_grad) return;
    for (size_t r = 0; r < ids_copy.size(); ++r)
      for (int j = 0; j < d; ++j)
        pt->grad[static_cast<size_t>(ids_copy[r] * d + j)] +=
            n.grad[r * static_cast<size_t>(d) + static_cast<size_t>(j)];
  };
  return out;
}

inline Tensor row(Tensor m, int r) {
  if (m.ndim() != 2) throw ShapeMismatch("row", shape_str(m.shape()), "(rows,cols)");
  if (r < 0 || r >= m.dim(0)) throw IndexOutOfBounds("row", r, m.dim(0));
  const int c = m.dim(1);
  Tensor out = detail::unary(m, {c});
  for (int j = 0; j < c; ++j) out.node->val[static_cast<size_t>(j)] = m.val()[static_cast<size_t>(r * c + j)];
  Node* pm = m.node;
  out.node->back = [pm, r, c](Node& n) {
    if (!pm->needs_grad) return;
    for (int j = 0; j < c; ++j) pm->grad[static_cast<size_t>(r * c + j)] += n.grad[static_cast<size_t>(j)];
  };
  return out;
}

inline Tensor slice_rows(Tensor m, int r0, int r1) {
  if (m.ndim() != 2) throw ShapeMismatch("slice_rows", shape_str(m.shape()), "(rows,cols)");
  if (r0 < 0 || r1 > m.dim(0) || r0 >= r1) throw IndexOutOfBounds("slice_rows", r0, m.dim(0));
  const int c = m.dim(1);
  Tensor out = detail::unary(m, {r1 - r0, c});
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < c; ++j)
      out.node->val[static_cast<size_t>((i - r0) * c + j)] = m.val()[static_cast<size_t>(i * c + j)];
  Node* pm = m.node;
  out.node->back = [pm, r0, r1, c](Node& n) {
    if (!pm->needs_grad) return;
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < c; ++j)
        pm->grad[static_cast<size_t>(i * c + j)] += n.grad[static_cast<size_t>((i - r0) * c + j)];
  };
  return out;
}

inline Tensor slice_cols(Tensor m, int c0, int c1) {
  if (m.ndim() != 2) throw ShapeMismatch("slice_cols", shape_str(m.shape()), "(rows,cols)");
  if (c0 < 0 || c1 > m.dim(1) || c0 >= c1) throw IndexOutOfBounds("slice_cols", c0, m.dim(1));
  const int r = m.dim(0), c = m.dim(1), w = c1 - c0;
  Tensor out = detail::unary(m, {r, w});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j)
      out.node->val[static_cast<size_t>(i * w + j)] = m.val()[static_cast<size_t>(i * c + c0 + j)];
  Node* pm = m.node;
  out.node->back = [pm, r, c, c0, w](Node& n) {
    if (!pm->needs_grad) return;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        pm->grad[static_cast<size_t>(i * c + c0 + j)] += n.grad[static_cast<size_t>(i * w + j)];
  };
  return out;
}

inline Tensor slice_vec(Tensor x, int i0, int i1) {
  if (x.ndim() != 1) throw ShapeMismatch("slice_vec", shape_str(x.shape()), "(n)");
  if (i0 < 0 || i1 > x.dim(0) || i0 >= i1) throw IndexOutOfBounds("slice_vec", i0, x.dim(0));
  Tensor out = detail::unary(x, {i1 - i0});
  for (int i = i0; i < i1; ++i) out.node->val[static_cast<size_t>(i - i0)] = x.val()[static_cast<size_t>(i)];
  Node* px = x.node;
  out.node->back = [px, i0, i1](Node& n) {
    if (!px->needs_grad) return;
    for (int i = i0; i < i1; ++i) px->grad[static_cast<size_t>(i)] += n.grad[static_cast<size_t>(i - i0)];
  };
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw EmptyInput();
  const int r = parts[0].dim(0);
  int total = 0;
  bool needs = false;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != r)
      throw ShapeMismatch("concat_cols", shape_str(parts[0].shape()), shape_str(p.shape()));
    total += p.dim(1);
    needs = needs || p.needs_grad();
  }
  Tensor out = parts[0].tape->alloc({r, total}, needs);
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        out.node->val[static_cast<size_t>(i * total + off + j)] = p.val()[static_cast<size_t>(i * w + j)];
    off += w;
  }
  std::vector<Node*> srcs;
  for (const Tensor& p : parts) srcs.push_back(p.node);
  out.node->back = [srcs, r, total](Node& n) {
    int o = 0;
    for (Node* src : srcs) {
      const int w = src->shape[1];
      if (src->needs_grad)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j)
            src->grad[static_cast<size_t>(i * w + j)] += n.grad[static_cast<size_t>(i * total + o + j)];
      o += w;
    }
  };
  return out;
}

// attention mass over history positions redirected onto their vocabulary ids
inline Tensor scatter_sum(Tensor weights, const std::vector<int>& ids, int vocab_size) {
  if (weights.ndim() != 1 || weights.size() != ids.size())
    throw ShapeMismatch("scatter_sum", shape_str(weights.shape()),
                        "(" + std::to_string(ids.size()) + ")");
  for (int id : ids)
    if (id < 0 || id >= vocab_size) throw IndexOutOfBounds("scatter_sum", id, vocab_size);
  Tensor out = detail::unary(weights, {vocab_size});
  for (size_t j = 0; j < ids.size(); ++j)
    out.node->val[static_cast<size_t>(ids[j])] += weights.val()[j];
  Node* pw = weights.node;
  auto ids_copy = ids;
  out.node->back = [pw, ids_copy](Node& n) {
    if (!pw->needs_grad) return;
    for (size_t j = 0; j < ids_copy.size(); ++j)
      pw->grad[j] += n.grad[static_cast<size_t>(ids_copy[j])];
  };
  return out;
}

// --- nonlinearities -----------------------------------------------------------

inline Tensor tanh(Tensor a) {
  Tensor out = detail::unary(a, a.shape());
  for (size_t i = 0; i < out.size(); ++i) out.node->val[i] = std::tanh(a.val()[i]);
  Node* pa = a.node;
  Node* po = out.node;
  out.node->back = [pa, po](Node& n) {
    if (!pa->needs_grad) return;
    for (size_t i = 0; i < n.grad.size(); ++i) {
      const double y = po->val[i];
      pa->grad[i] += (1.0 - y * y) * n.grad[i];
    }
  };
  return out;
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(Tensor a) {
  Tensor out = detail::unary(a, a.shape());
  for (size_t i = 0; i < out.size(); ++i) out.node->val[i] = sigmoid_scalar(a.val()[i]);
  Node* pa = a.node;
  Node* po = out.node;
  out.node->back = [pa, po](Node& n) {
    if (!pa->needs_grad) return;
    for (size_t i = 0; i < n.grad.size(); ++i) {
      const double y = po->val[i];
      pa->grad[i] += y * (1.0 - y) * n.grad[i];
    }
  };
  return out;
}

// tanh approximation, smooth everywhere (finite differences stay honest)
inline Tensor gelu(Tensor a) {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCubic = 0.044715;
  Tensor out = detail::unary(a, a.shape());
  for (size_t i = 0; i < out.size(); ++i) {
    const double x = a.val()[i];
    out.node->val[i] = 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kCubic * x * x * x)));
  }
  Node* pa = a.node;
  out.node->back = [pa](Node& n) {
    if (!pa->needs_grad) return;
    for (size_t i = 0; i < n.grad.size(); ++i) {
      const double x = pa->val[i];
      const double t = std::tanh(kSqrt2OverPi * (x + kCubic * x * x * x));
      const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kCubic * x * x);
      const double dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
      pa->grad[i] += dy * n.grad[i];
    }
  };
  return out;
}

// --- reductions, masking, distributions ----------------------------------------

inline Tensor sum(Tensor a) {
  Tensor out = detail::unary(a, {1});
  double acc = 0.0;
  for (double v : a.val()) acc += v;
  out.node->val[0] = acc;
  Node* pa = a.node;
  out.node->back = [pa](Node& n) {
    if (!pa->needs_grad) return;
    const double g = n.grad[0];
    for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
  };
  return out;
}

// elementwise minimum; at exact ties the gradient goes to the first operand
inline Tensor min_elem(Tensor a, Tensor b) {
  detail::check_same_shape("min_elem", a, b);
  Tensor out = detail::binary(a, b, a.shape());
  for (size_t i = 0; i < out.size(); ++i) out.node->val[i] = std::min(a.val()[i], b.val()[i]);
  Node *pa = a.node, *pb = b.node;
  out.node->back = [pa, pb](Node& n) {
    for (size_t i = 0; i < n.grad.size(); ++i) {
      if (pa->val[i] <= pb->val[i]) {
        if (pa->needs_grad) pa->grad[i] += n.grad[i];
      } else {
        if (pb->needs_grad) pb->grad[i] += n.grad[i];
      }
    }
  };
  return out;
}

// keep[j] == 0 replaces the entry with `fill`; the mask spans the last axis
inline Tensor masked_fill(Tensor a, const std::vector<uint8_t>& keep, double fill) {
  const int last = a.dim(a.ndim() - 1);
  if (static_cast<size_t>(last) != keep.size())
    throw ShapeMismatch("masked_fill", shape_str(a.shape()),
                        "(mask " + std::to_string(keep.size()) + ")");
  Tensor out = detail::unary(a, a.shape());
  const size_t cols = keep.size();
  for (size_t i = 0; i < out.size(); ++i)
    out.node->val[i] = keep[i % cols] ? a.val()[i] : fill;
  Node* pa = a.node;
  auto keep_copy = keep;
  out.node->back = [pa, keep_copy](Node& n) {
    if (!pa->needs_grad) return;
    const size_t cols = keep_copy.size();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (keep_copy[i % cols]) pa->grad[i] += n.grad[i];
  };
  return out;
}

namespace detail {

inline void softmax_row(const double* x, double* y, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    z += y[i];
  }
  for (int i = 0; i < n; ++i) y[i] /= z;
}

}  // namespace detail

// softmax along the last axis, max-subtracted
inline Tensor softmax(Tensor a) {
  const int n = a.dim(a.ndim() - 1);
  const int rows = static_cast<int>(a.size()) / n;
  Tensor out = detail::unary(a, a.shape());
  for (int r = 0; r < rows; ++r)
    detail::softmax_row(a.val().data() + r * n, out.node->val.data() + r * n, n);
  Node* pa = a.node;
  Node* po = out.node;
  out.node->back = [pa, po, rows, n](Node& nd) {
    if (!pa->needs_grad) return;
    for (int r = 0; r < rows; ++r) {
      const double* y = po->val.data() + r * n;
      const double* g = nd.grad.data() + r * n;
      double dotgy = 0.0;
      for (int i = 0; i < n; ++i) dotgy += g[i] * y[i];
      double* da = pa->grad.data() + r * n;
      for (int i = 0; i < n; ++i) da[i] += y[i] * (g[i] - dotgy);
    }
  };
  return out;
}

// per-row normalization over the last axis, epsilon inside the square root
inline Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, double eps = 1e-5) {
  const int d = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
    throw ShapeMismatch("layer_norm", shape_str(x.shape()), shape_str(gain.shape()));
  const int rows = static_cast<int>(x.size()) / d;
  Tensor out = x.tape->alloc(x.shape(), x.needs_grad() || gain.needs_grad() || bias.needs_grad());
  std::vector<double> inv_store(static_cast<size_t>(rows));
  std::vector<double> hat_store(x.size());
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.val().data() + r * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_store[static_cast<size_t>(r)] = inv;
    for (int i = 0; i < d; ++i) {
      const double h = (xr[i] - mu) * inv;
      hat_store[static_cast<size_t>(r * d + i)] = h;
      out.node->val[static_cast<size_t>(r * d + i)] = h * gain.val()[static_cast<size_t>(i)] + bias.val()[static_cast<size_t>(i)];
    }
  }
  Node *px = x.node, *pg = gain.node, *pb = bias.node;
  out.node->back = [px, pg, pb, rows, d, inv_store, hat_store](Node& n) {
    for (int r = 0; r < rows; ++r) {
      const double* g = n.grad.data() + r * d;
      const double* hat = hat_store.data() + r * d;
      if (pg->needs_grad)
        for (int i = 0; i < d; ++i) pg->grad[static_cast<size_t>(i)] += g[i] * hat[i];
      if (pb->needs_grad)
        for (int i = 0; i < d; ++i) pb->grad[static_cast<size_t>(i)] += g[i];
      if (px->needs_grad) {
        const double inv = inv_store[static_cast<size_t>(r)];
        double mean_dh = 0.0, mean_dh_hat = 0.0;
        for (int i = 0; i < d; ++i) {
          const double dh = g[i] * pg->val[static_cast<size_t>(i)];
          mean_dh += dh;
          mean_dh_hat += dh * hat[i];
        }
        mean_dh /= d;
        mean_dh_hat /= d;
        for (int i = 0; i < d; ++i) {
          const double dh = g[i] * pg->val[static_cast<size_t>(i)];
          px->grad[static_cast<size_t>(r * d + i)] += inv * (dh - mean_dh - hat[i] * mean_dh_hat);
        }
      }
    }
  };
  return out;
}

// negative log-likelihood of one index under a probability vector
inline Tensor nll(Tensor dist, int idx) {
  if (dist.ndim() != 1) throw ShapeMismatch("nll", shape_str(dist.shape()), "(n)");
  if (idx < 0 || idx >= dist.dim(0)) throw IndexOutOfBounds("nll", idx, dist.dim(0));
  Tensor out = detail::unary(dist, {1});
  out.node->val[0] = -std::log(dist.val()[static_cast<size_t>(idx)]);
  Node* pd = dist.node;
  out.node->back = [pd, idx](Node& n) {
    if (!pd->needs_grad) return;
    pd->grad[static_cast<size_t>(idx)] -= n.grad[0] / pd->val[static_cast<size_t>(idx)];
  };
  return out;
}

// summed row-wise nll, rows with include[r] == 0 contribute nothing
inline Tensor nll_rows(Tensor probs, const std::vector<int>& ids,
                       const std::vector<uint8_t>& include) {
  if (probs.ndim() != 2) throw ShapeMismatch("nll_rows", shape_str(probs.shape()), "(rows,cols)");
  const int rows = probs.dim(0), cols = probs.dim(1);
  if (ids.size() != static_cast<size_t>(rows) || include.size() != static_cast<size_t>(rows))
    throw LengthMismatch("nll_rows ids vs rows", ids.size(), static_cast<size_t>(rows));
  Tensor out = detail::unary(probs, {1});
  double acc = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (!include[static_cast<size_t>(r)]) continue;
    const int idx = ids[static_cast<size_t>(r)];
    if (idx < 0 || idx >= cols) throw IndexOutOfBounds("nll_rows", idx, cols);
    acc -= std::log(probs.val()[static_cast<size_t>(r * cols + idx)]);
  }
  out.node->val[0] = acc;
  Node* pp = probs.node;
  auto ids_copy = ids;
  auto inc_copy = include;
  out.node->back = [pp, ids_copy, inc_copy, rows, cols](Node& n) {
    if (!pp->needs_grad) return;
    for (int r = 0; r < rows; ++r) {
      if (!inc_copy[static_cast<size_t>(r)]) continue;
      const size_t at = static_cast<size_t>(r * cols + ids_copy[static_cast<size_t>(r)]);
      pp->grad[at] -= n.grad[0] / pp->val[at];
    }
  };
  return out;
}

}  // namespace sarg::ad
