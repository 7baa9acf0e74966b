#include "hapnet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace hapnet::ag {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) {
      if (t.defined() && t.requires_grad()) any = true;
    }
    if (any) {
      node->requires_grad = true;
      for (const auto& t : inputs) {
        if (t.defined()) node->parents.push_back(t.ptr());
      }
      node->backward = std::move(bw);
    }
  }
  return Tensor(std::move(node));
}

// Grad buffer of a parent if it participates in differentiation, else null.
double* grad_of(const NodePtr& n) {
  if (!n || !n->requires_grad) return nullptr;
  return n->ensure_grad().data();
}

void expect_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void expect_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_deriv(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tensor Tensor::clone() const { return from(shape(), node_->value, node_->requires_grad); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto px = x.ptr();
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                     [px](Node& self) {
                       if (double* g = grad_of(px)) {
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw ShapeError("concat_rows: rank-0 input");
  Shape out_shape = first;
  out_shape[0] = 0;
  std::vector<double> value;
  for (const auto& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat_rows: incompatible " + shape_str(p.shape()) + " vs " + shape_str(first));
    }
    out_shape[0] += p.dim(0);
    value.insert(value.end(), p.data().begin(), p.data().end());
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(out_shape);
  node->value = std::move(value);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (g_grad_enabled && any) {
    node->requires_grad = true;
    std::vector<NodePtr> ptrs;
    for (const auto& p : parts) ptrs.push_back(p.ptr());
    node->parents = ptrs;
    node->backward = [ptrs](Node& self) {
      std::size_t offset = 0;
      for (const auto& p : ptrs) {
        const std::size_t n = p->value.size();
        if (double* g = grad_of(p)) {
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
        }
        offset += n;
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) {
    throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     shape_str(x.shape()));
  }
  const std::size_t row = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> value(x.data().begin() + begin * row, x.data().begin() + end * row);
  auto px = x.ptr();
  const std::size_t off = begin * row;
  return make_result(std::move(shape), std::move(value), {x}, [px, off](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
    }
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  expect_rank(x, 2, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin > end || end > cols) throw ShapeError("slice_cols out of range");
  const std::size_t w = end - begin;
  std::vector<double> value(rows * w);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xd.begin() + r * cols + begin, w, value.begin() + r * w);
  }
  auto px = x.ptr();
  return make_result({rows, w}, std::move(value), {x}, [px, rows, cols, begin, w](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; ++c) g[r * cols + begin + c] += self.grad[r * w + c];
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  expect_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> value(r * c);
  const auto xd = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) value[j * r + i] = xd[i * c + j];
  auto px = x.ptr();
  return make_result({c, r}, std::move(value), {x}, [px, r, c](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "add");
  std::vector<double> value(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = ad[i] + bd[i];
  auto pa = a.ptr(), pb = b.ptr();
  return make_result(a.shape(), std::move(value), {a, b}, [pa, pb](Node& self) {
    for (const auto& p : {pa, pb}) {
      if (double* g = grad_of(p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "mul");
  std::vector<double> value(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = ad[i] * bd[i];
  auto pa = a.ptr(), pb = b.ptr();
  return make_result(a.shape(), std::move(value), {a, b}, [pa, pb](Node& self) {
    if (double* g = grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (double* g = grad_of(pb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> value(x.data().begin(), x.data().end());
  for (auto& v : value) v *= s;
  auto px = x.ptr();
  return make_result(x.shape(), std::move(value), {x}, [px, s](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    }
  });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: gate must have one element");
  const double k = s.item();
  std::vector<double> value(x.data().begin(), x.data().end());
  for (auto& v : value) v *= k;
  auto px = x.ptr(), ps = s.ptr();
  return make_result(x.shape(), std::move(value), {x, s}, [px, ps](Node& self) {
    const double k = ps->value[0];
    if (double* g = grad_of(px)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += k * self.grad[i];
    }
    if (double* g = grad_of(ps)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px->value[i];
      g[0] += acc;
    }
  });
}

Tensor add_row_vector(const Tensor& x, const Tensor& b) {
  if (x.rank() == 0 || b.numel() != x.shape().back()) {
    throw ShapeError("add_row_vector: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const std::size_t c = b.numel();
  std::vector<double> value(x.data().begin(), x.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] += bd[i % c];
  auto px = x.ptr(), pb = b.ptr();
  return make_result(x.shape(), std::move(value), {x, b}, [px, pb, c](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(pb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
    }
  });
}

namespace {

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D df) {
  std::vector<double> value(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = f(xd[i]);
  auto px = x.ptr();
  return make_result(x.shape(), std::move(value), {x}, [px, df](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * df(px->value[i]);
    }
  });
}

}  // namespace

Tensor gelu(const Tensor& x) { return unary(x, gelu_value, gelu_deriv); }

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double v) {
    const double s = stable_sigmoid(v);
    return s * (1.0 - s);
  });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax of rank-0 tensor");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  std::vector<double> value(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * k;
    double* out = value.data() + r * k;
    const double m = *std::max_element(in, in + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (out[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < k; ++j) out[j] /= z;
  }
  auto px = x.ptr();
  return make_result(x.shape(), value, {x}, [px, rows, k](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = self.value.data() + r * k;
        const double* dy = self.grad.data() + r * k;
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += p[j] * dy[j];
        for (std::size_t j = 0; j < k; ++j) g[r * k + j] += p[j] * (dy[j] - dot);
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto px = x.ptr();
  return make_result({1}, {acc}, {x}, [px](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t i = 0; i < px->value.size(); ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// linear algebra

namespace {

// c[M,N] += a[M,K] @ b[K,N]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M,N] += a[M,K] @ b[N,K]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[K,N] += a[M,K]^T @ b[M,N]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  expect_rank(a, 2, "matmul");
  expect_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  std::vector<double> value(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), value.data(), m, k, n);
  auto pa = a.ptr(), pb = b.ptr();
  return make_result({m, n}, std::move(value), {a, b}, [pa, pb, m, k, n](Node& self) {
    if (double* g = grad_of(pa)) gemm_nt(self.grad.data(), pb->value.data(), g, m, n, k);
    if (double* g = grad_of(pb)) gemm_tn(pa->value.data(), self.grad.data(), g, m, k, n);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  expect_rank(a, 2, "matmul_nt");
  expect_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt " + shape_str(a.shape()) + " @ " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> value(m * n, 0.0);
  gemm_nt(a.data().data(), b.data().data(), value.data(), m, k, n);
  auto pa = a.ptr(), pb = b.ptr();
  return make_result({m, n}, std::move(value), {a, b}, [pa, pb, m, k, n](Node& self) {
    // dA = dC @ B ; dB = dC^T @ A
    if (double* g = grad_of(pa)) gemm_nn(self.grad.data(), pb->value.data(), g, m, n, k);
    if (double* g = grad_of(pb)) gemm_tn(self.grad.data(), pa->value.data(), g, m, n, k);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  expect_rank(x, 2, "linear input");
  expect_rank(w, 2, "linear weight");
  const std::size_t t = x.dim(0), in = x.dim(1), out = w.dim(1);
  if (w.dim(0) != in) throw ShapeError("linear " + shape_str(x.shape()) + " @ " + shape_str(w.shape()));
  if (bias.defined() && bias.numel() != out) throw ShapeError("linear bias size mismatch");
  std::vector<double> value(t * out, 0.0);
  if (bias.defined()) {
    for (std::size_t r = 0; r < t; ++r) std::copy(bias.data().begin(), bias.data().end(), value.begin() + r * out);
  }
  gemm_nn(x.data().data(), w.data().data(), value.data(), t, in, out);
  auto px = x.ptr(), pw = w.ptr();
  NodePtr pbias = bias.defined() ? bias.ptr() : nullptr;
  return make_result({t, out}, std::move(value), {x, w, bias}, [px, pw, pbias, t, in, out](Node& self) {
    if (double* g = grad_of(px)) gemm_nt(self.grad.data(), pw->value.data(), g, t, out, in);
    if (double* g = grad_of(pw)) gemm_tn(px->value.data(), self.grad.data(), g, t, in, out);
    if (double* g = grad_of(pbias)) {
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < out; ++j) g[j] += self.grad[r * out + j];
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm of rank-0 tensor");
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) throw ShapeError("layer_norm affine size mismatch");
  const std::size_t rows = x.numel() / c;
  std::vector<double> value(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += in[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (in[j] - mu) * is;
      xhat[r * c + j] = h;
      value[r * c + j] = h * gd[j] + bd[j];
    }
  }
  auto px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr();
  return make_result(x.shape(), std::move(value), {x, gamma, beta},
                     [px, pg, pb, rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const double* dy = self.grad.data();
                       if (double* g = grad_of(pg)) {
                         for (std::size_t i = 0; i < rows * c; ++i) g[i % c] += dy[i] * xhat[i];
                       }
                       if (double* g = grad_of(pb)) {
                         for (std::size_t i = 0; i < rows * c; ++i) g[i % c] += dy[i];
                       }
                       if (double* g = grad_of(px)) {
                         const double* gm = pg->value.data();
                         const double inv_c = 1.0 / static_cast<double>(c);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < c; ++j) {
                             const double dh = dy[r * c + j] * gm[j];
                             s1 += dh;
                             s2 += dh * xhat[r * c + j];
                           }
                           for (std::size_t j = 0; j < c; ++j) {
                             const double dh = dy[r * c + j] * gm[j];
                             g[r * c + j] += inv_std[r] * (dh - inv_c * s1 - xhat[r * c + j] * inv_c * s2);
                           }
                         }
                       }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  expect_rank(q, 2, "attention q");
  expect_rank(k, 2, "attention k");
  expect_rank(v, 2, "attention v");
  const std::size_t tq = q.dim(0), d = q.dim(1), tk = k.dim(0);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != tk) {
    throw ShapeError("attention: q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" +
                     shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: heads must divide D");
  if (tk == 0) throw ShapeError("attention: no keys");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  // probs[h][i][j]
  std::vector<double> probs(heads * tq * tk);
  std::vector<double> value(tq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      double* p = probs.data() + (h * tq + i) * tk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < tk; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qd[i * d + c0 + c] * kd[j * d + c0 + c];
        p[j] = s * sc;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < tk; ++j) z += (p[j] = std::exp(p[j] - mx));
      for (std::size_t j = 0; j < tk; ++j) p[j] /= z;
      double* out = value.data() + i * d + c0;
      for (std::size_t j = 0; j < tk; ++j) {
        const double pj = p[j];
        const double* vr = vd + j * d + c0;
        for (std::size_t c = 0; c < dh; ++c) out[c] += pj * vr[c];
      }
    }
  }
  auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
  return make_result(
      {tq, d}, std::move(value), {q, k, v},
      [pq, pk, pv, probs = std::move(probs), heads, tq, tk, d, dh, sc](Node& self) {
        double* gq = grad_of(pq);
        double* gk = grad_of(pk);
        double* gv = grad_of(pv);
        const double* qd = pq->value.data();
        const double* kd = pk->value.data();
        const double* vd = pv->value.data();
        std::vector<double> ds(tk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t i = 0; i < tq; ++i) {
            const double* p = probs.data() + (h * tq + i) * tk;
            const double* dout = self.grad.data() + i * d + c0;
            double dot = 0.0;
            for (std::size_t j = 0; j < tk; ++j) {
              double dp = 0.0;
              const double* vr = vd + j * d + c0;
              for (std::size_t c = 0; c < dh; ++c) dp += dout[c] * vr[c];
              ds[j] = dp;
              dot += dp * p[j];
              if (gv) {
                double* gvr = gv + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gvr[c] += p[j] * dout[c];
              }
            }
            for (std::size_t j = 0; j < tk; ++j) {
              const double dsj = p[j] * (ds[j] - dot) * sc;
              if (dsj == 0.0) continue;
              if (gq) {
                for (std::size_t c = 0; c < dh; ++c) gq[i * d + c0 + c] += dsj * kd[j * d + c0 + c];
              }
              if (gk) {
                for (std::size_t c = 0; c < dh; ++c) gk[j * d + c0 + c] += dsj * qd[i * d + c0 + c];
              }
            }
          }
        }
      });
}

Tensor deformable_sample(const Tensor& value, const std::vector<LevelShape>& levels, const Tensor& loc,
                         const Tensor& weights, std::size_t heads) {
  expect_rank(value, 2, "deformable_sample value");
  const std::size_t d = value.dim(1);
  if (heads == 0 || d % heads != 0) throw ShapeError("deformable_sample: heads must divide D");
  if (levels.empty()) throw ShapeError("deformable_sample: missing level grid metadata");
  for (const auto& lv : levels) {
    if (lv.rows == 0 || lv.cols == 0 || lv.start + lv.rows * lv.cols > value.dim(0)) {
      throw ShapeError("deformable_sample: level grid does not fit the value rows");
    }
  }
  if (loc.rank() != 5 || loc.dim(1) != heads || loc.dim(2) != levels.size() || loc.dim(4) != 2) {
    throw ShapeError("deformable_sample: bad location shape " + shape_str(loc.shape()));
  }
  const std::size_t tq = loc.dim(0), nl = levels.size(), np = loc.dim(3);
  if (weights.shape() != Shape{tq, heads, nl, np}) {
    throw ShapeError("deformable_sample: bad weight shape " + shape_str(weights.shape()));
  }
  const std::size_t dh = d / heads;
  const double* vd = value.data().data();
  const double* ld = loc.data().data();
  const double* wd = weights.data().data();
  std::vector<double> out(tq * d, 0.0);

  struct Corner {
    long y, x;
    double w, dwdx, dwdy;
  };
  auto corners = [](double px, double py, std::size_t rows, std::size_t cols, auto&& fn) {
    const double fx = std::floor(px), fy = std::floor(py);
    const double ax = px - fx, ay = py - fy;
    const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
    const Corner cs[4] = {{y0, x0, (1 - ay) * (1 - ax), -(1 - ay), -(1 - ax)},
                          {y0, x0 + 1, (1 - ay) * ax, (1 - ay), -ax},
                          {y0 + 1, x0, ay * (1 - ax), -ay, (1 - ax)},
                          {y0 + 1, x0 + 1, ay * ax, ay, ax}};
    for (const auto& c : cs) {
      if (c.y < 0 || c.x < 0 || c.y >= static_cast<long>(rows) || c.x >= static_cast<long>(cols)) continue;
      fn(c);
    }
  };

  for (std::size_t q = 0; q < tq; ++q) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* o = out.data() + q * d + h * dh;
      for (std::size_t l = 0; l < nl; ++l) {
        const auto& lv = levels[l];
        for (std::size_t p = 0; p < np; ++p) {
          const std::size_t idx = ((q * heads + h) * nl + l) * np + p;
          const double aw = wd[idx];
          const double px = ld[idx * 2] * static_cast<double>(lv.cols) - 0.5;
          const double py = ld[idx * 2 + 1] * static_cast<double>(lv.rows) - 0.5;
          corners(px, py, lv.rows, lv.cols, [&](const Corner& c) {
            const double* vr = vd + (lv.start + static_cast<std::size_t>(c.y) * lv.cols +
                                     static_cast<std::size_t>(c.x)) * d + h * dh;
            const double s = aw * c.w;
            for (std::size_t k = 0; k < dh; ++k) o[k] += s * vr[k];
          });
        }
      }
    }
  }

  auto pv = value.ptr(), pl = loc.ptr(), pw = weights.ptr();
  return make_result(
      {tq, d}, std::move(out), {value, loc, weights},
      [pv, pl, pw, levels, heads, tq, nl, np, d, dh, corners](Node& self) {
        double* gv = grad_of(pv);
        double* gl = grad_of(pl);
        double* gw = grad_of(pw);
        const double* vd = pv->value.data();
        const double* ld = pl->value.data();
        const double* wd = pw->value.data();
        for (std::size_t q = 0; q < tq; ++q) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* go = self.grad.data() + q * d + h * dh;
            for (std::size_t l = 0; l < nl; ++l) {
              const auto& lv = levels[l];
              for (std::size_t p = 0; p < np; ++p) {
                const std::size_t idx = ((q * heads + h) * nl + l) * np + p;
                const double aw = wd[idx];
                const double px = ld[idx * 2] * static_cast<double>(lv.cols) - 0.5;
                const double py = ld[idx * 2 + 1] * static_cast<double>(lv.rows) - 0.5;
                double dsample = 0.0, dx = 0.0, dy = 0.0;
                corners(px, py, lv.rows, lv.cols, [&](const Corner& c) {
                  const std::size_t row = lv.start + static_cast<std::size_t>(c.y) * lv.cols +
                                          static_cast<std::size_t>(c.x);
                  const double* vr = vd + row * d + h * dh;
                  double gdotv = 0.0;
                  for (std::size_t k = 0; k < dh; ++k) gdotv += go[k] * vr[k];
                  dsample += c.w * gdotv;
                  dx += c.dwdx * gdotv;
                  dy += c.dwdy * gdotv;
                  if (gv) {
                    double* gvr = gv + row * d + h * dh;
                    const double s = aw * c.w;
                    for (std::size_t k = 0; k < dh; ++k) gvr[k] += s * go[k];
                  }
                });
                if (gw) gw[idx] += dsample;
                if (gl) {
                  gl[idx * 2] += aw * dx * static_cast<double>(lv.cols);
                  gl[idx * 2 + 1] += aw * dy * static_cast<double>(lv.rows);
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// convolution

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  expect_rank(x, 3, "conv2d input");
  expect_rank(w, 4, "conv2d weight");
  const std::size_t h = x.dim(0), wd_ = x.dim(1), cin = x.dim(2);
  const std::size_t k = w.dim(0), cout = w.dim(3);
  if (w.dim(1) != k || w.dim(2) != cin) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != cout) throw ShapeError("conv2d bias size mismatch");
  if (stride == 0 || h + 2 * pad < k || wd_ + 2 * pad < k) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (wd_ + 2 * pad - k) / stride + 1;
  std::vector<double> out(oh * ow * cout, 0.0);
  const double* xd = x.data().data();
  const double* wdat = w.data().data();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* orow = out.data() + (oy * ow + ox) * cout;
      if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), orow);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(wd_)) continue;
          const double* in = xd + (static_cast<std::size_t>(iy) * wd_ + static_cast<std::size_t>(ix)) * cin;
          const double* wk = wdat + (ky * k + kx) * cin * cout;
          for (std::size_t ic = 0; ic < cin; ++ic) {
            const double a = in[ic];
            if (a == 0.0) continue;
            const double* wr = wk + ic * cout;
            for (std::size_t oc = 0; oc < cout; ++oc) orow[oc] += a * wr[oc];
          }
        }
      }
    }
  }
  auto px = x.ptr(), pw = w.ptr();
  NodePtr pb = bias.defined() ? bias.ptr() : nullptr;
  return make_result({oh, ow, cout}, std::move(out), {x, w, bias},
                     [px, pw, pb, h, wd_, cin, k, cout, oh, ow, stride, pad](Node& self) {
                       double* gx = grad_of(px);
                       double* gw = grad_of(pw);
                       double* gb = grad_of(pb);
                       const double* xd = px->value.data();
                       const double* wdat = pw->value.data();
                       for (std::size_t oy = 0; oy < oh; ++oy) {
                         for (std::size_t ox = 0; ox < ow; ++ox) {
                           const double* go = self.grad.data() + (oy * ow + ox) * cout;
                           if (gb) {
                             for (std::size_t oc = 0; oc < cout; ++oc) gb[oc] += go[oc];
                           }
                           for (std::size_t ky = 0; ky < k; ++ky) {
                             const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                             if (iy < 0 || iy >= static_cast<long>(h)) continue;
                             for (std::size_t kx = 0; kx < k; ++kx) {
                               const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                               if (ix < 0 || ix >= static_cast<long>(wd_)) continue;
                               const std::size_t ioff =
                                   (static_cast<std::size_t>(iy) * wd_ + static_cast<std::size_t>(ix)) * cin;
                               const std::size_t woff = (ky * k + kx) * cin * cout;
                               for (std::size_t ic = 0; ic < cin; ++ic) {
                                 const double* wr = wdat + woff + ic * cout;
                                 if (gx) {
                                   double acc = 0.0;
                                   for (std::size_t oc = 0; oc < cout; ++oc) acc += go[oc] * wr[oc];
                                   gx[ioff + ic] += acc;
                                 }
                                 if (gw) {
                                   const double a = xd[ioff + ic];
                                   if (a == 0.0) continue;
                                   double* gwr = gw + woff + ic * cout;
                                   for (std::size_t oc = 0; oc < cout; ++oc) gwr[oc] += a * go[oc];
                                 }
                               }
                             }
                           }
                         }
                       }
                     });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t pad) {
  expect_rank(x, 3, "depthwise_conv2d input");
  expect_rank(w, 3, "depthwise_conv2d weight");
  const std::size_t h = x.dim(0), wd_ = x.dim(1), c = x.dim(2), k = w.dim(0);
  if (w.dim(1) != k || w.dim(2) != c) throw ShapeError("depthwise_conv2d weight mismatch");
  if (bias.defined() && bias.numel() != c) throw ShapeError("depthwise_conv2d bias mismatch");
  if (h + 2 * pad < k || wd_ + 2 * pad < k) throw ShapeError("depthwise_conv2d: kernel larger than input");
  const std::size_t oh = h + 2 * pad - k + 1, ow = wd_ + 2 * pad - k + 1;
  std::vector<double> out(oh * ow * c, 0.0);
  const double* xd = x.data().data();
  const double* wdat = w.data().data();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* orow = out.data() + (oy * ow + ox) * c;
      if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), orow);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(wd_)) continue;
          const double* in = xd + (static_cast<std::size_t>(iy) * wd_ + static_cast<std::size_t>(ix)) * c;
          const double* wr = wdat + (ky * k + kx) * c;
          for (std::size_t ch = 0; ch < c; ++ch) orow[ch] += in[ch] * wr[ch];
        }
      }
    }
  }
  auto px = x.ptr(), pw = w.ptr();
  NodePtr pb = bias.defined() ? bias.ptr() : nullptr;
  return make_result({oh, ow, c}, std::move(out), {x, w, bias},
                     [px, pw, pb, h, wd_, c, k, oh, ow, pad](Node& self) {
                       double* gx = grad_of(px);
                       double* gw = grad_of(pw);
                       double* gb = grad_of(pb);
                       const double* xd = px->value.data();
                       const double* wdat = pw->value.data();
                       for (std::size_t oy = 0; oy < oh; ++oy) {
                         for (std::size_t ox = 0; ox < ow; ++ox) {
                           const double* go = self.grad.data() + (oy * ow + ox) * c;
                           if (gb) {
                             for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += go[ch];
                           }
                           for (std::size_t ky = 0; ky < k; ++ky) {
                             const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
                             if (iy < 0 || iy >= static_cast<long>(h)) continue;
                             for (std::size_t kx = 0; kx < k; ++kx) {
                               const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
                               if (ix < 0 || ix >= static_cast<long>(wd_)) continue;
                               const std::size_t ioff =
                                   (static_cast<std::size_t>(iy) * wd_ + static_cast<std::size_t>(ix)) * c;
                               const std::size_t woff = (ky * k + kx) * c;
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                 if (gx) gx[ioff + ch] += go[ch] * wdat[woff + ch];
                                 if (gw) gw[woff + ch] += go[ch] * xd[ioff + ch];
                               }
                             }
                           }
                         }
                       }
                     });
}

Tensor conv_transpose2x2(const Tensor& x, const Tensor& w, const Tensor& bias) {
  expect_rank(x, 3, "conv_transpose2x2 input");
  expect_rank(w, 4, "conv_transpose2x2 weight");
  const std::size_t h = x.dim(0), wd_ = x.dim(1), cin = x.dim(2), cout = w.dim(3);
  if (w.dim(0) != 2 || w.dim(1) != 2 || w.dim(2) != cin) throw ShapeError("conv_transpose2x2 weight mismatch");
  if (bias.defined() && bias.numel() != cout) throw ShapeError("conv_transpose2x2 bias mismatch");
  const std::size_t oh = 2 * h, ow = 2 * wd_;
  std::vector<double> out(oh * ow * cout, 0.0);
  const double* xd = x.data().data();
  const double* wdat = w.data().data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < wd_; ++xx) {
      const double* in = xd + (y * wd_ + xx) * cin;
      for (std::size_t dy = 0; dy < 2; ++dy) {
        for (std::size_t dx = 0; dx < 2; ++dx) {
          double* orow = out.data() + ((2 * y + dy) * ow + 2 * xx + dx) * cout;
          if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), orow);
          const double* wk = wdat + (dy * 2 + dx) * cin * cout;
          for (std::size_t ic = 0; ic < cin; ++ic) {
            const double a = in[ic];
            if (a == 0.0) continue;
            const double* wr = wk + ic * cout;
            for (std::size_t oc = 0; oc < cout; ++oc) orow[oc] += a * wr[oc];
          }
        }
      }
    }
  }
  auto px = x.ptr(), pw = w.ptr();
  NodePtr pb = bias.defined() ? bias.ptr() : nullptr;
  return make_result({oh, ow, cout}, std::move(out), {x, w, bias},
                     [px, pw, pb, h, wd_, cin, cout, ow](Node& self) {
                       double* gx = grad_of(px);
                       double* gw = grad_of(pw);
                       double* gb = grad_of(pb);
                       const double* xd = px->value.data();
                       const double* wdat = pw->value.data();
                       for (std::size_t y = 0; y < h; ++y) {
                         for (std::size_t xx = 0; xx < wd_; ++xx) {
                           const std::size_t ioff = (y * wd_ + xx) * cin;
                           for (std::size_t dy = 0; dy < 2; ++dy) {
                             for (std::size_t dx = 0; dx < 2; ++dx) {
                               const double* go = self.grad.data() + ((2 * y + dy) * ow + 2 * xx + dx) * cout;
                               if (gb) {
                                 for (std::size_t oc = 0; oc < cout; ++oc) gb[oc] += go[oc];
                               }
                               const std::size_t woff = (dy * 2 + dx) * cin * cout;
                               for (std::size_t ic = 0; ic < cin; ++ic) {
                                 const double* wr = wdat + woff + ic * cout;
                                 if (gx) {
                                   double acc = 0.0;
                                   for (std::size_t oc = 0; oc < cout; ++oc) acc += go[oc] * wr[oc];
                                   gx[ioff + ic] += acc;
                                 }
                                 if (gw) {
                                   const double a = xd[ioff + ic];
                                   double* gwr = gw + woff + ic * cout;
                                   for (std::size_t oc = 0; oc < cout; ++oc) gwr[oc] += a * go[oc];
                                 }
                               }
                             }
                           }
                         }
                       }
                     });
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w0, w1;
};

// Half-pixel-center source taps for one output axis.
std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double sc = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * sc - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, std::size_t oh, std::size_t ow) {
  expect_rank(x, 3, "resize_bilinear");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h == 0 || w == 0 || oh == 0 || ow == 0) throw ShapeError("resize_bilinear: empty extent");
  auto ty = bilinear_taps(h, oh), tx = bilinear_taps(w, ow);
  std::vector<double> out(oh * ow * c, 0.0);
  const double* xd = x.data().data();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* o = out.data() + (oy * ow + ox) * c;
      const std::pair<std::size_t, double> ys[2] = {{ty[oy].i0, ty[oy].w0}, {ty[oy].i1, ty[oy].w1}};
      const std::pair<std::size_t, double> xs[2] = {{tx[ox].i0, tx[ox].w0}, {tx[ox].i1, tx[ox].w1}};
      for (const auto& [iy, wy] : ys) {
        for (const auto& [ix, wx] : xs) {
          const double s = wy * wx;
          if (s == 0.0) continue;
          const double* in = xd + (iy * w + ix) * c;
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] += s * in[ch];
        }
      }
    }
  }
  auto px = x.ptr();
  return make_result({oh, ow, c}, std::move(out), {x}, [px, ty, tx, w, c, oh, ow](Node& self) {
    double* g = grad_of(px);
    if (!g) return;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double* go = self.grad.data() + (oy * ow + ox) * c;
        const std::pair<std::size_t, double> ys[2] = {{ty[oy].i0, ty[oy].w0}, {ty[oy].i1, ty[oy].w1}};
        const std::pair<std::size_t, double> xs[2] = {{tx[ox].i0, tx[ox].w0}, {tx[ox].i1, tx[ox].w1}};
        for (const auto& [iy, wy] : ys) {
          for (const auto& [ix, wx] : xs) {
            const double s = wy * wx;
            if (s == 0.0) continue;
            double* gi = g + (iy * w + ix) * c;
            for (std::size_t ch = 0; ch < c; ++ch) gi[ch] += s * go[ch];
          }
        }
      }
    }
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  expect_rank(x, 3, "upsample_nearest2x");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::vector<double> out(4 * h * w * c);
  const double* xd = x.data().data();
  for (std::size_t oy = 0; oy < 2 * h; ++oy)
    for (std::size_t ox = 0; ox < 2 * w; ++ox)
      std::copy_n(xd + ((oy / 2) * w + ox / 2) * c, c, out.data() + (oy * 2 * w + ox) * c);
  auto px = x.ptr();
  return make_result({2 * h, 2 * w, c}, std::move(out), {x}, [px, h, w, c](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t oy = 0; oy < 2 * h; ++oy)
        for (std::size_t ox = 0; ox < 2 * w; ++ox)
          for (std::size_t ch = 0; ch < c; ++ch)
            g[((oy / 2) * w + ox / 2) * c + ch] += self.grad[(oy * 2 * w + ox) * c + ch];
    }
  });
}

Tensor flip_horizontal(const Tensor& x) {
  expect_rank(x, 3, "flip_horizontal");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::vector<double> out(x.numel());
  const double* xd = x.data().data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      std::copy_n(xd + (y * w + xx) * c, c, out.data() + (y * w + (w - 1 - xx)) * c);
  auto px = x.ptr();
  return make_result(x.shape(), std::move(out), {x}, [px, h, w, c](Node& self) {
    if (double* g = grad_of(px)) {
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          for (std::size_t ch = 0; ch < c; ++ch)
            g[(y * w + xx) * c + ch] += self.grad[(y * w + (w - 1 - xx)) * c + ch];
    }
  });
}

// ---------------------------------------------------------------------------
// losses

Tensor sigmoid_bce_mean(const Tensor& logits, std::span<const double> target) {
  if (target.size() != logits.numel()) throw ShapeError("sigmoid_bce_mean: target size mismatch");
  if (logits.numel() == 0) throw ShapeError("sigmoid_bce_mean: empty input");
  const double n = static_cast<double>(logits.numel());
  const auto z = logits.data();
  double acc = 0.0;
  // -[g log s(z) + (1-g) log(1-s(z))] = softplus(z) - g z
  for (std::size_t i = 0; i < z.size(); ++i) acc += softplus(z[i]) - target[i] * z[i];
  std::vector<double> tgt(target.begin(), target.end());
  auto pz = logits.ptr();
  return make_result({1}, {acc / n}, {logits}, [pz, tgt = std::move(tgt), n](Node& self) {
    if (double* g = grad_of(pz)) {
      const double s = self.grad[0] / n;
      for (std::size_t i = 0; i < tgt.size(); ++i) g[i] += s * (stable_sigmoid(pz->value[i]) - tgt[i]);
    }
  });
}

Tensor dice_loss(const Tensor& prob, std::span<const double> target, double eps) {
  if (target.size() != prob.numel()) throw ShapeError("dice_loss: target size mismatch");
  const auto p = prob.data();
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * target[i];
    sp += p[i];
    sg += target[i];
  }
  const double num = 2.0 * inter + eps;
  const double den = sp + sg + eps;
  std::vector<double> tgt(target.begin(), target.end());
  auto pp = prob.ptr();
  return make_result({1}, {1.0 - num / den}, {prob}, [pp, tgt = std::move(tgt), num, den](Node& self) {
    if (double* g = grad_of(pp)) {
      // d/dp_i [1 - num/den] = -(2 g_i den - num) / den^2
      const double s = self.grad[0];
      for (std::size_t i = 0; i < tgt.size(); ++i) g[i] += s * -(2.0 * tgt[i] * den - num) / (den * den);
    }
  });
}

Tensor weighted_cross_entropy(const Tensor& logits, std::span<const int> target,
                              std::span<const double> row_weight) {
  expect_rank(logits, 2, "weighted_cross_entropy");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (target.size() != rows || row_weight.size() != rows) {
    throw ShapeError("weighted_cross_entropy: target/weight size mismatch");
  }
  const double* z = logits.data().data();
  std::vector<double> probs(rows * k);
  double wsum = 0.0, acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = z + r * k;
    double* pr = probs.data() + r * k;
    const double m = *std::max_element(zr, zr + k);
    double zsum = 0.0;
    for (std::size_t j = 0; j < k; ++j) zsum += (pr[j] = std::exp(zr[j] - m));
    for (std::size_t j = 0; j < k; ++j) pr[j] /= zsum;
    const int t = target[r];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= k) {
      throw std::out_of_range("weighted_cross_entropy: class index " + std::to_string(t) + " >= " +
                              std::to_string(k));
    }
    const double lse = m + std::log(zsum);
    acc += row_weight[r] * (lse - zr[t]);
    wsum += row_weight[r];
  }
  const double value = wsum > 0 ? acc / wsum : 0.0;
  std::vector<int> tgt(target.begin(), target.end());
  std::vector<double> wts(row_weight.begin(), row_weight.end());
  auto pz = logits.ptr();
  return make_result({1}, {value}, {logits},
                     [pz, probs = std::move(probs), tgt = std::move(tgt), wts = std::move(wts), wsum, rows,
                      k](Node& self) {
                       double* g = grad_of(pz);
                       if (!g || wsum <= 0) return;
                       const double s = self.grad[0] / wsum;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (tgt[r] < 0) continue;
                         const double wr = s * wts[r];
                         for (std::size_t j = 0; j < k; ++j) {
                           g[r * k + j] += wr * (probs[r * k + j] - (static_cast<int>(j) == tgt[r] ? 1.0 : 0.0));
                         }
                       }
                     });
}

}  // namespace hapnet::ag
