#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 tensors.
//
// Tensors are row-major. Feature maps use the HWC layout, so a map of shape
// {H, W, C} and a token matrix of shape {H*W, C} share the same memory order
// and flattening is a pure reshape.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hapnet::ag {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Writes bypass the graph; only meant for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  Tensor detach() const;
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Seeds d(loss)/d(loss) = 1 and propagates through the recorded graph.
void backward(const Tensor& loss);

// --- shape ops -------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
// Selects columns [begin, end) of a 2-D tensor.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor transpose(const Tensor& x);

// --- elementwise -------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
// x * s where s is a one-element tensor (learnable scalar gates).
Tensor scale_by(const Tensor& x, const Tensor& s);
// Adds b (length = last dim of x) to every row.
Tensor add_row_vector(const Tensor& x, const Tensor& b);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Softmax over the last dimension.
Tensor softmax(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// --- linear algebra -----------------------------------------------------------
// a[M,K] @ b[K,N]
Tensor matmul(const Tensor& a, const Tensor& b);
// a[M,K] @ b[N,K]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x[T,in] @ w[in,out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
// Normalizes every row of x[T,C] over C, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Multi-head scaled dot-product attention on already-projected inputs:
// q[Tq,D], k[Tk,D], v[Tk,D], heads | D. Scores are scaled by 1/sqrt(D/heads).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

struct LevelShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t start = 0;  // first token row of this level in the value matrix
};

// Multi-scale deformable sampling core. value[Tk,D] holds all levels stacked
// by rows; loc[Tq, heads, L, P, 2] holds normalized (x, y) sampling points;
// weights[Tq, heads, L, P] are the (already normalized) sample weights.
// Bilinear interpolation with pixel centers at (i+0.5)/size and zero padding.
Tensor deformable_sample(const Tensor& value, const std::vector<LevelShape>& levels,
                         const Tensor& loc, const Tensor& weights, std::size_t heads);

// --- convolution on HWC maps ------------------------------------------------
// x[H,W,Cin], w[k,k,Cin,Cout], bias[Cout] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad);
// x[H,W,C], w[k,k,C], stride 1.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t pad);
// 2x2 kernel, stride 2: x[H,W,Cin], w[2,2,Cin,Cout] -> [2H,2W,Cout].
Tensor conv_transpose2x2(const Tensor& x, const Tensor& w, const Tensor& bias);
// Half-pixel-center bilinear resize of x[H,W,C] to [oh,ow,C].
Tensor resize_bilinear(const Tensor& x, std::size_t oh, std::size_t ow);
Tensor upsample_nearest2x(const Tensor& x);
// Mirror along the width axis of x[H,W,C].
Tensor flip_horizontal(const Tensor& x);

// --- losses -------------------------------------------------------------------
// Mean over elements of the numerically stable sigmoid cross-entropy.
Tensor sigmoid_bce_mean(const Tensor& logits, std::span<const double> target);
// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps).
Tensor dice_loss(const Tensor& prob, std::span<const double> target, double eps = 1.0);
// Cross-entropy of logits[R,K] rows against integer targets, each row
// weighted; returns sum(w_r * ce_r) / sum(w_r). Rows with target < 0 are
// skipped. Returns 0 (with zero gradient) when the weight sum is zero.
Tensor weighted_cross_entropy(const Tensor& logits, std::span<const int> target,
                              std::span<const double> row_weight);

}  // namespace hapnet::ag
