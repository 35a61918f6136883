#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a graph node. Leaves are either constants or
// parameters (requires_grad). Every op below records a backward closure
// unless all of its inputs are constants or a NoGradGuard is active, so
// inference never builds a graph.

#include <functional>
#include <memory>
#include <vector>

#include "tirgan/tensor.hpp"

namespace tirgan::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Adds g into grad, allocating it on first use.
  void accumulate(std::span<const double> g);
  std::span<double> grad_buffer();
};

class Var {
 public:
  Var() = default;
  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  double item() const;

  // Seeds d(self)/d(self) = 1 for a scalar and propagates to all ancestors.
  void backward() const;
  void zero_grad();
  Var detach() const { return constant(value()); }

  const std::shared_ptr<Node>& node() const { return node_; }
  static Var from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Convolutions use (N, C, H, W) inputs. conv2d weights are (Cout, Cin, k, k);
// conv_transpose2d weights are (Cin, Cout, k, k). `bias` may be undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride,
           int padding);
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias,
                     int stride, int padding, int output_padding);
std::size_t conv_output_size(std::size_t in, int kernel, int stride,
                             int padding);

Var reflect_pad(const Var& x, int pad);
Var instance_norm(const Var& x, double eps = 1e-5);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var tanh(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var concat_channels(const Var& a, const Var& b);
Var replicate_channels(const Var& x, std::size_t copies);
// y[:, c] = x[:, c] * scales[c] + shifts[c]
Var channel_affine(const Var& x, std::vector<double> scales,
                   std::vector<double> shifts);
Var avg_pool2(const Var& x);
Var max_pool2(const Var& x);

// Scalar reductions. Results have shape (1).
Var sum(const Var& x);
Var mean(const Var& x);
Var mean_abs_diff(const Var& a, const Var& b);
Var mean_sq_diff(const Var& a, const Var& b);
Var mean_sq_offset(const Var& x, double target);
// mean over elements of max(log sigmoid(sign * x), log(floor))
Var mean_log_sigmoid(const Var& x, double sign, double floor);
// Anisotropic L1 total variation normalized by C*H*W, averaged over batch.
Var total_variation(const Var& x);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& x) { return scale(x, s); }

}  // namespace tirgan::ag
