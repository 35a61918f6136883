#include "tirgan/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace tirgan::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Var make_op(Tensor value, std::vector<Var> inputs,
            std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Var& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(in.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var::from_node(std::move(node));
}

bool wants_grad(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

void require_rank4(const Var& x, const char* op) {
  if (x.value().rank() != 4) {
    throw ShapeError(std::string(op) + " expects (N, C, H, W) input, got " +
                     shape_str(x.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

Tensor scalar_tensor(double v) { return Tensor({1}, std::vector<double>{v}); }

// Column buffer layout: row (c * k + ki) * k + kj, column oh * wo + ow.
void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w,
            int k, int stride, int pad, std::size_t ho, std::size_t wo,
            double* col) {
  const auto ih_max = static_cast<long>(h);
  const auto iw_max = static_cast<long>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = x + c * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = col + ((c * k + ki) * k + kj) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const long ih = static_cast<long>(oh) * stride - pad + ki;
          double* dst = row + oh * wo;
          if (ih < 0 || ih >= ih_max) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = plane + ih * iw_max;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const long iw = static_cast<long>(ow) * stride - pad + kj;
            dst[ow] = (iw < 0 || iw >= iw_max) ? 0.0 : src[iw];
          }
        }
      }
    }
  }
}

void col2im(const double* col, std::size_t channels, std::size_t h,
            std::size_t w, int k, int stride, int pad, std::size_t ho,
            std::size_t wo, double* x) {
  const auto ih_max = static_cast<long>(h);
  const auto iw_max = static_cast<long>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = x + c * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row = col + ((c * k + ki) * k + kj) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const long ih = static_cast<long>(oh) * stride - pad + ki;
          if (ih < 0 || ih >= ih_max) continue;
          const double* src = row + oh * wo;
          double* dst = plane + ih * iw_max;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const long iw = static_cast<long>(ow) * stride - pad + kj;
            if (iw >= 0 && iw < iw_max) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

long reflect_index(long i, long n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

template <typename F, typename G>
Var unary_elementwise(const Var& x, F f, G df) {
  Tensor out(x.shape());
  const auto& in = x.value().vec();
  auto& o = out.vec();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return make_op(std::move(out), {x}, [df](Node& self) {
    auto& p = self.parents[0];
    const auto& in = p->value.vec();
    const auto& y = self.value.vec();
    const auto& g = self.grad.vec();
    auto dx = p->grad_buffer();
    for (std::size_t i = 0; i < in.size(); ++i) dx[i] += g[i] * df(in[i], y[i]);
  });
}

}  // namespace

void Node::accumulate(std::span<const double> g) {
  auto buf = grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

std::span<double> Node::grad_buffer() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad.data();
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return from_node(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return from_node(std::move(node));
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

double Var::item() const {
  if (value().numel() != 1) {
    throw ShapeError("item() on non-scalar " + shape_str(shape()));
  }
  return value()[0];
}

void Var::backward() const {
  if (value().numel() != 1) {
    throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p && p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.shape() == n->value.shape()) n->backward_fn(*n);
  }
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

std::size_t conv_output_size(std::size_t in, int kernel, int stride,
                             int padding) {
  const long span = static_cast<long>(in) + 2L * padding - kernel;
  if (span < 0) return 0;
  return static_cast<std::size_t>(span / stride + 1);
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride,
           int padding) {
  require_rank4(x, "conv2d");
  const auto& ws = weight.shape();
  const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  if (ws.size() != 4 || ws[1] != cin || ws[2] != ws[3]) {
    throw ShapeError("conv2d weight " + shape_str(ws) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  const std::size_t cout = ws[0];
  const int k = static_cast<int>(ws[2]);
  const std::size_t ho = conv_output_size(h, k, stride, padding);
  const std::size_t wo = conv_output_size(w, k, stride, padding);
  if (ho == 0 || wo == 0) {
    throw ShapeError("conv2d input " + shape_str(x.shape()) +
                     " too small for kernel " + std::to_string(k));
  }
  const std::size_t ckk = cin * k * k, hw_out = ho * wo;

  std::vector<double> cols(n * ckk * hw_out);
  Tensor out({n, cout, ho, wo});
  CMapMat wm(weight.value().vec().data(), static_cast<long>(cout),
             static_cast<long>(ckk));
  for (std::size_t i = 0; i < n; ++i) {
    double* col = cols.data() + i * ckk * hw_out;
    im2col(x.value().vec().data() + i * cin * h * w, cin, h, w, k, stride,
           padding, ho, wo, col);
    MapMat o(out.vec().data() + i * cout * hw_out, static_cast<long>(cout),
             static_cast<long>(hw_out));
    o.noalias() = wm * CMapMat(col, static_cast<long>(ckk), static_cast<long>(hw_out));
  }
  if (bias.defined()) {
    if (bias.value().numel() != cout) throw ShapeError("conv2d bias size mismatch");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < cout; ++c) {
        double* o = out.vec().data() + (i * cout + c) * hw_out;
        const double b = bias.value()[c];
        for (std::size_t j = 0; j < hw_out; ++j) o[j] += b;
      }
  }

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op(
      std::move(out), std::move(inputs),
      [cols = std::move(cols), n, cin, h, w, cout, k, stride, padding, ho, wo,
       ckk, hw_out](Node& self) {
        auto& xn = self.parents[0];
        auto& wn = self.parents[1];
        const double* g = self.grad.vec().data();
        CMapMat wm(wn->value.vec().data(), static_cast<long>(cout),
                   static_cast<long>(ckk));
        if (wants_grad(wn)) {
          MapMat gw(wn->grad_buffer().data(), static_cast<long>(cout),
                    static_cast<long>(ckk));
          for (std::size_t i = 0; i < n; ++i) {
            gw.noalias() +=
                CMapMat(g + i * cout * hw_out, static_cast<long>(cout),
                        static_cast<long>(hw_out)) *
                CMapMat(cols.data() + i * ckk * hw_out, static_cast<long>(ckk),
                        static_cast<long>(hw_out))
                    .transpose();
          }
        }
        if (self.parents.size() > 2 && wants_grad(self.parents[2])) {
          auto gb = self.parents[2]->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < cout; ++c) {
              const double* gp = g + (i * cout + c) * hw_out;
              double s = 0.0;
              for (std::size_t j = 0; j < hw_out; ++j) s += gp[j];
              gb[c] += s;
            }
        }
        if (wants_grad(xn)) {
          auto gx = xn->grad_buffer();
          RowMat dcol(static_cast<long>(ckk), static_cast<long>(hw_out));
          for (std::size_t i = 0; i < n; ++i) {
            dcol.noalias() = wm.transpose() *
                             CMapMat(g + i * cout * hw_out, static_cast<long>(cout),
                                     static_cast<long>(hw_out));
            col2im(dcol.data(), cin, h, w, k, stride, padding, ho, wo,
                   gx.data() + i * cin * h * w);
          }
        }
      });
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias,
                     int stride, int padding, int output_padding) {
  require_rank4(x, "conv_transpose2d");
  const auto& ws = weight.shape();
  const std::size_t n = x.shape()[0], cin = x.shape()[1], hi = x.shape()[2],
                    wi = x.shape()[3];
  if (ws.size() != 4 || ws[0] != cin || ws[2] != ws[3]) {
    throw ShapeError("conv_transpose2d weight " + shape_str(ws) +
                     " incompatible with input " + shape_str(x.shape()));
  }
  const std::size_t cout = ws[1];
  const int k = static_cast<int>(ws[2]);
  const long ho_l = (static_cast<long>(hi) - 1) * stride - 2L * padding + k + output_padding;
  const long wo_l = (static_cast<long>(wi) - 1) * stride - 2L * padding + k + output_padding;
  if (ho_l <= 0 || wo_l <= 0) throw ShapeError("conv_transpose2d output is empty");
  const auto ho = static_cast<std::size_t>(ho_l), wo = static_cast<std::size_t>(wo_l);
  const std::size_t ckk = cout * k * k, hw_in = hi * wi, hw_out = ho * wo;

  Tensor out({n, cout, ho, wo});
  CMapMat wm(weight.value().vec().data(), static_cast<long>(cin),
             static_cast<long>(ckk));
  RowMat col(static_cast<long>(ckk), static_cast<long>(hw_in));
  for (std::size_t i = 0; i < n; ++i) {
    col.noalias() = wm.transpose() * CMapMat(x.value().vec().data() + i * cin * hw_in,
                                             static_cast<long>(cin),
                                             static_cast<long>(hw_in));
    col2im(col.data(), cout, ho, wo, k, stride, padding, hi, wi,
           out.vec().data() + i * cout * hw_out);
  }
  if (bias.defined()) {
    if (bias.value().numel() != cout) throw ShapeError("conv_transpose2d bias size mismatch");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < cout; ++c) {
        double* o = out.vec().data() + (i * cout + c) * hw_out;
        const double b = bias.value()[c];
        for (std::size_t j = 0; j < hw_out; ++j) o[j] += b;
      }
  }

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op(
      std::move(out), std::move(inputs),
      [n, cin, hi, wi, cout, k, stride, padding, ho, wo, ckk, hw_in,
       hw_out](Node& self) {
        auto& xn = self.parents[0];
        auto& wn = self.parents[1];
        const double* g = self.grad.vec().data();
        RowMat gcol(static_cast<long>(ckk), static_cast<long>(hw_in));
        CMapMat wm(wn->value.vec().data(), static_cast<long>(cin),
                   static_cast<long>(ckk));
        const bool gx_needed = wants_grad(xn), gw_needed = wants_grad(wn);
        for (std::size_t i = 0; i < n; ++i) {
          im2col(g + i * cout * hw_out, cout, ho, wo, k, stride, padding, hi, wi,
                 gcol.data());
          if (gw_needed) {
            MapMat gw(wn->grad_buffer().data(), static_cast<long>(cin),
                      static_cast<long>(ckk));
            gw.noalias() += CMapMat(xn->value.vec().data() + i * cin * hw_in,
                                    static_cast<long>(cin), static_cast<long>(hw_in)) *
                            gcol.transpose();
          }
          if (gx_needed) {
            MapMat gx(xn->grad_buffer().data() + i * cin * hw_in,
                      static_cast<long>(cin), static_cast<long>(hw_in));
            gx.noalias() += wm * gcol;
          }
        }
        if (self.parents.size() > 2 && wants_grad(self.parents[2])) {
          auto gb = self.parents[2]->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < cout; ++c) {
              const double* gp = g + (i * cout + c) * hw_out;
              double s = 0.0;
              for (std::size_t j = 0; j < hw_out; ++j) s += gp[j];
              gb[c] += s;
            }
        }
      });
}

Var reflect_pad(const Var& x, int pad) {
  require_rank4(x, "reflect_pad");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  if (pad < 0 || static_cast<std::size_t>(pad) >= h ||
      static_cast<std::size_t>(pad) >= w) {
    throw ShapeError("reflect_pad " + std::to_string(pad) + " invalid for " +
                     shape_str(x.shape()));
  }
  const std::size_t ho = h + 2 * pad, wo = w + 2 * pad;
  // Source index for every output element, shared by forward and backward.
  std::vector<std::size_t> src(ho * wo);
  for (std::size_t i = 0; i < ho; ++i)
    for (std::size_t j = 0; j < wo; ++j) {
      const long si = reflect_index(static_cast<long>(i) - pad, static_cast<long>(h));
      const long sj = reflect_index(static_cast<long>(j) - pad, static_cast<long>(w));
      src[i * wo + j] = static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj);
    }
  Tensor out({n, c, ho, wo});
  const double* in = x.value().vec().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    double* o = out.vec().data() + p * ho * wo;
    const double* s = in + p * h * w;
    for (std::size_t q = 0; q < ho * wo; ++q) o[q] = s[src[q]];
  }
  return make_op(std::move(out), {x},
                 [src = std::move(src), n, c, h, w, ho, wo](Node& self) {
                   auto gx = self.parents[0]->grad_buffer();
                   const double* g = self.grad.vec().data();
                   for (std::size_t p = 0; p < n * c; ++p) {
                     const double* gp = g + p * ho * wo;
                     double* d = gx.data() + p * h * w;
                     for (std::size_t q = 0; q < ho * wo; ++q) d[src[q]] += gp[q];
                   }
                 });
}

Var instance_norm(const Var& x, double eps) {
  require_rank4(x, "instance_norm");
  const std::size_t planes = x.shape()[0] * x.shape()[1];
  const std::size_t m = x.shape()[2] * x.shape()[3];
  Tensor out(x.shape());
  std::vector<double> inv_std(planes);
  const double* in = x.value().vec().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* s = in + p * m;
    double mu = 0.0;
    for (std::size_t i = 0; i < m; ++i) mu += s[i];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += (s[i] - mu) * (s[i] - mu);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[p] = is;
    double* o = out.vec().data() + p * m;
    for (std::size_t i = 0; i < m; ++i) o[i] = (s[i] - mu) * is;
  }
  return make_op(std::move(out), {x}, [inv_std = std::move(inv_std), planes, m](Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    const double* g = self.grad.vec().data();
    const double* y = self.value.vec().data();
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t p = 0; p < planes; ++p) {
      const double* gp = g + p * m;
      const double* yp = y + p * m;
      double mg = 0.0, mgy = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        mg += gp[i];
        mgy += gp[i] * yp[i];
      }
      mg *= inv_m;
      mgy *= inv_m;
      double* d = gx.data() + p * m;
      for (std::size_t i = 0; i < m; ++i) d[i] += inv_std[p] * (gp[i] - mg - yp[i] * mgy);
    }
  });
}

Var relu(const Var& x) {
  return unary_elementwise(
      x, [](double v) { return v < 0.0 ? 0.0 : v; },  // NaN passes through
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
  return unary_elementwise(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var tanh(const Var& x) {
  return unary_elementwise(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k)
      if (wants_grad(self.parents[k])) self.parents[k]->accumulate(self.grad.data());
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (wants_grad(self.parents[0])) self.parents[0]->accumulate(self.grad.data());
    if (wants_grad(self.parents[1])) {
      auto gb = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = s * x.value()[i];
  return make_op(std::move(out), {x}, [s](Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * self.grad[i];
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw ShapeError("concat_channels mismatch: " + shape_str(sa) + " vs " +
                     shape_str(sb));
  }
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], m = sa[2] * sa[3];
  Tensor out({n, ca + cb, sa[2], sa[3]});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().vec().data() + i * ca * m, ca * m,
                out.vec().data() + i * (ca + cb) * m);
    std::copy_n(b.value().vec().data() + i * cb * m, cb * m,
                out.vec().data() + i * (ca + cb) * m + ca * m);
  }
  return make_op(std::move(out), {a, b}, [n, ca, cb, m](Node& self) {
    const double* g = self.grad.vec().data();
    if (wants_grad(self.parents[0])) {
      auto ga = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca * m; ++j) ga[i * ca * m + j] += g[i * (ca + cb) * m + j];
    }
    if (wants_grad(self.parents[1])) {
      auto gb = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb * m; ++j)
          gb[i * cb * m + j] += g[i * (ca + cb) * m + ca * m + j];
    }
  });
}

Var replicate_channels(const Var& x, std::size_t copies) {
  require_rank4(x, "replicate_channels");
  const std::size_t n = x.shape()[0], c = x.shape()[1], m = x.shape()[2] * x.shape()[3];
  Tensor out({n, c * copies, x.shape()[2], x.shape()[3]});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < copies; ++r)
      std::copy_n(x.value().vec().data() + i * c * m, c * m,
                  out.vec().data() + (i * copies + r) * c * m);
  return make_op(std::move(out), {x}, [n, c, m, copies](Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    const double* g = self.grad.vec().data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < copies; ++r)
        for (std::size_t j = 0; j < c * m; ++j)
          gx[i * c * m + j] += g[(i * copies + r) * c * m + j];
  });
}

Var channel_affine(const Var& x, std::vector<double> scales,
                   std::vector<double> shifts) {
  require_rank4(x, "channel_affine");
  const std::size_t n = x.shape()[0], c = x.shape()[1], m = x.shape()[2] * x.shape()[3];
  if (scales.size() != c || shifts.size() != c) {
    throw ShapeError("channel_affine expects " + std::to_string(c) + " coefficients");
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t idx = (i * c + ch) * m + j;
        out[idx] = x.value()[idx] * scales[ch] + shifts[ch];
      }
  return make_op(std::move(out), {x}, [scales = std::move(scales), n, c, m](Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t idx = (i * c + ch) * m + j;
          gx[idx] += self.grad[idx] * scales[ch];
        }
  });
}

Var avg_pool2(const Var& x) {
  require_rank4(x, "avg_pool2");
  const std::size_t planes = x.shape()[0] * x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  if (h % 2 || w % 2) throw ShapeError("avg_pool2 needs even spatial size, got " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out({x.shape()[0], x.shape()[1], ho, wo});
  const double* in = x.value().vec().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        const double* s = in + p * h * w + 2 * i * w + 2 * j;
        out[(p * ho + i) * wo + j] = 0.25 * (s[0] + s[1] + s[w] + s[w + 1]);
      }
  return make_op(std::move(out), {x}, [planes, h, w, ho, wo](Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          const double g = 0.25 * self.grad[(p * ho + i) * wo + j];
          double* d = gx.data() + p * h * w + 2 * i * w + 2 * j;
          d[0] += g;
          d[1] += g;
          d[w] += g;
          d[w + 1] += g;
        }
  });
}

Var max_pool2(const Var& x) {
  require_rank4(x, "max_pool2");
  const std::size_t planes = x.shape()[0] * x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  const std::size_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw ShapeError("max_pool2 input too small: " + shape_str(x.shape()));
  Tensor out({x.shape()[0], x.shape()[1], ho, wo});
  std::vector<std::size_t> arg(out.numel());
  const double* in = x.value().vec().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = p * h * w + 2 * i * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (p * ho + i) * wo + j;
        out[o] = in[best];
        arg[o] = best;
      }
  return make_op(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += self.grad[o];
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().vec()) s += v;
  return make_op(scalar_tensor(s), {x}, [](Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    const double g = self.grad[0];
    for (double& d : gx) d += g;
  });
}

Var mean(const Var& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().numel()));
}

Var mean_abs_diff(const Var& a, const Var& b) {
  require_same_shape(a, b, "mean_abs_diff");
  const auto& av = a.value().vec();
  const auto& bv = b.value().vec();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  const double inv = 1.0 / static_cast<double>(av.size());
  return make_op(scalar_tensor(s * inv), {a, b}, [inv](Node& self) {
    const auto& av = self.parents[0]->value.vec();
    const auto& bv = self.parents[1]->value.vec();
    const double g = self.grad[0] * inv;
    auto sign = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
    if (wants_grad(self.parents[0])) {
      auto ga = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * sign(av[i] - bv[i]);
    }
    if (wants_grad(self.parents[1])) {
      auto gb = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * sign(av[i] - bv[i]);
    }
  });
}

Var mean_sq_diff(const Var& a, const Var& b) {
  require_same_shape(a, b, "mean_sq_diff");
  const auto& av = a.value().vec();
  const auto& bv = b.value().vec();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const double inv = 1.0 / static_cast<double>(av.size());
  return make_op(scalar_tensor(s * inv), {a, b}, [inv](Node& self) {
    const auto& av = self.parents[0]->value.vec();
    const auto& bv = self.parents[1]->value.vec();
    const double g = 2.0 * self.grad[0] * inv;
    if (wants_grad(self.parents[0])) {
      auto ga = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (av[i] - bv[i]);
    }
    if (wants_grad(self.parents[1])) {
      auto gb = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
    }
  });
}

Var mean_sq_offset(const Var& x, double target) {
  const auto& xv = x.value().vec();
  double s = 0.0;
  for (double v : xv) s += (v - target) * (v - target);
  const double inv = 1.0 / static_cast<double>(xv.size());
  return make_op(scalar_tensor(s * inv), {x}, [inv, target](Node& self) {
    const auto& xv = self.parents[0]->value.vec();
    auto gx = self.parents[0]->grad_buffer();
    const double g = 2.0 * self.grad[0] * inv;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g * (xv[i] - target);
  });
}

Var mean_log_sigmoid(const Var& x, double sign, double floor) {
  const double log_floor = std::log(floor);
  const auto& xv = x.value().vec();
  double s = 0.0;
  std::vector<double> dlog(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double z = sign * xv[i];
    // log sigmoid(z) = -softplus(-z)
    const double ls = -(std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))));
    if (ls < log_floor) {
      s += log_floor;
      dlog[i] = 0.0;
    } else {
      s += ls;
      // d/dx log sigmoid(sign x) = sign * sigmoid(-sign x)
      dlog[i] = sign / (1.0 + std::exp(z));
    }
  }
  const double inv = 1.0 / static_cast<double>(xv.size());
  return make_op(scalar_tensor(s * inv), {x}, [dlog = std::move(dlog), inv](Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    const double g = self.grad[0] * inv;
    for (std::size_t i = 0; i < dlog.size(); ++i) gx[i] += g * dlog[i];
  });
}

Var total_variation(const Var& x) {
  require_rank4(x, "total_variation");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  if (h < 2 || w < 2) {
    throw ShapeError("total_variation needs H >= 2 and W >= 2, got " +
                     shape_str(x.shape()));
  }
  const double norm = 1.0 / (static_cast<double>(c * h * w) * static_cast<double>(n));
  const double* in = x.value().vec().data();
  double s = 0.0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* q = in + p * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        if (j + 1 < w) s += std::abs(q[i * w + j + 1] - q[i * w + j]);
        if (i + 1 < h) s += std::abs(q[(i + 1) * w + j] - q[i * w + j]);
      }
  }
  return make_op(scalar_tensor(s * norm), {x}, [n, c, h, w, norm](Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    const double* in = self.parents[0]->value.vec().data();
    const double g = self.grad[0] * norm;
    auto sign = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
    for (std::size_t p = 0; p < n * c; ++p) {
      const double* q = in + p * h * w;
      double* d = gx.data() + p * h * w;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          if (j + 1 < w) {
            const double sg = g * sign(q[i * w + j + 1] - q[i * w + j]);
            d[i * w + j + 1] += sg;
            d[i * w + j] -= sg;
          }
          if (i + 1 < h) {
            const double sg = g * sign(q[(i + 1) * w + j] - q[i * w + j]);
            d[(i + 1) * w + j] += sg;
            d[i * w + j] -= sg;
          }
        }
    }
  });
}

}  // namespace tirgan::ag
