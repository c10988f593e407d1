#include "flamingo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace flamingo::kernels {

void gemm(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
          std::size_t m, bool trans_a, bool trans_b, bool accumulate) {
  if (!accumulate) std::fill(c, c + n * m, 0.0);
  if (n == 0 || m == 0 || k == 0) return;
  std::vector<double> bt;
  if (trans_b) {
    bt.resize(k * m);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b[j * k + p];
    b = bt.data();
  }
  if (!trans_a) {
    for (std::size_t i = 0; i < n; ++i) {
      double* crow = c + i * m;
      const double* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = b + p * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = a + p * n;
      const double* brow = b + p * m;
      for (std::size_t i = 0; i < n; ++i) {
        const double av = arow[i];
        double* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner extents differ " + shape_to_string(a.shape()) +
                                " x " + shape_to_string(b.shape()));
  }
  Tensor c({a.rows(), b.cols()});
  gemm(a.ptr(), b.ptr(), c.ptr(), a.rows(), a.cols(), b.cols(), false, false, false);
  return c;
}

Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out(logits.shape());
  const std::size_t n = logits.rows(), v = logits.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = logits.ptr() + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < v; ++j) out[r * v + j] = x[j] - lse;
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return cdf + x * pdf;
}

}  // namespace flamingo::kernels

namespace flamingo::ops {
namespace {

void check_same_graph(Var a, Var b, const char* op) {
  if (a.graph != b.graph) throw std::invalid_argument(std::string(op) + ": vars from different graphs");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
}

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

template <class F>
Var unary(Var a, Tensor out, F grad_fn) {
  Graph& g = *a.graph;
  const std::size_t ia = a.id;
  return g.record(std::move(out), g.requires_grad(ia), [ia, grad_fn](Graph& gr, std::size_t self) {
    const Tensor& go = gr.grad(self);
    Tensor& ga = gr.grad_buffer(ia);
    grad_fn(gr.value(self), gr.value(ia), go, ga);
  });
}

}  // namespace

Var add(Var a, Var b) {
  check_same_graph(a, b, "add");
  check_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  Graph& g = *a.graph;
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), g.requires_grad(ia) || g.requires_grad(ib),
                  [ia, ib](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.grad(self);
                    for (std::size_t id : {ia, ib}) {
                      if (!gr.requires_grad(id)) continue;
                      Tensor& gx = gr.grad_buffer(id);
                      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
                    }
                  });
}

Var sub(Var a, Var b) {
  check_same_graph(a, b, "sub");
  check_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  Graph& g = *a.graph;
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), g.requires_grad(ia) || g.requires_grad(ib),
                  [ia, ib](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.grad(self);
                    if (gr.requires_grad(ia)) {
                      Tensor& gx = gr.grad_buffer(ia);
                      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
                    }
                    if (gr.requires_grad(ib)) {
                      Tensor& gx = gr.grad_buffer(ib);
                      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] -= go[i];
                    }
                  });
}

Var mul(Var a, Var b) {
  check_same_graph(a, b, "mul");
  check_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  Graph& g = *a.graph;
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), g.requires_grad(ia) || g.requires_grad(ib),
                  [ia, ib](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.grad(self);
                    const Tensor& av = gr.value(ia);
                    const Tensor& bv2 = gr.value(ib);
                    if (gr.requires_grad(ia)) {
                      Tensor& gx = gr.grad_buffer(ia);
                      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * bv2[i];
                    }
                    if (gr.requires_grad(ib)) {
                      Tensor& gx = gr.grad_buffer(ib);
                      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * av[i];
                    }
                  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  return unary(a, std::move(out), [factor](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
    for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += factor * go[i];
  });
}

Var add_row(Var a, Var bias) {
  check_same_graph(a, bias, "add_row");
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.numel() != av.cols()) {
    throw std::invalid_argument("add_row: bias of " + std::to_string(bv.numel()) +
                                " values for " + std::to_string(av.cols()) + " columns");
  }
  Tensor out = av;
  const std::size_t n = av.rows(), d = av.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bv[c];
  Graph& g = *a.graph;
  const std::size_t ia = a.id, ib = bias.id;
  return g.record(std::move(out), g.requires_grad(ia) || g.requires_grad(ib),
                  [ia, ib, n, d](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.grad(self);
                    if (gr.requires_grad(ia)) {
                      Tensor& gx = gr.grad_buffer(ia);
                      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
                    }
                    if (gr.requires_grad(ib)) {
                      Tensor& gb = gr.grad_buffer(ib);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gb[c] += go[r * d + c];
                    }
                  });
}

Var mul_scalar(Var a, Var s) {
  check_same_graph(a, s, "mul_scalar");
  if (s.value().numel() != 1) throw std::invalid_argument("mul_scalar: scale must have one element");
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (auto& v : out.data()) v *= sv;
  Graph& g = *a.graph;
  const std::size_t ia = a.id, is = s.id;
  return g.record(std::move(out), g.requires_grad(ia) || g.requires_grad(is),
                  [ia, is](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.grad(self);
                    const double sv2 = gr.value(is)[0];
                    if (gr.requires_grad(ia)) {
                      Tensor& gx = gr.grad_buffer(ia);
                      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * sv2;
                    }
                    if (gr.requires_grad(is)) {
                      const Tensor& av = gr.value(ia);
                      double acc = 0.0;
                      for (std::size_t i = 0; i < go.numel(); ++i) acc += go[i] * av[i];
                      gr.grad_buffer(is)[0] += acc;
                    }
                  });
}

Var matmul(Var a, Var b) {
  check_same_graph(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: inner extents differ " + shape_to_string(av.shape()) +
                                " x " + shape_to_string(bv.shape()));
  }
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out(matrix_shape(n, m));
  kernels::gemm(av.ptr(), bv.ptr(), out.ptr(), n, k, m, false, false, false);
  Graph& g = *a.graph;
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), g.requires_grad(ia) || g.requires_grad(ib),
                  [ia, ib, n, k, m](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.grad(self);
                    if (gr.requires_grad(ia)) {
                      kernels::gemm(go.ptr(), gr.value(ib).ptr(), gr.grad_buffer(ia).ptr(), n, m, k,
                                    false, true, true);
                    }
                    if (gr.requires_grad(ib)) {
                      kernels::gemm(gr.value(ia).ptr(), go.ptr(), gr.grad_buffer(ib).ptr(), k, n, m,
                                    true, false, true);
                    }
                  });
}

Var matmul_nt(Var a, Var b) {
  check_same_graph(a, b, "matmul_nt");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw std::invalid_argument("matmul_nt: inner extents differ " +
                                shape_to_string(av.shape()) + " x " +
                                shape_to_string(bv.shape()) + "^T");
  }
  const std::size_t n = av.rows(), k = av.cols(), m = bv.rows();
  Tensor out(matrix_shape(n, m));
  kernels::gemm(av.ptr(), bv.ptr(), out.ptr(), n, k, m, false, true, false);
  Graph& g = *a.graph;
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), g.requires_grad(ia) || g.requires_grad(ib),
                  [ia, ib, n, k, m](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.grad(self);
                    // da = go * b, db = go^T * a
                    if (gr.requires_grad(ia)) {
                      kernels::gemm(go.ptr(), gr.value(ib).ptr(), gr.grad_buffer(ia).ptr(), n, m, k,
                                    false, false, true);
                    }
                    if (gr.requires_grad(ib)) {
                      kernels::gemm(go.ptr(), gr.value(ia).ptr(), gr.grad_buffer(ib).ptr(), m, n, k,
                                    true, false, true);
                    }
                  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  check_same_graph(x, weight, "linear");
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0)) {
    throw std::invalid_argument("linear: input " + shape_to_string(xv.shape()) +
                                " incompatible with weight " + shape_to_string(wv.shape()));
  }
  const std::size_t n = xv.rows(), k = xv.cols(), m = wv.dim(1);
  Tensor out(matrix_shape(n, m));
  if (bias) {
    const Tensor& bv = bias->value();
    if (bv.numel() != m) throw std::invalid_argument("linear: bias size mismatch");
    for (std::size_t r = 0; r < n; ++r) std::copy(bv.ptr(), bv.ptr() + m, out.ptr() + r * m);
  }
  kernels::gemm(xv.ptr(), wv.ptr(), out.ptr(), n, k, m, false, false, bias.has_value());
  Graph& g = *x.graph;
  const std::size_t ix = x.id, iw = weight.id;
  const long ib = bias ? static_cast<long>(bias->id) : -1;
  bool needs = g.requires_grad(ix) || g.requires_grad(iw) ||
               (ib >= 0 && g.requires_grad(static_cast<std::size_t>(ib)));
  return g.record(std::move(out), needs, [ix, iw, ib, n, k, m](Graph& gr, std::size_t self) {
    const Tensor& go = gr.grad(self);
    if (gr.requires_grad(ix)) {
      kernels::gemm(go.ptr(), gr.value(iw).ptr(), gr.grad_buffer(ix).ptr(), n, m, k, false, true,
                    true);
    }
    if (gr.requires_grad(iw)) {
      kernels::gemm(gr.value(ix).ptr(), go.ptr(), gr.grad_buffer(iw).ptr(), k, n, m, true, false,
                    true);
    }
    if (ib >= 0 && gr.requires_grad(static_cast<std::size_t>(ib))) {
      Tensor& gb = gr.grad_buffer(static_cast<std::size_t>(ib));
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gb[c] += go[r * m + c];
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), m = av.cols();
  Tensor out(matrix_shape(m, n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
  return unary(a, std::move(out), [n, m](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += go[j * n + i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return unary(a, std::move(out), [](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
    for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
  });
}

Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return unary(a, std::move(out), [](const Tensor& y, const Tensor&, const Tensor& go, Tensor& ga) {
    for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * (1.0 - y[i] * y[i]);
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::exp(v);
  return unary(a, std::move(out), [](const Tensor& y, const Tensor&, const Tensor& go, Tensor& ga) {
    for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * y[i];
  });
}

Var activation(Var a, Activation kind) {
  Tensor out = a.value();
  if (kind == Activation::squared_relu) {
    for (auto& v : out.data()) v = v > 0.0 ? v * v : 0.0;
    return unary(a, std::move(out), [](const Tensor&, const Tensor& x, const Tensor& go, Tensor& ga) {
      for (std::size_t i = 0; i < go.numel(); ++i)
        if (x[i] > 0.0) ga[i] += go[i] * 2.0 * x[i];
    });
  }
  for (auto& v : out.data()) v = kernels::gelu(v);
  return unary(a, std::move(out), [](const Tensor&, const Tensor& x, const Tensor& go, Tensor& ga) {
    for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * kernels::gelu_grad(x[i]);
  });
}

namespace {

// Softmax of one row over admissible entries; inadmissible entries get 0.
// Returns false (and writes zeros) when nothing is admissible.
template <class Admit>
bool softmax_row(const double* x, double* p, std::size_t n, Admit admit) {
  double mx = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (admit(j)) {
      mx = std::max(mx, x[j]);
      any = true;
    }
  }
  if (!any) {
    std::fill(p, p + n, 0.0);
    return false;
  }
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (admit(j)) {
      p[j] = std::exp(x[j] - mx);
      s += p[j];
    } else {
      p[j] = 0.0;
    }
  }
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
  return true;
}

}  // namespace

Var masked_softmax(Var scores, const BoolMatrix& mask) {
  const Tensor& sv = scores.value();
  const std::size_t n = sv.rows(), m = sv.cols();
  if (mask.rows() != n || mask.cols() != m) {
    throw std::invalid_argument("masked_softmax: mask " + std::to_string(mask.rows()) + "x" +
                                std::to_string(mask.cols()) + " for scores " +
                                shape_to_string(sv.shape()));
  }
  Tensor out(sv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const auto* mrow = mask.row_ptr(r);
    softmax_row(sv.ptr() + r * m, out.ptr() + r * m, m, [mrow](std::size_t j) { return mrow[j] != 0; });
  }
  return unary(scores, std::move(out), [n, m](const Tensor& p, const Tensor&, const Tensor& go, Tensor& ga) {
    for (std::size_t r = 0; r < n; ++r) {
      const double* pr = p.ptr() + r * m;
      const double* gr = go.ptr() + r * m;
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += pr[j] * gr[j];
      for (std::size_t j = 0; j < m; ++j) ga[r * m + j] += pr[j] * (gr[j] - dot);
    }
  });
}

Var log_softmax(Var a) {
  Tensor out = kernels::log_softmax_rows(a.value());
  const std::size_t n = out.rows(), m = out.cols();
  return unary(a, std::move(out), [n, m](const Tensor& y, const Tensor&, const Tensor& go, Tensor& ga) {
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += go[r * m + j];
      for (std::size_t j = 0; j < m; ++j) ga[r * m + j] += go[r * m + j] - std::exp(y[r * m + j]) * s;
    }
  });
}

Var layer_norm(Var x, Var scale_v, Var offset, double eps) {
  check_same_graph(x, scale_v, "layer_norm");
  check_same_graph(x, offset, "layer_norm");
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (d == 0) throw std::invalid_argument("layer_norm: feature extent is zero");
  if (scale_v.value().numel() != d || offset.value().numel() != d) {
    throw std::invalid_argument("layer_norm: scale/offset size differs from feature extent " +
                                std::to_string(d));
  }
  const std::size_t n = xv.rows();
  const Tensor& sv = scale_v.value();
  const Tensor& ov = offset.value();
  Tensor out(xv.shape());
  std::vector<double> xhat(n * d), inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xv.ptr() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xr[c] - mean) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * sv[c] + ov[c];
    }
  }
  Graph& g = *x.graph;
  const std::size_t ix = x.id, is_ = scale_v.id, io = offset.id;
  bool needs = g.requires_grad(ix) || g.requires_grad(is_) || g.requires_grad(io);
  return g.record(std::move(out), needs,
                  [ix, is_, io, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph& gr, std::size_t self) {
                    const Tensor& go = gr.grad(self);
                    const Tensor& sv2 = gr.value(is_);
                    if (gr.requires_grad(is_)) {
                      Tensor& gs = gr.grad_buffer(is_);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gs[c] += go[r * d + c] * xhat[r * d + c];
                    }
                    if (gr.requires_grad(io)) {
                      Tensor& gof = gr.grad_buffer(io);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gof[c] += go[r * d + c];
                    }
                    if (gr.requires_grad(ix)) {
                      Tensor& gx = gr.grad_buffer(ix);
                      const double inv_d = 1.0 / static_cast<double>(d);
                      for (std::size_t r = 0; r < n; ++r) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t c = 0; c < d; ++c) {
                          const double dh = go[r * d + c] * sv2[c];
                          m1 += dh;
                          m2 += dh * xhat[r * d + c];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for (std::size_t c = 0; c < d; ++c) {
                          const double dh = go[r * d + c] * sv2[c];
                          gx[r * d + c] += inv_std[r] * (dh - m1 - xhat[r * d + c] * m2);
                        }
                      }
                    }
                  });
}

Var attention(Var q, Var k, Var v, const BoolMatrix* mask, bool causal, std::size_t heads) {
  check_same_graph(q, k, "attention");
  check_same_graph(q, v, "attention");
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t lq = qv.rows(), lk = kv.rows(), dim = qv.cols();
  if (kv.cols() != dim || vv.cols() != dim || vv.rows() != lk) {
    throw std::invalid_argument("attention: q " + shape_to_string(qv.shape()) + ", k " +
                                shape_to_string(kv.shape()) + ", v " +
                                shape_to_string(vv.shape()) + " are inconsistent");
  }
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("attention: width " + std::to_string(dim) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  if (mask && (mask->rows() != lq || mask->cols() != lk)) {
    throw std::invalid_argument("attention: mask " + std::to_string(mask->rows()) + "x" +
                                std::to_string(mask->cols()) + " for " + std::to_string(lq) +
                                " queries and " + std::to_string(lk) + " keys");
  }
  const std::size_t dh = dim / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(heads * lq * lk, 0.0);
  std::vector<double> scores(lk);
  Tensor out({lq, dim}, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      const std::uint8_t* mrow = mask ? mask->row_ptr(i) : nullptr;
      auto admit = [&](std::size_t j) { return (!causal || j <= i) && (!mrow || mrow[j]); };
      const double* qi = qv.ptr() + i * dim + off;
      for (std::size_t j = 0; j < lk; ++j) {
        if (!admit(j)) continue;
        const double* kj = kv.ptr() + j * dim + off;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        scores[j] = s * sc;
      }
      double* p = probs.data() + (h * lq + i) * lk;
      if (!softmax_row(scores.data(), p, lk, admit)) continue;
      double* oi = out.ptr() + i * dim + off;
      for (std::size_t j = 0; j < lk; ++j) {
        if (p[j] == 0.0) continue;
        const double* vj = vv.ptr() + j * dim + off;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  Graph& g = *q.graph;
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  bool needs = g.requires_grad(iq) || g.requires_grad(ik) || g.requires_grad(iv);
  return g.record(
      std::move(out), needs,
      [iq, ik, iv, lq, lk, dim, dh, heads, sc, probs = std::move(probs)](Graph& gr, std::size_t self) {
        const Tensor& go = gr.grad(self);
        const Tensor& qv2 = gr.value(iq);
        const Tensor& kv2 = gr.value(ik);
        const Tensor& vv2 = gr.value(iv);
        Tensor* gq = gr.requires_grad(iq) ? &gr.grad_buffer(iq) : nullptr;
        Tensor* gk = gr.requires_grad(ik) ? &gr.grad_buffer(ik) : nullptr;
        Tensor* gv = gr.requires_grad(iv) ? &gr.grad_buffer(iv) : nullptr;
        std::vector<double> dp(lk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < lq; ++i) {
            const double* p = probs.data() + (h * lq + i) * lk;
            const double* goi = go.ptr() + i * dim + off;
            double dot = 0.0;
            for (std::size_t j = 0; j < lk; ++j) {
              if (p[j] == 0.0) {
                dp[j] = 0.0;
                continue;
              }
              const double* vj = vv2.ptr() + j * dim + off;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += goi[c] * vj[c];
              dp[j] = s;
              dot += p[j] * s;
              if (gv) {
                double* gvj = gv->ptr() + j * dim + off;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * goi[c];
              }
            }
            if (!gq && !gk) continue;
            const double* qi = qv2.ptr() + i * dim + off;
            for (std::size_t j = 0; j < lk; ++j) {
              if (p[j] == 0.0) continue;
              const double ds = p[j] * (dp[j] - dot) * sc;
              const double* kj = kv2.ptr() + j * dim + off;
              if (gq) {
                double* gqi = gq->ptr() + i * dim + off;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                double* gkj = gk->ptr() + j * dim + off;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw std::invalid_argument("embedding: table must be rank 2");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor out({idv.size(), d});
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(idv[i]) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.ptr() + static_cast<std::size_t>(idv[i]) * d, d, out.ptr() + i * d);
  }
  return unary(table, std::move(out),
               [idv = std::move(idv), d](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
                 for (std::size_t i = 0; i < idv.size(); ++i) {
                   double* dst = ga.ptr() + static_cast<std::size_t>(idv[i]) * d;
                   const double* src = go.ptr() + i * d;
                   for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                 }
               });
}

Var replace_row(Var table, std::size_t row, Var vec) {
  check_same_graph(table, vec, "replace_row");
  const Tensor& tv = table.value();
  const std::size_t d = tv.cols();
  if (row >= tv.rows()) throw std::out_of_range("replace_row: row out of range");
  if (vec.value().numel() != d) throw std::invalid_argument("replace_row: vector width mismatch");
  Tensor out = tv;
  std::copy_n(vec.value().ptr(), d, out.ptr() + row * d);
  Graph& g = *table.graph;
  const std::size_t it = table.id, iv = vec.id;
  return g.record(std::move(out), g.requires_grad(it) || g.requires_grad(iv),
                  [it, iv, row, d](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.grad(self);
                    if (gr.requires_grad(it)) {
                      Tensor& gt = gr.grad_buffer(it);
                      for (std::size_t i = 0; i < go.numel(); ++i)
                        if (i / d != row) gt[i] += go[i];
                    }
                    if (gr.requires_grad(iv)) {
                      Tensor& gvv = gr.grad_buffer(iv);
                      for (std::size_t c = 0; c < d; ++c) gvv[c] += go[row * d + c];
                    }
                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Graph& g = *parts[0].graph;
  const std::size_t d = parts[0].value().cols();
  std::size_t total = 0;
  bool needs = false;
  std::vector<std::size_t> ids, offsets;
  for (const Var& p : parts) {
    if (p.graph != &g) throw std::invalid_argument("concat_rows: vars from different graphs");
    if (p.value().cols() != d) {
      throw std::invalid_argument("concat_rows: width " + std::to_string(p.value().cols()) +
                                  " differs from " + std::to_string(d));
    }
    ids.push_back(p.id);
    offsets.push_back(total);
    total += p.value().rows();
    needs = needs || g.requires_grad(p.id);
  }
  Tensor out({total, d});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = parts[i].value();
    std::copy_n(pv.ptr(), pv.numel(), out.ptr() + offsets[i] * d);
  }
  return g.record(std::move(out), needs, [ids, offsets, d](Graph& gr, std::size_t self) {
    const Tensor& go = gr.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!gr.requires_grad(ids[i])) continue;
      Tensor& gp = gr.grad_buffer(ids[i]);
      const double* src = go.ptr() + offsets[i] * d;
      for (std::size_t j = 0; j < gp.numel(); ++j) gp[j] += src[j];
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (begin > end || end > av.rows()) {
    throw std::out_of_range("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") outside " + std::to_string(av.rows()) + " rows");
  }
  const std::size_t d = av.cols();
  Tensor out({end - begin, d});
  std::copy_n(av.ptr() + begin * d, (end - begin) * d, out.ptr());
  return unary(a, std::move(out), [begin, d](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
    double* dst = ga.ptr() + begin * d;
    for (std::size_t i = 0; i < go.numel(); ++i) dst[i] += go[i];
  });
}

Var gather_rows(Var a, std::span<const long> index) {
  const Tensor& av = a.value();
  const std::size_t d = av.cols(), n = av.rows();
  std::vector<long> idx(index.begin(), index.end());
  Tensor out({idx.size(), d}, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0) continue;
    if (static_cast<std::size_t>(idx[i]) >= n) throw std::out_of_range("gather_rows: index out of range");
    std::copy_n(av.ptr() + static_cast<std::size_t>(idx[i]) * d, d, out.ptr() + i * d);
  }
  return unary(a, std::move(out),
               [idx = std::move(idx), d](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
                 for (std::size_t i = 0; i < idx.size(); ++i) {
                   if (idx[i] < 0) continue;
                   double* dst = ga.ptr() + static_cast<std::size_t>(idx[i]) * d;
                   for (std::size_t c = 0; c < d; ++c) dst[c] += go[i * d + c];
                 }
               });
}

Var grid_neighbourhood(Var a, std::size_t frames, std::size_t grid_h, std::size_t grid_w,
                       std::size_t kernel) {
  const Tensor& av = a.value();
  const std::size_t d = av.cols();
  if (av.rows() != frames * grid_h * grid_w) {
    throw std::invalid_argument("grid_neighbourhood: " + std::to_string(av.rows()) +
                                " rows for " + std::to_string(frames) + " frames of " +
                                std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  if (kernel == 0 || kernel % 2 == 0) throw std::invalid_argument("grid_neighbourhood: kernel must be odd");
  const long half = static_cast<long>(kernel / 2);
  const std::size_t taps = kernel * kernel;
  // src[row * taps + tap] = source row or -1
  std::vector<long> src(av.rows() * taps, -1);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t y = 0; y < grid_h; ++y)
      for (std::size_t x = 0; x < grid_w; ++x) {
        const std::size_t row = (f * grid_h + y) * grid_w + x;
        std::size_t tap = 0;
        for (long dy = -half; dy <= half; ++dy)
          for (long dx = -half; dx <= half; ++dx, ++tap) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(grid_h) || xx >= static_cast<long>(grid_w)) continue;
            src[row * taps + tap] = static_cast<long>((f * grid_h + static_cast<std::size_t>(yy)) * grid_w +
                                                      static_cast<std::size_t>(xx));
          }
      }
  const std::size_t width = taps * d;
  Tensor out({av.rows(), width}, 0.0);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t t = 0; t < taps; ++t) {
      const long s = src[r * taps + t];
      if (s >= 0) std::copy_n(av.ptr() + static_cast<std::size_t>(s) * d, d, out.ptr() + r * width + t * d);
    }
  return unary(a, std::move(out),
               [src = std::move(src), taps, d, width](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
                 const std::size_t rows = go.rows();
                 for (std::size_t r = 0; r < rows; ++r)
                   for (std::size_t t = 0; t < taps; ++t) {
                     const long s = src[r * taps + t];
                     if (s < 0) continue;
                     double* dst = ga.ptr() + static_cast<std::size_t>(s) * d;
                     const double* g = go.ptr() + r * width + t * d;
                     for (std::size_t c = 0; c < d; ++c) dst[c] += g[c];
                   }
               });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return unary(a, Tensor::scalar(s), [](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
    for (auto& v : ga.data()) v += go[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().numel());
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), d = av.cols();
  if (n == 0) throw std::invalid_argument("mean_rows: no rows");
  Tensor out({1, d}, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += av[r * d + c];
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& v : out.data()) v *= inv;
  return unary(a, std::move(out), [n, d, inv](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += go[c] * inv;
  });
}

Var weighted_sum(Var a, const Tensor& weights) {
  check_same_shape(a.value(), weights, "weighted_sum");
  double s = 0.0;
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.numel(); ++i) s += av[i] * weights[i];
  return unary(a, Tensor::scalar(s), [weights](const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += go[0] * weights[i];
  });
}

Var l2_normalize_rows(Var a, double eps) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), d = av.cols();
  Tensor out(av.shape());
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += av[r * d + c] * av[r * d + c];
    norms[r] = std::sqrt(s + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = av[r * d + c] / norms[r];
  }
  return unary(a, std::move(out),
               [n, d, norms = std::move(norms)](const Tensor& y, const Tensor&, const Tensor& go, Tensor& ga) {
                 for (std::size_t r = 0; r < n; ++r) {
                   double dot = 0.0;
                   for (std::size_t c = 0; c < d; ++c) dot += y[r * d + c] * go[r * d + c];
                   for (std::size_t c = 0; c < d; ++c)
                     ga[r * d + c] += (go[r * d + c] - y[r * d + c] * dot) / norms[r];
                 }
               });
}

Var nll_loss(Var logits, std::span<const int> targets, std::span<const double> weights) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.rows(), v = lv.cols();
  if (targets.size() != n || weights.size() != n) {
    throw std::invalid_argument("nll_loss: " + std::to_string(n) + " rows but " +
                                std::to_string(targets.size()) + " targets and " +
                                std::to_string(weights.size()) + " weights");
  }
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<double> wv(weights.begin(), weights.end());
  std::vector<double> probs(n * v, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (wv[r] == 0.0) continue;
    if (tv[r] < 0 || static_cast<std::size_t>(tv[r]) >= v) {
      throw std::out_of_range("nll_loss: target " + std::to_string(tv[r]) + " outside " +
                              std::to_string(v) + " classes");
    }
    const double* x = lv.ptr() + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(x[j] - mx);
      s += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= s;
    total += wv[r] * (mx + std::log(s) - x[tv[r]]);
  }
  return unary(logits, Tensor::scalar(total),
               [n, v, tv = std::move(tv), wv = std::move(wv), probs = std::move(probs)](
                   const Tensor&, const Tensor&, const Tensor& go, Tensor& ga) {
                 for (std::size_t r = 0; r < n; ++r) {
                   if (wv[r] == 0.0) continue;
                   const double w = wv[r] * go[0];
                   for (std::size_t j = 0; j < v; ++j) ga[r * v + j] += w * probs[r * v + j];
                   ga[r * v + static_cast<std::size_t>(tv[r])] -= w;
                 }
               });
}

}  // namespace flamingo::ops
