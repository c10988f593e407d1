#pragma once

#include <optional>
#include <span>
#include <vector>

#include "flamingo/graph.hpp"
#include "flamingo/tensor.hpp"

// Differentiable operations on Graph nodes. Every op treats its inputs as
// row-major matrices [rows, cols] (cols = last extent) unless stated.
namespace flamingo::ops {

enum class Activation { gelu, squared_relu };

inline constexpr double kLayerNormEps = 1e-5;

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// a[r, :] + bias, bias has cols(a) elements.
Var add_row(Var a, Var bias);
// a * s for a single-element s.
Var mul_scalar(Var a, Var s);

Var matmul(Var a, Var b);     // [n,k] x [k,m]
Var matmul_nt(Var a, Var b);  // [n,k] x [m,k]^T
Var linear(Var x, Var weight, std::optional<Var> bias = std::nullopt);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

Var tanh(Var a);
Var exp(Var a);
Var activation(Var a, Activation kind);

// Row-wise softmax restricted to mask==true entries. All-false rows give zeros.
Var masked_softmax(Var scores, const BoolMatrix& mask);
Var log_softmax(Var a);
Var layer_norm(Var x, Var scale, Var offset, double eps = kLayerNormEps);

// Multi-head scaled dot-product attention, q:[Lq,D], k,v:[Lk,D], out:[Lq,D].
// Entry (i,j) is admissible iff mask(i,j) (when given) and j <= i (when causal).
// A query row with no admissible key yields a zero output row.
Var attention(Var q, Var k, Var v, const BoolMatrix* mask, bool causal, std::size_t heads);

Var embedding(Var table, std::span<const int> ids);
// Copy of table with one row taken from vec ([1,d] or [d]).
Var replace_row(Var table, std::size_t row, Var vec);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
// out[i] = a[index[i]], or a zero row where index[i] < 0.
Var gather_rows(Var a, std::span<const long> index);

// Neighbourhood gather over per-frame grids: rows are (frame, y, x) raster
// cells; output row holds the kernel x kernel neighbours (zero outside the
// frame) concatenated along columns, giving [rows, kernel*kernel*cols].
Var grid_neighbourhood(Var a, std::size_t frames, std::size_t grid_h, std::size_t grid_w,
                       std::size_t kernel);

Var sum(Var a);
Var mean(Var a);
Var mean_rows(Var a);  // [n,d] -> [1,d]
Var weighted_sum(Var a, const Tensor& weights);
Var l2_normalize_rows(Var a, double eps = 1e-12);

// Sum over rows of weights[r] * (-log softmax(logits[r])[targets[r]]).
// Rows with zero weight are skipped and receive exactly zero gradient.
Var nll_loss(Var logits, std::span<const int> targets, std::span<const double> weights);

}  // namespace flamingo::ops

namespace flamingo::kernels {

// C[n,m] (+)= op(A) * op(B); op(A) is [n,k], op(B) is [k,m].
// trans_a: A stored [k,n]; trans_b: B stored [m,k].
void gemm(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
          std::size_t m, bool trans_a, bool trans_b, bool accumulate);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor log_softmax_rows(const Tensor& logits);
double gelu(double x);
double gelu_grad(double x);

}  // namespace flamingo::kernels
