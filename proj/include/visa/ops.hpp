#pragma once

#include <array>
#include <vector>

#include "visa/tensor.hpp"

namespace visa {

// ---- elementwise arithmetic (shapes must match exactly) ----
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr div(const TensorPtr& a, const TensorPtr& b);
TensorPtr neg(const TensorPtr& a);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr add_scalar(const TensorPtr& a, double c);

// ---- elementwise nonlinearities ----
TensorPtr relu(const TensorPtr& a);
TensorPtr sigmoid(const TensorPtr& a);
TensorPtr tanh_op(const TensorPtr& a);
// Exact-erf form: 0.5 * x * (1 + erf(x / sqrt(2))).
TensorPtr gelu(const TensorPtr& a);
TensorPtr abs_op(const TensorPtr& a);
// log(max(x, floor)); the floor keeps cross-entropy finite at p == 0.
TensorPtr log_guarded(const TensorPtr& a, double floor = 1e-12);

// Numerically stabilised softmax along `axis` with temperature tau:
// softmax(x / tau) after subtracting the row max.
TensorPtr softmax(const TensorPtr& x, int axis, double tau = 1.0);

// ---- linear algebra ----
// [*, m, k] x [k, n] (shared weight) or [*, m, k] x [*, k, n] (same leading
// dims). Inner accumulation order is fixed, so results are bit-reproducible.
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr add_bias_rows(const TensorPtr& x, const TensorPtr& b);      // [*, d] + [d]
TensorPtr add_bias_channels(const TensorPtr& x, const TensorPtr& b);  // [B,C,H,W] + [C]
TensorPtr add_row_broadcast(const TensorPtr& x, const TensorPtr& v);  // [B,L,d] + [B,d]

// ---- shape plumbing (all copy; none alias their input) ----
TensorPtr reshape(const TensorPtr& x, Shape target);
TensorPtr permute(const TensorPtr& x, const std::vector<int>& axes);
TensorPtr concat(const std::vector<TensorPtr>& xs, int axis);
TensorPtr slice(const TensorPtr& x, int axis, int64_t start, int64_t len);

// ---- reductions ----
TensorPtr sum_all(const TensorPtr& x);               // -> [1]
TensorPtr reduce_sum(const TensorPtr& x, int axis);  // removes axis
TensorPtr reduce_mean(const TensorPtr& x, int axis);

// ---- convolution / pooling (NCHW) ----
// w: [Cout, Cin, kh, kw]; b: [Cout] or null. Zero padding.
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                 int stride = 1, int pad = 0);
// w: [Cin, Cout, k, k]; output extent (H-1)*stride + k.
TensorPtr conv_transpose2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                           int stride);
TensorPtr avg_pool2d(const TensorPtr& x, int k, int stride);
TensorPtr max_pool2d(const TensorPtr& x, int k, int stride);
TensorPtr global_avg_pool(const TensorPtr& x);      // [B,C,H,W] -> [B,C]
TensorPtr channel_pool_avgmax(const TensorPtr& x);  // [B,C,H,W] -> [B,2,H,W] (avg, max)
TensorPtr scale_channels(const TensorPtr& x, const TensorPtr& a);  // x * a[B,C]
TensorPtr scale_spatial(const TensorPtr& x, const TensorPtr& m);   // x * m[B,1,H,W]

// ---- normalisation ----
// Population statistics over `axis`; gamma/beta indexed along that axis.
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     int axis, double eps = 1e-5);

// Running stats live outside the graph; `steps` counts training batches seen.
struct BatchNormState {
  TensorPtr running_mean, running_var;  // [C], not part of the autodiff graph
  int64_t steps = 0;
};
TensorPtr batch_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     BatchNormState& state, bool training, double momentum = 0.1,
                     double eps = 1e-5);

// ---- task-specific ops ----
// Decomposed relative position bias for one s x s window: row/col lookup
// tables [heads, 2s-1] expanded to [heads, s^2, s^2].
TensorPtr rel_bias_expand(const TensorPtr& row_tab, const TensorPtr& col_tab, int s);
// scores [N, h, n, n] + bias [h, n, n], broadcast over the window axis.
TensorPtr add_window_bias(const TensorPtr& scores, const TensorPtr& bias);

// Diagonal linear state-space scan over a length-L sequence:
//   x_0 = 0,  x_{t+1} = abar * x_t + bbar * u_t,  out_t = x_{t+1}.
// u: [B, L, d]; abar, bbar: [d].
TensorPtr ssm_scan(const TensorPtr& u, const TensorPtr& abar, const TensorPtr& bbar);

// Sum over channels of |G_x| + |G_y| under the 3x3 Sobel pair, zero padding:
// [B, C, H, W] -> [B, H, W].
TensorPtr sobel_energy(const TensorPtr& x);

// Gated recurrent update shared across rows: state/input [R, d].
struct GruParams {
  TensorPtr wz, uz, bz;  // update gate
  TensorPtr wr, ur, br;  // reset gate
  TensorPtr wn, un, bn;  // candidate
};
TensorPtr gru_cell(const TensorPtr& state, const TensorPtr& input, const GruParams& p);

// ---- non-differentiable helpers ----
// Argmax over the class axis of [B, C, H, W]; ties resolve to the lowest
// class index. Returns flat B*H*W codes.
std::vector<uint8_t> argmax_channel(const Tensor& logits);

}  // namespace visa
