#include <cmath>

#include "op_common.hpp"

namespace visa {

TensorPtr rel_bias_expand(const TensorPtr& row_tab, const TensorPtr& col_tab, int s) {
  check_same_dtype("rel_bias_expand", *row_tab, *col_tab);
  int64_t span = 2 * static_cast<int64_t>(s) - 1;
  if (row_tab->rank() != 2 || row_tab->dim(1) != span || col_tab->rank() != 2 ||
      col_tab->dim(1) != span || row_tab->dim(0) != col_tab->dim(0))
    fail<ShapeError>(strformat("rel_bias_expand: tables must be [h,%lld], got %s / %s",
                               static_cast<long long>(span), shape_str(row_tab->shape).c_str(),
                               shape_str(col_tab->shape).c_str()));
  int64_t h = row_tab->dim(0);
  int64_t n = static_cast<int64_t>(s) * s;
  auto out = Tensor::zeros({h, n, n}, row_tab->dtype);

  // Token t = (r, c) in row-major window order; offset indices are shifted
  // by s-1 to be non-negative.
  for (int64_t j = 0; j < h; ++j)
    for (int64_t t = 0; t < n; ++t) {
      int64_t r = t / s, c = t % s;
      for (int64_t u = 0; u < n; ++u) {
        int64_t r2 = u / s, c2 = u % s;
        out->set((j * n + t) * n + u, row_tab->at(j * span + (r - r2 + s - 1)) +
                                          col_tab->at(j * span + (c - c2 + s - 1)));
      }
    }

  if (detail::track({&row_tab, &col_tab})) {
    Tensor* pr = row_tab.get();
    Tensor* pc = col_tab.get();
    Tensor* po = out.get();
    int64_t sl = s;
    detail::record(out, {row_tab, col_tab}, [pr, pc, po, h, n, sl, span] {
      for (int64_t j = 0; j < h; ++j)
        for (int64_t t = 0; t < n; ++t) {
          int64_t r = t / sl, c = t % sl;
          for (int64_t u = 0; u < n; ++u) {
            int64_t r2 = u / sl, c2 = u % sl;
            double g = po->grad_at((j * n + t) * n + u);
            if (pr->requires_grad) pr->grad_add(j * span + (r - r2 + sl - 1), g);
            if (pc->requires_grad) pc->grad_add(j * span + (c - c2 + sl - 1), g);
          }
        }
    });
  }
  return out;
}

TensorPtr add_window_bias(const TensorPtr& scores, const TensorPtr& bias) {
  check_same_dtype("add_window_bias", *scores, *bias);
  if (scores->rank() != 4 || bias->rank() != 3 || scores->dim(1) != bias->dim(0) ||
      scores->dim(2) != bias->dim(1) || scores->dim(3) != bias->dim(2))
    fail<ShapeError>(strformat("add_window_bias: %s + %s", shape_str(scores->shape).c_str(),
                               shape_str(bias->shape).c_str()));
  int64_t N = scores->dim(0), rest = bias->numel();
  auto out = Tensor::zeros(scores->shape, scores->dtype);
  auto fwd = [&]<typename T>() {
    const T* ps = scores->data<T>();
    const T* pb = bias->data<T>();
    T* py = out->data<T>();
    for (int64_t w = 0; w < N; ++w)
      for (int64_t i = 0; i < rest; ++i) py[w * rest + i] = ps[w * rest + i] + pb[i];
  };
  if (scores->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&scores, &bias})) {
    Tensor* ps = scores.get();
    Tensor* pb = bias.get();
    Tensor* po = out.get();
    detail::record(out, {scores, bias}, [ps, pb, po, N, rest] {
      auto bwd = [&]<typename T>() {
        const T* dy = po->grad<T>();
        if (ps->requires_grad) {
          T* dx = ps->grad<T>();
          for (int64_t i = 0, nn = N * rest; i < nn; ++i) dx[i] += dy[i];
        }
        if (pb->requires_grad) {
          T* db = pb->grad<T>();
          for (int64_t w = 0; w < N; ++w)
            for (int64_t i = 0; i < rest; ++i) db[i] += dy[w * rest + i];
        }
      };
      if (ps->dtype == Dtype::F32)
        bwd.operator()<float>();
      else
        bwd.operator()<double>();
    });
  }
  return out;
}

TensorPtr ssm_scan(const TensorPtr& u, const TensorPtr& abar, const TensorPtr& bbar) {
  check_same_dtype("ssm_scan", *u, *abar);
  check_same_dtype("ssm_scan", *u, *bbar);
  if (u->rank() != 3 || abar->rank() != 1 || bbar->rank() != 1 || abar->dim(0) != u->dim(2) ||
      bbar->dim(0) != u->dim(2))
    fail<ShapeError>(strformat("ssm_scan: u %s, abar %s, bbar %s", shape_str(u->shape).c_str(),
                               shape_str(abar->shape).c_str(), shape_str(bbar->shape).c_str()));
  int64_t B = u->dim(0), L = u->dim(1), d = u->dim(2);
  auto out = Tensor::zeros(u->shape, u->dtype);

  auto fwd = [&]<typename T>() {
    const T* pu = u->data<T>();
    const T* pa = abar->data<T>();
    const T* pb = bbar->data<T>();
    T* py = out->data<T>();
    std::vector<T> state(static_cast<size_t>(d));
    for (int64_t b = 0; b < B; ++b) {
      std::fill(state.begin(), state.end(), T(0));
      for (int64_t t = 0; t < L; ++t) {
        const T* ut = pu + (b * L + t) * d;
        T* yt = py + (b * L + t) * d;
        for (int64_t j = 0; j < d; ++j) {
          state[static_cast<size_t>(j)] =
              pa[j] * state[static_cast<size_t>(j)] + pb[j] * ut[j];
          yt[j] = state[static_cast<size_t>(j)];
        }
      }
    }
  };
  if (u->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&u, &abar, &bbar})) {
    Tensor* pu = u.get();
    Tensor* pa = abar.get();
    Tensor* pb = bbar.get();
    Tensor* po = out.get();
    detail::record(out, {u, abar, bbar}, [pu, pa, pb, po, B, L, d] {
      // Adjoint of the scan runs in reverse: lam_t = dy_t + abar * lam_{t+1}.
      // The pre-update state x_t equals the previous output, so no forward
      // recomputation is needed.
      auto bwd = [&]<typename T>() {
        const T* ud = pu->data<T>();
        const T* ad = pa->data<T>();
        const T* bd = pb->data<T>();
        const T* yd = po->data<T>();
        const T* dy = po->grad<T>();
        std::vector<double> lam(static_cast<size_t>(d));
        for (int64_t b = 0; b < B; ++b) {
          std::fill(lam.begin(), lam.end(), 0.0);
          for (int64_t t = L - 1; t >= 0; --t) {
            const T* ut = ud + (b * L + t) * d;
            const T* dyt = dy + (b * L + t) * d;
            const T* xprev = t > 0 ? yd + (b * L + t - 1) * d : nullptr;
            for (int64_t j = 0; j < d; ++j) {
              size_t sj = static_cast<size_t>(j);
              lam[sj] = static_cast<double>(dyt[j]) + static_cast<double>(ad[j]) * lam[sj];
              if (pu->requires_grad)
                pu->grad_add((b * L + t) * d + j, static_cast<double>(bd[j]) * lam[sj]);
              if (pb->requires_grad) pb->grad_add(j, static_cast<double>(ut[j]) * lam[sj]);
              if (pa->requires_grad) {
                double xt = xprev ? static_cast<double>(xprev[j]) : 0.0;
                pa->grad_add(j, xt * lam[sj]);
              }
            }
          }
        }
      };
      if (pu->dtype == Dtype::F32)
        bwd.operator()<float>();
      else
        bwd.operator()<double>();
    });
  }
  return out;
}

namespace {
// 3x3 Sobel pair, cross-correlation convention.
constexpr double kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr double kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
}  // namespace

TensorPtr sobel_energy(const TensorPtr& x) {
  if (x->rank() != 4)
    fail<ShapeError>("sobel_energy: expected [B,C,H,W], got " + shape_str(x->shape));
  int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  auto out = Tensor::zeros({B, H, W}, x->dtype);

  auto grads_at = [](const auto* xc, int64_t h, int64_t w, int64_t Hl, int64_t Wl,
                     double& gx, double& gy) {
    gx = 0.0;
    gy = 0.0;
    for (int64_t di = 0; di < 3; ++di) {
      int64_t ih = h + di - 1;
      if (ih < 0 || ih >= Hl) continue;  // zero padding
      for (int64_t dj = 0; dj < 3; ++dj) {
        int64_t iw = w + dj - 1;
        if (iw < 0 || iw >= Wl) continue;
        double v = static_cast<double>(xc[ih * Wl + iw]);
        gx += kSobelX[di][dj] * v;
        gy += kSobelY[di][dj] * v;
      }
    }
  };

  auto fwd = [&]<typename T>() {
    const T* px = x->data<T>();
    T* py = out->data<T>();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          double e = 0.0;
          for (int64_t c = 0; c < C; ++c) {
            double gx, gy;
            grads_at(px + (b * C + c) * H * W, h, w, H, W, gx, gy);
            e += std::fabs(gx) + std::fabs(gy);
          }
          py[(b * H + h) * W + w] = static_cast<T>(e);
        }
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    detail::record(out, {x}, [px, po, B, C, H, W, grads_at] {
      auto bwd = [&]<typename T>() {
        const T* xd = px->data<T>();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c) {
            const T* xc = xd + (b * C + c) * H * W;
            for (int64_t h = 0; h < H; ++h)
              for (int64_t w = 0; w < W; ++w) {
                double gx, gy;
                grads_at(xc, h, w, H, W, gx, gy);
                double sx = gx > 0.0 ? 1.0 : (gx < 0.0 ? -1.0 : 0.0);
                double sy = gy > 0.0 ? 1.0 : (gy < 0.0 ? -1.0 : 0.0);
                double de = po->grad_at((b * H + h) * W + w);
                if (de == 0.0 || (sx == 0.0 && sy == 0.0)) continue;
                for (int64_t di = 0; di < 3; ++di) {
                  int64_t ih = h + di - 1;
                  if (ih < 0 || ih >= H) continue;
                  for (int64_t dj = 0; dj < 3; ++dj) {
                    int64_t iw = w + dj - 1;
                    if (iw < 0 || iw >= W) continue;
                    px->grad_add((b * C + c) * H * W + ih * W + iw,
                                 de * (sx * kSobelX[di][dj] + sy * kSobelY[di][dj]));
                  }
                }
              }
          }
      };
      if (px->dtype == Dtype::F32)
        bwd.operator()<float>();
      else
        bwd.operator()<double>();
    });
  }
  return out;
}

TensorPtr gru_cell(const TensorPtr& state, const TensorPtr& input, const GruParams& p) {
  check_same_shape("gru_cell", *state, *input);
  // z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
  // n = tanh(x Wn + r * (h Un) + bn), h' = (1 - z) * n + z * h.
  auto z = sigmoid(add_bias_rows(add(matmul(input, p.wz), matmul(state, p.uz)), p.bz));
  auto r = sigmoid(add_bias_rows(add(matmul(input, p.wr), matmul(state, p.ur)), p.br));
  auto n = tanh_op(add_bias_rows(add(matmul(input, p.wn), mul(r, matmul(state, p.un))), p.bn));
  auto ones = Tensor::full(z->shape, 1.0, z->dtype);
  return add(mul(sub(ones, z), n), mul(z, state));
}

}  // namespace visa
