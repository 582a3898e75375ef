#include <algorithm>

#include "op_common.hpp"

namespace visa {
namespace {

// x [C,H,W] -> col [C*kh*kw, Ho*Wo], zero padding. Row r = (c*kh + ki)*kw + kj.
template <typename T>
void im2col(const T* x, T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo) {
  int64_t r = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj, ++r) {
        T* crow = col + r * Ho * Wo;
        const T* xc = x + c * H * W;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill_n(crow + oh * Wo, Wo, T(0));
            continue;
          }
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw = ow * stride - pad + kj;
            crow[oh * Wo + ow] = (iw >= 0 && iw < W) ? xc[ih * W + iw] : T(0);
          }
        }
      }
}

// Scatter-add transpose of im2col: col [C*kh*kw, Ho*Wo] -> x [C,H,W].
template <typename T>
void col2im_acc(const T* col, T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo) {
  int64_t r = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj, ++r) {
        const T* crow = col + r * Ho * Wo;
        T* xc = x + c * H * W;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) xc[ih * W + iw] += crow[oh * Wo + ow];
          }
        }
      }
}

int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride,
                 int pad) {
  check_same_dtype("conv2d", *x, *w);
  if (x->rank() != 4 || w->rank() != 4)
    fail<ShapeError>(strformat("conv2d: expected [B,C,H,W] x [Co,Ci,kh,kw], got %s x %s",
                               shape_str(x->shape).c_str(), shape_str(w->shape).c_str()));
  int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  int64_t Co = w->dim(0), Ci = w->dim(1), kh = w->dim(2), kw = w->dim(3);
  if (Ci != C)
    fail<ShapeError>(strformat("conv2d: input has %lld channels, weight expects %lld",
                               static_cast<long long>(C), static_cast<long long>(Ci)));
  if (b && (b->rank() != 1 || b->dim(0) != Co))
    fail<ShapeError>("conv2d: bias shape " + shape_str(b->shape));
  int64_t Ho = conv_out_extent(H, kh, stride, pad);
  int64_t Wo = conv_out_extent(W, kw, stride, pad);
  if (Ho <= 0 || Wo <= 0)
    fail<ShapeError>(strformat("conv2d: kernel %lldx%lld does not fit input %lldx%lld",
                               static_cast<long long>(kh), static_cast<long long>(kw),
                               static_cast<long long>(H), static_cast<long long>(W)));
  auto out = Tensor::zeros({B, Co, Ho, Wo}, x->dtype);

  int64_t ckk = C * kh * kw, hw = Ho * Wo;
  auto fwd = [&]<typename T>() {
    std::vector<T> col(static_cast<size_t>(ckk * hw));
    const T* px = x->data<T>();
    const T* pw = w->data<T>();
    T* py = out->data<T>();
    for (int64_t i = 0; i < B; ++i) {
      im2col(px + i * C * H * W, col.data(), C, H, W, kh, kw, stride, pad, Ho, Wo);
      detail::gemm_nn(pw, col.data(), py + i * Co * hw, Co, ckk, hw);
    }
    if (b) {
      const T* pb = b->data<T>();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t c = 0; c < Co; ++c) {
          T bias = pb[c];
          T* row = py + (i * Co + c) * hw;
          for (int64_t p = 0; p < hw; ++p) row[p] += bias;
        }
    }
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x, &w, &b})) {
    Tensor* px = x.get();
    Tensor* pw = w.get();
    Tensor* pb = b.get();
    Tensor* po = out.get();
    std::vector<TensorPtr> parents{x, w};
    if (b) parents.push_back(b);
    int64_t s = stride, p_ = pad;
    detail::record(out, parents, [px, pw, pb, po, B, C, H, W, Co, kh, kw, s, p_, Ho, Wo, ckk,
                                  hw] {
      auto bwd = [&]<typename T>() {
        // The column buffer is rebuilt per batch element rather than cached
        // from the forward pass; peak memory stays one buffer.
        std::vector<T> col(static_cast<size_t>(ckk * hw));
        std::vector<T> dcol(static_cast<size_t>(ckk * hw));
        const T* xd = px->data<T>();
        const T* wd = pw->data<T>();
        const T* dy = po->grad<T>();
        for (int64_t i = 0; i < B; ++i) {
          const T* dyi = dy + i * Co * hw;
          if (pw->requires_grad) {
            im2col(xd + i * C * H * W, col.data(), C, H, W, kh, kw, s, p_, Ho, Wo);
            detail::gemm_nt(dyi, col.data(), pw->grad<T>(), Co, hw, ckk);
          }
          if (px->requires_grad) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            detail::gemm_tn(wd, dyi, dcol.data(), ckk, Co, hw);
            col2im_acc(dcol.data(), px->grad<T>() + i * C * H * W, C, H, W, kh, kw, s, p_, Ho,
                       Wo);
          }
        }
        if (pb && pb->requires_grad) {
          T* db = pb->grad<T>();
          for (int64_t i = 0; i < B; ++i)
            for (int64_t c = 0; c < Co; ++c) {
              double acc = 0.0;
              const T* row = dy + (i * Co + c) * hw;
              for (int64_t p = 0; p < hw; ++p) acc += static_cast<double>(row[p]);
              db[c] += static_cast<T>(acc);
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

TensorPtr conv_transpose2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                           int stride) {
  check_same_dtype("conv_transpose2d", *x, *w);
  if (x->rank() != 4 || w->rank() != 4)
    fail<ShapeError>(strformat("conv_transpose2d: expected [B,C,H,W] x [Ci,Co,k,k], got %s x %s",
                               shape_str(x->shape).c_str(), shape_str(w->shape).c_str()));
  int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  int64_t Ci = w->dim(0), Co = w->dim(1), kh = w->dim(2), kw = w->dim(3);
  if (Ci != C)
    fail<ShapeError>(strformat("conv_transpose2d: input has %lld channels, weight expects %lld",
                               static_cast<long long>(C), static_cast<long long>(Ci)));
  if (b && (b->rank() != 1 || b->dim(0) != Co))
    fail<ShapeError>("conv_transpose2d: bias shape " + shape_str(b->shape));
  int64_t Ho = (H - 1) * stride + kh;
  int64_t Wo = (W - 1) * stride + kw;
  auto out = Tensor::zeros({B, Co, Ho, Wo}, x->dtype);

  int64_t ckk = Co * kh * kw, hw = H * W;
  auto fwd = [&]<typename T>() {
    std::vector<T> cols(static_cast<size_t>(ckk * hw));
    const T* px = x->data<T>();
    const T* pw = w->data<T>();  // [C, Co*kh*kw] viewed flat
    T* py = out->data<T>();
    for (int64_t i = 0; i < B; ++i) {
      std::fill(cols.begin(), cols.end(), T(0));
      detail::gemm_tn(pw, px + i * C * hw, cols.data(), ckk, C, hw);
      // Columns indexed by input position scatter into the enlarged output.
      col2im_acc(cols.data(), py + i * Co * Ho * Wo, Co, Ho, Wo, kh, kw, stride, 0, H, W);
    }
    if (b) {
      const T* pb = b->data<T>();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t c = 0; c < Co; ++c) {
          T bias = pb[c];
          T* row = py + (i * Co + c) * Ho * Wo;
          for (int64_t p = 0; p < Ho * Wo; ++p) row[p] += bias;
        }
    }
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x, &w, &b})) {
    Tensor* px = x.get();
    Tensor* pw = w.get();
    Tensor* pb = b.get();
    Tensor* po = out.get();
    std::vector<TensorPtr> parents{x, w};
    if (b) parents.push_back(b);
    int64_t s = stride;
    detail::record(out, parents, [px, pw, pb, po, B, C, Co, H, W, Ho, Wo, kh, kw, s, ckk, hw] {
      auto bwd = [&]<typename T>() {
        std::vector<T> dcols(static_cast<size_t>(ckk * hw));
        const T* xd = px->data<T>();
        const T* wd = pw->data<T>();
        const T* dy = po->grad<T>();
        for (int64_t i = 0; i < B; ++i) {
          im2col(dy + i * Co * Ho * Wo, dcols.data(), Co, Ho, Wo, kh, kw, s, 0, H, W);
          if (px->requires_grad)
            detail::gemm_nn(wd, dcols.data(), px->grad<T>() + i * C * hw, C, ckk, hw);
          if (pw->requires_grad)
            detail::gemm_nt(xd + i * C * hw, dcols.data(), pw->grad<T>(), C, hw, ckk);
        }
        if (pb && pb->requires_grad) {
          T* db = pb->grad<T>();
          for (int64_t i = 0; i < B; ++i)
            for (int64_t c = 0; c < Co; ++c) {
              double acc = 0.0;
              const T* row = dy + (i * Co + c) * Ho * Wo;
              for (int64_t p = 0; p < Ho * Wo; ++p) acc += static_cast<double>(row[p]);
              db[c] += static_cast<T>(acc);
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

namespace {

TensorPtr pool2d(const TensorPtr& x, int k, int stride, bool is_max) {
  if (x->rank() != 4)
    fail<ShapeError>("pool2d: expected [B,C,H,W], got " + shape_str(x->shape));
  int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  int64_t Ho = conv_out_extent(H, k, stride, 0);
  int64_t Wo = conv_out_extent(W, k, stride, 0);
  if (Ho <= 0 || Wo <= 0)
    fail<ShapeError>(strformat("pool2d: window %d does not fit input %lldx%lld", k,
                               static_cast<long long>(H), static_cast<long long>(W)));
  auto out = Tensor::zeros({B, C, Ho, Wo}, x->dtype);

  // For max pooling, remember which input each output came from; ties take
  // the first (row-major) element so the subgradient is deterministic.
  auto argmax = is_max ? std::make_shared<std::vector<int64_t>>(
                             static_cast<size_t>(B * C * Ho * Wo))
                       : nullptr;
  double inv = 1.0 / (static_cast<double>(k) * k);
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        double best = -1e300, acc = 0.0;
        int64_t best_i = -1;
        for (int64_t ki = 0; ki < k; ++ki)
          for (int64_t kj = 0; kj < k; ++kj) {
            int64_t idx = bc * H * W + (oh * stride + ki) * W + (ow * stride + kj);
            double v = x->at(idx);
            if (is_max) {
              if (v > best) {
                best = v;
                best_i = idx;
              }
            } else {
              acc += v;
            }
          }
        int64_t o = bc * Ho * Wo + oh * Wo + ow;
        if (is_max) {
          out->set(o, best);
          (*argmax)[static_cast<size_t>(o)] = best_i;
        } else {
          out->set(o, acc * inv);
        }
      }

  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    int64_t kk = k, st = stride;
    detail::record(out, {x}, [px, po, argmax, B, C, H, W, Ho, Wo, kk, st, inv, is_max] {
      int64_t n = B * C * Ho * Wo;
      if (is_max) {
        for (int64_t o = 0; o < n; ++o)
          px->grad_add((*argmax)[static_cast<size_t>(o)], po->grad_at(o));
      } else {
        for (int64_t bc = 0; bc < B * C; ++bc)
          for (int64_t oh = 0; oh < Ho; ++oh)
            for (int64_t ow = 0; ow < Wo; ++ow) {
              double g = po->grad_at(bc * Ho * Wo + oh * Wo + ow) * inv;
              for (int64_t ki = 0; ki < kk; ++ki)
                for (int64_t kj = 0; kj < kk; ++kj)
                  px->grad_add(bc * H * W + (oh * st + ki) * W + (ow * st + kj), g);
            }
      }
    });
  }
  return out;
}

}  // namespace

TensorPtr avg_pool2d(const TensorPtr& x, int k, int stride) { return pool2d(x, k, stride, false); }
TensorPtr max_pool2d(const TensorPtr& x, int k, int stride) { return pool2d(x, k, stride, true); }

TensorPtr global_avg_pool(const TensorPtr& x) {
  if (x->rank() != 4)
    fail<ShapeError>("global_avg_pool: expected [B,C,H,W], got " + shape_str(x->shape));
  int64_t B = x->dim(0), C = x->dim(1), hw = x->dim(2) * x->dim(3);
  auto out = Tensor::zeros({B, C}, x->dtype);
  double inv = 1.0 / static_cast<double>(hw);
  for (int64_t i = 0; i < B * C; ++i) {
    double s = 0.0;
    for (int64_t p = 0; p < hw; ++p) s += x->at(i * hw + p);
    out->set(i, s * inv);
  }
  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    detail::record(out, {x}, [px, po, B, C, hw, inv] {
      auto acc = [&]<typename T>() {
        const T* dy = po->grad<T>();
        T* dx = px->grad<T>();
        for (int64_t i = 0; i < B * C; ++i) {
          T g = static_cast<T>(static_cast<double>(dy[i]) * inv);
          for (int64_t p = 0; p < hw; ++p) dx[i * hw + p] += g;
        }
      };
      if (px->dtype == Dtype::F32)
        acc.operator()<float>();
      else
        acc.operator()<double>();
    });
  }
  return out;
}

TensorPtr channel_pool_avgmax(const TensorPtr& x) {
  if (x->rank() != 4)
    fail<ShapeError>("channel_pool_avgmax: expected [B,C,H,W], got " + shape_str(x->shape));
  int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  int64_t hw = H * W;
  auto out = Tensor::zeros({B, 2, H, W}, x->dtype);
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(B * hw));
  double inv = 1.0 / static_cast<double>(C);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < hw; ++p) {
      double s = 0.0, best = -1e300;
      int64_t best_c = 0;
      for (int64_t c = 0; c < C; ++c) {
        double v = x->at((b * C + c) * hw + p);
        s += v;
        if (v > best) {  // first max wins on ties
          best = v;
          best_c = c;
        }
      }
      out->set((b * 2 + 0) * hw + p, s * inv);
      out->set((b * 2 + 1) * hw + p, best);
      (*argmax)[static_cast<size_t>(b * hw + p)] = best_c;
    }
  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    detail::record(out, {x}, [px, po, argmax, B, C, hw, inv] {
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < hw; ++p) {
          double ga = po->grad_at((b * 2 + 0) * hw + p) * inv;
          for (int64_t c = 0; c < C; ++c) px->grad_add((b * C + c) * hw + p, ga);
          int64_t mc = (*argmax)[static_cast<size_t>(b * hw + p)];
          px->grad_add((b * C + mc) * hw + p, po->grad_at((b * 2 + 1) * hw + p));
        }
    });
  }
  return out;
}

TensorPtr scale_channels(const TensorPtr& x, const TensorPtr& a) {
  check_same_dtype("scale_channels", *x, *a);
  if (x->rank() != 4 || a->rank() != 2 || a->dim(0) != x->dim(0) || a->dim(1) != x->dim(1))
    fail<ShapeError>(strformat("scale_channels: %s * %s", shape_str(x->shape).c_str(),
                               shape_str(a->shape).c_str()));
  int64_t B = x->dim(0), C = x->dim(1), hw = x->dim(2) * x->dim(3);
  auto out = Tensor::zeros(x->shape, x->dtype);
  auto fwd = [&]<typename T>() {
    const T* px = x->data<T>();
    const T* pa = a->data<T>();
    T* py = out->data<T>();
    for (int64_t i = 0; i < B * C; ++i) {
      T g = pa[i];
      for (int64_t p = 0; p < hw; ++p) py[i * hw + p] = px[i * hw + p] * g;
    }
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x, &a})) {
    Tensor* px = x.get();
    Tensor* pa = a.get();
    Tensor* po = out.get();
    detail::record(out, {x, a}, [px, pa, po, B, C, hw] {
      auto bwd = [&]<typename T>() {
        const T* dy = po->grad<T>();
        const T* xd = px->data<T>();
        const T* ad = pa->data<T>();
        if (px->requires_grad) {
          T* dx = px->grad<T>();
          for (int64_t i = 0; i < B * C; ++i) {
            T g = ad[i];
            for (int64_t p = 0; p < hw; ++p) dx[i * hw + p] += dy[i * hw + p] * g;
          }
        }
        if (pa->requires_grad) {
          T* da = pa->grad<T>();
          for (int64_t i = 0; i < B * C; ++i) {
            double s = 0.0;
            for (int64_t p = 0; p < hw; ++p)
              s += static_cast<double>(dy[i * hw + p]) * static_cast<double>(xd[i * hw + p]);
            da[i] += static_cast<T>(s);
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

TensorPtr scale_spatial(const TensorPtr& x, const TensorPtr& m) {
  check_same_dtype("scale_spatial", *x, *m);
  if (x->rank() != 4 || m->rank() != 4 || m->dim(0) != x->dim(0) || m->dim(1) != 1 ||
      m->dim(2) != x->dim(2) || m->dim(3) != x->dim(3))
    fail<ShapeError>(strformat("scale_spatial: %s * %s", shape_str(x->shape).c_str(),
                               shape_str(m->shape).c_str()));
  int64_t B = x->dim(0), C = x->dim(1), hw = x->dim(2) * x->dim(3);
  auto out = Tensor::zeros(x->shape, x->dtype);
  auto fwd = [&]<typename T>() {
    const T* px = x->data<T>();
    const T* pm = m->data<T>();
    T* py = out->data<T>();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t p = 0; p < hw; ++p)
          py[(b * C + c) * hw + p] = px[(b * C + c) * hw + p] * pm[b * hw + p];
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x, &m})) {
    Tensor* px = x.get();
    Tensor* pm = m.get();
    Tensor* po = out.get();
    detail::record(out, {x, m}, [px, pm, po, B, C, hw] {
      auto bwd = [&]<typename T>() {
        const T* dy = po->grad<T>();
        const T* xd = px->data<T>();
        const T* md = pm->data<T>();
        if (px->requires_grad) {
          T* dx = px->grad<T>();
          for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
              for (int64_t p = 0; p < hw; ++p)
                dx[(b * C + c) * hw + p] += dy[(b * C + c) * hw + p] * md[b * hw + p];
        }
        if (pm->requires_grad) {
          T* dm = pm->grad<T>();
          for (int64_t b = 0; b < B; ++b)
            for (int64_t p = 0; p < hw; ++p) {
              double s = 0.0;
              for (int64_t c = 0; c < C; ++c)
                s += static_cast<double>(dy[(b * C + c) * hw + p]) *
                     static_cast<double>(xd[(b * C + c) * hw + p]);
              dm[b * hw + p] += static_cast<T>(s);
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

}  // namespace visa
