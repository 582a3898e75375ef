#include <cmath>

#include "op_common.hpp"

namespace visa {

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     int axis, double eps) {
  check_same_dtype("layer_norm", *x, *gamma);
  check_same_dtype("layer_norm", *x, *beta);
  auto v = detail::axis_view(x->shape, axis);
  if (gamma->rank() != 1 || gamma->dim(0) != v.len || beta->rank() != 1 || beta->dim(0) != v.len)
    fail<ShapeError>(strformat("layer_norm: affine params must be [%lld], got %s / %s",
                               static_cast<long long>(v.len), shape_str(gamma->shape).c_str(),
                               shape_str(beta->shape).c_str()));
  auto out = Tensor::zeros(x->shape, x->dtype);

  // Population variance over the normalised axis.
  auto fwd = [&]<typename T>() {
    const T* in = x->data<T>();
    const T* g = gamma->data<T>();
    const T* be = beta->data<T>();
    T* y = out->data<T>();
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t i = 0; i < v.inner; ++i) {
        int64_t base = o * v.len * v.inner + i;
        double mu = 0.0;
        for (int64_t a = 0; a < v.len; ++a) mu += static_cast<double>(in[base + a * v.inner]);
        mu /= static_cast<double>(v.len);
        double var = 0.0;
        for (int64_t a = 0; a < v.len; ++a) {
          double d = static_cast<double>(in[base + a * v.inner]) - mu;
          var += d * d;
        }
        var /= static_cast<double>(v.len);
        double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t a = 0; a < v.len; ++a) {
          int64_t idx = base + a * v.inner;
          double xhat = (static_cast<double>(in[idx]) - mu) * inv;
          y[idx] = static_cast<T>(xhat * static_cast<double>(g[a]) + static_cast<double>(be[a]));
        }
      }
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x, &gamma, &beta})) {
    Tensor* px = x.get();
    Tensor* pg = gamma.get();
    Tensor* pb = beta.get();
    Tensor* po = out.get();
    detail::record(out, {x, gamma, beta}, [px, pg, pb, po, v, eps] {
      auto bwd = [&]<typename T>() {
        const T* in = px->data<T>();
        const T* g = pg->data<T>();
        const T* dy = po->grad<T>();
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t i = 0; i < v.inner; ++i) {
            int64_t base = o * v.len * v.inner + i;
            double mu = 0.0;
            for (int64_t a = 0; a < v.len; ++a)
              mu += static_cast<double>(in[base + a * v.inner]);
            mu /= static_cast<double>(v.len);
            double var = 0.0;
            for (int64_t a = 0; a < v.len; ++a) {
              double d = static_cast<double>(in[base + a * v.inner]) - mu;
              var += d * d;
            }
            var /= static_cast<double>(v.len);
            double inv = 1.0 / std::sqrt(var + eps);

            // dl/dxhat_a = dy_a * gamma_a; reduce twice, then distribute.
            double s1 = 0.0, s2 = 0.0;
            for (int64_t a = 0; a < v.len; ++a) {
              int64_t idx = base + a * v.inner;
              double xhat = (static_cast<double>(in[idx]) - mu) * inv;
              double dxh = static_cast<double>(dy[idx]) * static_cast<double>(g[a]);
              s1 += dxh;
              s2 += dxh * xhat;
            }
            double n = static_cast<double>(v.len);
            for (int64_t a = 0; a < v.len; ++a) {
              int64_t idx = base + a * v.inner;
              double xhat = (static_cast<double>(in[idx]) - mu) * inv;
              double dxh = static_cast<double>(dy[idx]) * static_cast<double>(g[a]);
              if (px->requires_grad)
                px->grad_add(idx, inv * (dxh - s1 / n - xhat * s2 / n));
              if (pg->requires_grad) pg->grad_add(a, static_cast<double>(dy[idx]) * xhat);
              if (pb->requires_grad) pb->grad_add(a, static_cast<double>(dy[idx]));
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

TensorPtr batch_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     BatchNormState& state, bool training, double momentum, double eps) {
  check_same_dtype("batch_norm", *x, *gamma);
  if (x->rank() != 4)
    fail<ShapeError>("batch_norm: expected [B,C,H,W], got " + shape_str(x->shape));
  int64_t B = x->dim(0), C = x->dim(1), hw = x->dim(2) * x->dim(3);
  if (gamma->dim(0) != C || beta->dim(0) != C)
    fail<ShapeError>("batch_norm: affine params do not match channel count");
  if (!state.running_mean || state.running_mean->dim(0) != C)
    fail<ShapeError>("batch_norm: state not initialised for this channel count");
  int64_t n = B * hw;

  std::vector<double> mu(static_cast<size_t>(C)), var(static_cast<size_t>(C));
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < hw; ++p) s += x->at((b * C + c) * hw + p);
      mu[static_cast<size_t>(c)] = s / static_cast<double>(n);
    }
    for (int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < hw; ++p) {
          double d = x->at((b * C + c) * hw + p) - mu[static_cast<size_t>(c)];
          s += d * d;
        }
      var[static_cast<size_t>(c)] = s / static_cast<double>(n);  // population variance
    }
    // new_running = momentum * batch_stat + (1 - momentum) * old_running
    for (int64_t c = 0; c < C; ++c) {
      state.running_mean->set(c, momentum * mu[static_cast<size_t>(c)] +
                                     (1.0 - momentum) * state.running_mean->at(c));
      state.running_var->set(c, momentum * var[static_cast<size_t>(c)] +
                                    (1.0 - momentum) * state.running_var->at(c));
    }
    state.steps += 1;
  } else {
    if (state.steps == 0)
      log_warn("batch_norm: evaluating with never-updated running statistics");
    for (int64_t c = 0; c < C; ++c) {
      mu[static_cast<size_t>(c)] = state.running_mean->at(c);
      var[static_cast<size_t>(c)] = state.running_var->at(c);
    }
  }

  auto out = Tensor::zeros(x->shape, x->dtype);
  auto fwd = [&]<typename T>() {
    const T* in = x->data<T>();
    const T* g = gamma->data<T>();
    const T* be = beta->data<T>();
    T* y = out->data<T>();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        double inv = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
        double gm = static_cast<double>(g[c]), bt = static_cast<double>(be[c]);
        double m = mu[static_cast<size_t>(c)];
        const T* row = in + (b * C + c) * hw;
        T* orow = y + (b * C + c) * hw;
        for (int64_t p = 0; p < hw; ++p)
          orow[p] = static_cast<T>((static_cast<double>(row[p]) - m) * inv * gm + bt);
      }
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x, &gamma, &beta})) {
    Tensor* px = x.get();
    Tensor* pg = gamma.get();
    Tensor* pb = beta.get();
    Tensor* po = out.get();
    detail::record(out, {x, gamma, beta}, [px, pg, pb, po, B, C, hw, n, mu, var, eps,
                                           training] {
      for (int64_t c = 0; c < C; ++c) {
        double m = mu[static_cast<size_t>(c)];
        double inv = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
        double gm = pg->at(c);
        double s1 = 0.0, s2 = 0.0;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t p = 0; p < hw; ++p) {
            int64_t idx = (b * C + c) * hw + p;
            double dy = po->grad_at(idx);
            double xhat = (px->at(idx) - m) * inv;
            s1 += dy;
            s2 += dy * xhat;
            if (pg->requires_grad) pg->grad_add(c, dy * xhat);
            if (pb->requires_grad) pb->grad_add(c, dy);
          }
        if (px->requires_grad) {
          double dn = static_cast<double>(n);
          for (int64_t b = 0; b < B; ++b)
            for (int64_t p = 0; p < hw; ++p) {
              int64_t idx = (b * C + c) * hw + p;
              double dy = po->grad_at(idx);
              double xhat = (px->at(idx) - m) * inv;
              // In eval mode the statistics are constants.
              double dx = training ? gm * inv * (dy - s1 / dn - xhat * s2 / dn)
                                   : gm * inv * dy;
              px->grad_add(idx, dx);
            }
        }
      }
    });
  }
  return out;
}

}  // namespace visa
