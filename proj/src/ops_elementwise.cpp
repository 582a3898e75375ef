#include <cmath>

#include "op_common.hpp"

namespace visa {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename T, typename F>
void map1(const Tensor& a, Tensor& out, F f) {
  const T* x = a.data<T>();
  T* y = out.data<T>();
  for (int64_t i = 0, n = a.numel(); i < n; ++i)
    y[i] = static_cast<T>(f(static_cast<double>(x[i])));
}

// dx_i += g(x_i, y_i) * dy_i
template <typename T, typename G>
void acc1(Tensor& a, const Tensor& out, G g) {
  const T* x = a.data<T>();
  const T* y = out.data<T>();
  const T* dy = const_cast<Tensor&>(out).grad<T>();
  T* dx = a.grad<T>();
  for (int64_t i = 0, n = a.numel(); i < n; ++i)
    dx[i] += static_cast<T>(g(static_cast<double>(x[i]), static_cast<double>(y[i])) *
                            static_cast<double>(dy[i]));
}

// y = f(x) elementwise with local derivative g(x, y).
template <typename F, typename G>
TensorPtr unary_op(const TensorPtr& a, F f, G g) {
  auto out = Tensor::zeros(a->shape, a->dtype);
  if (a->dtype == Dtype::F32)
    map1<float>(*a, *out, f);
  else
    map1<double>(*a, *out, f);
  if (detail::track({&a})) {
    Tensor* pa = a.get();
    Tensor* po = out.get();
    detail::record(out, {a}, [pa, po, g] {
      if (pa->dtype == Dtype::F32)
        acc1<float>(*pa, *po, g);
      else
        acc1<double>(*pa, *po, g);
    });
  }
  return out;
}

template <typename T, typename F>
void map2(const Tensor& a, const Tensor& b, Tensor& out, F f) {
  const T* x = a.data<T>();
  const T* y = b.data<T>();
  T* z = out.data<T>();
  for (int64_t i = 0, n = a.numel(); i < n; ++i)
    z[i] = static_cast<T>(f(static_cast<double>(x[i]), static_cast<double>(y[i])));
}

template <typename T, typename GA, typename GB>
void acc2(Tensor& a, Tensor& b, const Tensor& out, GA ga, GB gb) {
  const T* x = a.data<T>();
  const T* y = b.data<T>();
  const T* dy = const_cast<Tensor&>(out).grad<T>();
  int64_t n = a.numel();
  if (a.requires_grad) {
    T* dx = a.grad<T>();
    for (int64_t i = 0; i < n; ++i)
      dx[i] += static_cast<T>(ga(static_cast<double>(x[i]), static_cast<double>(y[i])) *
                              static_cast<double>(dy[i]));
  }
  if (b.requires_grad) {
    T* db = b.grad<T>();
    for (int64_t i = 0; i < n; ++i)
      db[i] += static_cast<T>(gb(static_cast<double>(x[i]), static_cast<double>(y[i])) *
                              static_cast<double>(dy[i]));
  }
}

template <typename F, typename GA, typename GB>
TensorPtr binary_op(const char* name, const TensorPtr& a, const TensorPtr& b, F f, GA ga,
                    GB gb) {
  check_same_shape(name, *a, *b);
  check_same_dtype(name, *a, *b);
  auto out = Tensor::zeros(a->shape, a->dtype);
  if (a->dtype == Dtype::F32)
    map2<float>(*a, *b, *out, f);
  else
    map2<double>(*a, *b, *out, f);
  if (detail::track({&a, &b})) {
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    Tensor* po = out.get();
    detail::record(out, {a, b}, [pa, pb, po, ga, gb] {
      if (pa->dtype == Dtype::F32)
        acc2<float>(*pa, *pb, *po, ga, gb);
      else
        acc2<double>(*pa, *pb, *po, ga, gb);
    });
  }
  return out;
}

}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

TensorPtr neg(const TensorPtr& a) {
  return unary_op(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

TensorPtr scale(const TensorPtr& a, double c) {
  return unary_op(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

TensorPtr add_scalar(const TensorPtr& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

TensorPtr relu(const TensorPtr& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

TensorPtr sigmoid(const TensorPtr& a) {
  return unary_op(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

TensorPtr tanh_op(const TensorPtr& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

TensorPtr gelu(const TensorPtr& a) {
  return unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
               x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

TensorPtr abs_op(const TensorPtr& a) {
  return unary_op(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

TensorPtr log_guarded(const TensorPtr& a, double floor) {
  // Clamp only small finite values; a NaN input must surface as a NaN output
  // rather than being laundered into log(floor).
  return unary_op(
      a, [floor](double x) { return x < floor ? std::log(floor) : std::log(x); },
      [floor](double x, double) { return x < floor ? 0.0 : 1.0 / x; });
}

TensorPtr softmax(const TensorPtr& x, int axis, double tau) {
  if (tau <= 0.0) fail<NumericError>("softmax: temperature must be positive");
  auto v = detail::axis_view(x->shape, axis);
  auto out = Tensor::zeros(x->shape, x->dtype);

  auto fwd = [&]<typename T>() {
    const T* in = x->data<T>();
    T* y = out->data<T>();
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t in_i = 0; in_i < v.inner; ++in_i) {
        int64_t base = o * v.len * v.inner + in_i;
        double m = -1e300;
        for (int64_t a = 0; a < v.len; ++a)
          m = std::max(m, static_cast<double>(in[base + a * v.inner]));
        double s = 0.0;
        for (int64_t a = 0; a < v.len; ++a) {
          double e = std::exp((static_cast<double>(in[base + a * v.inner]) - m) / tau);
          y[base + a * v.inner] = static_cast<T>(e);
          s += e;
        }
        double inv = 1.0 / s;
        for (int64_t a = 0; a < v.len; ++a)
          y[base + a * v.inner] = static_cast<T>(static_cast<double>(y[base + a * v.inner]) * inv);
      }
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    detail::record(out, {x}, [px, po, v, tau] {
      auto bwd = [&]<typename T>() {
        const T* y = po->data<T>();
        const T* dy = po->grad<T>();
        T* dx = px->grad<T>();
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t in_i = 0; in_i < v.inner; ++in_i) {
            int64_t base = o * v.len * v.inner + in_i;
            double dot = 0.0;
            for (int64_t a = 0; a < v.len; ++a)
              dot += static_cast<double>(dy[base + a * v.inner]) *
                     static_cast<double>(y[base + a * v.inner]);
            for (int64_t a = 0; a < v.len; ++a) {
              int64_t i = base + a * v.inner;
              dx[i] += static_cast<T>(static_cast<double>(y[i]) *
                                      (static_cast<double>(dy[i]) - dot) / tau);
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

TensorPtr sum_all(const TensorPtr& x) {
  auto out = Tensor::zeros({1}, x->dtype);
  double s = 0.0;
  for (int64_t i = 0, n = x->numel(); i < n; ++i) s += x->at(i);
  out->set(0, s);
  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    detail::record(out, {x}, [px, po] {
      double g = po->grad_at(0);
      auto acc = [&]<typename T>() {
        T* dx = px->grad<T>();
        for (int64_t i = 0, n = px->numel(); i < n; ++i) dx[i] += static_cast<T>(g);
      };
      if (px->dtype == Dtype::F32)
        acc.operator()<float>();
      else
        acc.operator()<double>();
    });
  }
  return out;
}

namespace {

TensorPtr reduce_axis(const TensorPtr& x, int axis, bool mean) {
  int ax = detail::normalize_axis(x->shape, axis);
  if (x->rank() == 1 && x->dim(0) == 1)
    fail<ShapeError>("reduce: cannot drop the last axis of a scalar");
  auto v = detail::axis_view(x->shape, ax);
  Shape oshape = x->shape;
  oshape.erase(oshape.begin() + ax);
  if (oshape.empty()) oshape = {1};
  auto out = Tensor::zeros(oshape, x->dtype);
  double w = mean ? 1.0 / static_cast<double>(v.len) : 1.0;

  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t in_i = 0; in_i < v.inner; ++in_i) {
      double s = 0.0;
      int64_t base = o * v.len * v.inner + in_i;
      for (int64_t a = 0; a < v.len; ++a) s += x->at(base + a * v.inner);
      out->set(o * v.inner + in_i, s * w);
    }

  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    detail::record(out, {x}, [px, po, v, w] {
      auto acc = [&]<typename T>() {
        const T* dy = po->grad<T>();
        T* dx = px->grad<T>();
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t in_i = 0; in_i < v.inner; ++in_i) {
            double g = static_cast<double>(dy[o * v.inner + in_i]) * w;
            int64_t base = o * v.len * v.inner + in_i;
            for (int64_t a = 0; a < v.len; ++a) dx[base + a * v.inner] += static_cast<T>(g);
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

}  // namespace

TensorPtr reduce_sum(const TensorPtr& x, int axis) { return reduce_axis(x, axis, false); }
TensorPtr reduce_mean(const TensorPtr& x, int axis) { return reduce_axis(x, axis, true); }

std::vector<uint8_t> argmax_channel(const Tensor& logits) {
  if (logits.rank() != 4)
    fail<ShapeError>("argmax_channel: expected [B,C,H,W], got " + shape_str(logits.shape));
  int64_t B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  std::vector<uint8_t> out(static_cast<size_t>(B * H * W));
  int64_t hw = H * W;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < hw; ++p) {
      int best = 0;
      double bv = logits.at((b * C) * hw + p);
      for (int c = 1; c < C; ++c) {
        double v = logits.at((b * C + c) * hw + p);
        if (v > bv) {  // strict: ties keep the lowest class index
          bv = v;
          best = c;
        }
      }
      out[static_cast<size_t>(b * hw + p)] = static_cast<uint8_t>(best);
    }
  return out;
}

}  // namespace visa
