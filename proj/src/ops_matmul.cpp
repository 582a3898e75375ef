#include "op_common.hpp"

namespace visa {
namespace detail {

// All three kernels accumulate into C with a fixed per-element summation
// order, so repeated runs are bit-identical. Loop orders are chosen so the
// innermost loop is contiguous in memory and auto-vectorises.

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      T a = A[i * k + p];
      const T* brow = B + p * n;
      T* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      const T* arow = A + i * k;
      const T* brow = B + j * k;
      T s = 0;
      for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      C[i * n + j] += s;
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p)
    for (int64_t i = 0; i < m; ++i) {
      T a = A[p * m + i];
      const T* brow = B + p * n;
      T* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
}

template void gemm_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void gemm_nt<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_nt<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);
template void gemm_tn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t);
template void gemm_tn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t);

}  // namespace detail

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  check_same_dtype("matmul", *a, *b);
  if (a->rank() < 2) fail<ShapeError>("matmul: lhs rank must be >= 2, got " + shape_str(a->shape));
  bool shared_rhs = b->rank() == 2;
  if (!shared_rhs && b->rank() != a->rank())
    fail<ShapeError>(strformat("matmul: rhs must be rank 2 or match lhs rank (%s vs %s)",
                               shape_str(a->shape).c_str(), shape_str(b->shape).c_str()));
  int64_t m = a->dim(-2), k = a->dim(-1);
  int64_t k2 = b->dim(-2), n = b->dim(-1);
  if (k != k2)
    fail<ShapeError>(strformat("matmul: inner extents differ (%s x %s)",
                               shape_str(a->shape).c_str(), shape_str(b->shape).c_str()));
  int64_t batch = 1;
  for (int i = 0; i < a->rank() - 2; ++i) batch *= a->dim(i);
  if (!shared_rhs) {
    for (int i = 0; i < a->rank() - 2; ++i)
      if (a->dim(i) != b->dim(i))
        fail<ShapeError>(strformat("matmul: leading extents differ (%s x %s)",
                                   shape_str(a->shape).c_str(), shape_str(b->shape).c_str()));
  }

  Shape oshape(a->shape.begin(), a->shape.end() - 1);
  oshape.push_back(n);
  auto out = Tensor::zeros(oshape, a->dtype);

  auto fwd = [&]<typename T>() {
    const T* pa = a->data<T>();
    const T* pb = b->data<T>();
    T* pc = out->data<T>();
    for (int64_t i = 0; i < batch; ++i)
      detail::gemm_nn(pa + i * m * k, shared_rhs ? pb : pb + i * k * n, pc + i * m * n, m, k, n);
  };
  if (a->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&a, &b})) {
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    Tensor* po = out.get();
    detail::record(out, {a, b}, [pa, pb, po, batch, m, k, n, shared_rhs] {
      auto bwd = [&]<typename T>() {
        const T* A = pa->data<T>();
        const T* B = pb->data<T>();
        const T* dC = po->grad<T>();
        for (int64_t i = 0; i < batch; ++i) {
          const T* Ai = A + i * m * k;
          const T* Bi = shared_rhs ? B : B + i * k * n;
          const T* dCi = dC + i * m * n;
          if (pa->requires_grad)
            detail::gemm_nt(dCi, Bi, pa->grad<T>() + i * m * k, m, n, k);
          if (pb->requires_grad)
            detail::gemm_tn(Ai, dCi, pb->grad<T>() + (shared_rhs ? 0 : i * k * n), k, m, n);
        }
      };
      if (pa->dtype == Dtype::F32)
        bwd.operator()<float>();
      else
        bwd.operator()<double>();
    });
  }
  return out;
}

TensorPtr add_bias_rows(const TensorPtr& x, const TensorPtr& b) {
  check_same_dtype("add_bias_rows", *x, *b);
  if (b->rank() != 1 || b->dim(0) != x->dim(-1))
    fail<ShapeError>(strformat("add_bias_rows: bias %s does not match last axis of %s",
                               shape_str(b->shape).c_str(), shape_str(x->shape).c_str()));
  int64_t d = x->dim(-1);
  int64_t rows = x->numel() / d;
  auto out = Tensor::zeros(x->shape, x->dtype);

  auto fwd = [&]<typename T>() {
    const T* px = x->data<T>();
    const T* pb = b->data<T>();
    T* py = out->data<T>();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j) py[r * d + j] = px[r * d + j] + pb[j];
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x, &b})) {
    Tensor* px = x.get();
    Tensor* pb = b.get();
    Tensor* po = out.get();
    detail::record(out, {x, b}, [px, pb, po, rows, d] {
      auto bwd = [&]<typename T>() {
        const T* dy = po->grad<T>();
        if (px->requires_grad) {
          T* dx = px->grad<T>();
          for (int64_t i = 0, nn = rows * d; i < nn; ++i) dx[i] += dy[i];
        }
        if (pb->requires_grad) {
          T* db = pb->grad<T>();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
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

TensorPtr add_bias_channels(const TensorPtr& x, const TensorPtr& b) {
  check_same_dtype("add_bias_channels", *x, *b);
  if (x->rank() != 4 || b->rank() != 1 || b->dim(0) != x->dim(1))
    fail<ShapeError>(strformat("add_bias_channels: %s + %s", shape_str(x->shape).c_str(),
                               shape_str(b->shape).c_str()));
  int64_t B = x->dim(0), C = x->dim(1), hw = x->dim(2) * x->dim(3);
  auto out = Tensor::zeros(x->shape, x->dtype);

  auto fwd = [&]<typename T>() {
    const T* px = x->data<T>();
    const T* pb = b->data<T>();
    T* py = out->data<T>();
    for (int64_t i = 0; i < B * C; ++i) {
      T bias = pb[i % C];
      for (int64_t p = 0; p < hw; ++p) py[i * hw + p] = px[i * hw + p] + bias;
    }
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x, &b})) {
    Tensor* px = x.get();
    Tensor* pb = b.get();
    Tensor* po = out.get();
    detail::record(out, {x, b}, [px, pb, po, B, C, hw] {
      auto bwd = [&]<typename T>() {
        const T* dy = po->grad<T>();
        if (px->requires_grad) {
          T* dx = px->grad<T>();
          for (int64_t i = 0, nn = B * C * hw; i < nn; ++i) dx[i] += dy[i];
        }
        if (pb->requires_grad) {
          T* db = pb->grad<T>();
          for (int64_t i = 0; i < B * C; ++i) {
            double s = 0.0;
            for (int64_t p = 0; p < hw; ++p) s += static_cast<double>(dy[i * hw + p]);
            db[i % C] += static_cast<T>(s);
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

TensorPtr add_row_broadcast(const TensorPtr& x, const TensorPtr& v) {
  check_same_dtype("add_row_broadcast", *x, *v);
  if (x->rank() != 3 || v->rank() != 2 || v->dim(0) != x->dim(0) || v->dim(1) != x->dim(2))
    fail<ShapeError>(strformat("add_row_broadcast: %s + %s", shape_str(x->shape).c_str(),
                               shape_str(v->shape).c_str()));
  int64_t B = x->dim(0), L = x->dim(1), d = x->dim(2);
  auto out = Tensor::zeros(x->shape, x->dtype);

  auto fwd = [&]<typename T>() {
    const T* px = x->data<T>();
    const T* pv = v->data<T>();
    T* py = out->data<T>();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < L; ++t)
        for (int64_t j = 0; j < d; ++j)
          py[(b * L + t) * d + j] = px[(b * L + t) * d + j] + pv[b * d + j];
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x, &v})) {
    Tensor* px = x.get();
    Tensor* pv = v.get();
    Tensor* po = out.get();
    detail::record(out, {x, v}, [px, pv, po, B, L, d] {
      auto bwd = [&]<typename T>() {
        const T* dy = po->grad<T>();
        if (px->requires_grad) {
          T* dx = px->grad<T>();
          for (int64_t i = 0, nn = B * L * d; i < nn; ++i) dx[i] += dy[i];
        }
        if (pv->requires_grad) {
          T* dv = pv->grad<T>();
          for (int64_t b = 0; b < B; ++b)
            for (int64_t t = 0; t < L; ++t)
              for (int64_t j = 0; j < d; ++j) dv[b * d + j] += dy[(b * L + t) * d + j];
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
