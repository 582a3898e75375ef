#include <algorithm>
#include <numeric>

#include "op_common.hpp"

namespace visa {

TensorPtr reshape(const TensorPtr& x, Shape target) {
  if (shape_numel(target) != x->numel())
    fail<ShapeError>(strformat("reshape: %s -> %s changes element count",
                               shape_str(x->shape).c_str(), shape_str(target).c_str()));
  auto out = Tensor::zeros(target, x->dtype);
  auto copy = [&]<typename T>() {
    std::copy_n(x->data<T>(), x->numel(), out->data<T>());
  };
  if (x->dtype == Dtype::F32)
    copy.operator()<float>();
  else
    copy.operator()<double>();
  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    detail::record(out, {x}, [px, po] {
      auto acc = [&]<typename T>() {
        const T* dy = po->grad<T>();
        T* dx = px->grad<T>();
        for (int64_t i = 0, n = px->numel(); i < n; ++i) dx[i] += dy[i];
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

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
  return st;
}

}  // namespace

TensorPtr permute(const TensorPtr& x, const std::vector<int>& axes) {
  int r = x->rank();
  if (static_cast<int>(axes.size()) != r)
    fail<ShapeError>(strformat("permute: %zu axes for rank-%d tensor", axes.size(), r));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape oshape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int a = axes[static_cast<size_t>(i)];
    if (a < 0 || a >= r || seen[static_cast<size_t>(a)])
      fail<ShapeError>(strformat("permute: invalid axis list (axis %d)", a));
    seen[static_cast<size_t>(a)] = true;
    oshape[static_cast<size_t>(i)] = x->shape[static_cast<size_t>(a)];
  }
  auto out = Tensor::zeros(oshape, x->dtype);

  auto in_strides = row_major_strides(x->shape);
  // Stride of output axis i in the *input* buffer.
  std::vector<int64_t> map_strides(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    map_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];

  int64_t n = x->numel();
  // Walks output elements in order while tracking the matching input offset.
  auto walk = [](int64_t count, int rank, const Shape& osh,
                 const std::vector<int64_t>& mstrides, auto&& visit) {
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    int64_t in_off = 0;
    for (int64_t flat = 0; flat < count; ++flat) {
      visit(flat, in_off);
      for (int i = rank - 1; i >= 0; --i) {
        size_t ui = static_cast<size_t>(i);
        if (++idx[ui] < osh[ui]) {
          in_off += mstrides[ui];
          break;
        }
        in_off -= mstrides[ui] * (osh[ui] - 1);
        idx[ui] = 0;
      }
    }
  };

  auto fwd = [&]<typename T>() {
    const T* src = x->data<T>();
    T* dst = out->data<T>();
    walk(n, r, oshape, map_strides, [&](int64_t flat, int64_t in_off) { dst[flat] = src[in_off]; });
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    detail::record(out, {x}, [px, po, walk, n, r, oshape, map_strides] {
      auto acc = [&]<typename T>() {
        const T* dy = po->grad<T>();
        T* dx = px->grad<T>();
        walk(n, r, oshape, map_strides,
             [&](int64_t flat, int64_t in_off) { dx[in_off] += dy[flat]; });
      };
      if (px->dtype == Dtype::F32)
        acc.operator()<float>();
      else
        acc.operator()<double>();
    });
  }
  return out;
}

TensorPtr concat(const std::vector<TensorPtr>& xs, int axis) {
  if (xs.empty()) fail<ShapeError>("concat: no inputs");
  int ax = detail::normalize_axis(xs[0]->shape, axis);
  Shape oshape = xs[0]->shape;
  int64_t total = 0;
  for (const auto& t : xs) {
    check_same_dtype("concat", *xs[0], *t);
    if (t->rank() != xs[0]->rank())
      fail<ShapeError>("concat: rank mismatch");
    for (int i = 0; i < t->rank(); ++i)
      if (i != ax && t->shape[static_cast<size_t>(i)] != xs[0]->shape[static_cast<size_t>(i)])
        fail<ShapeError>(strformat("concat: extent mismatch on axis %d (%s vs %s)", i,
                                   shape_str(xs[0]->shape).c_str(), shape_str(t->shape).c_str()));
    total += t->dim(ax);
  }
  oshape[static_cast<size_t>(ax)] = total;
  auto out = Tensor::zeros(oshape, xs[0]->dtype);

  auto vout = detail::axis_view(oshape, ax);
  // Copy block by block: for each input, rows of (len_i * inner) land at an
  // offset inside each outer slice of the output.
  auto run_copy = [&]<typename T>() {
    T* dst = out->data<T>();
    int64_t off = 0;
    for (const auto& t : xs) {
      auto vi = detail::axis_view(t->shape, ax);
      const T* src = t->data<T>();
      for (int64_t o = 0; o < vi.outer; ++o)
        std::copy_n(src + o * vi.len * vi.inner, vi.len * vi.inner,
                    dst + o * vout.len * vout.inner + off * vout.inner);
      off += vi.len;
    }
  };
  if (out->dtype == Dtype::F32)
    run_copy.operator()<float>();
  else
    run_copy.operator()<double>();

  bool any_grad = false;
  for (const auto& t : xs)
    if (t->requires_grad) any_grad = true;
  if (grad_enabled() && any_grad) {
    std::vector<TensorPtr> parents = xs;
    Tensor* po = out.get();
    int axc = ax;
    detail::record(out, parents, [po, parents, axc] {
      auto vo = detail::axis_view(po->shape, axc);
      auto acc = [&]<typename T>() {
        const T* dy = po->grad<T>();
        int64_t off = 0;
        for (const auto& t : parents) {
          auto vi = detail::axis_view(t->shape, axc);
          if (t->requires_grad) {
            T* dx = t->grad<T>();
            for (int64_t o = 0; o < vi.outer; ++o) {
              const T* s = dy + o * vo.len * vo.inner + off * vo.inner;
              T* d = dx + o * vi.len * vi.inner;
              for (int64_t i = 0, m = vi.len * vi.inner; i < m; ++i) d[i] += s[i];
            }
          }
          off += vi.len;
        }
      };
      if (po->dtype == Dtype::F32)
        acc.operator()<float>();
      else
        acc.operator()<double>();
    });
  }
  return out;
}

TensorPtr slice(const TensorPtr& x, int axis, int64_t start, int64_t len) {
  int ax = detail::normalize_axis(x->shape, axis);
  int64_t extent = x->dim(ax);
  if (start < 0 || len <= 0 || start + len > extent)
    fail<ShapeError>(strformat("slice: [%lld, %lld) outside axis %d of %s",
                               static_cast<long long>(start),
                               static_cast<long long>(start + len), ax,
                               shape_str(x->shape).c_str()));
  Shape oshape = x->shape;
  oshape[static_cast<size_t>(ax)] = len;
  auto out = Tensor::zeros(oshape, x->dtype);
  auto vi = detail::axis_view(x->shape, ax);

  auto fwd = [&]<typename T>() {
    const T* src = x->data<T>();
    T* dst = out->data<T>();
    for (int64_t o = 0; o < vi.outer; ++o)
      std::copy_n(src + (o * vi.len + start) * vi.inner, len * vi.inner,
                  dst + o * len * vi.inner);
  };
  if (x->dtype == Dtype::F32)
    fwd.operator()<float>();
  else
    fwd.operator()<double>();

  if (detail::track({&x})) {
    Tensor* px = x.get();
    Tensor* po = out.get();
    detail::record(out, {x}, [px, po, vi, start, len] {
      auto acc = [&]<typename T>() {
        const T* dy = po->grad<T>();
        T* dx = px->grad<T>();
        for (int64_t o = 0; o < vi.outer; ++o) {
          const T* s = dy + o * len * vi.inner;
          T* d = dx + (o * vi.len + start) * vi.inner;
          for (int64_t i = 0, m = len * vi.inner; i < m; ++i) d[i] += s[i];
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

}  // namespace visa
