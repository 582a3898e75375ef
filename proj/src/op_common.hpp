#pragma once

#include <functional>
#include <initializer_list>

#include "visa/ops.hpp"

namespace visa::detail {

// Should this op record graph edges? True iff grads are globally enabled and
// at least one input wants them.
inline bool track(std::initializer_list<const TensorPtr*> inputs) {
  if (!grad_enabled()) return false;
  for (const TensorPtr* t : inputs)
    if (*t && (*t)->requires_grad) return true;
  return false;
}

inline void record(const TensorPtr& out, std::vector<TensorPtr> parents,
                   std::function<void()> fn) {
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backward_fn = std::move(fn);
}

// (outer, len, inner) view of a tensor around one axis; the workhorse layout
// for softmax/layer_norm/reductions along arbitrary axes.
struct AxisView {
  int64_t outer = 1, len = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, int axis) {
  int r = static_cast<int>(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    fail<ShapeError>(strformat("axis %d out of range for %s", axis, shape_str(shape).c_str()));
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
  v.len = shape[static_cast<size_t>(axis)];
  for (int i = axis + 1; i < r; ++i) v.inner *= shape[static_cast<size_t>(i)];
  return v;
}

inline int normalize_axis(const Shape& shape, int axis) {
  int r = static_cast<int>(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    fail<ShapeError>(strformat("axis %d out of range for %s", axis, shape_str(shape).c_str()));
  return axis;
}

// Deterministic accumulating GEMM kernels (defined in ops_matmul.cpp).
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n);
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n);
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n);

}  // namespace visa::detail
