#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "visa/common.hpp"

namespace visa {

// Numeric precision of a tensor's storage. f32 is the working precision;
// f64 exists so finite-difference gradient checks are not drowned in
// round-off.
enum class Dtype { F32, F64 };

inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Dense row-major tensor doubling as a reverse-mode autodiff node.
///
/// Ops record `parents` plus a `backward_fn` that scatters the node's grad
/// into the parents' grads. `backward()` on a scalar root runs those hooks in
/// reverse topological order. Graph edges hold owning pointers, so a forward
/// result keeps its inputs alive; the closures themselves only capture raw
/// pointers to avoid reference cycles.
class Tensor {
 public:
  Shape shape;
  Dtype dtype = Dtype::F32;
  // True for leaves that want gradients and for any op output downstream of
  // one. Ops skip grad bookkeeping entirely when no input has it set.
  bool requires_grad = false;

  std::vector<float> data32, grad32;
  std::vector<double> data64, grad64;

  std::vector<TensorPtr> parents;
  std::function<void()> backward_fn;

  static TensorPtr zeros(Shape shape, Dtype dt = Dtype::F32, bool requires_grad = false);
  static TensorPtr full(Shape shape, double value, Dtype dt = Dtype::F32);
  static TensorPtr from_values(Shape shape, const std::vector<double>& v,
                               Dtype dt = Dtype::F32, bool requires_grad = false);

  int64_t numel() const { return shape_numel(shape); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const;  // negative indices count from the back

  template <typename T> T* data();
  template <typename T> const T* data() const;
  template <typename T> T* grad();  // valid only after alloc_grad()

  bool grad_allocated() const;
  void alloc_grad();  // idempotent; zero-fills on first call
  void zero_grad();

  // Scalar accessors for tests and glue code; kernels use data<T>() instead.
  double at(int64_t i) const;
  void set(int64_t i, double v);
  double grad_at(int64_t i) const;
  void grad_add(int64_t i, double v);

  std::vector<double> values() const;

  /// Reverse pass from a scalar root (numel()==1, seeded with d root = 1).
  void backward();
};

template <> inline float* Tensor::data<float>() { return data32.data(); }
template <> inline double* Tensor::data<double>() { return data64.data(); }
template <> inline const float* Tensor::data<float>() const { return data32.data(); }
template <> inline const double* Tensor::data<double>() const { return data64.data(); }
template <> inline float* Tensor::grad<float>() { return grad32.data(); }
template <> inline double* Tensor::grad<double>() { return grad64.data(); }

// Dispatch a template callable on a tensor's runtime dtype.
#define VISA_DISPATCH(dt, fn, ...)                                  \
  ((dt) == ::visa::Dtype::F32 ? fn<float>(__VA_ARGS__)              \
                              : fn<double>(__VA_ARGS__))

// Gradient recording is on by default; NoGradGuard switches it off for the
// current scope (inference, metric evaluation, data plumbing).
bool grad_enabled();
struct NoGradGuard {
  bool prev;
  NoGradGuard();
  ~NoGradGuard();
};

// Shared checks used by op wrappers.
void check_same_shape(const char* op, const Tensor& a, const Tensor& b);
void check_same_dtype(const char* op, const Tensor& a, const Tensor& b);

}  // namespace visa
