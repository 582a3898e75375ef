#include "visa/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace visa {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

TensorPtr Tensor::zeros(Shape shape, Dtype dt, bool requires_grad) {
  for (int64_t d : shape)
    if (d <= 0) fail<ShapeError>("tensor: non-positive extent in " + shape_str(shape));
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->dtype = dt;
  t->requires_grad = requires_grad;
  int64_t n = t->numel();
  if (dt == Dtype::F32)
    t->data32.assign(static_cast<size_t>(n), 0.0f);
  else
    t->data64.assign(static_cast<size_t>(n), 0.0);
  if (requires_grad) t->alloc_grad();
  return t;
}

TensorPtr Tensor::full(Shape shape, double value, Dtype dt) {
  auto t = zeros(std::move(shape), dt);
  int64_t n = t->numel();
  for (int64_t i = 0; i < n; ++i) t->set(i, value);
  return t;
}

TensorPtr Tensor::from_values(Shape shape, const std::vector<double>& v, Dtype dt,
                              bool requires_grad) {
  auto t = zeros(std::move(shape), dt, requires_grad);
  if (static_cast<int64_t>(v.size()) != t->numel())
    fail<ShapeError>(strformat("from_values: %zu values for shape %s", v.size(),
                               shape_str(t->shape).c_str()));
  for (int64_t i = 0; i < t->numel(); ++i) t->set(i, v[static_cast<size_t>(i)]);
  return t;
}

int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r)
    fail<ShapeError>(strformat("dim %d out of range for %s", i, shape_str(shape).c_str()));
  return shape[static_cast<size_t>(i)];
}

bool Tensor::grad_allocated() const {
  return dtype == Dtype::F32 ? !grad32.empty() : !grad64.empty();
}

void Tensor::alloc_grad() {
  size_t n = static_cast<size_t>(numel());
  if (dtype == Dtype::F32) {
    if (grad32.empty()) grad32.assign(n, 0.0f);
  } else {
    if (grad64.empty()) grad64.assign(n, 0.0);
  }
}

void Tensor::zero_grad() {
  std::fill(grad32.begin(), grad32.end(), 0.0f);
  std::fill(grad64.begin(), grad64.end(), 0.0);
}

double Tensor::at(int64_t i) const {
  return dtype == Dtype::F32 ? static_cast<double>(data32[static_cast<size_t>(i)])
                             : data64[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double v) {
  if (dtype == Dtype::F32)
    data32[static_cast<size_t>(i)] = static_cast<float>(v);
  else
    data64[static_cast<size_t>(i)] = v;
}

double Tensor::grad_at(int64_t i) const {
  if (!grad_allocated()) return 0.0;
  return dtype == Dtype::F32 ? static_cast<double>(grad32[static_cast<size_t>(i)])
                             : grad64[static_cast<size_t>(i)];
}

void Tensor::grad_add(int64_t i, double v) {
  alloc_grad();
  if (dtype == Dtype::F32)
    grad32[static_cast<size_t>(i)] += static_cast<float>(v);
  else
    grad64[static_cast<size_t>(i)] += v;
}

std::vector<double> Tensor::values() const {
  std::vector<double> out(static_cast<size_t>(numel()));
  for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = at(i);
  return out;
}

void Tensor::backward() {
  if (numel() != 1)
    fail<ShapeError>("backward: root must be scalar, got " + shape_str(shape));
  if (!requires_grad)
    fail<Error>("backward: root does not require grad (built under NoGradGuard?)");

  // Iterative post-order DFS; recursion depth would track graph depth.
  std::vector<Tensor*> topo;
  std::unordered_set<Tensor*> visited;
  std::vector<std::pair<Tensor*, size_t>> stack;
  stack.emplace_back(this, 0);
  visited.insert(this);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Tensor* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (Tensor* t : topo) t->alloc_grad();
  grad_add(0, 1.0);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    fail<ShapeError>(strformat("%s: shape mismatch %s vs %s", op, shape_str(a.shape).c_str(),
                               shape_str(b.shape).c_str()));
}

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype != b.dtype)
    fail<DtypeError>(strformat("%s: dtype mismatch %s vs %s", op, dtype_name(a.dtype),
                               dtype_name(b.dtype)));
}

}  // namespace visa
