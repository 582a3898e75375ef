#include "visa/params.hpp"

#include <cmath>

namespace visa {

TensorPtr ParamRegistry::add(const std::string& name, TensorPtr t) {
  if (index_.count(name)) fail<Error>("param registry: duplicate name " + name);
  t->requires_grad = true;
  index_[name] = entries_.size();
  entries_.emplace_back(name, t);
  return t;
}

TensorPtr ParamRegistry::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail<Error>("param registry: unknown name " + name);
  return entries_[it->second].second;
}

int64_t ParamRegistry::total_elements() const {
  int64_t n = 0;
  for (const auto& [name, t] : entries_) n += t->numel();
  return n;
}

void ParamRegistry::zero_grads() {
  for (const auto& [name, t] : entries_) t->zero_grad();
}

TensorPtr init_trunc_normal(Shape shape, Rng& rng, Dtype dt, double std_dev) {
  auto t = Tensor::zeros(std::move(shape), dt);
  for (int64_t i = 0; i < t->numel(); ++i) t->set(i, rng.trunc_normal(std_dev));
  return t;
}

TensorPtr init_fan_in_uniform(Shape shape, int64_t fan_in, Rng& rng, Dtype dt) {
  if (fan_in <= 0) fail<Error>("init_fan_in_uniform: fan_in must be positive");
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  auto t = Tensor::zeros(std::move(shape), dt);
  for (int64_t i = 0; i < t->numel(); ++i) t->set(i, rng.uniform(-bound, bound));
  return t;
}

TensorPtr init_const(Shape shape, double value, Dtype dt) {
  return Tensor::full(std::move(shape), value, dt);
}

}  // namespace visa
