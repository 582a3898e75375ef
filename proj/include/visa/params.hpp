#pragma once

#include <map>
#include <string>

#include "visa/rng.hpp"
#include "visa/tensor.hpp"

namespace visa {

// Named trainable parameters in deterministic (insertion) order. Modules
// register at construction time, so a fixed seed yields a fixed
// initialisation regardless of later usage patterns.
class ParamRegistry {
 public:
  TensorPtr add(const std::string& name, TensorPtr t);
  TensorPtr get(const std::string& name) const;  // throws if absent
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, TensorPtr>>& entries() const { return entries_; }
  int64_t total_elements() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, TensorPtr>> entries_;
  std::map<std::string, size_t> index_;
};

// Initialisation policies. Weight matrices for attention/token mixing draw
// from a truncated normal (std 0.02, clipped at two sigma); conv kernels use
// fan-in uniform; biases and norm offsets start at zero, norm gains at one.
TensorPtr init_trunc_normal(Shape shape, Rng& rng, Dtype dt, double std_dev = 0.02);
TensorPtr init_fan_in_uniform(Shape shape, int64_t fan_in, Rng& rng, Dtype dt);
TensorPtr init_const(Shape shape, double value, Dtype dt);

}  // namespace visa
