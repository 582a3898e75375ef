#include "visa/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "visa/rng.hpp"

namespace visa {

GradCheckResult gradcheck(const std::function<TensorPtr()>& make_loss,
                          const std::vector<std::pair<std::string, TensorPtr>>& params,
                          const GradCheckOptions& opts) {
  for (const auto& [name, t] : params) t->zero_grad();
  auto loss = make_loss();
  if (loss->numel() != 1) fail<ShapeError>("gradcheck: loss must be scalar");
  loss->backward();

  // Snapshot analytic grads before the finite-difference passes start
  // mutating parameter data.
  std::vector<std::vector<double>> analytic(params.size());
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, t] = params[pi];
    analytic[pi].resize(static_cast<size_t>(t->numel()));
    for (int64_t i = 0; i < t->numel(); ++i) {
      double g = t->grad_at(i);
      if (!std::isfinite(g))
        fail<NumericError>(strformat("gradcheck: non-finite analytic gradient in %s[%lld]",
                                     name.c_str(), static_cast<long long>(i)));
      analytic[pi][static_cast<size_t>(i)] = g;
    }
  }

  Rng sampler(opts.sample_seed);
  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, t] = params[pi];
    std::vector<int64_t> idx;
    if (opts.max_per_tensor > 0 && t->numel() > opts.max_per_tensor) {
      for (int64_t k = 0; k < opts.max_per_tensor; ++k)
        idx.push_back(static_cast<int64_t>(
            sampler.uniform_int(static_cast<uint64_t>(t->numel()))));
      std::sort(idx.begin(), idx.end());
      idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    } else {
      idx.resize(static_cast<size_t>(t->numel()));
      for (int64_t i = 0; i < t->numel(); ++i) idx[static_cast<size_t>(i)] = i;
    }

    GradCheckEntry worst_here;
    worst_here.param = name;
    worst_here.rel_err = -1.0;
    for (int64_t i : idx) {
      double x0 = t->at(i);
      double h = opts.h * std::max(1.0, std::fabs(x0));
      double fp, fm;
      {
        NoGradGuard ng;  // value-only passes, no graph construction
        t->set(i, x0 + h);
        fp = make_loss()->at(0);
        t->set(i, x0 - h);
        fm = make_loss()->at(0);
        t->set(i, x0);
      }
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[pi][static_cast<size_t>(i)];
      double denom = std::max({std::fabs(a), std::fabs(numeric), opts.denom_floor});
      double rel = std::fabs(a - numeric) / denom;
      ++res.checked;
      if (rel > worst_here.rel_err) {
        worst_here.index = i;
        worst_here.analytic = a;
        worst_here.numeric = numeric;
        worst_here.rel_err = rel;
      }
    }
    if (!idx.empty()) {
      res.per_param_worst.push_back(worst_here);
      if (worst_here.rel_err > res.max_rel_err) {
        res.max_rel_err = worst_here.rel_err;
        res.worst = worst_here;
      }
    }
  }
  return res;
}

}  // namespace visa
