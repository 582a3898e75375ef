#include "visa/loss.hpp"

#include <algorithm>
#include <cmath>

#include "visa/ops.hpp"

namespace visa {
namespace {

// |Omega| = 0 makes the CE and edge means undefined; both are defined as 0 so
// an all-ignore batch contributes nothing instead of poisoning the run.
TensorPtr zero_scalar(Dtype dt) { return Tensor::zeros({1}, dt, false); }

template <typename T>
void fill_targets(const std::vector<LabelMask>& batch, const TensorPtr& onehot,
                  const TensorPtr& mask, int64_t* labeled) {
  const int64_t h = batch[0].height, w = batch[0].width;
  T* oh = onehot->data<T>();
  T* m = mask->data<T>();
  for (size_t b = 0; b < batch.size(); ++b) {
    const int64_t base = static_cast<int64_t>(b) * h * w;
    for (int64_t i = 0; i < h * w; ++i) {
      const uint8_t code = batch[b].codes[static_cast<size_t>(i)];
      if (code >= kNumClasses) continue;  // 255 and anything malformed
      oh[(base * kNumClasses) + code * h * w + i] = static_cast<T>(1);
      m[base + i] = static_cast<T>(1);
      ++*labeled;
    }
  }
}

}  // namespace

void validate_loss_weights(const LossWeights& w) {
  if (w.lambda_dice < 0 || w.lambda_edge < 0 || w.alpha_aux < 0)
    fail<ConfigError>("loss multipliers must be non-negative");
  if (!(w.tau > 0) || !std::isfinite(w.tau))
    fail<ConfigError>(strformat("softmax temperature %g must be positive", w.tau));
  for (int c = 0; c < kNumClasses; ++c)
    if (!std::isfinite(w.class_weights[c]) || w.class_weights[c] <= 0)
      fail<ConfigError>(strformat("class weight %d is %g, expected finite and positive",
                                  c, w.class_weights[c]));
}

SupervisionTargets make_supervision(const std::vector<LabelMask>& batch, Dtype dt) {
  if (batch.empty()) fail<ShapeError>("supervision batch is empty");
  const int64_t h = batch[0].height, w = batch[0].width;
  if (h < 1 || w < 1) fail<ShapeError>("label mask has empty extent");
  for (const auto& msk : batch)
    if (msk.height != h || msk.width != w)
      fail<ShapeError>(strformat("label mask %dx%d does not match batch extent %lldx%lld",
                                 msk.height, msk.width, static_cast<long long>(h),
                                 static_cast<long long>(w)));

  SupervisionTargets t;
  const int64_t bsz = static_cast<int64_t>(batch.size());
  t.onehot = Tensor::zeros({bsz, kNumClasses, h, w}, dt, false);
  t.mask = Tensor::zeros({bsz, 1, h, w}, dt, false);
  VISA_DISPATCH(dt, fill_targets, batch, t.onehot, t.mask, &t.labeled);
  return t;
}

std::array<double, kNumClasses> median_frequency_weights(
    const std::array<double, kNumClasses>& freqs) {
  for (int c = 0; c < kNumClasses; ++c) {
    if (!std::isfinite(freqs[c]) || freqs[c] < 0)
      fail<ConfigError>(strformat("class frequency %d is %g", c, freqs[c]));
    if (freqs[c] == 0)
      fail<ConfigError>(strformat(
          "class %d has zero frequency; exclude it or floor its frequency at 1e-8 "
          "before computing median-frequency weights",
          c));
  }
  std::array<double, kNumClasses> sorted = freqs;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[kNumClasses / 2];
  std::array<double, kNumClasses> w;
  for (int c = 0; c < kNumClasses; ++c) w[c] = median / freqs[c];
  return w;
}

std::array<double, kNumClasses> class_frequencies(const std::vector<LabelMask>& batch) {
  std::array<int64_t, kNumClasses> counts{};
  int64_t total = 0;
  for (const auto& msk : batch)
    for (uint8_t code : msk.codes)
      if (code < kNumClasses) {
        ++counts[code];
        ++total;
      }
  std::array<double, kNumClasses> f{};
  if (total == 0) return f;
  for (int c = 0; c < kNumClasses; ++c)
    f[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
  return f;
}

TensorPtr loss_ce(const TensorPtr& p, const SupervisionTargets& t,
                  const std::array<double, kNumClasses>& w) {
  if (p->shape != t.onehot->shape)
    fail<ShapeError>("posterior and target shapes differ");
  if (t.labeled == 0) {
    log_warn("cross-entropy over an all-ignore batch; contributing 0");
    return zero_scalar(p->dtype);
  }
  // w_c y is a constant, so fold the class weights into the target tensor and
  // keep the graph a single mul against log p.
  auto wy = Tensor::zeros(t.onehot->shape, t.onehot->dtype, false);
  const int64_t chw = wy->numel() / wy->shape[0];
  const int64_t hw = chw / kNumClasses;
  for (int64_t i = 0; i < wy->numel(); ++i) {
    const double y = t.onehot->at(i);
    if (y != 0.0) wy->set(i, y * w[(i % chw) / hw]);
  }
  auto nll = sum_all(mul(wy, log_guarded(p)));
  return scale(nll, -1.0 / static_cast<double>(t.labeled));
}

TensorPtr loss_dice(const TensorPtr& p, const SupervisionTargets& t) {
  if (p->shape != t.onehot->shape)
    fail<ShapeError>("posterior and target shapes differ");
  constexpr double kEps = 1e-6;
  auto pm = scale_spatial(p, t.mask);
  auto overlap = add_scalar(scale(sum_all(mul(pm, t.onehot)), 2.0), kEps);
  auto mass = add_scalar(add(sum_all(pm), sum_all(t.onehot)), kEps);
  return add_scalar(neg(div(overlap, mass)), 1.0);
}

TensorPtr loss_edge(const TensorPtr& p, const SupervisionTargets& t) {
  if (p->shape != t.onehot->shape)
    fail<ShapeError>("posterior and target shapes differ");
  if (t.labeled == 0) return zero_scalar(p->dtype);
  const auto& s = p->shape;
  auto ep = sobel_energy(scale_spatial(p, t.mask));
  auto ey = sobel_energy(t.onehot);
  auto gap = abs_op(sub(ep, ey));
  auto masked = mul(gap, reshape(t.mask, {s[0], s[2], s[3]}));
  return scale(sum_all(masked), 1.0 / static_cast<double>(t.labeled));
}

LossBreakdown total_loss(const TensorPtr& logits, const TensorPtr& aux_logits,
                         const SupervisionTargets& t, const LossWeights& w) {
  validate_loss_weights(w);
  auto check = [](const TensorPtr& term, const char* name) {
    if (!std::isfinite(term->at(0)))
      fail<NumericError>(strformat("loss term '%s' is non-finite", name));
    return term;
  };

  auto p = softmax(logits, 1, w.tau);
  LossBreakdown out;
  auto ce = check(loss_ce(p, t, w.class_weights), "ce");
  auto dice = check(loss_dice(p, t), "dice");
  auto edge = check(loss_edge(p, t), "edge");
  out.ce = ce->at(0);
  out.dice = dice->at(0);
  out.edge = edge->at(0);
  out.total = add(ce, add(scale(dice, w.lambda_dice), scale(edge, w.lambda_edge)));
  if (aux_logits) {
    auto aux = check(loss_ce(softmax(aux_logits, 1, w.tau), t, {1.0, 1.0, 1.0}), "aux");
    out.aux = aux->at(0);
    out.total = add(out.total, scale(aux, w.alpha_aux));
  }
  out.value = check(out.total, "total")->at(0);
  return out;
}

}  // namespace visa
