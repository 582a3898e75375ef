#pragma once

#include <array>
#include <vector>

#include "visa/image.hpp"
#include "visa/tensor.hpp"

namespace visa {

/// Knobs of the training objective:
///   total = CE + lambda_dice * Dice + lambda_edge * Edge + alpha_aux * CE_aux
/// where CE_aux is the unweighted cross-entropy on the auxiliary stream and
/// tau is the softmax temperature used for both heads.
struct LossWeights {
  double lambda_dice = 1.0;
  double lambda_edge = 0.5;
  double alpha_aux = 0.3;
  double tau = 1.0;
  std::array<double, kNumClasses> class_weights{1.0, 1.0, 1.0};
};

// ConfigError on negative multipliers, tau <= 0, or class weights that are
// not finite and positive.
void validate_loss_weights(const LossWeights& w);

/// Label batch lowered to loss inputs. `onehot` is zero everywhere a pixel is
/// unlabeled, so masked sums never see ignore pixels; `mask` carries the same
/// information per pixel for masking predictions.
struct SupervisionTargets {
  TensorPtr onehot;     // [B, 3, H, W] constant, one-hot over labeled pixels
  TensorPtr mask;       // [B, 1, H, W] constant, 1 on labeled pixels
  int64_t labeled = 0;  // |Omega|
};

// Codes outside {0, 1, 2} count as unlabeled. ShapeError on an empty batch or
// masks of unequal extent.
SupervisionTargets make_supervision(const std::vector<LabelMask>& batch, Dtype dt);

// w_c = median(f) / f_c. ConfigError if any frequency is zero or negative;
// the caller is expected to floor absent classes at 1e-8 (and say so) first.
std::array<double, kNumClasses> median_frequency_weights(
    const std::array<double, kNumClasses>& freqs);

// Fraction of labeled pixels per class across the batch (sums to 1 when any
// pixel is labeled, all zeros otherwise).
std::array<double, kNumClasses> class_frequencies(const std::vector<LabelMask>& batch);

// Weighted cross-entropy, mean over labeled pixels:
//   -(1/|Omega|) sum w_c y log p. Empty Omega yields 0 with a warning.
TensorPtr loss_ce(const TensorPtr& p, const SupervisionTargets& t,
                  const std::array<double, kNumClasses>& w);

// Soft Dice over labeled pixels and all classes, eps = 1e-6:
//   1 - (2 sum p.y + eps) / (sum p + sum y + eps)
TensorPtr loss_dice(const TensorPtr& p, const SupervisionTargets& t);

// l1 gap, averaged over Omega, between Sobel edge energies of prediction and
// target. Both are zero-filled at unlabeled pixels before filtering.
TensorPtr loss_edge(const TensorPtr& p, const SupervisionTargets& t);

struct LossBreakdown {
  TensorPtr total;  // scalar graph node; backward() starts here
  double ce = 0.0, dice = 0.0, edge = 0.0, aux = 0.0;
  double value = 0.0;
};

// Applies softmax(tau) to both heads and combines the four terms.
// `aux_logits` may be null (pure-radiance ablations); the aux term is then 0.
// NumericError naming the term if any component is non-finite.
LossBreakdown total_loss(const TensorPtr& logits, const TensorPtr& aux_logits,
                         const SupervisionTargets& t, const LossWeights& w);

}  // namespace visa
