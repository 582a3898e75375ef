#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "visa/data.hpp"
#include "visa/tensor.hpp"

namespace visa {

/// Pixel counts with reference class on rows and predicted class on columns.
/// Ignore pixels never enter; matrices from disjoint pixel sets merge by
/// elementwise addition.
struct ConfusionMatrix {
  std::array<std::array<int64_t, kNumClasses>, kNumClasses> counts{};

  void add(int ref, int pred, int64_t n = 1);
  // Skips entries whose reference code is not a valid class; predicted codes
  // must be valid classes.
  void accumulate(const std::vector<uint8_t>& ref, const std::vector<uint8_t>& pred);
  void merge(const ConfusionMatrix& o);
  int64_t total() const;
  int64_t trace() const;
  int64_t row_sum(int c) const;
  int64_t col_sum(int c) const;
};

struct MetricSet {
  std::array<double, kNumClasses> iou{};
  // A class absent from both reference and prediction has no union; its IoU
  // is defined as 0 and flagged here so reports can mark it.
  std::array<bool, kNumClasses> zero_union{};
  double miou = 0, micro_p = 0, micro_r = 0, micro_f1 = 0, oa = 0, kappa = 0;
};

// Error on an empty matrix.
MetricSet metrics(const ConfusionMatrix& cm);

struct BlockResult {
  int64_t block_id = -1;
  ConfusionMatrix cm;
};

struct BootstrapResult {
  double point = 0, ci_lo = 0, ci_hi = 0;
  bool has_ci = false;
  int64_t replicates = 0;
};

/// Nonparametric CI for mIoU: each replicate draws |blocks| block identities
/// with replacement, sums their matrices, and evaluates mIoU; the interval is
/// the nearest-rank 2.5 / 97.5 percentile of the replicate values. The point
/// estimate always comes from the un-resampled pooled matrix. Fewer than two
/// blocks cannot be resampled; the point is returned alone with a warning and
/// has_ci = false.
BootstrapResult block_bootstrap(const std::vector<BlockResult>& blocks,
                                int64_t replicates, uint64_t seed);

/// One full-resolution prediction over a block. `coverage` counts how many
/// windows touched each pixel; `padded` marks the sub-window fallback where
/// the input was reflect-padded to a single centered window.
struct WindowInference {
  int64_t height = 0, width = 0;
  std::vector<uint8_t> labels;
  std::vector<float> confidence;  // max posterior of the averaged logits
  std::vector<int32_t> coverage;
  bool padded = false;
};

// Maps [1,5,s,s] index and radiance windows to [1,3,s,s] logits.
using WindowForwardFn = std::function<TensorPtr(const TensorPtr& indices,
                                                const TensorPtr& radiance)>;

/// Tiles [5,H,W] planes into overlapping windows, accumulates logits with
/// per-pixel coverage counts in 64-bit, averages, and takes the argmax with
/// lowest-index tie-break. Window placement walks in strides from 0 and
/// always includes the flush-right/bottom position, so every pixel is
/// covered; on stride = window/2 grids whose extents are multiples of the
/// stride the coverage counts are powers of two and averaging is exact.
WindowInference sliding_window_infer(const WindowForwardFn& forward,
                                     const TensorPtr& indices, const TensorPtr& radiance,
                                     int window = 256, int stride = 128);

/// Produces predicted codes for every pixel of an assembled block. The
/// reference mask is passed for oracle-style test doubles; real inference
/// must ignore it.
using BlockInferFn = std::function<std::vector<uint8_t>(const MultispectralPatch& block,
                                                        const LabelMask& mask)>;

struct StratumMetrics {
  YearId year = YearId::Y0;
  FieldId field = FieldId::E2;
  bool aggregate = false;  // the whole-protocol row spanning every stratum
  int64_t blocks = 0;
  MetricSet m;
  BootstrapResult ci;
};

struct EvalReport {
  Protocol protocol = Protocol::WithinPlot;
  std::vector<BlockResult> blocks;
  // One row per (year, field) stratum present in the test split, ordered by
  // year then field, followed by the aggregate row.
  std::vector<StratumMetrics> strata;
};

/// Reassembles every test block of the manifest from its four quadrant
/// patches, runs `infer` on each, and reduces to per-stratum metrics with
/// within-stratum bootstrap CIs. Missing patch files surface as the loader's
/// error listing block ids.
EvalReport evaluate_protocol(const BlockInferFn& infer, const SplitManifest& manifest,
                             const std::string& data_root,
                             int64_t bootstrap_replicates = 10000,
                             uint64_t bootstrap_seed = 2026);

/// CSV with columns: protocol, year, field, miou, ci_lo, ci_hi, iou_other,
/// iou_crop, iou_weed, micro_p, micro_r, micro_f1, oa, kappa. The aggregate
/// row reads "all" in the year and field columns.
std::string metrics_csv(const EvalReport& report);
void write_metrics_csv(const std::string& path, const EvalReport& report);

}  // namespace visa
