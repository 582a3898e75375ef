#include "visa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "visa/ops.hpp"
#include "visa/rng.hpp"

namespace visa {

void ConfusionMatrix::add(int ref, int pred, int64_t n) {
  if (ref < 0 || ref >= kNumClasses || pred < 0 || pred >= kNumClasses)
    fail<Error>(strformat("confusion matrix class out of range: ref %d pred %d", ref, pred));
  counts[static_cast<size_t>(ref)][static_cast<size_t>(pred)] += n;
}

void ConfusionMatrix::accumulate(const std::vector<uint8_t>& ref,
                                 const std::vector<uint8_t>& pred) {
  if (ref.size() != pred.size())
    fail<ShapeError>("reference and prediction pixel counts differ");
  for (size_t i = 0; i < ref.size(); ++i) {
    if (ref[i] >= kNumClasses) continue;  // ignore stays outside every metric
    if (pred[i] >= kNumClasses)
      fail<Error>(strformat("prediction carries non-class code %d", int(pred[i])));
    ++counts[ref[i]][pred[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& o) {
  for (int r = 0; r < kNumClasses; ++r)
    for (int c = 0; c < kNumClasses; ++c) counts[r][c] += o.counts[r][c];
}

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (const auto& row : counts)
    for (int64_t v : row) t += v;
  return t;
}

int64_t ConfusionMatrix::trace() const {
  int64_t t = 0;
  for (int c = 0; c < kNumClasses; ++c) t += counts[c][c];
  return t;
}

int64_t ConfusionMatrix::row_sum(int c) const {
  int64_t t = 0;
  for (int64_t v : counts[static_cast<size_t>(c)]) t += v;
  return t;
}

int64_t ConfusionMatrix::col_sum(int c) const {
  int64_t t = 0;
  for (int r = 0; r < kNumClasses; ++r) t += counts[r][static_cast<size_t>(c)];
  return t;
}

MetricSet metrics(const ConfusionMatrix& cm) {
  const double total = static_cast<double>(cm.total());
  if (total == 0) fail<Error>("metrics requested on an empty confusion matrix");

  MetricSet m;
  double iou_sum = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    const int64_t tp = cm.counts[c][c];
    const int64_t uni = cm.row_sum(c) + cm.col_sum(c) - tp;
    if (uni == 0) {
      m.zero_union[c] = true;
      m.iou[c] = 0.0;
    } else {
      m.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    }
    iou_sum += m.iou[c];
  }
  m.miou = iou_sum / kNumClasses;

  // Single-label multiclass: every off-diagonal pixel is one FP and one FN,
  // so the micro sums coincide and equal overall accuracy. They are still
  // computed from their own definitions rather than aliased.
  const double tp_sum = static_cast<double>(cm.trace());
  const double fp_sum = total - tp_sum, fn_sum = total - tp_sum;
  m.micro_p = tp_sum / (tp_sum + fp_sum);
  m.micro_r = tp_sum / (tp_sum + fn_sum);
  m.micro_f1 = (m.micro_p + m.micro_r) > 0
                   ? 2.0 * m.micro_p * m.micro_r / (m.micro_p + m.micro_r)
                   : 0.0;
  m.oa = tp_sum / total;

  double pe = 0;
  for (int c = 0; c < kNumClasses; ++c)
    pe += static_cast<double>(cm.row_sum(c)) * static_cast<double>(cm.col_sum(c));
  pe /= total * total;
  // pe can only reach 1 when all mass sits in one diagonal cell, where
  // agreement is perfect by construction.
  m.kappa = pe < 1.0 ? (m.oa - pe) / (1.0 - pe) : 1.0;
  return m;
}

BootstrapResult block_bootstrap(const std::vector<BlockResult>& blocks,
                                int64_t replicates, uint64_t seed) {
  if (blocks.empty()) fail<Error>("bootstrap requested with no blocks");
  if (replicates < 1) fail<ConfigError>("bootstrap needs at least one replicate");

  ConfusionMatrix pooled;
  for (const auto& b : blocks) pooled.merge(b.cm);
  BootstrapResult out;
  out.point = metrics(pooled).miou;
  out.ci_lo = out.ci_hi = out.point;

  const int64_t n = static_cast<int64_t>(blocks.size());
  if (n < 2) {
    log_warn("bootstrap over a single block has no resampling distribution; "
             "reporting the point estimate only");
    return out;
  }

  Rng rng(seed);
  std::vector<double> values(static_cast<size_t>(replicates));
  for (int64_t r = 0; r < replicates; ++r) {
    ConfusionMatrix sum;
    for (int64_t d = 0; d < n; ++d)
      sum.merge(blocks[static_cast<size_t>(rng.uniform_int(n))].cm);
    values[static_cast<size_t>(r)] = sum.total() > 0 ? metrics(sum).miou : 0.0;
  }
  std::sort(values.begin(), values.end());

  // Nearest rank: the q-th percentile is element ceil(q * N), 1-based.
  auto nearest_rank = [&](double q) {
    int64_t rank = static_cast<int64_t>(std::ceil(q * static_cast<double>(replicates)));
    rank = std::clamp<int64_t>(rank, 1, replicates);
    return values[static_cast<size_t>(rank - 1)];
  };
  out.ci_lo = nearest_rank(0.025);
  out.ci_hi = nearest_rank(0.975);
  out.has_ci = true;
  out.replicates = replicates;
  return out;
}

namespace {

// Symmetric reflection (border included) of an out-of-range coordinate.
int64_t reflect_index(int64_t i, int64_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -1 - i;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

// Stride walk from 0 plus the flush end position, deduplicated.
std::vector<int64_t> window_starts(int64_t extent, int64_t window, int64_t stride) {
  std::vector<int64_t> starts;
  for (int64_t p = 0; p + window < extent; p += stride) starts.push_back(p);
  starts.push_back(extent - window);
  return starts;
}

template <typename T>
void copy_window(const TensorPtr& src, const TensorPtr& dst, int64_t y0, int64_t x0,
                 bool reflect) {
  const int64_t c = src->dim(0), h = src->dim(1), w = src->dim(2);
  const int64_t s = dst->dim(2);
  const T* in = src->data<T>();
  T* out = dst->data<T>();
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < s; ++y) {
      const int64_t sy = reflect ? reflect_index(y0 + y, h) : y0 + y;
      for (int64_t x = 0; x < s; ++x) {
        const int64_t sx = reflect ? reflect_index(x0 + x, w) : x0 + x;
        out[(ci * s + y) * s + x] = in[(ci * h + sy) * w + sx];
      }
    }
}

}  // namespace

WindowInference sliding_window_infer(const WindowForwardFn& forward,
                                     const TensorPtr& indices, const TensorPtr& radiance,
                                     int window, int stride) {
  if (window < 1 || stride < 1)
    fail<ConfigError>(strformat("window %d and stride %d must be positive", window, stride));
  for (const auto& t : {indices, radiance})
    if (t->rank() != 3 || t->dim(0) != kNumBands)
      fail<ShapeError>("sliding window expects [5,H,W] planes");
  if (indices->shape != radiance->shape)
    fail<ShapeError>("index and radiance grids differ");

  const int64_t h = indices->dim(1), w = indices->dim(2);
  WindowInference out;
  out.height = h;
  out.width = w;
  out.padded = h < window || w < window;
  if (out.padded)
    log_warn(strformat("block %lldx%lld is smaller than the %d window; using one "
                       "centered reflect-padded window",
                       static_cast<long long>(h), static_cast<long long>(w), window));

  std::vector<double> acc(static_cast<size_t>(kNumClasses * h * w), 0.0);
  out.coverage.assign(static_cast<size_t>(h * w), 0);

  // An axis shorter than the window gets exactly one centered window whose
  // origin sits before the grid; a long-enough axis is tiled by the stride
  // walk. Mixed cases pad one axis and tile the other.
  std::vector<int64_t> ys =
      h < window ? std::vector<int64_t>{-(window - h) / 2} : window_starts(h, window, stride);
  std::vector<int64_t> xs =
      w < window ? std::vector<int64_t>{-(window - w) / 2} : window_starts(w, window, stride);

  const Dtype dt = indices->dtype;
  for (int64_t y0 : ys)
    for (int64_t x0 : xs) {
      auto wi = Tensor::zeros({1, kNumBands, window, window}, dt, false);
      auto wr = Tensor::zeros({1, kNumBands, window, window}, dt, false);
      VISA_DISPATCH(dt, copy_window, indices, wi, y0, x0, out.padded);
      VISA_DISPATCH(dt, copy_window, radiance, wr, y0, x0, out.padded);
      auto logits = forward(wi, wr);
      if (!logits || logits->shape != Shape{1, kNumClasses, window, window})
        fail<ShapeError>("window forward must return [1,3,window,window] logits");
      for (int64_t c = 0; c < kNumClasses; ++c)
        for (int64_t y = 0; y < window; ++y) {
          const int64_t gy = y0 + y;
          if (gy < 0 || gy >= h) continue;
          for (int64_t x = 0; x < window; ++x) {
            const int64_t gx = x0 + x;
            if (gx < 0 || gx >= w) continue;
            acc[static_cast<size_t>((c * h + gy) * w + gx)] +=
                logits->at((c * window + y) * window + x);
            if (c == 0) ++out.coverage[static_cast<size_t>(gy * w + gx)];
          }
        }
    }

  auto avg = Tensor::zeros({1, kNumClasses, h, w}, Dtype::F64, false);
  double* av = avg->data<double>();
  for (int64_t c = 0; c < kNumClasses; ++c)
    for (int64_t i = 0; i < h * w; ++i) {
      const int32_t cov = out.coverage[static_cast<size_t>(i)];
      if (cov == 0) fail<Error>("window tiling left a pixel uncovered");
      av[c * h * w + i] = acc[static_cast<size_t>(c * h * w + i)] / cov;
    }

  out.labels = argmax_channel(*avg);
  out.confidence.resize(static_cast<size_t>(h * w));
  for (int64_t i = 0; i < h * w; ++i) {
    double zmax = av[i];
    for (int64_t c = 1; c < kNumClasses; ++c) zmax = std::max(zmax, av[c * h * w + i]);
    double denom = 0;
    for (int64_t c = 0; c < kNumClasses; ++c) denom += std::exp(av[c * h * w + i] - zmax);
    out.confidence[static_cast<size_t>(i)] = static_cast<float>(1.0 / denom);
  }
  return out;
}

namespace {

struct AssembledBlock {
  MultispectralPatch image;
  LabelMask mask;
};

// Quadrants are row-major within the parent tile: 0 top-left, 1 top-right,
// 2 bottom-left, 3 bottom-right.
AssembledBlock assemble_block(const std::vector<const PatchSample*>& quads) {
  const int p = quads[0]->patch.height;
  for (const auto* q : quads)
    if (q->patch.height != p || q->patch.width != p)
      fail<ShapeError>("quadrants of one block differ in extent");
  AssembledBlock blk;
  blk.image.allocate(2 * p, 2 * p);
  blk.mask.allocate(2 * p, 2 * p);
  blk.image.block_id = quads[0]->patch.block_id;
  blk.image.field = quads[0]->patch.field;
  blk.image.year = quads[0]->patch.year;
  for (const auto* q : quads) {
    const int oy = (q->patch.quadrant / 2) * p, ox = (q->patch.quadrant % 2) * p;
    for (int b = 0; b < kNumBands; ++b)
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          blk.image.at(b, oy + y, ox + x) = q->patch.at(b, y, x);
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x) blk.mask.at(oy + y, ox + x) = q->mask.at(y, x);
  }
  return blk;
}

}  // namespace

EvalReport evaluate_protocol(const BlockInferFn& infer, const SplitManifest& manifest,
                             const std::string& data_root, int64_t bootstrap_replicates,
                             uint64_t bootstrap_seed) {
  auto samples = load_split(data_root, manifest, SplitPart::Test);

  std::map<int64_t, std::vector<const PatchSample*>> by_block;
  for (const auto& s : samples) by_block[s.patch.block_id].push_back(&s);

  EvalReport report;
  report.protocol = manifest.protocol;
  // (year, field) -> block results, ordered by the key.
  std::map<std::pair<int, int>, std::vector<BlockResult>> strata;

  for (auto& [block_id, quads] : by_block) {
    if (quads.size() != 4)
      fail<Error>(strformat("block %lld has %zu quadrants, expected 4",
                            static_cast<long long>(block_id), quads.size()));
    std::sort(quads.begin(), quads.end(),
              [](const PatchSample* a, const PatchSample* b) {
                return a->patch.quadrant < b->patch.quadrant;
              });
    auto blk = assemble_block(quads);
    auto pred = infer(blk.image, blk.mask);
    if (pred.size() != blk.mask.codes.size())
      fail<ShapeError>(strformat("inference on block %lld returned %zu pixels, expected %zu",
                                 static_cast<long long>(block_id), pred.size(),
                                 blk.mask.codes.size()));
    BlockResult br;
    br.block_id = block_id;
    br.cm.accumulate(blk.mask.codes, pred);
    report.blocks.push_back(br);
    strata[{static_cast<int>(blk.image.year), static_cast<int>(blk.image.field)}]
        .push_back(br);
  }

  ConfusionMatrix all_cm;
  for (const auto& [key, blocks] : strata) {
    StratumMetrics row;
    row.year = static_cast<YearId>(key.first);
    row.field = static_cast<FieldId>(key.second);
    row.blocks = static_cast<int64_t>(blocks.size());
    ConfusionMatrix cm;
    for (const auto& b : blocks) cm.merge(b.cm);
    all_cm.merge(cm);
    row.m = metrics(cm);
    row.ci = block_bootstrap(
        blocks, bootstrap_replicates,
        derive_seed(bootstrap_seed, 0xB007u,
                    (static_cast<uint64_t>(key.first) << 8) | static_cast<uint64_t>(key.second)));
    report.strata.push_back(row);
  }

  StratumMetrics agg;
  agg.aggregate = true;
  agg.blocks = static_cast<int64_t>(report.blocks.size());
  agg.m = metrics(all_cm);
  agg.ci = block_bootstrap(report.blocks, bootstrap_replicates,
                           derive_seed(bootstrap_seed, 0xB007u, 0xA11u));
  report.strata.push_back(agg);
  return report;
}

std::string metrics_csv(const EvalReport& report) {
  std::string out =
      "protocol,year,field,miou,ci_lo,ci_hi,iou_other,iou_crop,iou_weed,"
      "micro_p,micro_r,micro_f1,oa,kappa\n";
  for (const auto& row : report.strata) {
    out += strformat(
        "%s,%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
        protocol_name(report.protocol), row.aggregate ? "all" : year_name(row.year),
        row.aggregate ? "all" : field_name(row.field), row.m.miou, row.ci.ci_lo,
        row.ci.ci_hi, row.m.iou[kClassOther], row.m.iou[kClassCrop], row.m.iou[kClassWeed],
        row.m.micro_p, row.m.micro_r, row.m.micro_f1, row.m.oa, row.m.kappa);
  }
  return out;
}

void write_metrics_csv(const std::string& path, const EvalReport& report) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail<Error>(strformat("cannot open '%s' for writing", path.c_str()));
  const std::string csv = metrics_csv(report);
  const size_t wrote = std::fwrite(csv.data(), 1, csv.size(), f);
  std::fclose(f);
  if (wrote != csv.size()) fail<Error>(strformat("short write to '%s'", path.c_str()));
}

}  // namespace visa
