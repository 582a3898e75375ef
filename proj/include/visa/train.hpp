#pragma once

#include <string>
#include <utility>
#include <vector>

#include "visa/indices.hpp"
#include "visa/loss.hpp"
#include "visa/metrics.hpp"
#include "visa/model.hpp"

namespace visa {

struct OptimConfig {
  double lr = 6e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int64_t warmup_iters = 1500;
  // Cosine horizon; the trainer fills this in from epochs * steps_per_epoch
  // when it is left at 0.
  int64_t total_iters = 0;
};

/// Closed-form learning rate at iteration `it` (0-based): linear warmup from
/// 0 over warmup_iters, then cosine decay to 0 at total_iters.
double lr_at(const OptimConfig& c, int64_t it);

/// Decoupled weight-decay Adam over a parameter registry. Moment buffers are
/// kept in 64-bit regardless of the parameter dtype so update arithmetic is
/// identical across precisions of the same run.
class AdamW {
 public:
  AdamW(ParamRegistry& params, OptimConfig cfg);

  // Global gradient norm across every parameter, rescaled to clip_norm when
  // it exceeds it. Returns the pre-clip norm. Parameters whose gradient was
  // never allocated count as zero.
  double clip_gradients();
  void step(double lr);
  int64_t iterations() const { return t_; }

 private:
  std::vector<TensorPtr> params_;
  OptimConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Weights plus batch-norm running statistics under their registry names.
// Binary, little-endian, magic "VISAW01\0". Loading demands an exact match of
// names, shapes, and dtypes; anything else is a FormatError naming the tensor.
void save_checkpoint(const std::string& path, const VisaModel& model);
void load_checkpoint(const std::string& path, VisaModel& model);

/// Index and radiance planes [5,H,W] for one patch. Indices are computed
/// from the calibrated reflectance first; then each stream is z-scored with
/// the training statistics (per index and per band respectively).
std::pair<TensorPtr, TensorPtr> preprocess_patch(const MultispectralPatch& p,
                                                 const StandardizationStats& stats,
                                                 Dtype dt);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  int grad_accumulation = 1;  // optimizer steps see this many batches
  bool augment = true;
  uint64_t seed = 2026;
  OptimConfig optim;
  LossWeights loss;  // class_weights are refit from the training split
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double ce = 0, dice = 0, edge = 0, aux = 0, total = 0;
  double train_miou = 0, val_miou = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_val_miou = 0;
  std::string checkpoint_path;  // best-by-validation weights
  std::string stats_path;       // standardization statistics
  uint64_t manifest_hash = 0;
};

/// Full training run. Refuses to start when the manifest fails the leakage
/// audit. Writes into out_dir: manifest.txt (snapshot), standardization.txt,
/// loss_log.csv (epoch, ce, dice, edge, aux, total, train_miou, val_miou),
/// best.ckpt, config_snapshot.txt, run_summary.txt.
TrainResult train_model(VisaModel& model, const SplitManifest& manifest,
                        const std::string& data_root, const TrainConfig& cfg,
                        const std::string& out_dir);

// One text key = value per line; shared by the config snapshot and summary.
std::string render_train_config(const TrainConfig& cfg, const ModelConfig& model_cfg);

}  // namespace visa
