#include "visa/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <numbers>

#include "visa/rng.hpp"

namespace visa {

double lr_at(const OptimConfig& c, int64_t it) {
  if (c.lr <= 0) fail<ConfigError>("lr_at: learning rate must be positive");
  if (c.warmup_iters > 0 && it < c.warmup_iters)
    return c.lr * static_cast<double>(it) / static_cast<double>(c.warmup_iters);
  double horizon = static_cast<double>(std::max<int64_t>(1, c.total_iters - c.warmup_iters));
  double progress = static_cast<double>(it - c.warmup_iters) / horizon;
  progress = std::clamp(progress, 0.0, 1.0);
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(ParamRegistry& params, OptimConfig cfg) : cfg_(cfg) {
  if (cfg_.beta1 < 0 || cfg_.beta1 >= 1 || cfg_.beta2 < 0 || cfg_.beta2 >= 1)
    fail<ConfigError>("AdamW: betas must lie in [0, 1)");
  if (cfg_.eps <= 0) fail<ConfigError>("AdamW: eps must be positive");
  params_.reserve(params.entries().size());
  for (const auto& [name, t] : params.entries()) {
    params_.push_back(t);
    m_.emplace_back(static_cast<size_t>(t->numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(t->numel()), 0.0);
  }
}

namespace {

template <typename T>
double grad_sq_sum(Tensor& t) {
  const T* g = t.grad<T>();
  double s = 0;
  for (int64_t i = 0; i < t.numel(); ++i) s += static_cast<double>(g[i]) * g[i];
  return s;
}

template <typename T>
void scale_grad(Tensor& t, double k) {
  T* g = t.grad<T>();
  for (int64_t i = 0; i < t.numel(); ++i) g[i] = static_cast<T>(g[i] * k);
}

template <typename T>
void adam_update(Tensor& t, std::vector<double>& m, std::vector<double>& v,
                 const OptimConfig& c, double lr, double bc1, double bc2) {
  T* p = t.data<T>();
  const T* g = t.grad<T>();
  for (int64_t i = 0; i < t.numel(); ++i) {
    size_t u = static_cast<size_t>(i);
    double gi = static_cast<double>(g[i]);
    m[u] = c.beta1 * m[u] + (1.0 - c.beta1) * gi;
    v[u] = c.beta2 * v[u] + (1.0 - c.beta2) * gi * gi;
    double mhat = m[u] / bc1;
    double vhat = v[u] / bc2;
    double pd = static_cast<double>(p[i]);
    // Decoupled decay: the regulariser never passes through the moments.
    pd -= lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * pd);
    p[i] = static_cast<T>(pd);
  }
}

}  // namespace

double AdamW::clip_gradients() {
  double sq = 0;
  for (const auto& t : params_) {
    if (!t->grad_allocated()) continue;
    sq += t->dtype == Dtype::F64 ? grad_sq_sum<double>(*t) : grad_sq_sum<float>(*t);
  }
  double norm = std::sqrt(sq);
  if (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) {
    double k = cfg_.clip_norm / norm;
    for (const auto& t : params_) {
      if (!t->grad_allocated()) continue;
      if (t->dtype == Dtype::F64)
        scale_grad<double>(*t, k);
      else
        scale_grad<float>(*t, k);
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = *params_[i];
    // No gradient buffer at all (a tensor registered without requires_grad)
    // means the parameter is frozen: no decay, no moment drift.
    if (!t.grad_allocated()) continue;
    if (t.dtype == Dtype::F64)
      adam_update<double>(t, m_[i], v_[i], cfg_, lr, bc1, bc2);
    else
      adam_update<float>(t, m_[i], v_[i], cfg_, lr, bc1, bc2);
  }
}

// ---- checkpoint serialisation ----

namespace {

constexpr char kCkptMagic[8] = {'V', 'I', 'S', 'A', 'W', '0', '1', '\0'};

// Reserved (non-parameter) entry names for batch-norm running state.
constexpr const char* kBnMean = "_bn.running_mean";
constexpr const char* kBnVar = "_bn.running_var";
constexpr const char* kBnSteps = "_bn.steps";

struct FileCloser {
  std::FILE* f;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

void put_u32(std::FILE* f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  std::fwrite(b, 1, 4, f);
}

void put_u64(std::FILE* f, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  std::fwrite(b, 1, 8, f);
}

uint32_t take_u32(std::FILE* f, const std::string& path) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4) fail<FormatError>(strformat("%s: truncated checkpoint", path.c_str()));
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint64_t take_u64(std::FILE* f, const std::string& path) {
  unsigned char b[8];
  if (std::fread(b, 1, 8, f) != 8) fail<FormatError>(strformat("%s: truncated checkpoint", path.c_str()));
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_entry(std::FILE* f, const std::string& name, const Tensor& t) {
  put_u32(f, static_cast<uint32_t>(name.size()));
  std::fwrite(name.data(), 1, name.size(), f);
  put_u32(f, t.dtype == Dtype::F64 ? 1u : 0u);
  put_u32(f, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape) put_u64(f, static_cast<uint64_t>(d));
  if (t.dtype == Dtype::F64)
    std::fwrite(t.data<double>(), sizeof(double), static_cast<size_t>(t.numel()), f);
  else
    std::fwrite(t.data<float>(), sizeof(float), static_cast<size_t>(t.numel()), f);
}

struct RawEntry {
  Dtype dtype = Dtype::F32;
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;
};

RawEntry take_entry(std::FILE* f, const std::string& path, std::string& name_out) {
  uint32_t name_len = take_u32(f, path);
  if (name_len == 0 || name_len > 4096)
    fail<FormatError>(strformat("%s: implausible entry name length %u", path.c_str(), name_len));
  name_out.resize(name_len);
  if (std::fread(name_out.data(), 1, name_len, f) != name_len)
    fail<FormatError>(strformat("%s: truncated checkpoint", path.c_str()));
  RawEntry e;
  uint32_t dt = take_u32(f, path);
  if (dt > 1) fail<FormatError>(strformat("%s: tensor '%s' has unknown dtype code %u", path.c_str(), name_out.c_str(), dt));
  e.dtype = dt == 1 ? Dtype::F64 : Dtype::F32;
  uint32_t rank = take_u32(f, path);
  if (rank > 8) fail<FormatError>(strformat("%s: tensor '%s' has implausible rank %u", path.c_str(), name_out.c_str(), rank));
  e.shape.resize(rank);
  for (uint32_t i = 0; i < rank; ++i) e.shape[i] = static_cast<int64_t>(take_u64(f, path));
  size_t n = static_cast<size_t>(shape_numel(e.shape));
  if (e.dtype == Dtype::F64) {
    e.f64.resize(n);
    if (std::fread(e.f64.data(), sizeof(double), n, f) != n)
      fail<FormatError>(strformat("%s: truncated payload for tensor '%s'", path.c_str(), name_out.c_str()));
  } else {
    e.f32.resize(n);
    if (std::fread(e.f32.data(), sizeof(float), n, f) != n)
      fail<FormatError>(strformat("%s: truncated payload for tensor '%s'", path.c_str(), name_out.c_str()));
  }
  return e;
}

void fill_from_entry(const std::string& path, const std::string& name, const RawEntry& e,
                     Tensor& t) {
  if (e.dtype != t.dtype)
    fail<FormatError>(strformat("%s: tensor '%s' dtype mismatch", path.c_str(), name.c_str()));
  if (e.shape != t.shape)
    fail<FormatError>(strformat("%s: tensor '%s' shape mismatch", path.c_str(), name.c_str()));
  if (t.dtype == Dtype::F64)
    std::copy(e.f64.begin(), e.f64.end(), t.data<double>());
  else
    std::copy(e.f32.begin(), e.f32.end(), t.data<float>());
}

}  // namespace

void save_checkpoint(const std::string& path, const VisaModel& model) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail<Error>(strformat("cannot open '%s' for writing", path.c_str()));
  FileCloser guard{f};
  std::fwrite(kCkptMagic, 1, 8, f);
  const auto& entries = model.params().entries();
  put_u32(f, static_cast<uint32_t>(entries.size() + 3));
  for (const auto& [name, t] : entries) put_entry(f, name, *t);
  const BatchNormState& bn = model.bn_state();
  put_entry(f, kBnMean, *bn.running_mean);
  put_entry(f, kBnVar, *bn.running_var);
  TensorPtr steps = Tensor::full({1}, static_cast<double>(bn.steps), Dtype::F64);
  put_entry(f, kBnSteps, *steps);
  if (std::ferror(f)) fail<Error>(strformat("write failure on '%s'", path.c_str()));
}

void load_checkpoint(const std::string& path, VisaModel& model) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail<Error>(strformat("cannot open checkpoint '%s'", path.c_str()));
  FileCloser guard{f};
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kCkptMagic, 8) != 0)
    fail<FormatError>(strformat("%s: not a checkpoint file (bad magic)", path.c_str()));
  uint32_t count = take_u32(f, path);
  std::map<std::string, RawEntry> seen;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name;
    RawEntry e = take_entry(f, path, name);
    if (!seen.emplace(std::move(name), std::move(e)).second)
      fail<FormatError>(strformat("%s: duplicate tensor entry", path.c_str()));
  }

  // The stored set must be exactly the model's parameters plus the three
  // batch-norm buffers; a stray or missing name means the file belongs to a
  // different architecture and silently loading a subset would mask that.
  std::map<std::string, TensorPtr> expected;
  for (const auto& [name, t] : model.params().entries()) expected.emplace(name, t);
  BatchNormState& bn = model.bn_state();
  expected.emplace(kBnMean, bn.running_mean);
  expected.emplace(kBnVar, bn.running_var);
  for (const auto& [name, t] : expected) {
    auto it = seen.find(name);
    if (it == seen.end()) fail<FormatError>(strformat("%s: missing tensor '%s'", path.c_str(), name.c_str()));
    fill_from_entry(path, name, it->second, *t);
  }
  auto st = seen.find(kBnSteps);
  if (st == seen.end()) fail<FormatError>(strformat("%s: missing tensor '%s'", path.c_str(), kBnSteps));
  if (st->second.dtype != Dtype::F64 || st->second.shape != Shape{1})
    fail<FormatError>(strformat("%s: tensor '%s' shape mismatch", path.c_str(), kBnSteps));
  bn.steps = static_cast<int64_t>(std::llround(st->second.f64[0]));
  for (const auto& [name, e] : seen)
    if (!expected.count(name) && name != kBnSteps)
      fail<FormatError>(strformat("%s: unexpected tensor '%s'", path.c_str(), name.c_str()));
}

// ---- patch lowering ----

std::pair<TensorPtr, TensorPtr> preprocess_patch(const MultispectralPatch& p,
                                                 const StandardizationStats& stats,
                                                 Dtype dt) {
  // Indices need calibrated reflectance, so they are computed before any
  // z-scoring touches the bands.
  IndexStack stack = compute_indices(p);
  apply_standardization(stack, stats, "train");
  int64_t hw = static_cast<int64_t>(p.height) * p.width;
  TensorPtr idx = Tensor::zeros({kNumIndices, p.height, p.width}, dt);
  for (int c = 0; c < kNumIndices; ++c)
    for (int64_t i = 0; i < hw; ++i)
      idx->set(c * hw + i, static_cast<double>(stack.chan[static_cast<size_t>(c)][static_cast<size_t>(i)]));

  MultispectralPatch z = p;
  apply_standardization(z, stats, "train");
  TensorPtr rad = Tensor::zeros({static_cast<int64_t>(kNumBands), p.height, p.width}, dt);
  for (int b = 0; b < kNumBands; ++b)
    for (int64_t i = 0; i < hw; ++i)
      rad->set(b * hw + i, static_cast<double>(z.bands[static_cast<size_t>(b)][static_cast<size_t>(i)]));
  return {idx, rad};
}

// ---- training loop ----

namespace {

constexpr uint64_t kShuffleTag = 0x53485546;  // epoch ordering stream
constexpr uint64_t kAugmentTag = 0x4155474d;  // dihedral draw stream

void copy_plane_into_batch(Tensor& batch, int64_t sample, const Tensor& planes) {
  int64_t n = planes.numel();
  if (batch.dtype == Dtype::F64)
    std::copy_n(planes.data<double>(), n, batch.data<double>() + sample * n);
  else
    std::copy_n(planes.data<float>(), n, batch.data<float>() + sample * n);
}

void write_text_file(const std::string& path, const std::string& text) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail<Error>(strformat("cannot open '%s' for writing", path.c_str()));
  std::fwrite(text.data(), 1, text.size(), f);
  if (std::ferror(f)) {
    std::fclose(f);
    fail<Error>(strformat("write failure on '%s'", path.c_str()));
  }
  std::fclose(f);
}

std::string join_lines(const std::vector<std::string>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += "; ";
    out += v[i];
  }
  return out;
}

double safe_miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) {
    log_warn("metric window contained no labeled pixels; reporting mIoU 0");
    return 0.0;
  }
  return metrics(cm).miou;
}

// Forward every sample of `set` in inference mode and pool the confusion
// counts. Gradient recording is off for the whole pass.
ConfusionMatrix score_split(VisaModel& model, const std::vector<PatchSample>& set,
                            const StandardizationStats& stats, int batch_size) {
  NoGradGuard ng;
  ConfusionMatrix cm;
  size_t i = 0;
  while (i < set.size()) {
    size_t bs = std::min<size_t>(static_cast<size_t>(batch_size), set.size() - i);
    int h = set[i].patch.height, w = set[i].patch.width;
    TensorPtr idx_b = Tensor::zeros({static_cast<int64_t>(bs), kNumIndices, h, w}, model.dtype());
    TensorPtr rad_b = Tensor::zeros({static_cast<int64_t>(bs), kNumBands, h, w}, model.dtype());
    std::vector<uint8_t> refs;
    refs.reserve(bs * static_cast<size_t>(h) * w);
    for (size_t b = 0; b < bs; ++b) {
      const PatchSample& s = set[i + b];
      if (s.patch.height != h || s.patch.width != w)
        fail<ShapeError>("mixed patch sizes inside one split");
      auto [idx, rad] = preprocess_patch(s.patch, stats, model.dtype());
      copy_plane_into_batch(*idx_b, static_cast<int64_t>(b), *idx);
      copy_plane_into_batch(*rad_b, static_cast<int64_t>(b), *rad);
      refs.insert(refs.end(), s.mask.codes.begin(), s.mask.codes.end());
    }
    auto out = model.forward(idx_b, rad_b, false);
    cm.accumulate(refs, argmax_channel(*out.logits));
    i += bs;
  }
  return cm;
}

std::string loss_log_text(const std::vector<EpochStats>& history) {
  std::string out = "epoch,ce,dice,edge,aux,total,train_miou,val_miou\n";
  for (const auto& e : history)
    out += strformat("%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", e.epoch, e.ce, e.dice, e.edge,
                     e.aux, e.total, e.train_miou, e.val_miou);
  return out;
}

}  // namespace

std::string render_train_config(const TrainConfig& cfg, const ModelConfig& model_cfg) {
  std::string s;
  s += strformat("epochs = %d\n", cfg.epochs);
  s += strformat("batch_size = %d\n", cfg.batch_size);
  s += strformat("grad_accumulation = %d\n", cfg.grad_accumulation);
  s += strformat("augment = %d\n", cfg.augment ? 1 : 0);
  s += strformat("seed = %llu\n", static_cast<unsigned long long>(cfg.seed));
  s += strformat("optim.lr = %.17g\n", cfg.optim.lr);
  s += strformat("optim.beta1 = %.17g\n", cfg.optim.beta1);
  s += strformat("optim.beta2 = %.17g\n", cfg.optim.beta2);
  s += strformat("optim.eps = %.17g\n", cfg.optim.eps);
  s += strformat("optim.weight_decay = %.17g\n", cfg.optim.weight_decay);
  s += strformat("optim.clip_norm = %.17g\n", cfg.optim.clip_norm);
  s += strformat("optim.warmup_iters = %lld\n", static_cast<long long>(cfg.optim.warmup_iters));
  s += strformat("optim.total_iters = %lld\n", static_cast<long long>(cfg.optim.total_iters));
  s += strformat("loss.lambda_dice = %.17g\n", cfg.loss.lambda_dice);
  s += strformat("loss.lambda_edge = %.17g\n", cfg.loss.lambda_edge);
  s += strformat("loss.alpha_aux = %.17g\n", cfg.loss.alpha_aux);
  s += strformat("loss.tau = %.17g\n", cfg.loss.tau);
  s += strformat("loss.class_weights = %.17g,%.17g,%.17g\n", cfg.loss.class_weights[0],
                 cfg.loss.class_weights[1], cfg.loss.class_weights[2]);
  s += strformat("use_vimb = %d\n", model_cfg.use_vimb ? 1 : 0);
  s += strformat("vimb.d = %d\n", model_cfg.vimb.d);
  s += strformat("vimb.window = %d\n", model_cfg.vimb.window);
  s += strformat("vimb.heads = %d\n", model_cfg.vimb.heads);
  s += strformat("vimb.encoder_layers = %d\n", model_cfg.vimb.encoder_layers);
  s += strformat("vimb.ssm_layers = %d\n", model_cfg.vimb.ssm_layers);
  s += strformat("vimb.slots = %d\n", model_cfg.vimb.slots);
  s += strformat("vimb.slot_iters = %d\n", model_cfg.vimb.slot_iters);
  s += strformat("vimb.ffn_mult = %d\n", model_cfg.vimb.ffn_mult);
  s += strformat("vimb.use_rel_bias = %d\n", model_cfg.vimb.use_rel_bias ? 1 : 0);
  s += strformat("vimb.use_slots = %d\n", model_cfg.vimb.use_slots ? 1 : 0);
  s += strformat("vimb.use_broadcast = %d\n", model_cfg.vimb.use_broadcast ? 1 : 0);
  s += strformat("srab.widths = %d,%d,%d\n", model_cfg.srab.widths[0], model_cfg.srab.widths[1],
                 model_cfg.srab.widths[2]);
  s += strformat("srab.units_per_level = %d\n", model_cfg.srab.units_per_level);
  s += strformat("srab.se_reduction = %d\n", model_cfg.srab.se_reduction);
  s += strformat("srab.cbam_kernel = %d\n", model_cfg.srab.cbam_kernel);
  s += strformat("srab.multi_scale_skips = %d\n", model_cfg.srab.multi_scale_skips ? 1 : 0);
  return s;
}

TrainResult train_model(VisaModel& model, const SplitManifest& manifest,
                        const std::string& data_root, const TrainConfig& cfg,
                        const std::string& out_dir) {
  if (cfg.epochs < 1) fail<ConfigError>("train: epochs must be >= 1");
  if (cfg.batch_size < 1) fail<ConfigError>("train: batch_size must be >= 1");
  if (cfg.grad_accumulation < 1) fail<ConfigError>("train: grad_accumulation must be >= 1");
  validate_loss_weights(cfg.loss);

  auto problems = audit_split(manifest);
  if (!problems.empty())
    fail<LeakageError>(strformat("refusing to train on an unsound split: %s", join_lines(problems).c_str()));

  std::filesystem::create_directories(out_dir);
  save_manifest(out_dir + "/manifest.txt", manifest);

  auto train_set = load_split(data_root, manifest, SplitPart::Train);
  auto val_set = load_split(data_root, manifest, SplitPart::Val);
  if (train_set.empty()) fail<ConfigError>("train: manifest has no training blocks");
  bool val_on_train = val_set.empty();
  if (val_on_train)
    log_warn("manifest has no validation blocks; selecting checkpoints on training mIoU");

  std::vector<const MultispectralPatch*> train_patches;
  train_patches.reserve(train_set.size());
  std::vector<LabelMask> train_masks;
  train_masks.reserve(train_set.size());
  for (const auto& s : train_set) {
    train_patches.push_back(&s.patch);
    train_masks.push_back(s.mask);
  }
  StandardizationStats stats = fit_standardization(train_patches, "train");
  save_stats(out_dir + "/standardization.txt", stats);

  TrainConfig run = cfg;
  auto freqs = class_frequencies(train_masks);
  for (int c = 0; c < kNumClasses; ++c) {
    if (freqs[static_cast<size_t>(c)] <= 0.0) {
      log_warn(strformat("class %d absent from the training split; flooring its frequency at 1e-8", c));
      freqs[static_cast<size_t>(c)] = 1e-8;
    }
  }
  run.loss.class_weights = median_frequency_weights(freqs);

  int64_t n_train = static_cast<int64_t>(train_set.size());
  int64_t batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  int64_t steps_per_epoch =
      (batches_per_epoch + cfg.grad_accumulation - 1) / cfg.grad_accumulation;
  if (run.optim.total_iters == 0) run.optim.total_iters = steps_per_epoch * cfg.epochs;

  write_text_file(out_dir + "/config_snapshot.txt", render_train_config(run, model.config()));

  AdamW opt(model.params(), run.optim);
  TrainResult result;
  result.manifest_hash = fnv1a64_file(out_dir + "/manifest.txt");
  result.stats_path = out_dir + "/standardization.txt";
  result.checkpoint_path = out_dir + "/best.ckpt";
  result.best_val_miou = -1.0;

  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, kShuffleTag, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    Rng aug_rng(derive_seed(cfg.seed, kAugmentTag, static_cast<uint64_t>(epoch)));

    ConfusionMatrix train_cm;
    double sum_ce = 0, sum_dice = 0, sum_edge = 0, sum_aux = 0, sum_total = 0;
    int64_t seen = 0;
    int pending = 0;

    auto flush_step = [&] {
      opt.clip_gradients();
      double lr = lr_at(run.optim, opt.iterations());
      opt.step(lr);
      model.params().zero_grads();
      pending = 0;
    };

    for (int64_t b = 0; b < batches_per_epoch; ++b) {
      int64_t lo = b * cfg.batch_size;
      int64_t hi = std::min<int64_t>(lo + cfg.batch_size, n_train);
      int64_t bs = hi - lo;
      int h = train_set[order[static_cast<size_t>(lo)]].patch.height;
      int w = train_set[order[static_cast<size_t>(lo)]].patch.width;
      TensorPtr idx_b = Tensor::zeros({bs, kNumIndices, h, w}, model.dtype());
      TensorPtr rad_b = Tensor::zeros({bs, kNumBands, h, w}, model.dtype());
      std::vector<LabelMask> masks;
      masks.reserve(static_cast<size_t>(bs));
      for (int64_t i = lo; i < hi; ++i) {
        const PatchSample& src = train_set[order[static_cast<size_t>(i)]];
        if (src.patch.height != h || src.patch.width != w)
          fail<ShapeError>("mixed patch sizes inside one split");
        MultispectralPatch patch = src.patch;
        LabelMask mask = src.mask;
        if (cfg.augment) {
          Augmentation a = sample_augmentation(aug_rng);
          apply_augmentation(patch, mask, a);
        }
        auto [idx, rad] = preprocess_patch(patch, stats, model.dtype());
        copy_plane_into_batch(*idx_b, i - lo, *idx);
        copy_plane_into_batch(*rad_b, i - lo, *rad);
        masks.push_back(std::move(mask));
      }

      SupervisionTargets targets = make_supervision(masks, model.dtype());
      auto out = model.forward(idx_b, rad_b, true);
      LossBreakdown lb = total_loss(out.logits, out.aux_logits, targets, run.loss);
      TensorPtr root = cfg.grad_accumulation > 1
                           ? scale(lb.total, 1.0 / cfg.grad_accumulation)
                           : lb.total;
      root->backward();
      ++pending;
      if (pending == cfg.grad_accumulation) flush_step();

      sum_ce += lb.ce * static_cast<double>(bs);
      sum_dice += lb.dice * static_cast<double>(bs);
      sum_edge += lb.edge * static_cast<double>(bs);
      sum_aux += lb.aux * static_cast<double>(bs);
      sum_total += lb.value * static_cast<double>(bs);
      seen += bs;

      std::vector<uint8_t> refs;
      refs.reserve(masks.size() * static_cast<size_t>(h) * w);
      for (const auto& m : masks) refs.insert(refs.end(), m.codes.begin(), m.codes.end());
      train_cm.accumulate(refs, argmax_channel(*out.logits));
    }
    if (pending > 0) flush_step();

    EpochStats es;
    es.epoch = epoch;
    es.ce = sum_ce / static_cast<double>(seen);
    es.dice = sum_dice / static_cast<double>(seen);
    es.edge = sum_edge / static_cast<double>(seen);
    es.aux = sum_aux / static_cast<double>(seen);
    es.total = sum_total / static_cast<double>(seen);
    es.train_miou = safe_miou(train_cm);
    es.val_miou = val_on_train
                      ? safe_miou(score_split(model, train_set, stats, cfg.batch_size))
                      : safe_miou(score_split(model, val_set, stats, cfg.batch_size));
    result.history.push_back(es);
    write_text_file(out_dir + "/loss_log.csv", loss_log_text(result.history));

    // Ties go to the later epoch: more optimisation at equal validation score.
    if (es.val_miou >= result.best_val_miou) {
      result.best_val_miou = es.val_miou;
      result.best_epoch = epoch;
      save_checkpoint(result.checkpoint_path, model);
    }
    log_info(strformat("epoch %d/%d total %.4f train_miou %.4f val_miou %.4f", epoch, cfg.epochs, es.total,
             es.train_miou, es.val_miou));
  }

  // Leave the model holding the selected weights, not the last epoch's.
  load_checkpoint(result.checkpoint_path, model);

  std::string summary;
  summary += strformat("protocol = %s\n", protocol_name(manifest.protocol));
  summary += strformat("seed = %llu\n", static_cast<unsigned long long>(cfg.seed));
  summary += strformat("train_patches = %zu\n", train_set.size());
  summary += strformat("val_patches = %zu\n", val_set.size());
  summary += strformat("model_params = %lld\n", static_cast<long long>(model.param_count()));
  summary += strformat("manifest_fnv1a64 = %016llx\n",
                       static_cast<unsigned long long>(result.manifest_hash));
  summary += strformat("best_epoch = %d\n", result.best_epoch);
  summary += strformat("best_val_miou = %.6f\n", result.best_val_miou);
  write_text_file(out_dir + "/run_summary.txt", summary);
  return result;
}

}  // namespace visa
