#include "visa/run.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>

#include "visa/gradcheck.hpp"
#include "visa/rng.hpp"

namespace visa {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int64_t to_i64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  int64_t out = 0;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    fail<ConfigError>(strformat("key '%s': '%s' is not an integer", key.c_str(), v.c_str()));
  return out;
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  uint64_t out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    fail<ConfigError>(strformat("key '%s': '%s' is not an unsigned integer", key.c_str(), v.c_str()));
  return out;
}

double to_f64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    fail<ConfigError>(strformat("key '%s': '%s' is not a number", key.c_str(), v.c_str()));
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  fail<ConfigError>(strformat("key '%s': '%s' is not a boolean (use 0/1/true/false)", key.c_str(),
                              v.c_str()));
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= s.size()) {
    size_t comma = s.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(trim(s.substr(start)));
      break;
    }
    out.push_back(trim(s.substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

template <typename T, size_t N>
std::array<T, N> to_tuple(const std::string& key, const std::string& v,
                          T (*conv)(const std::string&, const std::string&)) {
  auto parts = split_commas(v);
  if (parts.size() != N)
    fail<ConfigError>(strformat("key '%s': expected %zu comma-separated values, got '%s'",
                                key.c_str(), N, v.c_str()));
  std::array<T, N> out{};
  for (size_t i = 0; i < N; ++i) out[i] = conv(key, parts[i]);
  return out;
}

}  // namespace

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  TrainConfig& t = cfg.train;
  ModelConfig& m = cfg.model;

  if (key == "epochs") t.epochs = static_cast<int>(to_i64(key, value));
  else if (key == "batch_size") t.batch_size = static_cast<int>(to_i64(key, value));
  else if (key == "grad_accumulation") t.grad_accumulation = static_cast<int>(to_i64(key, value));
  else if (key == "augment") t.augment = to_bool(key, value);
  else if (key == "seed") t.seed = to_u64(key, value);
  else if (key == "optim.lr") t.optim.lr = to_f64(key, value);
  else if (key == "optim.beta1") t.optim.beta1 = to_f64(key, value);
  else if (key == "optim.beta2") t.optim.beta2 = to_f64(key, value);
  else if (key == "optim.eps") t.optim.eps = to_f64(key, value);
  else if (key == "optim.weight_decay") t.optim.weight_decay = to_f64(key, value);
  else if (key == "optim.clip_norm") t.optim.clip_norm = to_f64(key, value);
  else if (key == "optim.warmup_iters") t.optim.warmup_iters = to_i64(key, value);
  else if (key == "optim.total_iters") t.optim.total_iters = to_i64(key, value);
  else if (key == "loss.lambda_dice") t.loss.lambda_dice = to_f64(key, value);
  else if (key == "loss.lambda_edge") t.loss.lambda_edge = to_f64(key, value);
  else if (key == "loss.alpha_aux") t.loss.alpha_aux = to_f64(key, value);
  else if (key == "loss.tau") t.loss.tau = to_f64(key, value);
  else if (key == "loss.class_weights") t.loss.class_weights = to_tuple<double, 3>(key, value, to_f64);
  else if (key == "use_vimb") m.use_vimb = to_bool(key, value);
  else if (key == "vimb.d") m.vimb.d = static_cast<int>(to_i64(key, value));
  else if (key == "vimb.window") m.vimb.window = static_cast<int>(to_i64(key, value));
  else if (key == "vimb.heads") m.vimb.heads = static_cast<int>(to_i64(key, value));
  else if (key == "vimb.encoder_layers") m.vimb.encoder_layers = static_cast<int>(to_i64(key, value));
  else if (key == "vimb.ssm_layers") m.vimb.ssm_layers = static_cast<int>(to_i64(key, value));
  else if (key == "vimb.slots") m.vimb.slots = static_cast<int>(to_i64(key, value));
  else if (key == "vimb.slot_iters") m.vimb.slot_iters = static_cast<int>(to_i64(key, value));
  else if (key == "vimb.ffn_mult") m.vimb.ffn_mult = static_cast<int>(to_i64(key, value));
  else if (key == "vimb.use_rel_bias") m.vimb.use_rel_bias = to_bool(key, value);
  else if (key == "vimb.use_slots") m.vimb.use_slots = to_bool(key, value);
  else if (key == "vimb.use_broadcast") m.vimb.use_broadcast = to_bool(key, value);
  else if (key == "srab.widths") {
    auto w = to_tuple<int64_t, 3>(key, value, to_i64);
    m.srab.widths = {static_cast<int>(w[0]), static_cast<int>(w[1]), static_cast<int>(w[2])};
  }
  else if (key == "srab.units_per_level") m.srab.units_per_level = static_cast<int>(to_i64(key, value));
  else if (key == "srab.se_reduction") m.srab.se_reduction = static_cast<int>(to_i64(key, value));
  else if (key == "srab.cbam_kernel") m.srab.cbam_kernel = static_cast<int>(to_i64(key, value));
  else if (key == "srab.multi_scale_skips") m.srab.multi_scale_skips = to_bool(key, value);
  else if (key == "gen.patch_size") cfg.gen.patch_size = static_cast<int>(to_i64(key, value));
  else if (key == "gen.blocks_per_field_year")
    cfg.gen.blocks_per_field_year = static_cast<int>(to_i64(key, value));
  else if (key == "gen.noise_sigma") cfg.gen.noise_sigma = to_f64(key, value);
  else if (key == "gen.ignore_border_fraction")
    cfg.gen.ignore_border_fraction = to_f64(key, value);
  else if (key == "protocol") cfg.protocol = parse_protocol(value);
  else if (key == "eval.replicates") cfg.eval_replicates = to_i64(key, value);
  else if (key == "eval.bootstrap_seed") cfg.eval_bootstrap_seed = to_u64(key, value);
  else if (key == "eval.window") cfg.eval_window = static_cast<int>(to_i64(key, value));
  else if (key == "eval.stride") cfg.eval_stride = static_cast<int>(to_i64(key, value));
  else fail<ConfigError>(strformat("unknown config key '%s'", key.c_str()));
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  size_t start = 0;
  int lineno = 0;
  while (start <= text.size()) {
    size_t nl = text.find('\n', start);
    std::string line =
        nl == std::string::npos ? text.substr(start) : text.substr(start, nl - start);
    ++lineno;
    start = nl == std::string::npos ? text.size() + 1 : nl + 1;

    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail<ConfigError>(strformat("%s:%d: expected 'key = value', got '%s'", origin.c_str(),
                                  lineno, line.c_str()));
    apply_config_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail<Error>(strformat("cannot open config file '%s'", path.c_str()));
  std::string text;
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) text.append(buf, n);
  std::fclose(f);
  apply_config_text(cfg, text, path);
}

std::string render_run_config(const RunConfig& cfg) {
  std::string s = render_train_config(cfg.train, cfg.model);
  s += strformat("protocol = %s\n", protocol_name(cfg.protocol));
  s += strformat("gen.patch_size = %d\n", cfg.gen.patch_size);
  s += strformat("gen.blocks_per_field_year = %d\n", cfg.gen.blocks_per_field_year);
  s += strformat("gen.noise_sigma = %.17g\n", cfg.gen.noise_sigma);
  s += strformat("gen.ignore_border_fraction = %.17g\n", cfg.gen.ignore_border_fraction);
  s += strformat("eval.replicates = %lld\n", static_cast<long long>(cfg.eval_replicates));
  s += strformat("eval.bootstrap_seed = %llu\n",
                 static_cast<unsigned long long>(cfg.eval_bootstrap_seed));
  s += strformat("eval.window = %d\n", cfg.eval_window);
  s += strformat("eval.stride = %d\n", cfg.eval_stride);
  return s;
}

ModelConfig apply_variant(const ModelConfig& base, const std::string& name) {
  ModelConfig out = base;
  if (name == "full") {
  } else if (name == "drop_vimb") {
    out.use_vimb = false;
  } else if (name == "drop_rel_bias") {
    out.vimb.use_rel_bias = false;
  } else if (name == "drop_slots") {
    out.vimb.use_slots = false;
  } else if (name == "drop_broadcast") {
    out.vimb.use_broadcast = false;
  } else if (name == "single_scale_decoder") {
    out.srab.multi_scale_skips = false;
  } else if (name.rfind("heads=", 0) == 0) {
    out.vimb.heads = static_cast<int>(to_i64(name, name.substr(6)));
  } else if (name.rfind("ssm_layers=", 0) == 0) {
    out.vimb.ssm_layers = static_cast<int>(to_i64(name, name.substr(11)));
  } else {
    fail<ConfigError>(strformat(
        "unknown variant '%s' (expected full, drop_vimb, drop_rel_bias, drop_slots, "
        "drop_broadcast, single_scale_decoder, heads=N, or ssm_layers=N)",
        name.c_str()));
  }
  validate_model_config(out);
  return out;
}

std::vector<std::string> default_variants() {
  return {"full",           "drop_vimb",  "drop_rel_bias",        "drop_slots",
          "drop_broadcast", "heads=4",    "single_scale_decoder", "ssm_layers=0"};
}

GenerateReport generate_dataset(const std::string& out_dir, uint64_t seed, Protocol proto,
                                const GeneratorConfig& gcfg, bool force) {
  namespace fs = std::filesystem;
  fs::path root(out_dir);
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force)
      fail<Error>(strformat("output directory '%s' is not empty (pass --force to replace it)",
                            out_dir.c_str()));
    fs::remove_all(root);
  }
  fs::create_directories(root / "patches");
  fs::create_directories(root / "masks");

  GenerateReport rep;
  std::vector<BlockInfo> blocks;
  for (FieldId f : {FieldId::E2, FieldId::E8})
    for (YearId y : {YearId::Y0, YearId::Y1, YearId::Y2, YearId::Y3}) {
      std::map<int64_t, std::vector<PatchSample>> by_block;
      for (auto& s : generate_field(seed, f, y, gcfg))
        by_block[s.patch.block_id].push_back(std::move(s));

      for (auto& [block_id, group] : by_block) {
        std::string reason;
        bool ok = true;
        for (const auto& s : group)
          if (!saturation_gate(s.patch, 0.005, &reason)) {
            ok = false;
            break;
          }
        if (!ok) {
          ++rep.blocks_dropped;
          log_warn(strformat("dropping block %lld: %s", static_cast<long long>(block_id),
                             reason.c_str()));
          continue;
        }
        BlockInfo info{block_id, f, y};
        for (const auto& s : group) {
          MultispectralPatch clean = median_denoise(s.patch);
          const std::string base = patch_basename(info, s.patch.quadrant);
          write_patch((root / "patches" / (base + ".msp")).string(), clean);
          write_mask((root / "masks" / (base + ".lbl")).string(), s.mask);
          ++rep.patches_written;
        }
        blocks.push_back(info);
        ++rep.blocks_written;
      }
    }

  rep.manifest = build_split(proto, blocks, seed);
  auto problems = audit_split(rep.manifest);
  if (!problems.empty())
    fail<LeakageError>(strformat("generated split failed its own audit: %s", problems[0].c_str()));
  save_manifest((root / "manifest.txt").string(), rep.manifest);
  return rep;
}

WindowInference infer_patch(VisaModel& model, const StandardizationStats& stats,
                            const MultispectralPatch& p, int window, int stride) {
  const ModelConfig& mc = model.config();
  if (window < 4 || window % 4 != 0)
    fail<ConfigError>(strformat("inference window %d must be a positive multiple of 4", window));
  if (mc.use_vimb && window % mc.vimb.window != 0)
    fail<ConfigError>(strformat("inference window %d must be a multiple of the attention window %d",
                                window, mc.vimb.window));
  if (stride < 1 || stride > window)
    fail<ConfigError>(strformat("stride %d must lie in [1, window]", stride));

  auto [idx, rad] = preprocess_patch(p, stats, model.dtype());
  WindowForwardFn fn = [&model](const TensorPtr& iw, const TensorPtr& rw) {
    NoGradGuard ng;
    return model.forward(iw, rw, false).logits;
  };
  return sliding_window_infer(fn, idx, rad, window, stride);
}

EvalReport evaluate_model(VisaModel& model, const StandardizationStats& stats,
                          const SplitManifest& manifest, const std::string& data_root,
                          const RunConfig& cfg) {
  BlockInferFn infer = [&](const MultispectralPatch& block, const LabelMask&) {
    return infer_patch(model, stats, block, cfg.eval_window, cfg.eval_stride).labels;
  };
  return evaluate_protocol(infer, manifest, data_root, cfg.eval_replicates,
                           cfg.eval_bootstrap_seed);
}

namespace {

constexpr char kConfMagic[8] = {'B', 'A', 'W', 'C', '0', '1', '\0', '\0'};

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

uint32_t take_u32(std::FILE* f, const std::string& path) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4)
    fail<FormatError>(strformat("%s: truncated confidence file", path.c_str()));
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

}  // namespace

void write_confidence(const std::string& path, const WindowInference& inf) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail<Error>(strformat("cannot open '%s' for writing", path.c_str()));
  FileCloser guard{f};
  std::fwrite(kConfMagic, 1, 8, f);
  put_u32(f, static_cast<uint32_t>(inf.height));
  put_u32(f, static_cast<uint32_t>(inf.width));
  std::fwrite(inf.confidence.data(), sizeof(float), inf.confidence.size(), f);
  if (std::ferror(f)) fail<Error>(strformat("write failure on '%s'", path.c_str()));
}

std::vector<float> read_confidence(const std::string& path, int64_t* height, int64_t* width) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail<Error>(strformat("cannot open confidence file '%s'", path.c_str()));
  FileCloser guard{f};
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kConfMagic, 8) != 0)
    fail<FormatError>(strformat("%s: not a confidence file (bad magic)", path.c_str()));
  uint32_t h = take_u32(f, path), w = take_u32(f, path);
  std::vector<float> out(static_cast<size_t>(h) * w);
  if (std::fread(out.data(), sizeof(float), out.size(), f) != out.size())
    fail<FormatError>(strformat("%s: truncated confidence file", path.c_str()));
  if (height) *height = h;
  if (width) *width = w;
  return out;
}

GradCheckResult model_gradcheck(const ModelConfig& mc, int height, int width, uint64_t seed,
                                const GradCheckOptions& opts) {
  VisaModel model(mc, seed, Dtype::F64);
  Rng rng(derive_seed(seed, 0x47434b31));

  TensorPtr idx = Tensor::zeros({1, kNumIndices, height, width}, Dtype::F64);
  TensorPtr rad = Tensor::zeros({1, kNumBands, height, width}, Dtype::F64);
  for (int64_t i = 0; i < idx->numel(); ++i) idx->set(i, rng.normal());
  for (int64_t i = 0; i < rad->numel(); ++i) rad->set(i, rng.normal());

  LabelMask mask;
  mask.allocate(height, width);
  for (auto& c : mask.codes) {
    double u = rng.uniform();
    // A sprinkle of ignore pixels keeps the masked-loss paths on the graph.
    c = u < 0.1 ? uint8_t{255} : static_cast<uint8_t>(rng.uniform_int(kNumClasses));
  }
  SupervisionTargets targets = make_supervision({mask}, Dtype::F64);

  LossWeights w;
  w.class_weights = {0.5, 1.0, 1.5};  // asymmetric so the weighting term is live

  auto make_loss = [&]() {
    auto out = model.forward(idx, rad, true);
    return total_loss(out.logits, out.aux_logits, targets, w).total;
  };
  return gradcheck(make_loss, model.params().entries(), opts);
}

}  // namespace visa
