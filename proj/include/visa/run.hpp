#pragma once

#include <string>
#include <vector>

#include "visa/data.hpp"
#include "visa/gradcheck.hpp"
#include "visa/metrics.hpp"
#include "visa/train.hpp"

namespace visa {

// Everything one reproducible run needs, addressable as flat "key = value"
// text so a config file and a written snapshot share one format.
struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  GeneratorConfig gen;
  Protocol protocol = Protocol::WithinPlot;
  int64_t eval_replicates = 10000;
  uint64_t eval_bootstrap_seed = 2026;
  int eval_window = 256;
  int eval_stride = 128;
};

/// One key. Unknown keys and unparsable values are ConfigErrors naming the
/// offender.
void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value);

/// "key = value" per line; '#' starts a comment, blank lines are skipped.
/// `origin` labels error messages (a path or "<inline>").
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin);
void apply_config_file(RunConfig& cfg, const std::string& path);

/// Full snapshot; feeding the result back through apply_config_text
/// reproduces the config.
std::string render_run_config(const RunConfig& cfg);

// ---- model variants for controlled comparisons ----

/// Single-factor edits of a base architecture, by name: "full",
/// "drop_vimb", "drop_rel_bias", "drop_slots", "drop_broadcast",
/// "single_scale_decoder", "heads=N", "ssm_layers=N".
ModelConfig apply_variant(const ModelConfig& base, const std::string& name);

/// The standard comparison set: full plus every single-factor edit.
std::vector<std::string> default_variants();

// ---- dataset generation ----

struct GenerateReport {
  int64_t blocks_written = 0;
  int64_t blocks_dropped = 0;  // saturation-gate rejections
  int64_t patches_written = 0;
  SplitManifest manifest;
};

/// Simulates every field-year cell, median-denoises each patch, and drops any
/// block with a quadrant failing the saturation gate on raw values (clipping
/// is a sensor artifact; smoothing first would hide it). Survivors are split
/// by protocol, audited, and written as <out>/patches, <out>/masks,
/// <out>/manifest.txt. A non-empty out_dir is an error without `force`.
GenerateReport generate_dataset(const std::string& out_dir, uint64_t seed, Protocol proto,
                                const GeneratorConfig& gcfg, bool force);

// ---- trained-model inference ----

/// Standardize both streams, tile with the sliding window, average logits.
/// window must satisfy the model's extent constraints; stride in (0, window].
WindowInference infer_patch(VisaModel& model, const StandardizationStats& stats,
                            const MultispectralPatch& p, int window, int stride);

/// Test-split evaluation of a trained model, block by assembled block.
EvalReport evaluate_model(VisaModel& model, const StandardizationStats& stats,
                          const SplitManifest& manifest, const std::string& data_root,
                          const RunConfig& cfg);

// Confidence grid file: magic "BAWC01\0\0", u32 height, u32 width, then f32
// row-major values, all little-endian.
void write_confidence(const std::string& path, const WindowInference& inf);
std::vector<float> read_confidence(const std::string& path, int64_t* height, int64_t* width);

// ---- analytic-gradient audit ----

/// Central-difference check of the full network driven through the composite
/// loss, in 64-bit, on random inputs and labels derived from `seed`.
/// opts.max_per_tensor bounds the runtime on non-trivial models.
GradCheckResult model_gradcheck(const ModelConfig& mc, int height, int width, uint64_t seed,
                                const GradCheckOptions& opts);

}  // namespace visa
