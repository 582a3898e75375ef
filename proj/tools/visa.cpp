// Command line entry point: generate / train / eval / ablate / infer /
// gradcheck. Values in a --config file override command-line flags, and the
// snapshot each run writes is itself a valid config file.
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "visa/run.hpp"

namespace fs = std::filesystem;
using namespace visa;

namespace {

struct CommonArgs {
  std::string config;
  uint64_t seed = 2026;
  bool seed_set = false;
};

// Flags first, then the config file on top of them.
RunConfig resolve_config(const CommonArgs& c) {
  RunConfig cfg;
  if (c.seed_set) cfg.train.seed = c.seed;
  if (!c.config.empty()) apply_config_file(cfg, c.config);
  return cfg;
}

// Falls back to a sibling of the checkpoint when the flag is empty; errors
// when neither exists so a silent default can't misconfigure the model.
std::string sibling_or(const std::string& given, const std::string& checkpoint,
                       const char* filename) {
  if (!given.empty()) return given;
  fs::path p = fs::path(checkpoint).parent_path() / filename;
  if (!fs::exists(p))
    fail<Error>(strformat("no %s given and '%s' does not exist", filename, p.string().c_str()));
  return p.string();
}

int count_part(const SplitManifest& m, SplitPart part) {
  int n = 0;
  for (const auto& e : m.entries)
    if (e.part == part) ++n;
  return n;
}

std::string variant_dirname(std::string name) {
  for (char& ch : name)
    if (ch == '=') ch = '-';
  return name;
}

int cmd_generate(const CommonArgs& common, const std::string& out, const std::string& protocol,
                 int patch_size, int blocks, bool force) {
  RunConfig cfg;
  if (common.seed_set) cfg.train.seed = common.seed;
  cfg.protocol = parse_protocol(protocol);
  if (patch_size > 0) cfg.gen.patch_size = patch_size;
  if (blocks > 0) cfg.gen.blocks_per_field_year = blocks;
  if (!common.config.empty()) apply_config_file(cfg, common.config);

  auto rep = generate_dataset(out, cfg.train.seed, cfg.protocol, cfg.gen, force);
  std::printf("dataset %s: %lld blocks (%d train / %d val / %d test), %lld patches",
              out.c_str(), static_cast<long long>(rep.blocks_written),
              count_part(rep.manifest, SplitPart::Train), count_part(rep.manifest, SplitPart::Val),
              count_part(rep.manifest, SplitPart::Test),
              static_cast<long long>(rep.patches_written));
  if (rep.blocks_dropped > 0)
    std::printf(", %lld dropped by the saturation gate", static_cast<long long>(rep.blocks_dropped));
  std::printf("\n");
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& data, const std::string& out,
              int epochs, int batch, double lr) {
  RunConfig cfg;
  if (common.seed_set) cfg.train.seed = common.seed;
  if (epochs > 0) cfg.train.epochs = epochs;
  if (batch > 0) cfg.train.batch_size = batch;
  if (lr > 0) cfg.train.optim.lr = lr;
  if (!common.config.empty()) apply_config_file(cfg, common.config);

  SplitManifest manifest = load_manifest(data + "/manifest.txt");
  VisaModel model(cfg.model, cfg.train.seed);
  std::printf("training %lld parameters on %d train blocks (%s protocol)\n",
              static_cast<long long>(model.param_count()),
              count_part(manifest, SplitPart::Train), protocol_name(manifest.protocol));
  TrainResult res = train_model(model, manifest, data, cfg.train, out);
  std::printf("best epoch %d, validation mIoU %.4f\ncheckpoint: %s\n", res.best_epoch,
              res.best_val_miou, res.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& checkpoint, const std::string& data,
             const std::string& out, const std::string& stats_flag, int64_t replicates,
             int window, int stride) {
  CommonArgs resolved = common;
  if (resolved.config.empty()) {
    fs::path snap = fs::path(checkpoint).parent_path() / "config_snapshot.txt";
    if (fs::exists(snap)) resolved.config = snap.string();
  }
  RunConfig cfg = resolve_config(resolved);
  if (replicates > 0) cfg.eval_replicates = replicates;
  if (window > 0) cfg.eval_window = window;
  if (stride > 0) cfg.eval_stride = stride;

  VisaModel model(cfg.model, cfg.train.seed);
  load_checkpoint(checkpoint, model);
  auto stats = load_stats(sibling_or(stats_flag, checkpoint, "standardization.txt"));
  SplitManifest manifest = load_manifest(data + "/manifest.txt");

  EvalReport report = evaluate_model(model, stats, manifest, data, cfg);
  std::string csv = metrics_csv(report);
  write_metrics_csv(out, report);
  std::fputs(csv.c_str(), stdout);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_ablate(const CommonArgs& common, const std::string& data, const std::string& out,
               const std::string& variants_flag) {
  RunConfig cfg = resolve_config(common);
  std::vector<std::string> variants;
  if (variants_flag.empty()) {
    variants = default_variants();
  } else {
    size_t start = 0;
    while (start <= variants_flag.size()) {
      size_t comma = variants_flag.find(',', start);
      std::string name = comma == std::string::npos ? variants_flag.substr(start)
                                                    : variants_flag.substr(start, comma - start);
      if (!name.empty()) variants.push_back(name);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }

  SplitManifest manifest = load_manifest(data + "/manifest.txt");
  struct Row {
    std::string name;
    double miou, ci_lo, ci_hi, weed_iou;
    int64_t params;
    uint64_t manifest_hash;
  };
  std::vector<Row> rows;

  for (const std::string& name : variants) {
    ModelConfig mc = apply_variant(cfg.model, name);
    VisaModel model(mc, cfg.train.seed);
    std::printf("== variant %s (%lld parameters)\n", name.c_str(),
                static_cast<long long>(model.param_count()));
    TrainResult res =
        train_model(model, manifest, data, cfg.train, out + "/" + variant_dirname(name));
    auto stats = load_stats(res.stats_path);
    EvalReport report = evaluate_model(model, stats, manifest, data, cfg);
    const StratumMetrics& agg = report.strata.back();
    rows.push_back({name, agg.m.miou, agg.ci.ci_lo, agg.ci.ci_hi, agg.m.iou[kClassWeed],
                    model.param_count(), res.manifest_hash});
  }

  for (size_t i = 1; i < rows.size(); ++i)
    if (rows[i].manifest_hash != rows[0].manifest_hash)
      fail<Error>(strformat("variant '%s' trained on a different manifest", rows[i].name.c_str()));

  std::string table = "variant,miou,ci_lo,ci_hi,iou_weed,params,manifest_hash\n";
  std::printf("%-22s %8s %17s %8s %10s\n", "variant", "miou", "95% CI", "weed", "params");
  for (const auto& r : rows) {
    std::printf("%-22s %8.4f [%6.4f, %6.4f] %8.4f %10lld\n", r.name.c_str(), r.miou, r.ci_lo,
                r.ci_hi, r.weed_iou, static_cast<long long>(r.params));
    table += strformat("%s,%.6f,%.6f,%.6f,%.6f,%lld,%016llx\n", r.name.c_str(), r.miou, r.ci_lo,
                       r.ci_hi, r.weed_iou, static_cast<long long>(r.params),
                       static_cast<unsigned long long>(r.manifest_hash));
  }
  std::FILE* f = std::fopen((out + "/ablation.csv").c_str(), "wb");
  if (!f) fail<Error>(strformat("cannot open '%s/ablation.csv' for writing", out.c_str()));
  std::fwrite(table.data(), 1, table.size(), f);
  std::fclose(f);
  return 0;
}

int cmd_infer(const CommonArgs& common, const std::string& checkpoint, const std::string& image,
              const std::string& out, const std::string& stats_flag, int window, int stride) {
  CommonArgs resolved = common;
  if (resolved.config.empty()) {
    fs::path snap = fs::path(checkpoint).parent_path() / "config_snapshot.txt";
    if (fs::exists(snap)) resolved.config = snap.string();
  }
  RunConfig cfg = resolve_config(resolved);
  if (window > 0) cfg.eval_window = window;
  if (stride > 0) cfg.eval_stride = stride;

  VisaModel model(cfg.model, cfg.train.seed);
  load_checkpoint(checkpoint, model);
  auto stats = load_stats(sibling_or(stats_flag, checkpoint, "standardization.txt"));
  MultispectralPatch patch = read_patch(image);

  WindowInference inf = infer_patch(model, stats, patch, cfg.eval_window, cfg.eval_stride);
  LabelMask mask;
  mask.height = static_cast<int>(inf.height);
  mask.width = static_cast<int>(inf.width);
  mask.codes = inf.labels;
  write_mask(out + ".lbl", mask);
  write_confidence(out + ".cnf", inf);
  std::printf("wrote %s.lbl and %s.cnf (%lldx%lld%s)\n", out.c_str(), out.c_str(),
              static_cast<long long>(inf.height), static_cast<long long>(inf.width),
              inf.padded ? ", reflect-padded" : "");
  return 0;
}

int cmd_gradcheck(const CommonArgs& common, int extent, double step, double tol,
                  int64_t samples, double floor) {
  RunConfig cfg;
  // Desk-size 64-bit surrogate of the full network; every module is present.
  cfg.model.vimb = {8, 4, 2, 1, 1, 2, 2, 2, true, true, true};
  cfg.model.srab.widths = {8, 16, 32};
  cfg.model.srab.units_per_level = 1;
  if (common.seed_set) cfg.train.seed = common.seed;
  if (!common.config.empty()) apply_config_file(cfg, common.config);

  GradCheckOptions opts;
  opts.h = step;
  opts.max_per_tensor = samples;
  opts.denom_floor = floor;
  GradCheckResult r = model_gradcheck(cfg.model, extent, extent, cfg.train.seed, opts);
  std::printf("checked %lld gradient entries, max rel err %.3e (%s[%lld]: analytic %.6e, "
              "numeric %.6e)\n",
              static_cast<long long>(r.checked), r.max_rel_err, r.worst.param.c_str(),
              static_cast<long long>(r.worst.index), r.worst.analytic, r.worst.numeric);
  if (r.max_rel_err < tol) {
    std::printf("PASS (tolerance %.1e)\n", tol);
    return 0;
  }
  std::printf("FAIL (tolerance %.1e)\n", tol);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stream multispectral crop/weed segmentation toolkit"};
  app.require_subcommand(1);
  CommonArgs common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config,
                    "key = value config file; its values override other flags");
    sub->add_option("--seed", common.seed, "global run seed")
        ->each([&](const std::string&) { common.seed_set = true; });
  };

  // generate
  std::string g_out, g_protocol = "within_plot";
  int g_patch = 0, g_blocks = 0;
  bool g_force = false;
  auto* gen = app.add_subcommand("generate", "simulate a dataset and write an audited split");
  add_common(gen);
  gen->add_option("--out", g_out, "dataset directory")->required();
  gen->add_option("--protocol", g_protocol, "within_plot | cross_plot | cross_year");
  gen->add_option("--patch-size", g_patch, "quadrant patch side in pixels");
  gen->add_option("--blocks", g_blocks, "blocks per field-year cell");
  gen->add_flag("--force", g_force, "replace a non-empty output directory");

  // train
  std::string t_data, t_out;
  int t_epochs = 0, t_batch = 0;
  double t_lr = 0;
  auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
  add_common(tr);
  tr->add_option("--data", t_data, "dataset directory (from generate)")->required();
  tr->add_option("--out", t_out, "run directory for logs and checkpoints")->required();
  tr->add_option("--epochs", t_epochs, "training epochs");
  tr->add_option("--batch", t_batch, "batch size");
  tr->add_option("--lr", t_lr, "peak learning rate");

  // eval
  std::string e_ckpt, e_data, e_out = "metrics.csv", e_stats;
  int64_t e_replicates = 0;
  int e_window = 0, e_stride = 0;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(ev);
  ev->add_option("--checkpoint", e_ckpt, "model checkpoint")->required();
  ev->add_option("--data", e_data, "dataset directory")->required();
  ev->add_option("--out", e_out, "metrics CSV path");
  ev->add_option("--stats", e_stats, "standardization statistics file");
  ev->add_option("--replicates", e_replicates, "bootstrap replicates");
  ev->add_option("--window", e_window, "sliding inference window");
  ev->add_option("--stride", e_stride, "sliding inference stride");

  // ablate
  std::string a_data, a_out, a_variants;
  auto* ab = app.add_subcommand("ablate", "train and compare single-factor model variants");
  add_common(ab);
  ab->add_option("--data", a_data, "dataset directory")->required();
  ab->add_option("--out", a_out, "directory for per-variant runs")->required();
  ab->add_option("--variants", a_variants, "comma list (default: the standard set)");

  // infer
  std::string i_ckpt, i_image, i_out, i_stats;
  int i_window = 0, i_stride = 0;
  auto* in = app.add_subcommand("infer", "segment one patch file");
  add_common(in);
  in->add_option("--checkpoint", i_ckpt, "model checkpoint")->required();
  in->add_option("--image", i_image, "input patch (.msp)")->required();
  in->add_option("--out", i_out, "output prefix (writes .lbl and .cnf)")->required();
  in->add_option("--stats", i_stats, "standardization statistics file");
  in->add_option("--window", i_window, "sliding inference window");
  in->add_option("--stride", i_stride, "sliding inference stride");

  // gradcheck
  int gc_extent = 16;
  double gc_step = 1e-4, gc_tol = 1e-4, gc_floor = 1e-6;
  int64_t gc_samples = 4;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of the analytic gradients");
  add_common(gc);
  gc->add_option("--extent", gc_extent, "input height = width");
  gc->add_option("--step", gc_step, "finite-difference step");
  gc->add_option("--tol", gc_tol, "max relative error to pass");
  gc->add_option("--samples", gc_samples, "checked entries per tensor (0 = all)");
  gc->add_option("--floor", gc_floor, "relative-error denominator floor for null gradients");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(common, g_out, g_protocol, g_patch, g_blocks, g_force);
    if (tr->parsed()) return cmd_train(common, t_data, t_out, t_epochs, t_batch, t_lr);
    if (ev->parsed())
      return cmd_eval(common, e_ckpt, e_data, e_out, e_stats, e_replicates, e_window, e_stride);
    if (ab->parsed()) return cmd_ablate(common, a_data, a_out, a_variants);
    if (in->parsed()) return cmd_infer(common, i_ckpt, i_image, i_out, i_stats, i_window, i_stride);
    if (gc->parsed())
      return cmd_gradcheck(common, gc_extent, gc_step, gc_tol, gc_samples, gc_floor);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
