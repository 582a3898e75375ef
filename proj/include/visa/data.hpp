#pragma once

#include "visa/image.hpp"
#include "visa/rng.hpp"

namespace visa {

// Domain-shift knobs. Field/year effects scale these around their defaults so
// the two fields and four seasons are systematically different populations.
struct ShiftParams {
  double weed_density = 5.0;       // expected weed blobs per patch area
  double weed_blob_scale = 1.0;    // multiplier on the base blob radius
  double illumination_gradient = 0.15;  // strength of the multiplicative ramp
  std::array<double, kNumBands> spectral_offset{0.004, 0.004, 0.005, 0.006, 0.008};
  double canopy_mix = 0.5;         // crop/weed spectral blending at blob rims
};

struct GeneratorConfig {
  int patch_size = 256;            // block tiles are twice this per side
  int blocks_per_field_year = 4;
  ShiftParams shift;
  double noise_sigma = 0.012;      // per-pixel per-band Gaussian noise
  double ignore_border_fraction = 0.005;  // per-side border mask width / tile
};

struct PatchSample {
  MultispectralPatch patch;
  LabelMask mask;
};

/// All patches of one (field, year) cell: blocks_per_field_year tiles of
/// 2P x 2P, each cut into four P x P quadrant patches sharing a block_id.
/// Output is raw simulator radiance; denoising and the saturation gate are
/// separate stages. Deterministic in (seed, field, year, config).
std::vector<PatchSample> generate_field(uint64_t seed, FieldId field, YearId year,
                                        const GeneratorConfig& cfg);

/// 3x3 median filter per band with replicate padding at the borders.
MultispectralPatch median_denoise(const MultispectralPatch& p);

/// Quality gate: false (reject) when any single band has a fraction of
/// saturated pixels (value at 1.0) strictly greater than `threshold`. On
/// rejection `reason`, if given, names the offending band.
bool saturation_gate(const MultispectralPatch& p, double threshold = 0.005,
                     std::string* reason = nullptr);

// ---- geometric augmentation (dihedral group of the square) ----
// Vertical flips are covered as rot180 composed with the horizontal mirror,
// so the two fields below reach all eight elements exactly once.
struct Augmentation {
  int rot_quarter = 0;  // clockwise quarter turns, 0..3
  bool flip_h = false;  // horizontal mirror, applied after rotation
};
Augmentation sample_augmentation(Rng& rng);
void apply_augmentation(MultispectralPatch& p, LabelMask& m, const Augmentation& a);

// ---- block-level split protocols ----
enum class Protocol { WithinPlot, CrossPlot, CrossYear };
const char* protocol_name(Protocol p);
Protocol parse_protocol(const std::string& s);

enum class SplitPart : uint8_t { Train = 0, Val = 1, Test = 2 };
const char* split_part_name(SplitPart p);
SplitPart parse_split_part(const std::string& s);

struct BlockInfo {
  int64_t block_id = -1;
  FieldId field = FieldId::E2;
  YearId year = YearId::Y0;
};

struct SplitRatios {
  double train = 0.7, val = 0.1, test = 0.2;
};

struct SplitManifest {
  Protocol protocol = Protocol::WithinPlot;
  uint64_t seed = 0;
  struct Entry {
    BlockInfo block;
    SplitPart part;
  };
  std::vector<Entry> entries;
};

/// Partition whole blocks. within_plot shuffles all blocks into
/// train/val/test by ratio; cross_plot trains on one field and tests on the
/// other; cross_year trains on Y0..Y2 and tests on Y3.
SplitManifest build_split(Protocol proto, const std::vector<BlockInfo>& blocks, uint64_t seed,
                          const SplitRatios& ratios = {},
                          FieldId cross_plot_train_field = FieldId::E2);

/// Leakage and well-formedness audit. Returns one message per violation;
/// empty means the split is sound.
std::vector<std::string> audit_split(const SplitManifest& m);

// Text manifest: "protocol <name> seed <n>" then one "block field year part"
// row per block.
void save_manifest(const std::string& path, const SplitManifest& m);
SplitManifest load_manifest(const std::string& path);

// ---- binary patch / mask files ----
// Patch: magic "BAWP01\0\0", u32 bands, u32 height, u32 width, f32 planes in
// band order. Mask: magic "BAWM01\0\0", u32 height, u32 width, u8 codes.
// All integers little-endian.
void write_patch(const std::string& path, const MultispectralPatch& p);
MultispectralPatch read_patch(const std::string& path);  // provenance left unset
void write_mask(const std::string& path, const LabelMask& m);
LabelMask read_mask(const std::string& path);

/// Canonical basename for a quadrant patch: "<field>_<year>_B<block>_Q<q>".
std::string patch_basename(const BlockInfo& b, int quadrant);

/// Load every patch+mask of one split part from a dataset directory laid out
/// as <root>/manifest.txt, <root>/patches/*.msp, <root>/masks/*.lbl.
/// Missing quadrant files are an error listing the offending block ids.
std::vector<PatchSample> load_split(const std::string& root, const SplitManifest& m,
                                    SplitPart part);

}  // namespace visa
