#include "visa/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace visa {

namespace {

// Class-conditional mean reflectance (B, G, R, RE, NIR). Crop and weed are
// both vegetated but differ in green/red-edge behaviour; soil is flat and
// red-heavy, so its NDVI sits far below either canopy.
constexpr std::array<double, kNumBands> kSoilMean = {0.05, 0.08, 0.13, 0.18, 0.18};
constexpr std::array<double, kNumBands> kCropMean = {0.03, 0.06, 0.04, 0.25, 0.45};
constexpr std::array<double, kNumBands> kWeedMean = {0.035, 0.09, 0.055, 0.19, 0.38};

int poisson_draw(Rng& rng, double lambda) {
  // Knuth's product method; lambda stays small (tens) in this simulator.
  if (lambda <= 0.0) return 0;
  double limit = std::exp(-lambda);
  double prod = rng.uniform();
  int k = 0;
  while (prod > limit) {
    prod *= rng.uniform();
    ++k;
  }
  return k;
}

struct TileEffects {
  double density = 0.0, blob_scale = 0.0;
  std::array<double, kNumBands> band_shift{};
};

TileEffects field_year_effects(FieldId field, YearId year, const ShiftParams& sp) {
  double field_sign = field == FieldId::E8 ? 1.0 : -1.0;
  double year_shift = (static_cast<double>(static_cast<int>(year)) - 1.5) / 1.5;
  TileEffects e;
  // The modulating factors stay positive for field_sign in {-1,1} and
  // year_shift in [-1,1], so density 0 stays exactly 0.
  e.density = sp.weed_density * (1.0 + 0.2 * field_sign + 0.25 * year_shift);
  e.blob_scale = sp.weed_blob_scale * (1.0 + 0.1 * field_sign + 0.15 * year_shift);
  for (int b = 0; b < kNumBands; ++b)
    e.band_shift[static_cast<size_t>(b)] =
        sp.spectral_offset[static_cast<size_t>(b)] * (0.5 * field_sign + year_shift);
  return e;
}

void validate_shift(const ShiftParams& sp) {
  if (sp.weed_density < 0 || sp.weed_blob_scale < 0)
    fail<ConfigError>("shift params: weed density and blob scale must be non-negative");
  if (sp.canopy_mix < 0 || sp.canopy_mix > 1)
    fail<ConfigError>("shift params: canopy_mix must lie in [0, 1]");
  if (sp.illumination_gradient < 0 || sp.illumination_gradient >= 1)
    fail<ConfigError>("shift params: illumination gradient must lie in [0, 1)");
}

}  // namespace

std::vector<PatchSample> generate_field(uint64_t seed, FieldId field, YearId year,
                                        const GeneratorConfig& cfg) {
  if (cfg.patch_size < 16) fail<ConfigError>("generate_field: patch_size must be at least 16");
  if (cfg.blocks_per_field_year < 1)
    fail<ConfigError>("generate_field: need at least one block per field-year");
  validate_shift(cfg.shift);
  const int P = cfg.patch_size;
  const int T = 2 * P;
  const auto eff = field_year_effects(field, year, cfg.shift);
  const int fi = static_cast<int>(field), yi = static_cast<int>(year);

  std::vector<PatchSample> out;
  out.reserve(static_cast<size_t>(cfg.blocks_per_field_year) * 4);

  for (int blk = 0; blk < cfg.blocks_per_field_year; ++blk) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(fi), static_cast<uint64_t>(yi),
                        static_cast<uint64_t>(blk)));

    // ---- labels: crop row stripes with wobble, gaps, then weed blobs ----
    std::vector<uint8_t> labels(static_cast<size_t>(T) * T, kClassOther);
    int period = std::max(8, P / 8);
    int crop_w = std::max(3, static_cast<int>(std::lround(0.55 * period)));
    double phase0 = rng.uniform(0.0, static_cast<double>(period));
    double wobble_amp = 0.12 * period;
    double wobble_freq = rng.uniform(1.5, 3.5);
    double wobble_phi = rng.uniform(0.0, 6.283185307179586);
    for (int y = 0; y < T; ++y) {
      double phase =
          phase0 + wobble_amp * std::sin(wobble_freq * 6.283185307179586 * y / T + wobble_phi);
      for (int x = 0; x < T; ++x) {
        double u = std::fmod(static_cast<double>(x) + phase, static_cast<double>(period));
        if (u < 0) u += period;
        if (u < crop_w) labels[static_cast<size_t>(y) * T + x] = kClassCrop;
      }
    }

    // Canopy gaps: bare patches punched into the rows.
    int n_gaps = poisson_draw(rng, static_cast<double>(T) * T / 8000.0);
    for (int gi = 0; gi < n_gaps; ++gi) {
      int gy = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(T)));
      int gx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(T)));
      int gh = 2 + static_cast<int>(rng.uniform_int(4));
      int gw = 2 + static_cast<int>(rng.uniform_int(4));
      for (int y = gy; y < std::min(T, gy + gh); ++y)
        for (int x = gx; x < std::min(T, gx + gw); ++x)
          labels[static_cast<size_t>(y) * T + x] = kClassOther;
    }

    // Weed blobs override whatever they cover.
    double base_radius = std::max(3.0, P * 3.0 / 32.0);
    int n_blobs = poisson_draw(rng, 4.0 * eff.density);
    for (int bi = 0; bi < n_blobs; ++bi) {
      double cy = rng.uniform(0.0, T);
      double cx = rng.uniform(0.0, T);
      double r0 = base_radius * eff.blob_scale * std::exp(0.25 * rng.normal());
      double a3 = rng.uniform(0.0, 0.25), phi3 = rng.uniform(0.0, 6.283185307179586);
      double a5 = rng.uniform(0.0, 0.15), phi5 = rng.uniform(0.0, 6.283185307179586);
      int lo_y = std::max(0, static_cast<int>(std::floor(cy - 1.5 * r0)));
      int hi_y = std::min(T - 1, static_cast<int>(std::ceil(cy + 1.5 * r0)));
      int lo_x = std::max(0, static_cast<int>(std::floor(cx - 1.5 * r0)));
      int hi_x = std::min(T - 1, static_cast<int>(std::ceil(cx + 1.5 * r0)));
      for (int y = lo_y; y <= hi_y; ++y)
        for (int x = lo_x; x <= hi_x; ++x) {
          double dy = y - cy, dx = x - cx;
          double theta = std::atan2(dy, dx);
          double rr = r0 * (1.0 + a3 * std::sin(3 * theta + phi3) +
                            a5 * std::sin(5 * theta + phi5));
          if (dy * dy + dx * dx <= rr * rr)
            labels[static_cast<size_t>(y) * T + x] = kClassWeed;
        }
    }

    // ---- radiance: class spectra + shifts, rim mixing, noise, ramp ----
    std::array<double, kNumBands> tile_offset{};
    for (auto& v : tile_offset) v = rng.normal() * 0.005;
    double ang = rng.uniform(0.0, 6.283185307179586);
    double ux = std::cos(ang), uy = std::sin(ang);
    double g = cfg.shift.illumination_gradient;

    std::array<std::vector<float>, kNumBands> planes;
    for (auto& pl : planes) pl.resize(static_cast<size_t>(T) * T);

    auto is_weed = [&](int y, int x) {
      return y >= 0 && y < T && x >= 0 && x < T &&
             labels[static_cast<size_t>(y) * T + x] == kClassWeed;
    };

    for (int y = 0; y < T; ++y)
      for (int x = 0; x < T; ++x) {
        uint8_t lab = labels[static_cast<size_t>(y) * T + x];
        const auto& mean = lab == kClassCrop ? kCropMean
                           : lab == kClassWeed ? kWeedMean
                                               : kSoilMean;
        // Weed rim pixels mix toward the crop spectrum (the canopies
        // interleave); the label stays weed.
        double mix = 0.0;
        if (lab == kClassWeed && (!is_weed(y - 1, x) || !is_weed(y + 1, x) ||
                                  !is_weed(y, x - 1) || !is_weed(y, x + 1)))
          mix = cfg.shift.canopy_mix * rng.uniform(0.3, 0.7);

        double illum =
            1.0 + g * ((static_cast<double>(x) / (T - 1) - 0.5) * ux +
                       (static_cast<double>(y) / (T - 1) - 0.5) * uy);
        for (int b = 0; b < kNumBands; ++b) {
          size_t sb = static_cast<size_t>(b);
          double v = mean[sb] * (1.0 - mix) + kCropMean[sb] * mix;
          v += eff.band_shift[sb] + tile_offset[sb];
          v += cfg.noise_sigma * rng.normal();
          v *= illum;
          planes[sb][static_cast<size_t>(y) * T + x] =
              static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }

    // ---- ignore borders: thin mask stripes on randomly chosen sides ----
    int bw = std::max(1, static_cast<int>(std::lround(cfg.ignore_border_fraction * T)));
    for (int side = 0; side < 4; ++side) {
      if (rng.uniform() >= 0.5) continue;
      for (int d = 0; d < bw; ++d)
        for (int t = 0; t < T; ++t) {
          int y = side == 0 ? d : side == 1 ? T - 1 - d : t;
          int x = side == 2 ? d : side == 3 ? T - 1 - d : t;
          labels[static_cast<size_t>(y) * T + x] = kIgnoreLabel;
        }
    }

    // ---- cut the tile into four quadrant patches sharing the block id ----
    int64_t block_id = (static_cast<int64_t>(fi) * 4 + yi) * 1000000 + blk;
    for (int q = 0; q < 4; ++q) {
      int oy = (q / 2) * P, ox = (q % 2) * P;
      PatchSample s;
      s.patch.allocate(P, P);
      s.mask.allocate(P, P);
      s.patch.block_id = block_id;
      s.patch.field = field;
      s.patch.year = year;
      s.patch.quadrant = q;
      for (int y = 0; y < P; ++y) {
        for (int b = 0; b < kNumBands; ++b)
          std::memcpy(&s.patch.bands[static_cast<size_t>(b)][static_cast<size_t>(y) * P],
                      &planes[static_cast<size_t>(b)][static_cast<size_t>(oy + y) * T + ox],
                      sizeof(float) * static_cast<size_t>(P));
        std::memcpy(&s.mask.codes[static_cast<size_t>(y) * P],
                    &labels[static_cast<size_t>(oy + y) * T + ox],
                    static_cast<size_t>(P));
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

MultispectralPatch median_denoise(const MultispectralPatch& p) {
  MultispectralPatch out = p;
  int H = p.height, W = p.width;
  float window[9];
  for (int b = 0; b < kNumBands; ++b) {
    const auto& src = p.bands[static_cast<size_t>(b)];
    auto& dst = out.bands[static_cast<size_t>(b)];
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int k = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            // Replicate padding keeps the window nine-valued at borders.
            int sy = std::clamp(y + dy, 0, H - 1);
            int sx = std::clamp(x + dx, 0, W - 1);
            window[k++] = src[static_cast<size_t>(sy) * W + sx];
          }
        std::nth_element(window, window + 4, window + 9);
        dst[static_cast<size_t>(y) * W + x] = window[4];
      }
  }
  return out;
}

bool saturation_gate(const MultispectralPatch& p, double threshold, std::string* reason) {
  static const char* kBandNames[kNumBands] = {"blue", "green", "red", "rededge", "nir"};
  for (int b = 0; b < kNumBands; ++b) {
    int64_t saturated = 0;
    for (float v : p.bands[static_cast<size_t>(b)])
      if (v >= 1.0f) ++saturated;
    double frac = static_cast<double>(saturated) / static_cast<double>(p.pixels());
    if (frac > threshold) {  // strictly more than the allowed fraction
      if (reason)
        *reason = strformat("band %s has %.4f%% saturated pixels (limit %.4f%%)",
                            kBandNames[b], 100.0 * frac, 100.0 * threshold);
      return false;
    }
  }
  return true;
}

Augmentation sample_augmentation(Rng& rng) {
  Augmentation a;
  a.rot_quarter = static_cast<int>(rng.uniform_int(4));
  a.flip_h = rng.uniform_int(2) == 1;
  return a;
}

namespace {

template <typename T>
std::vector<T> transform_plane(const std::vector<T>& src, int n, const Augmentation& a) {
  std::vector<T> dst(src.size());
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      int sy = y, sx = x;
      if (a.flip_h) sx = n - 1 - sx;  // undo the mirror first (inverse order)
      for (int r = 0; r < a.rot_quarter; ++r) {
        // Inverse of one clockwise quarter turn.
        int ty = n - 1 - sx, tx = sy;
        sy = ty;
        sx = tx;
      }
      dst[static_cast<size_t>(y) * n + x] = src[static_cast<size_t>(sy) * n + sx];
    }
  return dst;
}

}  // namespace

void apply_augmentation(MultispectralPatch& p, LabelMask& m, const Augmentation& a) {
  if (p.height != p.width) fail<ShapeError>("apply_augmentation: patch must be square");
  if (m.height != p.height || m.width != p.width)
    fail<ShapeError>("apply_augmentation: mask extent differs from patch");
  if (a.rot_quarter == 0 && !a.flip_h) return;
  int n = p.height;
  for (auto& band : p.bands) band = transform_plane(band, n, a);
  m.codes = transform_plane(m.codes, n, a);
}

const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::WithinPlot: return "within_plot";
    case Protocol::CrossPlot: return "cross_plot";
    default: return "cross_year";
  }
}

Protocol parse_protocol(const std::string& s) {
  if (s == "within_plot") return Protocol::WithinPlot;
  if (s == "cross_plot") return Protocol::CrossPlot;
  if (s == "cross_year") return Protocol::CrossYear;
  fail<FormatError>("unknown split protocol: " + s);
}

const char* split_part_name(SplitPart p) {
  switch (p) {
    case SplitPart::Train: return "train";
    case SplitPart::Val: return "val";
    default: return "test";
  }
}

SplitPart parse_split_part(const std::string& s) {
  if (s == "train") return SplitPart::Train;
  if (s == "val") return SplitPart::Val;
  if (s == "test") return SplitPart::Test;
  fail<FormatError>("unknown split part: " + s);
}

namespace {

// Shuffled two-way cut for the train/val pool; val gets at least one block.
void assign_train_val(std::vector<BlockInfo> pool, Rng& rng, const SplitRatios& r,
                      SplitManifest& m) {
  if (pool.size() < 2)
    fail<Error>("build_split: need at least two train-pool blocks for a validation cut");
  rng.shuffle(pool);
  size_t n_val = std::max<size_t>(
      1, static_cast<size_t>(std::floor(pool.size() * r.val / (r.train + r.val))));
  for (size_t i = 0; i < pool.size(); ++i)
    m.entries.push_back({pool[i], i < pool.size() - n_val ? SplitPart::Train : SplitPart::Val});
}

}  // namespace

SplitManifest build_split(Protocol proto, const std::vector<BlockInfo>& blocks, uint64_t seed,
                          const SplitRatios& ratios, FieldId cross_plot_train_field) {
  if (ratios.train <= 0 || ratios.val <= 0 || ratios.test <= 0)
    fail<Error>("build_split: ratios must all be positive");
  SplitManifest m;
  m.protocol = proto;
  m.seed = seed;
  Rng rng(derive_seed(seed, 0x53504c4954ull, static_cast<uint64_t>(proto)));

  switch (proto) {
    case Protocol::WithinPlot: {
      if (blocks.size() < 3)
        fail<Error>("build_split: within_plot needs at least three blocks");
      std::vector<BlockInfo> pool = blocks;
      rng.shuffle(pool);
      size_t n = pool.size();
      size_t n_train = std::max<size_t>(1, static_cast<size_t>(std::floor(n * ratios.train)));
      size_t n_val = std::max<size_t>(1, static_cast<size_t>(std::floor(n * ratios.val)));
      while (n_train + n_val >= n) --n_train;  // keep test nonempty
      for (size_t i = 0; i < n; ++i) {
        SplitPart part = i < n_train              ? SplitPart::Train
                         : i < n_train + n_val    ? SplitPart::Val
                                                  : SplitPart::Test;
        m.entries.push_back({pool[i], part});
      }
      break;
    }
    case Protocol::CrossPlot: {
      std::vector<BlockInfo> train_pool, test_pool;
      for (const auto& b : blocks)
        (b.field == cross_plot_train_field ? train_pool : test_pool).push_back(b);
      if (train_pool.empty() || test_pool.empty())
        fail<Error>("build_split: cross_plot needs blocks from both fields");
      assign_train_val(std::move(train_pool), rng, ratios, m);
      for (const auto& b : test_pool) m.entries.push_back({b, SplitPart::Test});
      break;
    }
    case Protocol::CrossYear: {
      std::vector<BlockInfo> train_pool, test_pool;
      for (const auto& b : blocks)
        (b.year == YearId::Y3 ? test_pool : train_pool).push_back(b);
      if (train_pool.empty() || test_pool.empty())
        fail<Error>("build_split: cross_year needs blocks both before and in the final year");
      assign_train_val(std::move(train_pool), rng, ratios, m);
      for (const auto& b : test_pool) m.entries.push_back({b, SplitPart::Test});
      break;
    }
  }
  return m;
}

std::vector<std::string> audit_split(const SplitManifest& m) {
  std::vector<std::string> out;
  std::map<int64_t, int> seen;
  std::array<int64_t, 3> part_count{};
  std::array<std::set<FieldId>, 3> part_fields;
  std::array<std::set<YearId>, 3> part_years;

  for (const auto& e : m.entries) {
    if (++seen[e.block.block_id] == 2)
      out.push_back(strformat("block %lld assigned more than once",
                              static_cast<long long>(e.block.block_id)));
    size_t pi = static_cast<size_t>(e.part);
    ++part_count[pi];
    part_fields[pi].insert(e.block.field);
    part_years[pi].insert(e.block.year);
  }
  for (int p = 0; p < 3; ++p)
    if (part_count[static_cast<size_t>(p)] == 0)
      out.push_back(strformat("partition '%s' is empty",
                              split_part_name(static_cast<SplitPart>(p))));

  if (m.protocol == Protocol::CrossPlot) {
    for (FieldId f : part_fields[2]) {
      if (part_fields[0].count(f) || part_fields[1].count(f))
        out.push_back(strformat("field %s appears on both sides of a cross_plot split",
                                field_name(f)));
    }
  }
  if (m.protocol == Protocol::CrossYear) {
    for (YearId y : part_years[2]) {
      if (part_years[0].count(y) || part_years[1].count(y))
        out.push_back(strformat("year %s appears on both sides of a cross_year split",
                                year_name(y)));
    }
  }
  return out;
}

void save_manifest(const std::string& path, const SplitManifest& m) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) fail<FormatError>("save_manifest: cannot open " + path);
  std::fprintf(f, "protocol %s seed %llu\n", protocol_name(m.protocol),
               static_cast<unsigned long long>(m.seed));
  for (const auto& e : m.entries)
    std::fprintf(f, "%lld %s %s %s\n", static_cast<long long>(e.block.block_id),
                 field_name(e.block.field), year_name(e.block.year), split_part_name(e.part));
  std::fclose(f);
}

SplitManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail<FormatError>("load_manifest: cannot open " + path);
  SplitManifest m;
  std::string key, proto, seedkey;
  if (!(in >> key >> proto >> seedkey >> m.seed) || key != "protocol" || seedkey != "seed")
    fail<FormatError>("load_manifest: malformed header in " + path);
  m.protocol = parse_protocol(proto);
  long long id;
  std::string field, year, part;
  while (in >> id >> field >> year >> part) {
    SplitManifest::Entry e;
    e.block.block_id = id;
    e.block.field = parse_field(field);
    e.block.year = parse_year(year);
    e.part = parse_split_part(part);
    m.entries.push_back(e);
  }
  if (!in.eof() && in.fail()) fail<FormatError>("load_manifest: malformed row in " + path);
  if (m.entries.empty()) fail<FormatError>("load_manifest: no rows in " + path);
  return m;
}

// ---- binary IO -------------------------------------------------------------

namespace {

constexpr char kPatchMagic[8] = {'B', 'A', 'W', 'P', '0', '1', '\0', '\0'};
constexpr char kMaskMagic[8] = {'B', 'A', 'W', 'M', '0', '1', '\0', '\0'};

void write_u32_le(std::FILE* f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  std::fwrite(b, 1, 4, f);
}

uint32_t read_u32_le(std::FILE* f, const std::string& path) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4)
    fail<FormatError>("truncated header in " + path);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32_le(std::FILE* f, const float* data, size_t n) {
  static_assert(sizeof(float) == 4);
  // Host is little-endian on every supported target; byte order asserted by
  // the golden-bytes test.
  std::fwrite(data, 4, n, f);
}

struct FileCloser {
  std::FILE* f;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

}  // namespace

void write_patch(const std::string& path, const MultispectralPatch& p) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail<FormatError>("write_patch: cannot open " + path);
  FileCloser guard{f};
  std::fwrite(kPatchMagic, 1, 8, f);
  write_u32_le(f, static_cast<uint32_t>(kNumBands));
  write_u32_le(f, static_cast<uint32_t>(p.height));
  write_u32_le(f, static_cast<uint32_t>(p.width));
  for (const auto& band : p.bands) write_f32_le(f, band.data(), band.size());
}

MultispectralPatch read_patch(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail<FormatError>("read_patch: cannot open " + path);
  FileCloser guard{f};
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kPatchMagic, 8) != 0)
    fail<FormatError>("read_patch: bad magic in " + path);
  uint32_t bands = read_u32_le(f, path);
  uint32_t h = read_u32_le(f, path);
  uint32_t w = read_u32_le(f, path);
  if (bands != kNumBands)
    fail<FormatError>(strformat("read_patch: %u bands in %s, expected %d", bands, path.c_str(),
                                kNumBands));
  if (h == 0 || w == 0 || h > 1u << 16 || w > 1u << 16)
    fail<FormatError>("read_patch: implausible extents in " + path);
  MultispectralPatch p;
  p.allocate(static_cast<int>(h), static_cast<int>(w));
  for (auto& band : p.bands)
    if (std::fread(band.data(), 4, band.size(), f) != band.size())
      fail<FormatError>("read_patch: truncated pixel data in " + path);
  return p;
}

void write_mask(const std::string& path, const LabelMask& m) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail<FormatError>("write_mask: cannot open " + path);
  FileCloser guard{f};
  std::fwrite(kMaskMagic, 1, 8, f);
  write_u32_le(f, static_cast<uint32_t>(m.height));
  write_u32_le(f, static_cast<uint32_t>(m.width));
  std::fwrite(m.codes.data(), 1, m.codes.size(), f);
}

LabelMask read_mask(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail<FormatError>("read_mask: cannot open " + path);
  FileCloser guard{f};
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kMaskMagic, 8) != 0)
    fail<FormatError>("read_mask: bad magic in " + path);
  uint32_t h = read_u32_le(f, path);
  uint32_t w = read_u32_le(f, path);
  if (h == 0 || w == 0 || h > 1u << 16 || w > 1u << 16)
    fail<FormatError>("read_mask: implausible extents in " + path);
  LabelMask m;
  m.allocate(static_cast<int>(h), static_cast<int>(w));
  if (std::fread(m.codes.data(), 1, m.codes.size(), f) != m.codes.size())
    fail<FormatError>("read_mask: truncated label data in " + path);
  return m;
}

std::string patch_basename(const BlockInfo& b, int quadrant) {
  return strformat("%s_%s_B%06lld_Q%d", field_name(b.field), year_name(b.year),
                   static_cast<long long>(b.block_id), quadrant);
}

std::vector<PatchSample> load_split(const std::string& root, const SplitManifest& m,
                                    SplitPart part) {
  std::vector<PatchSample> out;
  std::vector<long long> missing;
  for (const auto& e : m.entries) {
    if (e.part != part) continue;
    for (int q = 0; q < 4; ++q) {
      std::string base = patch_basename(e.block, q);
      std::string ppath = root + "/patches/" + base + ".msp";
      std::string mpath = root + "/masks/" + base + ".lbl";
      std::ifstream probe(ppath, std::ios::binary);
      std::ifstream probe2(mpath, std::ios::binary);
      if (!probe || !probe2) {
        missing.push_back(e.block.block_id);
        break;
      }
      PatchSample s;
      s.patch = read_patch(ppath);
      s.mask = read_mask(mpath);
      s.patch.block_id = e.block.block_id;
      s.patch.field = e.block.field;
      s.patch.year = e.block.year;
      s.patch.quadrant = q;
      if (s.mask.height != s.patch.height || s.mask.width != s.patch.width)
        fail<FormatError>("load_split: mask extent differs from patch for " + base);
      out.push_back(std::move(s));
    }
  }
  if (!missing.empty()) {
    std::string ids;
    for (long long id : missing) ids += strformat(" %lld", id);
    fail<Error>("load_split: missing patch or mask files for blocks:" + ids);
  }
  return out;
}

}  // namespace visa
