#pragma once

#include "visa/image.hpp"

namespace visa {

// Spectral index channels, in storage order.
inline constexpr int kNumIndices = 5;
enum IndexChannel : int { kNdvi = 0, kGndvi, kEvi, kSavi, kMsavi };

extern const std::array<const char*, kNumIndices> kIndexNames;  // "ndvi" ...
extern const std::array<const char*, kNumBands> kBandStatNames;  // "band.b" ...

/// Per-pixel index planes derived from one reflectance patch.
struct IndexStack {
  int height = 0, width = 0;
  std::array<std::vector<float>, kNumIndices> chan;
  // Pixels where the EVI denominator fell inside the epsilon guard and was
  // clamped to keep the ratio finite.
  int64_t evi_clamped = 0;
  bool standardized = false;

  float at(int c, int y, int x) const {
    return chan[static_cast<size_t>(c)][static_cast<size_t>(y) * width + x];
  }
  int64_t pixels() const { return static_cast<int64_t>(height) * width; }
};

/// NDVI, GNDVI, EVI, SAVI, MSAVI with epsilon-guarded denominators.
/// Arithmetic runs in double; planes are stored as f32 like the inputs.
IndexStack compute_indices(const MultispectralPatch& p, double eps = 1e-6);

/// Channel-wise population statistics fitted on one dataset split. The tag
/// names that split; applying stats under a different expected tag is a
/// training/evaluation leak and throws.
struct StandardizationStats {
  std::string split_tag;
  std::array<double, kNumIndices> index_mu{}, index_sigma{};
  std::array<double, kNumBands> band_mu{}, band_sigma{};
  double eps = 1e-6;  // sigma floor
};

StandardizationStats fit_standardization(const std::vector<const MultispectralPatch*>& patches,
                                         const std::string& split_tag, double eps = 1e-6);

/// In-place z-scoring. `expected_tag` must equal the tag the stats were
/// fitted under, else LeakageError.
void apply_standardization(IndexStack& s, const StandardizationStats& st,
                           const std::string& expected_tag);
void apply_standardization(MultispectralPatch& p, const StandardizationStats& st,
                           const std::string& expected_tag);

// Text round trip: header "split <tag>", then one "name mu sigma" line per
// channel with 17 significant digits, indices before bands.
void save_stats(const std::string& path, const StandardizationStats& st);
StandardizationStats load_stats(const std::string& path);

}  // namespace visa
