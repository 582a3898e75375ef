#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "visa/common.hpp"

namespace visa {

// Provenance of a patch: which field it was imaged in and in which season.
enum class FieldId : uint8_t { E2 = 0, E8 = 1 };
enum class YearId : uint8_t { Y0 = 0, Y1 = 1, Y2 = 2, Y3 = 3 };

const char* field_name(FieldId f);
const char* year_name(YearId y);
FieldId parse_field(const std::string& s);
YearId parse_year(const std::string& s);

// Semantic label codes. 255 marks pixels excluded from every loss and metric.
inline constexpr uint8_t kClassOther = 0;
inline constexpr uint8_t kClassCrop = 1;
inline constexpr uint8_t kClassWeed = 2;
inline constexpr uint8_t kIgnoreLabel = 255;
inline constexpr int kNumClasses = 3;

// Band order is fixed across the whole pipeline.
inline constexpr int kNumBands = 5;
enum Band : int { kBandBlue = 0, kBandGreen, kBandRed, kBandRedEdge, kBandNir };

/// Five co-registered reflectance planes, row-major, values nominally [0, 1].
struct MultispectralPatch {
  int height = 0, width = 0;
  std::array<std::vector<float>, kNumBands> bands;

  // Provenance lives in the split manifest and file names, not in the pixel
  // file; these fields are populated by whoever loads or generates the patch.
  int64_t block_id = -1;
  FieldId field = FieldId::E2;
  YearId year = YearId::Y0;
  int quadrant = 0;  // position within the parent block tile (row-major 0..3)

  void allocate(int h, int w) {
    height = h;
    width = w;
    for (auto& b : bands) b.assign(static_cast<size_t>(h) * w, 0.0f);
  }
  float at(int band, int y, int x) const {
    return bands[static_cast<size_t>(band)][static_cast<size_t>(y) * width + x];
  }
  float& at(int band, int y, int x) {
    return bands[static_cast<size_t>(band)][static_cast<size_t>(y) * width + x];
  }
  int64_t pixels() const { return static_cast<int64_t>(height) * width; }
};

struct LabelMask {
  int height = 0, width = 0;
  std::vector<uint8_t> codes;

  void allocate(int h, int w, uint8_t fill = kClassOther) {
    height = h;
    width = w;
    codes.assign(static_cast<size_t>(h) * w, fill);
  }
  uint8_t at(int y, int x) const { return codes[static_cast<size_t>(y) * width + x]; }
  uint8_t& at(int y, int x) { return codes[static_cast<size_t>(y) * width + x]; }
};

}  // namespace visa
