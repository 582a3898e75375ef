#include "visa/indices.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace visa {

const std::array<const char*, kNumIndices> kIndexNames = {"ndvi", "gndvi", "evi", "savi",
                                                          "msavi"};
const std::array<const char*, kNumBands> kBandStatNames = {"band.b", "band.g", "band.r",
                                                           "band.re", "band.nir"};

const char* field_name(FieldId f) { return f == FieldId::E2 ? "E2" : "E8"; }

const char* year_name(YearId y) {
  switch (y) {
    case YearId::Y0: return "Y0";
    case YearId::Y1: return "Y1";
    case YearId::Y2: return "Y2";
    default: return "Y3";
  }
}

FieldId parse_field(const std::string& s) {
  if (s == "E2") return FieldId::E2;
  if (s == "E8") return FieldId::E8;
  fail<FormatError>("unknown field id: " + s);
}

YearId parse_year(const std::string& s) {
  if (s == "Y0") return YearId::Y0;
  if (s == "Y1") return YearId::Y1;
  if (s == "Y2") return YearId::Y2;
  if (s == "Y3") return YearId::Y3;
  fail<FormatError>("unknown year id: " + s);
}

IndexStack compute_indices(const MultispectralPatch& p, double eps) {
  if (p.height <= 0 || p.width <= 0) fail<ShapeError>("compute_indices: empty patch");
  for (const auto& b : p.bands)
    if (static_cast<int64_t>(b.size()) != p.pixels())
      fail<ShapeError>("compute_indices: band plane size mismatch");

  IndexStack s;
  s.height = p.height;
  s.width = p.width;
  for (auto& c : s.chan) c.resize(static_cast<size_t>(p.pixels()));

  const float* blue = p.bands[kBandBlue].data();
  const float* green = p.bands[kBandGreen].data();
  const float* red = p.bands[kBandRed].data();
  const float* nir = p.bands[kBandNir].data();

  for (int64_t i = 0, n = p.pixels(); i < n; ++i) {
    double b = blue[i], g = green[i], r = red[i], nr = nir[i];
    s.chan[kNdvi][static_cast<size_t>(i)] = static_cast<float>((nr - r) / (nr + r + eps));
    s.chan[kGndvi][static_cast<size_t>(i)] = static_cast<float>((nr - g) / (nr + g + eps));

    // The EVI denominator can cross zero inside [0,1]^3; clamp its magnitude
    // to eps and count the event.
    double den = nr + 6.0 * r - 7.5 * b + 1.0 + eps;
    if (std::fabs(den) < eps) {
      den = den < 0.0 ? -eps : eps;
      ++s.evi_clamped;
    }
    s.chan[kEvi][static_cast<size_t>(i)] = static_cast<float>(2.5 * (nr - r) / den);

    s.chan[kSavi][static_cast<size_t>(i)] =
        static_cast<float>(1.5 * (nr - r) / (nr + r + 0.5 + eps));

    // Radicand is (2 nir - 1)^2 + 8 red, non-negative for reflectances; the
    // max() only guards float round-off.
    double rad = (2.0 * nr + 1.0) * (2.0 * nr + 1.0) - 8.0 * (nr - r);
    s.chan[kMsavi][static_cast<size_t>(i)] =
        static_cast<float>((2.0 * nr + 1.0 - std::sqrt(std::max(rad, 0.0))) / 2.0);
  }
  return s;
}

StandardizationStats fit_standardization(const std::vector<const MultispectralPatch*>& patches,
                                         const std::string& split_tag, double eps) {
  if (patches.empty()) fail<Error>("fit_standardization: no patches");
  StandardizationStats st;
  st.split_tag = split_tag;
  st.eps = eps;

  std::array<double, kNumIndices> isum{}, isum2{};
  std::array<double, kNumBands> bsum{}, bsum2{};
  int64_t count = 0;
  for (const auto* p : patches) {
    auto stack = compute_indices(*p, eps);
    int64_t n = p->pixels();
    for (int c = 0; c < kNumIndices; ++c) {
      const auto& plane = stack.chan[static_cast<size_t>(c)];
      for (int64_t i = 0; i < n; ++i) {
        double v = plane[static_cast<size_t>(i)];
        isum[static_cast<size_t>(c)] += v;
        isum2[static_cast<size_t>(c)] += v * v;
      }
    }
    for (int b = 0; b < kNumBands; ++b) {
      const auto& plane = p->bands[static_cast<size_t>(b)];
      for (int64_t i = 0; i < n; ++i) {
        double v = plane[static_cast<size_t>(i)];
        bsum[static_cast<size_t>(b)] += v;
        bsum2[static_cast<size_t>(b)] += v * v;
      }
    }
    count += n;
  }

  auto finish = [&](double sum, double sum2, const char* name, double& mu, double& sigma) {
    mu = sum / static_cast<double>(count);
    double var = sum2 / static_cast<double>(count) - mu * mu;  // population
    sigma = std::sqrt(std::max(var, 0.0));
    if (sigma < eps) {
      log_warn(strformat("fit_standardization: channel %s is constant, sigma floored to %g",
                         name, eps));
      sigma = eps;
    }
  };
  for (int c = 0; c < kNumIndices; ++c)
    finish(isum[static_cast<size_t>(c)], isum2[static_cast<size_t>(c)],
           kIndexNames[static_cast<size_t>(c)], st.index_mu[static_cast<size_t>(c)],
           st.index_sigma[static_cast<size_t>(c)]);
  for (int b = 0; b < kNumBands; ++b)
    finish(bsum[static_cast<size_t>(b)], bsum2[static_cast<size_t>(b)],
           kBandStatNames[static_cast<size_t>(b)], st.band_mu[static_cast<size_t>(b)],
           st.band_sigma[static_cast<size_t>(b)]);
  return st;
}

namespace {
void check_tag(const StandardizationStats& st, const std::string& expected) {
  if (st.split_tag != expected)
    fail<LeakageError>(strformat(
        "standardization statistics were fitted on '%s' but '%s' is active; refusing to mix "
        "splits",
        st.split_tag.c_str(), expected.c_str()));
}
}  // namespace

void apply_standardization(IndexStack& s, const StandardizationStats& st,
                           const std::string& expected_tag) {
  check_tag(st, expected_tag);
  if (s.standardized) fail<Error>("apply_standardization: index stack already standardized");
  for (int c = 0; c < kNumIndices; ++c) {
    double mu = st.index_mu[static_cast<size_t>(c)];
    double inv = 1.0 / st.index_sigma[static_cast<size_t>(c)];
    for (auto& v : s.chan[static_cast<size_t>(c)])
      v = static_cast<float>((static_cast<double>(v) - mu) * inv);
  }
  s.standardized = true;
}

void apply_standardization(MultispectralPatch& p, const StandardizationStats& st,
                           const std::string& expected_tag) {
  check_tag(st, expected_tag);
  for (int b = 0; b < kNumBands; ++b) {
    double mu = st.band_mu[static_cast<size_t>(b)];
    double inv = 1.0 / st.band_sigma[static_cast<size_t>(b)];
    for (auto& v : p.bands[static_cast<size_t>(b)])
      v = static_cast<float>((static_cast<double>(v) - mu) * inv);
  }
}

void save_stats(const std::string& path, const StandardizationStats& st) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) fail<FormatError>("save_stats: cannot open " + path);
  std::fprintf(f, "split %s\n", st.split_tag.c_str());
  for (int c = 0; c < kNumIndices; ++c)
    std::fprintf(f, "%s %.17g %.17g\n", kIndexNames[static_cast<size_t>(c)],
                 st.index_mu[static_cast<size_t>(c)], st.index_sigma[static_cast<size_t>(c)]);
  for (int b = 0; b < kNumBands; ++b)
    std::fprintf(f, "%s %.17g %.17g\n", kBandStatNames[static_cast<size_t>(b)],
                 st.band_mu[static_cast<size_t>(b)], st.band_sigma[static_cast<size_t>(b)]);
  std::fclose(f);
}

StandardizationStats load_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail<FormatError>("load_stats: cannot open " + path);
  StandardizationStats st;
  std::string key;
  if (!(in >> key >> st.split_tag) || key != "split")
    fail<FormatError>("load_stats: missing 'split <tag>' header in " + path);
  for (int c = 0; c < kNumIndices; ++c) {
    std::string name;
    if (!(in >> name >> st.index_mu[static_cast<size_t>(c)] >>
          st.index_sigma[static_cast<size_t>(c)]) ||
        name != kIndexNames[static_cast<size_t>(c)])
      fail<FormatError>(strformat("load_stats: expected line for %s in %s",
                                  kIndexNames[static_cast<size_t>(c)], path.c_str()));
  }
  for (int b = 0; b < kNumBands; ++b) {
    std::string name;
    if (!(in >> name >> st.band_mu[static_cast<size_t>(b)] >>
          st.band_sigma[static_cast<size_t>(b)]) ||
        name != kBandStatNames[static_cast<size_t>(b)])
      fail<FormatError>(strformat("load_stats: expected line for %s in %s",
                                  kBandStatNames[static_cast<size_t>(b)], path.c_str()));
  }
  return st;
}

}  // namespace visa
