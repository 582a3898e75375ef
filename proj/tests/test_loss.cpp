#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "visa/loss.hpp"
#include "visa/model.hpp"
#include "visa/ops.hpp"
#include "visa/rng.hpp"

using namespace visa;

namespace {

LabelMask make_mask(int h, int w, const std::vector<uint8_t>& codes) {
  LabelMask m;
  m.allocate(h, w);
  m.codes = codes;
  return m;
}

LabelMask const_mask(int h, int w, uint8_t code) {
  LabelMask m;
  m.allocate(h, w, code);
  return m;
}

// Posterior tensor holding the same distribution at every pixel.
TensorPtr const_posterior(int64_t b, int64_t h, int64_t w, std::array<double, 3> q) {
  auto p = Tensor::zeros({b, 3, h, w}, Dtype::F64, false);
  double* d = p->data<double>();
  for (int64_t i = 0; i < p->numel(); ++i) d[i] = q[(i / (h * w)) % 3];
  return p;
}

double scalar(const TensorPtr& t) { return t->at(0); }

}  // namespace

TEST_CASE("supervision targets lower label codes to one-hot and mask") {
  // Codes: valid classes, the ignore sentinel, and one malformed byte.
  auto m0 = make_mask(2, 3, {0, 1, 2, 255, 7, 1});
  auto m1 = const_mask(2, 3, 2);
  auto t = make_supervision({m0, m1}, Dtype::F64);

  CHECK(t.labeled == 4 + 6);
  CHECK(t.onehot->shape == Shape{2, 3, 2, 3});
  CHECK(t.mask->shape == Shape{2, 1, 2, 3});

  auto oh = [&](int64_t b, int64_t c, int64_t i) { return t.onehot->at((b * 3 + c) * 6 + i); };
  CHECK(oh(0, 0, 0) == 1.0);
  CHECK(oh(0, 1, 1) == 1.0);
  CHECK(oh(0, 2, 2) == 1.0);
  for (int c = 0; c < 3; ++c) {
    CHECK(oh(0, c, 3) == 0.0);  // ignore
    CHECK(oh(0, c, 4) == 0.0);  // malformed code counts as unlabeled
  }
  CHECK(oh(0, 1, 5) == 1.0);
  for (int64_t i = 0; i < 6; ++i) CHECK(oh(1, 2, i) == 1.0);
  CHECK(t.mask->at(3) == 0.0);
  CHECK(t.mask->at(4) == 0.0);
  CHECK(t.mask->at(5) == 1.0);

  CHECK_THROWS_AS(make_supervision({}, Dtype::F64), ShapeError);
  CHECK_THROWS_AS(make_supervision({m0, const_mask(3, 3, 0)}, Dtype::F64), ShapeError);
}

TEST_CASE("median-frequency weights: closed forms, equivariance, zero guard") {
  auto unit = median_frequency_weights({1.0 / 3, 1.0 / 3, 1.0 / 3});
  for (double w : unit) CHECK(w == 1.0);

  auto w = median_frequency_weights({0.5, 0.3, 0.2});
  CHECK(w[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w[2] == doctest::Approx(1.5).epsilon(1e-12));

  // Permuting the frequencies permutes the weights identically.
  const std::array<double, 3> f{0.5, 0.3, 0.2};
  const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (const auto& pi : perms) {
    auto wp = median_frequency_weights({f[pi[0]], f[pi[1]], f[pi[2]]});
    for (int c = 0; c < 3; ++c) CHECK(wp[c] == w[pi[c]]);
  }

  try {
    median_frequency_weights({0.5, 0.0, 0.5});
    FAIL("zero frequency accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("1e-8") != std::string::npos);
    CHECK(std::string(e.what()).find("floor") != std::string::npos);
  }
}

TEST_CASE("class frequencies count labeled pixels only") {
  auto m = make_mask(2, 3, {0, 0, 1, 2, 255, 255});
  auto f = class_frequencies({m});
  CHECK(f[0] == doctest::Approx(0.5));
  CHECK(f[1] == doctest::Approx(0.25));
  CHECK(f[2] == doctest::Approx(0.25));
  auto empty = class_frequencies({const_mask(2, 2, kIgnoreLabel)});
  for (double v : empty) CHECK(v == 0.0);
}

TEST_CASE("cross-entropy closed forms") {
  auto masks = std::vector<LabelMask>{const_mask(4, 4, kClassCrop)};
  auto t = make_supervision(masks, Dtype::F64);

  auto uniform = const_posterior(1, 4, 4, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  CHECK(scalar(loss_ce(uniform, t, {1, 1, 1})) ==
        doctest::Approx(std::log(3.0)).epsilon(1e-9));

  // Perfect one-hot prediction: log(1) = 0 with no stabiliser involvement.
  auto perfect = const_posterior(1, 4, 4, {0.0, 1.0, 0.0});
  CHECK(scalar(loss_ce(perfect, t, {1, 1, 1})) == 0.0);

  // Class weight scales the per-pixel terms linearly.
  CHECK(scalar(loss_ce(uniform, t, {1, 2, 1})) ==
        doctest::Approx(2.0 * std::log(3.0)).epsilon(1e-9));

  auto none = make_supervision({const_mask(4, 4, kIgnoreLabel)}, Dtype::F64);
  CHECK(scalar(loss_ce(uniform, none, {1, 1, 1})) == 0.0);
}

TEST_CASE("losses ignore unlabeled pixels bit-exactly") {
  auto m = make_mask(2, 2, {kClassOther, kClassWeed, kIgnoreLabel, kClassCrop});
  auto t = make_supervision({m}, Dtype::F64);
  Rng rng(11);
  auto logits = Tensor::zeros({1, 3, 2, 2}, Dtype::F64, false);
  for (int64_t i = 0; i < logits->numel(); ++i) logits->set(i, rng.normal(0.0, 1.0));
  auto p = softmax(logits, 1, 1.0);

  double ce0 = scalar(loss_ce(p, t, {1.3, 0.7, 2.0}));
  double dice0 = scalar(loss_dice(p, t));
  double edge0 = scalar(loss_edge(p, t));

  // Rewrite the posterior only at the ignored pixel (index 2 of each plane).
  auto p2 = Tensor::zeros(p->shape, Dtype::F64, false);
  for (int64_t i = 0; i < p->numel(); ++i) p2->set(i, p->at(i));
  p2->set(0 * 4 + 2, 0.98);
  p2->set(1 * 4 + 2, 0.01);
  p2->set(2 * 4 + 2, 0.01);

  CHECK(scalar(loss_ce(p2, t, {1.3, 0.7, 2.0})) == ce0);
  CHECK(scalar(loss_dice(p2, t)) == dice0);
  CHECK(scalar(loss_edge(p2, t)) == edge0);
}

TEST_CASE("dice closed forms and monotone response to better predictions") {
  auto t = make_supervision({const_mask(5, 5, kClassWeed)}, Dtype::F64);

  auto perfect = const_posterior(1, 5, 5, {0.0, 0.0, 1.0});
  CHECK(scalar(loss_dice(perfect, t)) == 0.0);

  auto uniform = const_posterior(1, 5, 5, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  const double n = 25.0, eps = 1e-6;
  const double expect = 1.0 - (2.0 * n / 3.0 + eps) / (2.0 * n + eps);
  CHECK(scalar(loss_dice(uniform, t)) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(scalar(loss_dice(uniform, t)) == doctest::Approx(2.0 / 3.0).epsilon(1e-6));

  // Moving posterior mass toward the true class never increases the loss.
  Rng rng(7);
  auto masks = std::vector<LabelMask>{const_mask(4, 4, kClassCrop)};
  auto tc = make_supervision(masks, Dtype::F64);
  for (int trial = 0; trial < 50; ++trial) {
    auto logits = Tensor::zeros({1, 3, 4, 4}, Dtype::F64, false);
    for (int64_t i = 0; i < logits->numel(); ++i) logits->set(i, rng.normal(0.0, 1.0));
    auto p = softmax(logits, 1, 1.0);
    double before = scalar(loss_dice(p, tc));

    int64_t pix = static_cast<int64_t>(rng.uniform_int(16));
    int wrong = rng.uniform_int(2) == 0 ? 0 : 2;
    auto p2 = Tensor::zeros(p->shape, Dtype::F64, false);
    for (int64_t i = 0; i < p->numel(); ++i) p2->set(i, p->at(i));
    double delta = std::min(0.05, p->at(wrong * 16 + pix));
    p2->set(wrong * 16 + pix, p->at(wrong * 16 + pix) - delta);
    p2->set(1 * 16 + pix, p->at(1 * 16 + pix) + delta);
    CHECK(scalar(loss_dice(p2, tc)) <= before + 1e-12);
  }
}

TEST_CASE("edge loss zero cases and the 5x5 vertical step value") {
  // Prediction equal to the target, even with an ignore pixel present, gives
  // exactly zero: both maps see identical zero-filled planes.
  auto m = make_mask(3, 3, {1, 1, 1, 1, 255, 1, 1, 1, 1});
  auto t = make_supervision({m}, Dtype::F64);
  auto p = Tensor::zeros({1, 3, 3, 3}, Dtype::F64, false);
  for (int64_t i = 0; i < t.onehot->numel(); ++i) p->set(i, t.onehot->at(i));
  CHECK(scalar(loss_edge(p, t)) == 0.0);

  // Vertical step: class "other" in columns 0-1, "crop" in columns 2-4, all
  // labeled, against a flat uniform prediction. Per plane the step column
  // responds with |gx| = 4 interior and 3 at top/bottom rows, the zero-pad
  // frame adds border response to both maps, and the uniform prediction's
  // interior cancels. Netting the two maps and averaging over the 25 pixels
  // gives 2.88 (frozen from a direct convolution worked out independently).
  LabelMask step;
  step.allocate(5, 5);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) step.at(y, x) = x < 2 ? kClassOther : kClassCrop;
  auto ts = make_supervision({step}, Dtype::F64);
  auto flat = const_posterior(1, 5, 5, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  CHECK(scalar(loss_edge(flat, ts)) == doctest::Approx(2.88).epsilon(1e-9));
}

TEST_CASE("total loss combines terms linearly and names non-finite parts") {
  auto m = make_mask(4, 4, [] {
    std::vector<uint8_t> c(16, kClassCrop);
    c[0] = kClassOther;
    c[5] = kClassWeed;
    c[9] = kIgnoreLabel;
    return c;
  }());
  auto t = make_supervision({m}, Dtype::F64);
  Rng rng(23);
  auto logits = Tensor::zeros({1, 3, 4, 4}, Dtype::F64, false);
  auto aux = Tensor::zeros({1, 3, 4, 4}, Dtype::F64, false);
  for (int64_t i = 0; i < logits->numel(); ++i) {
    logits->set(i, rng.normal(0.0, 1.0));
    aux->set(i, rng.normal(0.0, 1.0));
  }

  LossWeights w;
  auto full = total_loss(logits, aux, t, w);
  CHECK(full.value == doctest::Approx(full.ce + w.lambda_dice * full.dice +
                                      w.lambda_edge * full.edge + w.alpha_aux * full.aux)
                          .epsilon(1e-12));
  CHECK(full.ce > 0.0);
  CHECK(full.dice > 0.0);
  CHECK(full.edge >= 0.0);
  CHECK(full.aux > 0.0);

  // All multipliers zero: the total collapses to the cross-entropy term.
  LossWeights ce_only;
  ce_only.lambda_dice = ce_only.lambda_edge = ce_only.alpha_aux = 0.0;
  auto reduced = total_loss(logits, aux, t, ce_only);
  CHECK(reduced.value == reduced.ce);

  // Doubling lambda_dice moves the total by exactly one dice term.
  LossWeights doubled = w;
  doubled.lambda_dice = 2.0;
  auto d2 = total_loss(logits, aux, t, doubled);
  CHECK(d2.value - full.value == doctest::Approx(full.dice).epsilon(1e-9));

  // Missing auxiliary head contributes nothing.
  auto no_aux = total_loss(logits, nullptr, t, w);
  CHECK(no_aux.aux == 0.0);
  CHECK(no_aux.value ==
        doctest::Approx(full.value - w.alpha_aux * full.aux).epsilon(1e-12));

  LossWeights bad = w;
  bad.lambda_edge = -0.5;
  CHECK_THROWS_AS(total_loss(logits, aux, t, bad), ConfigError);

  auto poisoned = Tensor::zeros({1, 3, 4, 4}, Dtype::F64, false);
  for (int64_t i = 0; i < poisoned->numel(); ++i) poisoned->set(i, logits->at(i));
  poisoned->set(3, std::numeric_limits<double>::quiet_NaN());
  try {
    total_loss(poisoned, aux, t, w);
    FAIL("NaN logits accepted");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("'ce'") != std::string::npos);
  }
  try {
    total_loss(logits, poisoned, t, w);
    FAIL("NaN aux logits accepted");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("'aux'") != std::string::npos);
  }
}

TEST_CASE("total objective sends gradient into both branches and the heads") {
  ModelConfig cfg;
  cfg.vimb.d = 8;
  cfg.vimb.window = 4;
  cfg.vimb.heads = 2;
  cfg.vimb.encoder_layers = 1;
  cfg.vimb.ssm_layers = 1;
  cfg.vimb.slots = 2;
  cfg.vimb.slot_iters = 2;
  cfg.srab.widths = {4, 8, 12};
  cfg.srab.units_per_level = 1;
  VisaModel model(cfg, 5, Dtype::F64);

  Rng rng(9);
  auto idx = Tensor::zeros({2, 5, 8, 8}, Dtype::F64, false);
  auto rad = Tensor::zeros({2, 5, 8, 8}, Dtype::F64, false);
  for (int64_t i = 0; i < idx->numel(); ++i) {
    idx->set(i, rng.normal(0.0, 0.5));
    rad->set(i, rng.normal(0.0, 0.5));
  }
  std::vector<LabelMask> masks;
  for (int b = 0; b < 2; ++b) {
    LabelMask m;
    m.allocate(8, 8);
    for (int i = 0; i < 64; ++i) {
      int r = rng.uniform_int(8);
      m.codes[static_cast<size_t>(i)] = r < 3 ? uint8_t(r) : (r == 3 ? kIgnoreLabel : 1);
    }
    masks.push_back(m);
  }
  auto t = make_supervision(masks, Dtype::F64);

  auto out = model.forward(idx, rad, true);
  auto loss = total_loss(out.logits, out.aux_logits, t, LossWeights{});
  loss.total->backward();

  auto gnorm = [&](const char* name) {
    auto param = model.params().get(name);
    double s = 0;
    const double* g = param->grad<double>();
    for (int64_t i = 0; i < param->numel(); ++i) s += g[i] * g[i];
    return s;
  };
  CHECK(gnorm("vimb.proj.w") > 0.0);
  CHECK(gnorm("srab.stem.w") > 0.0);
  CHECK(gnorm("fuse.cls.w") > 0.0);
  CHECK(gnorm("vimb.aux.w") > 0.0);
}

TEST_CASE("zero classifier weights give uniform posteriors") {
  ModelConfig cfg;
  cfg.vimb.d = 8;
  cfg.vimb.window = 4;
  cfg.vimb.heads = 2;
  cfg.vimb.encoder_layers = 1;
  cfg.vimb.ssm_layers = 1;
  cfg.vimb.slots = 2;
  cfg.vimb.slot_iters = 1;
  cfg.srab.widths = {4, 8, 12};
  cfg.srab.units_per_level = 1;
  VisaModel model(cfg, 17, Dtype::F64);
  for (const char* name : {"fuse.cls.w", "fuse.cls.b"}) {
    auto p = model.params().get(name);
    for (int64_t i = 0; i < p->numel(); ++i) p->set(i, 0.0);
  }

  Rng rng(3);
  auto idx = Tensor::zeros({1, 5, 8, 8}, Dtype::F64, false);
  auto rad = Tensor::zeros({1, 5, 8, 8}, Dtype::F64, false);
  for (int64_t i = 0; i < idx->numel(); ++i) {
    idx->set(i, rng.normal(0.0, 0.5));
    rad->set(i, rng.normal(0.0, 0.5));
  }
  auto out = model.forward(idx, rad, true);
  auto p = softmax(out.logits, 1, 1.0);
  for (int64_t i = 0; i < p->numel(); ++i)
    CHECK(p->at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  // Channel sums stay 1 for arbitrary logits as well.
  auto q = softmax(rad, 1, 0.7);
  for (int64_t b = 0; b < 1; ++b)
    for (int64_t i = 0; i < 64; ++i) {
      double s = 0;
      for (int64_t c = 0; c < 5; ++c) s += q->at((b * 5 + c) * 64 + i);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}
