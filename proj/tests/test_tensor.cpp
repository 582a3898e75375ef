// Tensor core: loop oracles for the linear-algebra kernels, closed forms for
// the nonlinearities, and finite-difference checks for every op's backward.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "visa/gradcheck.hpp"
#include "visa/ops.hpp"
#include "visa/rng.hpp"

using namespace visa;

namespace {

TensorPtr rand_tensor(Shape shape, Rng& rng, Dtype dt = Dtype::F64, bool rg = false,
                      double lo = -1.0, double hi = 1.0) {
  auto t = Tensor::zeros(std::move(shape), dt, rg);
  for (int64_t i = 0; i < t->numel(); ++i) t->set(i, rng.uniform(lo, hi));
  return t;
}

// Finite-difference check of d(sum(out * fixed_weights))/d(params); random
// weights make the seed gradient element-dependent so backward bugs that
// shuffle positions cannot cancel.
double fd_check(const std::function<TensorPtr()>& make_out,
                std::vector<std::pair<std::string, TensorPtr>> params,
                uint64_t weight_seed = 7) {
  TensorPtr probe;
  auto make_loss = [&]() -> TensorPtr {
    auto out = make_out();
    if (!probe) {
      Rng wr(weight_seed);
      probe = rand_tensor(out->shape, wr, out->dtype);
    }
    return sum_all(mul(out, probe));
  };
  auto res = gradcheck(make_loss, params);
  return res.max_rel_err;
}

double max_abs_diff(const Tensor& t, const std::vector<double>& ref) {
  REQUIRE(t.numel() == static_cast<int64_t>(ref.size()));
  double m = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i)
    m = std::max(m, std::fabs(t.at(i) - ref[static_cast<size_t>(i)]));
  return m;
}

std::vector<double> conv2d_oracle(const Tensor& x, const Tensor& w, const Tensor* b,
                                  int stride, int pad) {
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<size_t>(B * Co * Ho * Wo), 0.0);
  for (int64_t bi = 0; bi < B; ++bi)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = b ? b->at(co) : 0.0;
          for (int64_t ci = 0; ci < C; ++ci)
            for (int64_t ki = 0; ki < kh; ++ki)
              for (int64_t kj = 0; kj < kw; ++kj) {
                int64_t ih = oh * stride - pad + ki, iw = ow * stride - pad + kj;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x.at(((bi * C + ci) * H + ih) * W + iw) *
                       w.at(((co * C + ci) * kh + ki) * kw + kj);
              }
          out[static_cast<size_t>(((bi * Co + co) * Ho + oh) * Wo + ow)] = acc;
        }
  return out;
}

std::vector<double> conv_transpose2d_oracle(const Tensor& x, const Tensor& w, const Tensor* b,
                                            int stride) {
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(1), k = w.dim(2);
  int64_t Ho = (H - 1) * stride + k, Wo = (W - 1) * stride + k;
  std::vector<double> out(static_cast<size_t>(B * Co * Ho * Wo), 0.0);
  for (int64_t bi = 0; bi < B; ++bi) {
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t ci = 0; ci < C; ++ci)
        for (int64_t ih = 0; ih < H; ++ih)
          for (int64_t iw = 0; iw < W; ++iw)
            for (int64_t ki = 0; ki < k; ++ki)
              for (int64_t kj = 0; kj < k; ++kj)
                out[static_cast<size_t>(((bi * Co + co) * Ho + ih * stride + ki) * Wo +
                                        iw * stride + kj)] +=
                    x.at(((bi * C + ci) * H + ih) * W + iw) *
                    w.at(((ci * Co + co) * k + ki) * k + kj);
    if (b)
      for (int64_t co = 0; co < Co; ++co)
        for (int64_t p = 0; p < Ho * Wo; ++p)
          out[static_cast<size_t>((bi * Co + co) * Ho * Wo + p)] += b->at(co);
  }
  return out;
}

}  // namespace

TEST_CASE("matmul matches hand example and loop oracle") {
  auto a = Tensor::from_values({2, 2}, {1, 2, 3, 4}, Dtype::F64);
  auto b = Tensor::from_values({2, 2}, {5, 6, 7, 8}, Dtype::F64);
  auto c = matmul(a, b);
  CHECK(max_abs_diff(*c, {19, 22, 43, 50}) == doctest::Approx(0.0).epsilon(1e-15));

  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    int64_t m = 1 + static_cast<int64_t>(rng.uniform_int(5));
    int64_t k = 1 + static_cast<int64_t>(rng.uniform_int(6));
    int64_t n = 1 + static_cast<int64_t>(rng.uniform_int(5));
    auto x = rand_tensor({m, k}, rng);
    auto y = rand_tensor({k, n}, rng);
    auto z = matmul(x, y);
    std::vector<double> ref(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (int64_t p = 0; p < k; ++p) s += x->at(i * k + p) * y->at(p * n + j);
        ref[static_cast<size_t>(i * n + j)] = s;
      }
    CHECK(max_abs_diff(*z, ref) < 1e-12);
  }
}

TEST_CASE("matmul broadcast and batched variants match oracle") {
  Rng rng(12);
  // [B,L,k] x [k,n] shares the rhs across the batch.
  auto x = rand_tensor({2, 3, 4}, rng);
  auto w = rand_tensor({4, 5}, rng);
  auto z = matmul(x, w);
  REQUIRE(z->shape == Shape{2, 3, 5});
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (int64_t p = 0; p < 4; ++p) s += x->at((b * 3 + i) * 4 + p) * w->at(p * 5 + j);
        CHECK(z->at((b * 3 + i) * 5 + j) == doctest::Approx(s).epsilon(1e-12));
      }

  // [N,h,m,k] x [N,h,k,n] multiplies frame by frame.
  auto p = rand_tensor({2, 2, 3, 4}, rng);
  auto q = rand_tensor({2, 2, 4, 3}, rng);
  auto r = matmul(p, q);
  REQUIRE(r->shape == Shape{2, 2, 3, 3});
  for (int64_t f = 0; f < 4; ++f)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int64_t t = 0; t < 4; ++t) s += p->at((f * 3 + i) * 4 + t) * q->at((f * 4 + t) * 3 + j);
        CHECK(r->at((f * 3 + i) * 3 + j) == doctest::Approx(s).epsilon(1e-12));
      }

  CHECK_THROWS_AS(matmul(rand_tensor({2, 3}, rng), rand_tensor({4, 2}, rng)), ShapeError);
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(13);
  auto a = rand_tensor({3, 4}, rng, Dtype::F64, true);
  auto b = rand_tensor({4, 2}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return matmul(a, b); }, {{"a", a}, {"b", b}}) < 1e-7);

  auto x = rand_tensor({2, 2, 3, 4}, rng, Dtype::F64, true);
  auto y = rand_tensor({2, 2, 4, 3}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return matmul(x, y); }, {{"x", x}, {"y", y}}) < 1e-7);
}

TEST_CASE("conv2d matches hand example") {
  auto x = Tensor::from_values({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}, Dtype::F64);
  auto w = Tensor::from_values({1, 1, 2, 2}, {1, 1, 1, 1}, Dtype::F64);
  auto y = conv2d(x, w, nullptr, 1, 0);
  REQUIRE(y->shape == Shape{1, 1, 2, 2});
  CHECK(max_abs_diff(*y, {12, 16, 24, 28}) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("conv2d matches loop oracle across random shapes") {
  Rng rng(14);
  for (int trial = 0; trial < 25; ++trial) {
    int64_t B = 1 + static_cast<int64_t>(rng.uniform_int(2));
    int64_t C = 1 + static_cast<int64_t>(rng.uniform_int(3));
    int64_t Co = 1 + static_cast<int64_t>(rng.uniform_int(3));
    int64_t k = 1 + static_cast<int64_t>(rng.uniform_int(3));
    int stride = 1 + static_cast<int>(rng.uniform_int(2));
    int pad = static_cast<int>(rng.uniform_int(2));
    int64_t H = k + static_cast<int64_t>(rng.uniform_int(5));
    int64_t W = k + static_cast<int64_t>(rng.uniform_int(5));
    auto x = rand_tensor({B, C, H, W}, rng);
    auto w = rand_tensor({Co, C, k, k}, rng);
    auto b = rand_tensor({Co}, rng);
    auto y = conv2d(x, w, b, stride, pad);
    auto ref = conv2d_oracle(*x, *w, b.get(), stride, pad);
    CHECK(max_abs_diff(*y, ref) < 1e-12);
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(15);
  auto x = rand_tensor({2, 2, 5, 5}, rng, Dtype::F64, true);
  auto w = rand_tensor({3, 2, 3, 3}, rng, Dtype::F64, true);
  auto b = rand_tensor({3}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return conv2d(x, w, b, 2, 1); }, {{"x", x}, {"w", w}, {"b", b}}) < 1e-7);
}

TEST_CASE("conv_transpose2d matches loop oracle and finite differences") {
  Rng rng(16);
  for (int trial = 0; trial < 10; ++trial) {
    int64_t B = 1 + static_cast<int64_t>(rng.uniform_int(2));
    int64_t C = 1 + static_cast<int64_t>(rng.uniform_int(3));
    int64_t Co = 1 + static_cast<int64_t>(rng.uniform_int(3));
    int64_t k = 2 + static_cast<int64_t>(rng.uniform_int(2));
    int stride = 1 + static_cast<int>(rng.uniform_int(2));
    int64_t H = 2 + static_cast<int64_t>(rng.uniform_int(4));
    int64_t W = 2 + static_cast<int64_t>(rng.uniform_int(4));
    auto x = rand_tensor({B, C, H, W}, rng);
    auto w = rand_tensor({C, Co, k, k}, rng);
    auto b = rand_tensor({Co}, rng);
    auto y = conv_transpose2d(x, w, b, stride);
    auto ref = conv_transpose2d_oracle(*x, *w, b.get(), stride);
    CHECK(max_abs_diff(*y, ref) < 1e-12);
  }

  auto x = rand_tensor({1, 2, 3, 3}, rng, Dtype::F64, true);
  auto w = rand_tensor({2, 3, 2, 2}, rng, Dtype::F64, true);
  auto b = rand_tensor({3}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return conv_transpose2d(x, w, b, 2); },
                 {{"x", x}, {"w", w}, {"b", b}}) < 1e-7);
}

TEST_CASE("nonlinearities match closed forms") {
  auto x = Tensor::from_values({5}, {-2, -0.5, 0, 0.5, 1}, Dtype::F64);
  auto g = gelu(x);
  for (int64_t i = 0; i < 5; ++i) {
    double v = x->at(i);
    CHECK(g->at(i) ==
          doctest::Approx(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)))).epsilon(1e-14));
  }
  CHECK(gelu(Tensor::from_values({1}, {0}, Dtype::F64))->at(0) == 0.0);

  auto s = sigmoid(Tensor::from_values({1}, {0}, Dtype::F64));
  CHECK(s->at(0) == doctest::Approx(0.5).epsilon(1e-15));
  auto r = relu(Tensor::from_values({3}, {-1, 0, 2}, Dtype::F64));
  CHECK(max_abs_diff(*r, {0, 0, 2}) == 0.0);

  // log_guarded clamps at the floor instead of reaching -inf.
  auto lg = log_guarded(Tensor::from_values({2}, {0.0, 1.0}, Dtype::F64), 1e-12);
  CHECK(lg->at(0) == doctest::Approx(std::log(1e-12)).epsilon(1e-12));
  CHECK(lg->at(1) == 0.0);
}

TEST_CASE("elementwise gradients match finite differences") {
  Rng rng(17);
  auto x = rand_tensor({2, 7}, rng, Dtype::F64, true, -2.0, 2.0);
  CHECK(fd_check([&] { return gelu(x); }, {{"x", x}}) < 1e-7);
  CHECK(fd_check([&] { return sigmoid(x); }, {{"x", x}}) < 1e-7);
  CHECK(fd_check([&] { return tanh_op(x); }, {{"x", x}}) < 1e-7);
  auto y = rand_tensor({2, 7}, rng, Dtype::F64, true, 0.5, 2.0);
  CHECK(fd_check([&] { return div(x, y); }, {{"x", x}, {"y", y}}) < 1e-7);
  CHECK(fd_check([&] { return log_guarded(y); }, {{"y", y}}) < 1e-7);
  auto z = rand_tensor({2, 7}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return mul(add(x, z), sub(x, scale(z, 0.3))); },
                 {{"x", x}, {"z", z}}) < 1e-7);
}

TEST_CASE("softmax closed forms, temperature, and gradients") {
  // exp(0) : exp(ln 3) = 1 : 3.
  auto x = Tensor::from_values({2}, {0.0, std::log(3.0)}, Dtype::F64);
  auto p = softmax(x, 0);
  CHECK(p->at(0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(p->at(1) == doctest::Approx(0.75).epsilon(1e-14));

  // Constant rows are uniform regardless of temperature; shifting all logits
  // by a constant changes nothing.
  auto c = Tensor::from_values({1, 3}, {4.0, 4.0, 4.0}, Dtype::F64);
  auto pc = softmax(c, 1, 0.7);
  for (int i = 0; i < 3; ++i) CHECK(pc->at(i) == doctest::Approx(1.0 / 3).epsilon(1e-14));

  Rng rng(18);
  auto logits = rand_tensor({2, 3, 4}, rng, Dtype::F64, true, -3.0, 3.0);
  auto shifted = add_scalar(logits, 17.0);
  auto pa = softmax(logits, 1);
  auto pb = softmax(shifted, 1);
  CHECK(max_abs_diff(*pa, pb->values()) < 1e-12);

  // Rows sum to one along the reduced axis.
  auto sums = reduce_sum(pa, 1);
  for (int64_t i = 0; i < sums->numel(); ++i)
    CHECK(sums->at(i) == doctest::Approx(1.0).epsilon(1e-13));

  CHECK(fd_check([&] { return softmax(logits, 1, 0.9); }, {{"x", logits}}) < 1e-7);
  CHECK(fd_check([&] { return softmax(logits, 2, 2.0); }, {{"x", logits}}) < 1e-7);
}

TEST_CASE("reductions and bias adds match oracles and finite differences") {
  Rng rng(19);
  auto x = rand_tensor({2, 3, 4}, rng, Dtype::F64, true);
  auto m = reduce_mean(x, 1);
  REQUIRE(m->shape == Shape{2, 4});
  double s = 0.0;
  for (int64_t a = 0; a < 3; ++a) s += x->at((0 * 3 + a) * 4 + 1);
  CHECK(m->at(1) == doctest::Approx(s / 3.0).epsilon(1e-13));

  CHECK(fd_check([&] { return reduce_sum(x, 0); }, {{"x", x}}) < 1e-7);
  CHECK(fd_check([&] { return reduce_mean(x, 2); }, {{"x", x}}) < 1e-7);

  auto bias = rand_tensor({4}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return add_bias_rows(x, bias); }, {{"x", x}, {"b", bias}}) < 1e-7);

  auto img = rand_tensor({2, 3, 2, 2}, rng, Dtype::F64, true);
  auto cb = rand_tensor({3}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return add_bias_channels(img, cb); }, {{"x", img}, {"b", cb}}) < 1e-7);

  auto v = rand_tensor({2, 4}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return add_row_broadcast(x, v); }, {{"x", x}, {"v", v}}) < 1e-7);
}

TEST_CASE("shape ops round-trip and propagate gradients") {
  Rng rng(20);
  auto x = rand_tensor({2, 3, 4}, rng, Dtype::F64, true);

  auto r = reshape(x, {4, 6});
  CHECK(max_abs_diff(*r, x->values()) == 0.0);
  CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);

  auto p = permute(x, {2, 0, 1});
  REQUIRE(p->shape == Shape{4, 2, 3});
  for (int64_t a = 0; a < 2; ++a)
    for (int64_t b = 0; b < 3; ++b)
      for (int64_t c = 0; c < 4; ++c)
        CHECK(p->at((c * 2 + a) * 3 + b) == x->at((a * 3 + b) * 4 + c));
  // Applying the inverse permutation restores the original layout.
  auto back = permute(p, {1, 2, 0});
  CHECK(max_abs_diff(*back, x->values()) == 0.0);

  CHECK(fd_check([&] { return permute(x, {2, 0, 1}); }, {{"x", x}}) < 1e-7);
  CHECK(fd_check([&] { return reshape(x, {24}); }, {{"x", x}}) < 1e-7);

  auto y = rand_tensor({2, 2, 4}, rng, Dtype::F64, true);
  auto cat = concat({x, y}, 1);
  REQUIRE(cat->shape == Shape{2, 5, 4});
  CHECK(cat->at((0 * 5 + 3) * 4 + 2) == y->at((0 * 2 + 0) * 4 + 2));
  CHECK(fd_check([&] { return concat({x, y}, 1); }, {{"x", x}, {"y", y}}) < 1e-7);

  auto sl = slice(cat, 1, 3, 2);
  CHECK(max_abs_diff(*sl, y->values()) == 0.0);
  CHECK(fd_check([&] { return slice(x, 2, 1, 2); }, {{"x", x}}) < 1e-7);
  CHECK_THROWS_AS(slice(x, 1, 2, 5), ShapeError);
}

TEST_CASE("pooling ops match hand values and finite differences") {
  auto x = Tensor::from_values({1, 1, 4, 4},
                               {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16},
                               Dtype::F64);
  auto a = avg_pool2d(x, 2, 2);
  CHECK(max_abs_diff(*a, {3.5, 5.5, 11.5, 13.5}) < 1e-14);
  auto m = max_pool2d(x, 2, 2);
  CHECK(max_abs_diff(*m, {6, 8, 14, 16}) == 0.0);

  // Tied maxima route the gradient to the first element in row-major order.
  auto tie = Tensor::zeros({1, 1, 2, 2}, Dtype::F64, true);
  auto mt = max_pool2d(tie, 2, 2);
  sum_all(mt)->backward();
  CHECK(tie->grad_at(0) == 1.0);
  CHECK(tie->grad_at(1) == 0.0);

  Rng rng(21);
  auto xr = rand_tensor({2, 2, 4, 4}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return avg_pool2d(xr, 2, 2); }, {{"x", xr}}) < 1e-7);
  CHECK(fd_check([&] { return max_pool2d(xr, 2, 2); }, {{"x", xr}}) < 1e-7);
  CHECK(fd_check([&] { return global_avg_pool(xr); }, {{"x", xr}}) < 1e-7);
  CHECK(fd_check([&] { return channel_pool_avgmax(xr); }, {{"x", xr}}) < 1e-7);

  auto sc = rand_tensor({2, 2}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return scale_channels(xr, sc); }, {{"x", xr}, {"a", sc}}) < 1e-6);
  auto sp = rand_tensor({2, 1, 4, 4}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return scale_spatial(xr, sp); }, {{"x", xr}, {"m", sp}}) < 1e-7);
}

TEST_CASE("layer_norm normalises with population statistics") {
  Rng rng(22);
  auto x = rand_tensor({3, 6}, rng, Dtype::F64, true, -4.0, 4.0);
  auto gamma = Tensor::full({6}, 1.0, Dtype::F64);
  auto beta = Tensor::zeros({6}, Dtype::F64);
  auto y = layer_norm(x, gamma, beta, 1, 0.0);
  for (int64_t r = 0; r < 3; ++r) {
    double mu = 0.0, var = 0.0;
    for (int64_t j = 0; j < 6; ++j) mu += y->at(r * 6 + j);
    mu /= 6.0;
    for (int64_t j = 0; j < 6; ++j) {
      double d = y->at(r * 6 + j) - mu;
      var += d * d;
    }
    var /= 6.0;  // population variance reaches exactly 1 at eps = 0
    CHECK(mu == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::fabs(var - 1.0) < 1e-12);
  }

  gamma->requires_grad = true;
  beta->requires_grad = true;
  CHECK(fd_check([&] { return layer_norm(x, gamma, beta, 1); },
                 {{"x", x}, {"gamma", gamma}, {"beta", beta}}) < 1e-6);

  // Normalising over a middle axis follows the same formula.
  auto x3 = rand_tensor({2, 5, 3}, rng, Dtype::F64, true);
  auto g5 = rand_tensor({5}, rng, Dtype::F64, true, 0.5, 1.5);
  auto b5 = rand_tensor({5}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return layer_norm(x3, g5, b5, 1); },
                 {{"x", x3}, {"g", g5}, {"b", b5}}) < 1e-6);
}

TEST_CASE("batch_norm: running stats recurrence, train/eval modes, gradients") {
  Rng rng(23);
  int64_t C = 3;
  auto gamma = Tensor::full({C}, 1.0, Dtype::F64);
  auto beta = Tensor::zeros({C}, Dtype::F64);
  gamma->requires_grad = true;
  beta->requires_grad = true;
  BatchNormState st;
  st.running_mean = Tensor::zeros({C}, Dtype::F64);
  st.running_var = Tensor::full({C}, 1.0, Dtype::F64);

  auto x = rand_tensor({2, C, 4, 4}, rng, Dtype::F64, true, -2.0, 2.0);

  // Batch moments per channel (population variance).
  std::vector<double> mu(3, 0.0), var(3, 0.0);
  int64_t n = 2 * 16;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t p = 0; p < 16; ++p) mu[c] += x->at((b * C + c) * 16 + p);
    mu[c] /= n;
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t p = 0; p < 16; ++p) {
        double d = x->at((b * C + c) * 16 + p) - mu[c];
        var[c] += d * d;
      }
    var[c] /= n;
  }

  auto y = batch_norm(x, gamma, beta, st, /*training=*/true, 0.1);
  CHECK(st.steps == 1);
  for (int64_t c = 0; c < C; ++c) {
    // new_running = 0.1 * batch + 0.9 * old with old = (0, 1)
    CHECK(st.running_mean->at(c) == doctest::Approx(0.1 * mu[c]).epsilon(1e-12));
    CHECK(st.running_var->at(c) == doctest::Approx(0.1 * var[c] + 0.9).epsilon(1e-12));
  }

  // Training output uses the batch moments directly.
  double inv0 = 1.0 / std::sqrt(var[0] + 1e-5);
  CHECK(y->at(0) == doctest::Approx((x->at(0) - mu[0]) * inv0).epsilon(1e-10));

  CHECK(fd_check([&] { return batch_norm(x, gamma, beta, st, true, 0.1); },
                 {{"x", x}, {"gamma", gamma}, {"beta", beta}}) < 1e-6);
  // Eval mode treats the running stats as constants.
  CHECK(fd_check([&] { return batch_norm(x, gamma, beta, st, false, 0.1); },
                 {{"x", x}, {"gamma", gamma}, {"beta", beta}}) < 1e-6);
}

TEST_CASE("ssm_scan matches the recurrence and finite differences") {
  // a = 0.5, b = 1, u = 1,1,1 unrolls to 1, 1.5, 1.75.
  auto u = Tensor::from_values({1, 3, 1}, {1, 1, 1}, Dtype::F64);
  auto a = Tensor::from_values({1}, {0.5}, Dtype::F64);
  auto b = Tensor::from_values({1}, {1.0}, Dtype::F64);
  auto y = ssm_scan(u, a, b);
  CHECK(max_abs_diff(*y, {1.0, 1.5, 1.75}) < 1e-15);

  Rng rng(24);
  for (int trial = 0; trial < 5; ++trial) {
    int64_t B = 1 + static_cast<int64_t>(rng.uniform_int(2));
    int64_t L = 1 + static_cast<int64_t>(rng.uniform_int(6));
    int64_t d = 1 + static_cast<int64_t>(rng.uniform_int(4));
    auto ur = rand_tensor({B, L, d}, rng);
    auto ar = rand_tensor({d}, rng, Dtype::F64, false, -0.9, 0.9);
    auto br = rand_tensor({d}, rng);
    auto yr = ssm_scan(ur, ar, br);
    for (int64_t bi = 0; bi < B; ++bi)
      for (int64_t j = 0; j < d; ++j) {
        double state = 0.0;
        for (int64_t t = 0; t < L; ++t) {
          state = ar->at(j) * state + br->at(j) * ur->at((bi * L + t) * d + j);
          CHECK(yr->at((bi * L + t) * d + j) == doctest::Approx(state).epsilon(1e-12));
        }
      }
  }

  auto ur = rand_tensor({2, 5, 3}, rng, Dtype::F64, true);
  auto ar = rand_tensor({3}, rng, Dtype::F64, true, -0.8, 0.8);
  auto br = rand_tensor({3}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return ssm_scan(ur, ar, br); },
                 {{"u", ur}, {"a", ar}, {"b", br}}) < 1e-7);
}

TEST_CASE("sobel_energy matches a loop oracle and is zero on flat interiors") {
  Rng rng(25);
  auto x = rand_tensor({1, 2, 5, 6}, rng, Dtype::F64, true);
  auto e = sobel_energy(x);
  REQUIRE(e->shape == Shape{1, 5, 6});

  const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  const double ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  for (int64_t h = 0; h < 5; ++h)
    for (int64_t w = 0; w < 6; ++w) {
      double ref = 0.0;
      for (int64_t c = 0; c < 2; ++c) {
        double gx = 0.0, gy = 0.0;
        for (int di = 0; di < 3; ++di)
          for (int dj = 0; dj < 3; ++dj) {
            int64_t ih = h + di - 1, iw = w + dj - 1;
            if (ih < 0 || ih >= 5 || iw < 0 || iw >= 6) continue;
            double v = x->at((c * 5 + ih) * 6 + iw);
            gx += kx[di][dj] * v;
            gy += ky[di][dj] * v;
          }
        ref += std::fabs(gx) + std::fabs(gy);
      }
      CHECK(e->at(h * 6 + w) == doctest::Approx(ref).epsilon(1e-12));
    }

  // A constant image has zero gradient away from the zero-padding border.
  auto flat = Tensor::full({1, 1, 5, 5}, 3.0, Dtype::F64);
  auto ef = sobel_energy(flat);
  for (int64_t h = 1; h < 4; ++h)
    for (int64_t w = 1; w < 4; ++w) CHECK(ef->at(h * 5 + w) == 0.0);

  CHECK(fd_check([&] { return sobel_energy(x); }, {{"x", x}}) < 1e-6);
}

TEST_CASE("rel_bias_expand builds decomposed offsets and routes gradients") {
  int s = 3;
  Rng rng(26);
  auto row = rand_tensor({2, 5}, rng, Dtype::F64, true);
  auto col = rand_tensor({2, 5}, rng, Dtype::F64, true);
  auto bias = rel_bias_expand(row, col, s);
  REQUIRE(bias->shape == Shape{2, 9, 9});
  for (int64_t j = 0; j < 2; ++j)
    for (int64_t t = 0; t < 9; ++t)
      for (int64_t u = 0; u < 9; ++u) {
        int64_t dr = t / s - u / s, dc = t % s - u % s;
        double want = row->at(j * 5 + dr + s - 1) + col->at(j * 5 + dc + s - 1);
        CHECK(bias->at((j * 9 + t) * 9 + u) == doctest::Approx(want).epsilon(1e-14));
      }
  // The diagonal always reads the zero-offset entries.
  CHECK(bias->at((0 * 9 + 4) * 9 + 4) ==
        doctest::Approx(row->at(0 * 5 + 2) + col->at(0 * 5 + 2)).epsilon(1e-14));

  CHECK(fd_check([&] { return rel_bias_expand(row, col, s); },
                 {{"row", row}, {"col", col}}) < 1e-7);

  auto scores = rand_tensor({3, 2, 9, 9}, rng, Dtype::F64, true);
  CHECK(fd_check([&] { return add_window_bias(scores, rel_bias_expand(row, col, s)); },
                 {{"scores", scores}, {"row", row}, {"col", col}}) < 1e-6);
}

TEST_CASE("gru_cell interpolates between candidate and previous state") {
  Rng rng(27);
  int64_t d = 4;
  GruParams p;
  auto mk = [&](Shape sh) { return rand_tensor(sh, rng, Dtype::F64, true, -0.5, 0.5); };
  p.wz = mk({d, d});
  p.uz = mk({d, d});
  p.bz = mk({d});
  p.wr = mk({d, d});
  p.ur = mk({d, d});
  p.br = mk({d});
  p.wn = mk({d, d});
  p.un = mk({d, d});
  p.bn = mk({d});
  auto h = rand_tensor({3, d}, rng, Dtype::F64, true);
  auto u = rand_tensor({3, d}, rng, Dtype::F64, true);

  // Saturating the update gate pins the output to the previous state.
  for (int64_t i = 0; i < d; ++i) p.bz->set(i, 60.0);
  auto pinned = gru_cell(h, u, p);
  CHECK(max_abs_diff(*pinned, h->values()) < 1e-12);

  // The opposite extreme ignores the previous state entirely: output equals
  // the candidate, which lives in (-1, 1).
  for (int64_t i = 0; i < d; ++i) p.bz->set(i, -60.0);
  auto fresh = gru_cell(h, u, p);
  for (int64_t i = 0; i < fresh->numel(); ++i) {
    CHECK(fresh->at(i) > -1.0);
    CHECK(fresh->at(i) < 1.0);
  }

  for (int64_t i = 0; i < d; ++i) p.bz->set(i, 0.1);
  CHECK(fd_check([&] { return gru_cell(h, u, p); },
                 {{"h", h},
                  {"u", u},
                  {"wz", p.wz},
                  {"uz", p.uz},
                  {"bz", p.bz},
                  {"wr", p.wr},
                  {"ur", p.ur},
                  {"br", p.br},
                  {"wn", p.wn},
                  {"un", p.un},
                  {"bn", p.bn}}) < 1e-6);
}

TEST_CASE("argmax_channel breaks ties toward the lowest class index") {
  auto logits = Tensor::from_values({1, 3, 1, 2}, {2.0, 1.0, 2.0, 5.0, 1.0, 5.0}, Dtype::F64);
  auto codes = argmax_channel(*logits);
  REQUIRE(codes.size() == 2);
  CHECK(codes[0] == 0);  // classes 0 and 1 tie at 2.0
  CHECK(codes[1] == 1);  // classes 1 and 2 tie at 5.0
}

TEST_CASE("autodiff bookkeeping invariants") {
  Rng rng(28);
  // Grad accumulates across multiple uses of the same tensor.
  auto x = Tensor::from_values({1}, {3.0}, Dtype::F64, true);
  auto y = add(mul(x, x), x);  // d/dx (x^2 + x) = 2x + 1
  y->backward();
  CHECK(x->grad_at(0) == doctest::Approx(7.0).epsilon(1e-14));

  // A leaf that does not participate keeps a zero gradient.
  auto unused = Tensor::from_values({2}, {1.0, 2.0}, Dtype::F64, true);
  CHECK(unused->grad_at(0) == 0.0);
  CHECK(unused->grad_at(1) == 0.0);

  // Under NoGradGuard no graph is recorded.
  {
    NoGradGuard ng;
    auto z = mul(x, x);
    CHECK_FALSE(z->requires_grad);
    CHECK(z->parents.empty());
  }

  // backward on a non-scalar root is rejected.
  auto v = rand_tensor({3}, rng, Dtype::F64, true);
  auto w = mul(v, v);
  CHECK_THROWS_AS(w->backward(), ShapeError);

  // dtype mixing is rejected.
  auto f32 = Tensor::zeros({2}, Dtype::F32);
  auto f64 = Tensor::zeros({2}, Dtype::F64);
  CHECK_THROWS_AS(add(f32, f64), DtypeError);
}

TEST_CASE("f32 and f64 forward paths agree to single precision") {
  Rng rng(29);
  auto x64 = rand_tensor({2, 3, 6, 6}, rng, Dtype::F64);
  auto w64 = rand_tensor({4, 3, 3, 3}, rng, Dtype::F64);
  auto x32 = Tensor::zeros({2, 3, 6, 6}, Dtype::F32);
  auto w32 = Tensor::zeros({4, 3, 3, 3}, Dtype::F32);
  for (int64_t i = 0; i < x64->numel(); ++i) x32->set(i, x64->at(i));
  for (int64_t i = 0; i < w64->numel(); ++i) w32->set(i, w64->at(i));
  auto y64 = conv2d(x64, w64, nullptr, 1, 1);
  auto y32 = conv2d(x32, w32, nullptr, 1, 1);
  for (int64_t i = 0; i < y64->numel(); ++i)
    CHECK(y32->at(i) == doctest::Approx(y64->at(i)).epsilon(1e-4));
}
