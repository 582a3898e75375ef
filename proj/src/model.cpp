#include "visa/model.hpp"

#include <cmath>

#include "visa/image.hpp"

namespace visa {

void validate_model_config(const ModelConfig& cfg) {
  const auto& v = cfg.vimb;
  if (cfg.use_vimb) {
    if (v.d < 1) fail<ConfigError>("vimb: embedding width must be positive");
    if (v.heads < 1 || v.d % v.heads != 0)
      fail<ConfigError>(strformat("vimb: width %d not divisible by %d heads", v.d, v.heads));
    if (v.window < 1) fail<ConfigError>("vimb: window must be positive");
    if (v.encoder_layers < 0 || v.ssm_layers < 0)
      fail<ConfigError>("vimb: layer counts must be non-negative");
    if (v.ffn_mult < 1) fail<ConfigError>("vimb: ffn_mult must be positive");
    if (v.use_slots) {
      if (v.slots < 1) fail<ConfigError>("vimb: need at least one slot");
      if (v.slot_iters < 1) fail<ConfigError>("vimb: need at least one slot iteration");
    }
  }
  const auto& s = cfg.srab;
  if (!(s.widths[0] < s.widths[1] && s.widths[1] < s.widths[2]) || s.widths[0] < 1)
    fail<ConfigError>("srab: widths must be positive and strictly increasing");
  if (s.units_per_level < 1) fail<ConfigError>("srab: need at least one unit per level");
  if (s.se_reduction < 1) fail<ConfigError>("srab: se_reduction must be positive");
  if (s.cbam_kernel < 1 || s.cbam_kernel % 2 == 0)
    fail<ConfigError>("srab: cbam kernel must be odd");
}

TensorPtr window_partition(const TensorPtr& x, int s) {
  if (x->rank() != 4) fail<ShapeError>("window_partition: expected [B,d,H,W]");
  int64_t B = x->shape[0], d = x->shape[1], H = x->shape[2], W = x->shape[3];
  if (s < 1 || H % s != 0 || W % s != 0)
    fail<ShapeError>(strformat("window of %d does not tile a %lld x %lld grid", s,
                               static_cast<long long>(H), static_cast<long long>(W)));
  auto t = permute(x, {0, 2, 3, 1});                       // [B,H,W,d]
  t = reshape(t, {B, H / s, s, W / s, s, d});
  t = permute(t, {0, 1, 3, 2, 4, 5});                      // [B,Hs,Ws,s,s,d]
  return reshape(t, {B * (H / s) * (W / s), static_cast<int64_t>(s) * s, d});
}

TensorPtr window_merge(const TensorPtr& t, int s, int64_t batch, int64_t h, int64_t w) {
  if (t->rank() != 3) fail<ShapeError>("window_merge: expected [N,n,d]");
  if (s < 1 || h % s != 0 || w % s != 0)
    fail<ShapeError>(strformat("window of %d does not tile a %lld x %lld grid", s,
                               static_cast<long long>(h), static_cast<long long>(w)));
  int64_t d = t->shape[2];
  auto x = reshape(t, {batch, h / s, w / s, s, s, d});
  x = permute(x, {0, 1, 3, 2, 4, 5});                      // [B,Hs,s,Ws,s,d]
  x = reshape(x, {batch, h, w, d});
  return permute(x, {0, 3, 1, 2});                         // [B,d,H,W]
}

namespace {

TensorPtr grid_to_seq(const TensorPtr& x) {  // [B,d,H,W] -> [B,HW,d] raster order
  auto t = permute(x, {0, 2, 3, 1});
  return reshape(t, {x->shape[0], x->shape[2] * x->shape[3], x->shape[1]});
}

TensorPtr seq_to_grid(const TensorPtr& t, int64_t h, int64_t w) {
  auto x = reshape(t, {t->shape[0], h, w, t->shape[2]});
  return permute(x, {0, 3, 1, 2});
}

TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  auto y = matmul(x, w);
  return b ? add_bias_rows(y, b) : y;
}

}  // namespace

VisaModel::VisaModel(const ModelConfig& cfg, uint64_t seed, Dtype dt)
    : cfg_(cfg), dt_(dt) {
  validate_model_config(cfg);
  Rng rng(derive_seed(seed, 0x494e4954));
  const int d = cfg.vimb.d;
  const int F = fusion_width();

  auto tn = [&](const std::string& name, Shape shape) {
    return params_.add(name, init_trunc_normal(std::move(shape), rng, dt_));
  };
  auto conv = [&](const std::string& name, int co, int ci, int k) {
    Lin l;
    l.w = params_.add(name + ".w", init_fan_in_uniform({co, ci, k, k},
                                                       static_cast<int64_t>(ci) * k * k, rng,
                                                       dt_));
    l.b = params_.add(name + ".b", init_const({co}, 0.0, dt_));
    return l;
  };
  auto fc = [&](const std::string& name, int in, int out) {
    Lin l;
    l.w = tn(name + ".w", {in, out});
    l.b = params_.add(name + ".b", init_const({out}, 0.0, dt_));
    return l;
  };
  auto ln = [&](const std::string& name, int width) {
    Ln l;
    l.g = params_.add(name + ".g", init_const({width}, 1.0, dt_));
    l.b = params_.add(name + ".b", init_const({width}, 0.0, dt_));
    return l;
  };
  auto ra_unit = [&](const std::string& name, int c) {
    RaUnit u;
    u.conv1 = conv(name + ".conv1", c, c, 3);
    u.conv2 = conv(name + ".conv2", c, c, 3);
    int bott = std::max(1, c / cfg.srab.se_reduction);
    u.se1 = fc(name + ".se.fc1", c, bott);
    u.se2 = fc(name + ".se.fc2", bott, c);
    u.cbam = conv(name + ".cbam", 1, 2, cfg.srab.cbam_kernel);
    return u;
  };

  if (cfg.use_vimb) {
    proj_ = conv("vimb.proj", d, kNumBands, 1);
    embed_ln_ = ln("vimb.embed_ln", d);
    for (int i = 0; i < cfg.vimb.encoder_layers; ++i) {
      std::string p = strformat("vimb.enc%d", i);
      EncoderLayer e;
      e.ln1 = ln(p + ".ln1", d);
      e.wq = tn(p + ".attn.wq", {d, d});
      e.wk = tn(p + ".attn.wk", {d, d});
      e.wv = tn(p + ".attn.wv", {d, d});
      e.wo = tn(p + ".attn.wo", {d, d});
      if (cfg.vimb.use_rel_bias) {
        int span = 2 * cfg.vimb.window - 1;
        e.bias_row = params_.add(p + ".attn.bias_row",
                                 init_const({cfg.vimb.heads, span}, 0.0, dt_));
        e.bias_col = params_.add(p + ".attn.bias_col",
                                 init_const({cfg.vimb.heads, span}, 0.0, dt_));
      }
      e.ln2 = ln(p + ".ln2", d);
      e.ffn1 = fc(p + ".ffn.fc1", d, d * cfg.vimb.ffn_mult);
      e.ffn2 = fc(p + ".ffn.fc2", d * cfg.vimb.ffn_mult, d);
      enc_.push_back(std::move(e));
    }
    for (int i = 0; i < cfg.vimb.ssm_layers; ++i) {
      std::string p = strformat("vimb.ssm%d", i);
      SsmLayer s;
      s.wg = tn(p + ".wg", {d, d});
      // raw_a = 0 puts the leak-through factor at sigmoid(0) = 0.5, a stable
      // midpoint; the input coefficient starts small.
      s.raw_a = params_.add(p + ".raw_a", init_const({d}, 0.0, dt_));
      s.bbar = params_.add(p + ".bbar", init_const({d}, 0.1, dt_));
      s.proj = tn(p + ".proj", {d, d});
      ssm_.push_back(std::move(s));
    }
    if (cfg.vimb.use_slots) {
      slots_.init = tn("vimb.slots.init", {cfg.vimb.slots, d});
      slots_.ln_in = ln("vimb.slots.ln_in", d);
      slots_.wk = tn("vimb.slots.wk", {d, d});
      slots_.wv = tn("vimb.slots.wv", {d, d});
      slots_.wq = tn("vimb.slots.wq", {d, d});
      slots_.ln_slot = ln("vimb.slots.ln_slot", d);
      auto gw = [&](const char* n) { return tn(std::string("vimb.slots.gru.") + n, {d, d}); };
      auto gb = [&](const char* n) {
        return params_.add(std::string("vimb.slots.gru.") + n, init_const({d}, 0.0, dt_));
      };
      slots_.gru = {gw("wz"), gw("uz"), gb("bz"), gw("wr"), gw("ur"), gb("br"),
                    gw("wn"), gw("un"), gb("bn")};
      slots_.ln_mlp = ln("vimb.slots.ln_mlp", d);
      slots_.mlp1 = fc("vimb.slots.mlp.fc1", d, d);
      slots_.mlp2 = fc("vimb.slots.mlp.fc2", d, d);
      if (cfg.vimb.use_broadcast) broadcast_w_ = tn("vimb.broadcast.w", {d, d});
    }
    out_conv_ = conv("vimb.out.conv", F, d, 3);
    out_ln_ = ln("vimb.out.ln", F);
    refine1_ = conv("vimb.refine.conv1", F, F, 3);
    refine_ln_ = ln("vimb.refine.ln", F);
    refine2_ = conv("vimb.refine.conv2", F, F, 3);
    aux_ = conv("vimb.aux", kNumClasses, F, 1);
  }

  const auto& widths = cfg.srab.widths;
  stem_ = conv("srab.stem", widths[0], kNumBands, 3);
  enc_units_.resize(3);
  for (int l = 0; l < 3; ++l)
    for (int u = 0; u < cfg.srab.units_per_level; ++u)
      enc_units_[static_cast<size_t>(l)].push_back(
          ra_unit(strformat("srab.enc%d.unit%d", l, u), widths[static_cast<size_t>(l)]));
  for (int l = 0; l < 2; ++l) {
    down_[static_cast<size_t>(l)] = conv(strformat("srab.down%d", l),
                                         widths[static_cast<size_t>(l) + 1],
                                         widths[static_cast<size_t>(l)], 3);
  }
  for (int l = 1; l >= 0; --l) {
    // Transposed conv halving channels and doubling extent; weight layout is
    // [Cin, Cout, k, k].
    std::string p = strformat("srab.up%d", l);
    Lin up;
    int ci = widths[static_cast<size_t>(l) + 1], co = widths[static_cast<size_t>(l)];
    up.w = params_.add(p + ".w",
                       init_fan_in_uniform({ci, co, 2, 2}, static_cast<int64_t>(ci) * 4, rng,
                                           dt_));
    up.b = params_.add(p + ".b", init_const({co}, 0.0, dt_));
    up_[static_cast<size_t>(l)] = up;
    int merge_in = cfg.srab.multi_scale_skips ? 2 * co : co;
    merge_[static_cast<size_t>(l)] = conv(strformat("srab.dec%d.merge", l), co, merge_in, 3);
    dec_unit_[static_cast<size_t>(l)] = ra_unit(strformat("srab.dec%d.unit", l), co);
  }

  int fuse_in = cfg.use_vimb ? 2 * F : F;
  fuse_conv_ = conv("fuse.conv", F, fuse_in, 3);
  fuse_bn_ = ln("fuse.bn", F);
  bn_state_.running_mean = Tensor::zeros({F}, dt_, false);
  bn_state_.running_var = Tensor::full({F}, 1.0, dt_);
  cls_ = conv("fuse.cls", kNumClasses, F, 1);
}

TensorPtr VisaModel::attention_block(const TensorPtr& tokens, const EncoderLayer& layer) {
  int64_t N = tokens->shape[0], n = tokens->shape[1], d = tokens->shape[2];
  int h = cfg_.vimb.heads;
  int64_t dh = d / h;

  auto split_heads = [&](const TensorPtr& t) {
    return permute(reshape(t, {N, n, h, dh}), {0, 2, 1, 3});  // [N,h,n,dh]
  };

  auto x = layer_norm(tokens, layer.ln1.g, layer.ln1.b, 2);
  auto q = split_heads(matmul(x, layer.wq));
  auto k = split_heads(matmul(x, layer.wk));
  auto v = split_heads(matmul(x, layer.wv));
  auto scores = scale(matmul(q, permute(k, {0, 1, 3, 2})),
                      1.0 / std::sqrt(static_cast<double>(dh)));
  if (layer.bias_row)
    scores = add_window_bias(
        scores, rel_bias_expand(layer.bias_row, layer.bias_col, cfg_.vimb.window));
  auto attn = softmax(scores, 3);
  auto ctx = matmul(attn, v);                                  // [N,h,n,dh]
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), {N, n, d});
  auto out = add(tokens, matmul(ctx, layer.wo));

  auto y = layer_norm(out, layer.ln2.g, layer.ln2.b, 2);
  y = linear(gelu(linear(y, layer.ffn1.w, layer.ffn1.b)), layer.ffn2.w, layer.ffn2.b);
  return add(out, y);
}

TensorPtr VisaModel::ssm_block(const TensorPtr& tokens, const SsmLayer& layer) {
  auto gated = mul(tokens, sigmoid(matmul(tokens, layer.wg)));
  auto states = ssm_scan(gated, sigmoid(layer.raw_a), layer.bbar);
  return add(tokens, matmul(states, layer.proj));
}

TensorPtr VisaModel::slot_state(const TensorPtr& tokens) {
  int64_t B = tokens->shape[0], d = tokens->shape[2];
  int64_t K = cfg_.vimb.slots;
  auto tn = layer_norm(tokens, slots_.ln_in.g, slots_.ln_in.b, 2);
  auto k = matmul(tn, slots_.wk);
  auto v = matmul(tn, slots_.wv);

  auto one = reshape(slots_.init, {1, K, d});
  std::vector<TensorPtr> copies(static_cast<size_t>(B), one);
  auto slots = B == 1 ? one : concat(copies, 0);  // [B,K,d]

  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (int it = 0; it < cfg_.vimb.slot_iters; ++it) {
    auto q = matmul(layer_norm(slots, slots_.ln_slot.g, slots_.ln_slot.b, 2), slots_.wq);
    auto logits = scale(matmul(k, permute(q, {0, 2, 1})), inv_sqrt_d);  // [B,L,K]
    auto a = softmax(logits, 2);  // normalized over slots: each token commits fully
    auto updates = matmul(permute(a, {0, 2, 1}), v);                    // [B,K,d]
    auto flat = gru_cell(reshape(slots, {B * K, d}), reshape(updates, {B * K, d}),
                         slots_.gru);
    slots = reshape(flat, {B, K, d});
    auto r = layer_norm(slots, slots_.ln_mlp.g, slots_.ln_mlp.b, 2);
    r = linear(gelu(linear(r, slots_.mlp1.w, slots_.mlp1.b)), slots_.mlp2.w, slots_.mlp2.b);
    slots = add(slots, r);
  }
  return slots;
}

TensorPtr VisaModel::run_attention_layer(const TensorPtr& tokens, int layer) {
  return attention_block(tokens, enc_.at(static_cast<size_t>(layer)));
}

TensorPtr VisaModel::run_ssm_layer(const TensorPtr& tokens, int layer) {
  return ssm_block(tokens, ssm_.at(static_cast<size_t>(layer)));
}

TensorPtr VisaModel::run_slot_attention(const TensorPtr& tokens) {
  if (!cfg_.vimb.use_slots) fail<ConfigError>("slot attention is disabled");
  return slot_state(tokens);
}

TensorPtr VisaModel::run_encoder_unit(const TensorPtr& x, int level, int unit) {
  return residual_attention_unit(
      x, enc_units_.at(static_cast<size_t>(level)).at(static_cast<size_t>(unit)));
}

TensorPtr VisaModel::vimb_forward(const TensorPtr& indices, TensorPtr* aux_out) {
  if (!cfg_.use_vimb) fail<ConfigError>("index branch is disabled in this configuration");
  if (indices->rank() != 4 || indices->shape[1] != kNumBands)
    fail<ShapeError>("index branch expects [B,5,H,W] input");
  int64_t B = indices->shape[0], H = indices->shape[2], W = indices->shape[3];
  int s = cfg_.vimb.window;

  auto z = conv2d(indices, proj_.w, proj_.b);
  z = layer_norm(z, embed_ln_.g, embed_ln_.b, 1);  // per-location channel norm

  if (!enc_.empty()) {
    auto tokens = window_partition(z, s);
    for (const auto& layer : enc_) tokens = attention_block(tokens, layer);
    z = window_merge(tokens, s, B, H, W);
  }

  auto seq = grid_to_seq(z);  // raster scan order for the state-space layers
  for (const auto& layer : ssm_) seq = ssm_block(seq, layer);

  if (cfg_.vimb.use_slots && cfg_.vimb.use_broadcast) {
    auto slots = slot_state(seq);
    auto m = reduce_mean(slots, 1);              // [B,d] mean slot
    seq = add_row_broadcast(seq, matmul(m, broadcast_w_));
  } else if (cfg_.vimb.use_slots) {
    slot_state(seq);  // grouping still runs under the no-broadcast ablation
  }
  z = seq_to_grid(seq, H, W);

  z = conv2d(z, out_conv_.w, out_conv_.b, 1, 1);
  z = layer_norm(z, out_ln_.g, out_ln_.b, 1);
  auto r = conv2d(z, refine1_.w, refine1_.b, 1, 1);
  r = gelu(layer_norm(r, refine_ln_.g, refine_ln_.b, 1));
  r = conv2d(r, refine2_.w, refine2_.b, 1, 1);
  auto f_idx = add(z, r);

  if (aux_out) *aux_out = conv2d(f_idx, aux_.w, aux_.b);
  return f_idx;
}

TensorPtr VisaModel::residual_attention_unit(const TensorPtr& x, const RaUnit& u) {
  auto r = conv2d(gelu(conv2d(x, u.conv1.w, u.conv1.b, 1, 1)), u.conv2.w, u.conv2.b, 1, 1);
  auto s = add(x, r);
  auto g = global_avg_pool(s);                                      // [B,C]
  auto a = sigmoid(linear(gelu(linear(g, u.se1.w, u.se1.b)), u.se2.w, u.se2.b));
  auto se = scale_channels(s, a);
  int pad = cfg_.srab.cbam_kernel / 2;
  auto mask = sigmoid(conv2d(channel_pool_avgmax(se), u.cbam.w, u.cbam.b, 1, pad));
  return scale_spatial(se, mask);
}

TensorPtr VisaModel::srab_forward(const TensorPtr& radiance) {
  if (radiance->rank() != 4 || radiance->shape[1] != kNumBands)
    fail<ShapeError>(strformat("radiance branch expects 5 input channels, got %lld",
                               radiance->rank() == 4
                                   ? static_cast<long long>(radiance->shape[1])
                                   : -1LL));
  if (radiance->shape[2] % 4 != 0 || radiance->shape[3] % 4 != 0)
    fail<ShapeError>("radiance branch needs extents divisible by 4");

  auto x = conv2d(radiance, stem_.w, stem_.b, 1, 1);
  std::array<TensorPtr, 3> level;
  for (int l = 0; l < 3; ++l) {
    for (const auto& u : enc_units_[static_cast<size_t>(l)])
      x = residual_attention_unit(x, u);
    level[static_cast<size_t>(l)] = x;
    if (l < 2) x = conv2d(x, down_[static_cast<size_t>(l)].w, down_[static_cast<size_t>(l)].b,
                          2, 1);
  }

  x = level[2];
  for (int l = 1; l >= 0; --l) {
    x = conv_transpose2d(x, up_[static_cast<size_t>(l)].w, up_[static_cast<size_t>(l)].b, 2);
    if (cfg_.srab.multi_scale_skips)
      x = concat({x, level[static_cast<size_t>(l)]}, 1);
    x = conv2d(x, merge_[static_cast<size_t>(l)].w, merge_[static_cast<size_t>(l)].b, 1, 1);
    x = residual_attention_unit(x, dec_unit_[static_cast<size_t>(l)]);
  }
  return x;
}

VisaModel::Output VisaModel::forward(const TensorPtr& indices, const TensorPtr& radiance,
                                     bool training) {
  Output out;
  auto f_raw = srab_forward(radiance);
  TensorPtr fused_in = f_raw;
  if (cfg_.use_vimb) {
    auto f_idx = vimb_forward(indices, &out.aux_logits);
    if (f_idx->shape != f_raw->shape)
      fail<ShapeError>("branch outputs disagree in shape; check input extents");
    fused_in = concat({f_raw, f_idx}, 1);
  }
  auto z = conv2d(fused_in, fuse_conv_.w, fuse_conv_.b, 1, 1);
  z = batch_norm(z, fuse_bn_.g, fuse_bn_.b, bn_state_, training);
  z = relu(z);
  out.logits = conv2d(z, cls_.w, cls_.b);
  return out;
}

}  // namespace visa
