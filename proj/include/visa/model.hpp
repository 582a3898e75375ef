#pragma once

#include "visa/ops.hpp"
#include "visa/params.hpp"

namespace visa {

// Index-branch hyperparameters. The ablation toggles keep the forward shape
// contract intact; they only remove the corresponding computation and its
// parameters.
struct VimbConfig {
  int d = 64;             // embedding width
  int window = 8;         // attention window side s
  int heads = 8;          // d must be divisible by heads
  int encoder_layers = 2;
  int ssm_layers = 2;
  int slots = 6;          // K
  int slot_iters = 3;     // T
  int ffn_mult = 4;
  bool use_rel_bias = true;
  bool use_slots = true;
  bool use_broadcast = true;
};

struct SrabConfig {
  std::array<int, 3> widths{64, 128, 256};  // strictly increasing
  int units_per_level = 2;
  int se_reduction = 4;
  int cbam_kernel = 7;  // odd
  bool multi_scale_skips = true;  // false: decoder ignores encoder skips
};

struct ModelConfig {
  VimbConfig vimb;
  SrabConfig srab;
  bool use_vimb = true;  // false: radiance stream only, no auxiliary head
};

/// Throws ConfigError on any violated invariant.
void validate_model_config(const ModelConfig& cfg);

// Window partition for attention: [B,d,H,W] -> [B*Nw, s*s, d] with
// Nw = (H/s)(W/s); merge is its exact inverse. Both throw when s does not
// divide the extent, naming s, H, W.
TensorPtr window_partition(const TensorPtr& x, int s);
TensorPtr window_merge(const TensorPtr& t, int s, int64_t batch, int64_t h, int64_t w);

/// Two-stream segmentation network. The index stream runs windowed
/// self-attention, a state-space scan over the raster sequence, and slot
/// grouping with a mean-slot broadcast; the radiance stream is a residual
/// attention encoder-decoder. Both emit fusion_width-channel maps at input
/// resolution which the fusion head turns into 3-class logits.
class VisaModel {
 public:
  VisaModel(const ModelConfig& cfg, uint64_t seed, Dtype dt = Dtype::F32);

  struct Output {
    TensorPtr logits;      // [B, 3, H, W]
    TensorPtr aux_logits;  // [B, 3, H, W] from the index branch; null if disabled
  };

  /// indices: [B, 5, H, W] standardized index planes (unused and may be null
  /// when the index branch is disabled); radiance: [B, 5, H, W] standardized
  /// bands. H and W must be divisible by 4 and by the attention window.
  Output forward(const TensorPtr& indices, const TensorPtr& radiance, bool training);

  // Branch entry points, exposed for targeted tests.
  TensorPtr vimb_forward(const TensorPtr& indices, TensorPtr* aux_out);
  TensorPtr srab_forward(const TensorPtr& radiance);

  // Single-component entry points; `tokens` is [N, n, d] for attention and
  // [B, L, d] for the sequence modules, `x` is [B, C_level, H, W].
  TensorPtr run_attention_layer(const TensorPtr& tokens, int layer);
  TensorPtr run_ssm_layer(const TensorPtr& tokens, int layer);
  TensorPtr run_slot_attention(const TensorPtr& tokens);  // -> [B, K, d]
  TensorPtr run_encoder_unit(const TensorPtr& x, int level, int unit);

  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  Dtype dtype() const { return dt_; }
  int fusion_width() const { return cfg_.srab.widths[0]; }
  BatchNormState& bn_state() { return bn_state_; }
  const BatchNormState& bn_state() const { return bn_state_; }
  int64_t param_count() const { return params_.total_elements(); }

 private:
  struct Lin {
    TensorPtr w, b;
  };
  struct Ln {
    TensorPtr g, b;
  };
  struct EncoderLayer {
    Ln ln1, ln2;
    TensorPtr wq, wk, wv, wo;
    TensorPtr bias_row, bias_col;  // null when rel bias is disabled
    Lin ffn1, ffn2;
  };
  struct SsmLayer {
    TensorPtr wg, raw_a, bbar, proj;
  };
  struct SlotModule {
    TensorPtr init;  // [K, d] learned deterministic initialization
    Ln ln_in, ln_slot, ln_mlp;
    TensorPtr wk, wv, wq;
    GruParams gru;
    Lin mlp1, mlp2;
  };
  struct RaUnit {
    Lin conv1, conv2;  // 3x3
    Lin se1, se2;      // bottleneck on pooled channels
    Lin cbam;          // 7x7 over (avg,max) channel pools
  };

  TensorPtr attention_block(const TensorPtr& tokens, const EncoderLayer& layer);
  TensorPtr ssm_block(const TensorPtr& tokens, const SsmLayer& layer);
  TensorPtr slot_state(const TensorPtr& tokens);  // [B, K, d] after T iterations
  TensorPtr residual_attention_unit(const TensorPtr& x, const RaUnit& u);

  ModelConfig cfg_;
  Dtype dt_;
  ParamRegistry params_;
  BatchNormState bn_state_;

  // vimb
  Lin proj_;
  Ln embed_ln_;
  std::vector<EncoderLayer> enc_;
  std::vector<SsmLayer> ssm_;
  SlotModule slots_;
  TensorPtr broadcast_w_;
  Lin out_conv_;
  Ln out_ln_;
  Lin refine1_, refine2_;
  Ln refine_ln_;
  Lin aux_;

  // srab
  Lin stem_;
  std::vector<std::vector<RaUnit>> enc_units_;
  std::array<Lin, 2> down_;
  std::array<Lin, 2> up_;     // index by target level (1 then 0)
  std::array<Lin, 2> merge_;
  std::array<RaUnit, 2> dec_unit_;

  // fusion
  Lin fuse_conv_;
  Ln fuse_bn_;
  Lin cls_;
};

}  // namespace visa
