#pragma once

#include <string>

namespace petduet {

/// How the offset projection of deformable attention starts out.
enum class OffsetInit {
  /// Zero weights and a radial bias: point p of head h starts (p+1) steps
  /// along direction 2*pi*h/heads.
  kGrid,
  /// Zero weights and zero bias: every point samples the reference center.
  kZero,
};

/// Architecture hyper-parameters shared by every network component.
struct ModelConfig {
  int dim = 64;
  int heads = 4;
  int points = 4;
  int levels = 3;
  int enhancer_layers = 2;
  int decoder_layers = 3;
  int ffn_dim = 128;
  int num_queries = 100;
  int max_prompt_boxes = 8;
  /// Rows of the text embedding table; category ids must be below this.
  int text_vocab = 32;
  /// Channel count of the first backbone stage; later stages widen.
  int backbone_width = 16;
  /// Multiplier on every enhancer residual branch (0 gives the identity).
  double residual_scale = 1.0;
  OffsetInit offset_init = OffsetInit::kGrid;
  /// Side of the level-0 proposal anchor; doubles per level.
  double anchor_scale = 0.05;
  /// Initial foreground probability encoded in the logit bias.
  double prior_prob = 0.01;

  /// Throws ValidationError on inconsistent values.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_string(OffsetInit init);
OffsetInit parse_offset_init(const std::string& name);

}  // namespace petduet
