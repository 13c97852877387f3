#include "petduet/model_config.hpp"

#include "petduet/error.hpp"

namespace petduet {

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("model config: ") + what);
  };
  require(dim > 0 && dim % 8 == 0, "dim must be a positive multiple of 8");
  require(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
  require(points > 0, "points must be positive");
  require(levels == 3, "the backbone produces exactly 3 levels");
  require(enhancer_layers >= 1, "enhancer_layers must be at least 1");
  require(decoder_layers >= 1, "decoder_layers must be at least 1");
  require(ffn_dim > 0, "ffn_dim must be positive");
  require(num_queries > 0, "num_queries must be positive");
  require(max_prompt_boxes > 0, "max_prompt_boxes must be positive");
  require(text_vocab > 0, "text_vocab must be positive");
  require(backbone_width > 0, "backbone_width must be positive");
  require(anchor_scale > 0.0 && anchor_scale < 1.0, "anchor_scale must be in (0,1)");
  require(prior_prob > 0.0 && prior_prob < 1.0, "prior_prob must be in (0,1)");
}

std::string to_string(OffsetInit init) { return init == OffsetInit::kGrid ? "grid" : "zero"; }

OffsetInit parse_offset_init(const std::string& name) {
  if (name == "grid") return OffsetInit::kGrid;
  if (name == "zero") return OffsetInit::kZero;
  throw ValidationError("unknown offset init '" + name + "'");
}

}  // namespace petduet
