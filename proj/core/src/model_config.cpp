#include "ctxseg/model_config.hpp"

#include "ctxseg/error.hpp"

namespace ctxseg {

std::string to_string(Aggregation a) {
  return a == Aggregation::Symmetric ? "sym" : "softmax-temp";
}

std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::DcFusion: return "dcfusion";
    case FusionStrategy::Cat: return "cat";
    case FusionStrategy::Dot: return "dot";
    case FusionStrategy::None: return "none";
  }
  return "none";
}

Aggregation parse_aggregation(const std::string& text) {
  if (text == "sym") return Aggregation::Symmetric;
  if (text == "softmax-temp") return Aggregation::SoftmaxTemperature;
  throw ConfigError("unknown aggregation '" + text + "' (expected sym or softmax-temp)");
}

FusionStrategy parse_fusion(const std::string& text) {
  if (text == "dcfusion") return FusionStrategy::DcFusion;
  if (text == "cat") return FusionStrategy::Cat;
  if (text == "dot") return FusionStrategy::Dot;
  if (text == "none") return FusionStrategy::None;
  throw ConfigError("unknown fusion strategy '" + text + "' (expected dcfusion, cat, dot or none)");
}

void ModelConfig::validate() const {
  if (classes < 2) throw ConfigError("classes must be at least 2");
  if (hidden < 4 || hidden % 4 != 0) throw ConfigError("hidden must be a positive multiple of 4");
  if (heads == 0 || hidden % heads != 0) throw ConfigError("hidden must be divisible by heads");
  if (fusion == FusionStrategy::DcFusion && fusion_layers == 0) throw ConfigError("dcfusion needs fusion_layers >= 1");
  if (stem_kernel != 2 && stem_kernel != 3) throw ConfigError("stem_kernel must be 2 or 3");
  // The encoder halves the resolution three times, so tokens are 8x8 pixels.
  if (token_side != 8) throw ConfigError("token_side must be 8 (three stride-2 encoder stages)");
  if (patch == 0 || patch % token_side != 0) {
    throw ShapeError("patch " + std::to_string(patch) + " is not divisible by token side " + std::to_string(token_side));
  }
}

}  // namespace ctxseg
