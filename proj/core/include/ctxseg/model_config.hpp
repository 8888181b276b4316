#pragma once

#include <cstddef>
#include <string>

namespace ctxseg {

enum class Aggregation { Symmetric, SoftmaxTemperature };
enum class FusionStrategy { DcFusion, Cat, Dot, None };

std::string to_string(Aggregation a);
std::string to_string(FusionStrategy s);
Aggregation parse_aggregation(const std::string& text);  // "sym" | "softmax-temp"
FusionStrategy parse_fusion(const std::string& text);    // "dcfusion" | "cat" | "dot" | "none"

// Architecture of the whole segmentation network.
struct ModelConfig {
  std::size_t classes = 4;
  std::size_t patch = 32;       // P, tile side in pixels
  std::size_t token_side = 8;   // l, pixels per token side; P / l tokens per side
  std::size_t hidden = 32;      // L
  std::size_t gcn_layers = 3;   // T
  Aggregation aggregation = Aggregation::Symmetric;
  FusionStrategy fusion = FusionStrategy::DcFusion;
  std::size_t fusion_layers = 2;  // attention blocks
  std::size_t heads = 4;
  bool feed_forward = false;    // adds a pre-norm MLP sub-layer to each block
  std::size_t stem_kernel = 3;  // 3: padded 3x3 convs; 2: stride-pure 2x2 patchify convs

  std::size_t token_grid() const { return patch / token_side; }  // b
  std::size_t token_count() const { return token_grid() * token_grid(); }  // b^2
  bool uses_context() const { return fusion != FusionStrategy::None; }

  // Throws ConfigError / ShapeError on inconsistent settings.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace ctxseg
