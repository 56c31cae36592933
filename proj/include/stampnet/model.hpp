#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stampnet/box.hpp"
#include "stampnet/ops.hpp"
#include "stampnet/rng.hpp"
#include "stampnet/tape.hpp"

namespace stampnet {

/// Architecture and canvas geometry. Positions use a grid of
/// canvas - stamp + 1 top-left offsets per axis.
struct ModelConfig {
  Index canvas_x = 84;
  Index canvas_y = 84;
  Index stamp_x = 28;
  Index stamp_y = 28;
  Index shapes = 2;   // M, shapes predicted per image
  Index stamps = 10;  // N, size of the stamp bank
  double v_max = 1.0;

  // Encoder: one block per entry, each `convs_per_block` same-padded 3x3
  // convolutions (leaky ReLU then BatchNorm); the first two blocks end in a
  // 2x2 max pool. Then a dense trunk of `dense_width` units with dropout.
  std::vector<Index> encoder_channels{32, 64, 128};
  Index convs_per_block = 2;
  Index dense_width = 512;
  double leaky_slope = 0.1;
  double dropout_rate = 0.25;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;

  Index grid_x() const { return canvas_x - stamp_x + 1; }
  Index grid_y() const { return canvas_y - stamp_y + 1; }
  Index pooling_stages() const;
  /// Length of the flattened encoder map fed to the dense trunk.
  Index flattened_length() const;
  Index feature_length() const { return dense_width; }

  /// Throws ConfigError naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Categorical vectors for one shape: x position, y position, stamp id.
struct ShapeLatent {
  Tensor px;
  Tensor py;
  Tensor ps;
};

/// Selection-and-localization tensor over (x, y, stamp), shape [nx, ny, N].
struct SLTensor {
  Tensor values;
};

/// The learned stamps, shape [N, stamp_x, stamp_y].
struct StampBank {
  Tensor omega;
};

struct Prediction {
  BoundingBox box;
  Index stamp = 0;
};

/// softmax((logits + g) / tau) with g standard Gumbel noise drawn from `rng`.
Tensor gumbel_softmax(const Tensor& logits, double tau, SeededRng& rng);
/// Row-wise relaxed sampling of [B,K] logits, row b drawing from rngs[b].
Var gumbel_softmax(const Var& logits, double tau, std::span<SeededRng> rngs);

/// Outer product pX (x) pY (x) pS.
SLTensor build_sl_tensor(const ShapeLatent& latent);
/// Elementwise sum over shapes.
SLTensor aggregate_sl(std::span<const SLTensor> tensors);
/// Pastes every stamp at every grid cell weighted by the SL mass there, then
/// clamps the canvas to [0, v_max]. Returns [canvas_x, canvas_y].
Tensor stamp_layer_forward(const SLTensor& sl, const StampBank& bank, double v_max);
/// Argmax per vector (lowest index on ties) turned into stamp-sized boxes.
std::vector<Prediction> extract_predictions(std::span<const ShapeLatent> latents, Index stamp_x,
                                            Index stamp_y);
void constrain_stamps(StampBank& bank, double v_max);

class StampNet {
 public:
  StampNet(ModelConfig config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }

  /// Every learnable tensor and running statistic in checkpoint order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> trainable_parameters();
  Parameter* find(const std::string& name);

  Parameter& stamp_parameter() { return params_[stamps_]; }
  StampBank stamp_bank() const { return StampBank{params_[stamps_].value}; }
  void set_stamp_bank(const StampBank& bank);
  /// Projects the stamps back into [0, v_max].
  void constrain_stamps();
  void zero_grad();

  struct ShapeVars {
    Var px;  // [B, nx]
    Var py;  // [B, ny]
    Var ps;  // [B, N]
  };
  struct Output {
    Var reconstruction;  // [B, canvas_x, canvas_y]
    std::vector<ShapeVars> latents;
  };

  /// Records the full forward pass on `tape`. images: [B, canvas_x, canvas_y];
  /// rngs holds one stream per sample for dropout and Gumbel noise. In train
  /// mode BatchNorm running statistics are updated.
  Output forward(Tape& tape, const Tensor& images, double tau, std::span<SeededRng> rngs, Mode mode);

  /// Encoder features [B, F] in eval mode (no randomness involved).
  Tensor encoder_forward(const Tensor& images) const;

  struct Inference {
    Tensor reconstructions;                        // [B, canvas_x, canvas_y]
    std::vector<std::vector<ShapeLatent>> latents;  // [sample][shape]
  };
  /// Eval-mode forward that leaves the model untouched; safe to call
  /// concurrently on a shared instance.
  Inference infer(const Tensor& images, double tau, std::span<SeededRng> rngs) const;

 private:
  // Layers refer to entries of params_ by position so copies stay valid.
  struct ConvLayer {
    std::size_t weight, bias, gamma, beta, running_mean, running_var;
  };
  struct DenseLayer {
    std::size_t weight, bias;
  };

  void build(std::uint64_t init_seed);
  std::size_t add_parameter(std::string name, Tensor value, bool trainable = true);

  template <typename Bind>
  Var encode(Tape& tape, const Tensor& images, Mode mode, std::span<SeededRng> rngs, Bind&& bind,
             bool update_stats);
  template <typename Bind>
  Output run(Tape& tape, const Tensor& images, double tau, std::span<SeededRng> rngs, Mode mode,
             Bind&& bind, bool update_stats);

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<std::vector<ConvLayer>> blocks_;
  DenseLayer trunk_{};
  std::vector<std::array<DenseLayer, 3>> heads_;
  std::size_t stamps_ = 0;
};

}  // namespace stampnet
