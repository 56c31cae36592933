#include "stampnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stampnet {

Index ModelConfig::pooling_stages() const {
  return std::min<Index>(static_cast<Index>(encoder_channels.size()), 2);
}

Index ModelConfig::flattened_length() const {
  const Index shrink = Index{1} << pooling_stages();
  return encoder_channels.back() * (canvas_x / shrink) * (canvas_y / shrink);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (canvas_x <= 0 || canvas_y <= 0) fail("canvas", "extents must be positive");
  if (canvas_x % 4 != 0 || canvas_y % 4 != 0) fail("canvas", "extents must be divisible by 4 (two pooling stages)");
  if (stamp_x <= 0 || stamp_y <= 0) fail("stamp", "extents must be positive");
  if (stamp_x > canvas_x || stamp_y > canvas_y) fail("stamp", "stamp must fit on the canvas");
  if (shapes < 1) fail("shapes", "must be at least 1");
  if (stamps < 1) fail("stamps", "must be at least 1");
  if (!(v_max > 0.0)) fail("v_max", "must be positive");
  if (encoder_channels.empty()) fail("encoder_channels", "need at least one block");
  for (Index c : encoder_channels) {
    if (c < 1) fail("encoder_channels", "channel counts must be positive");
  }
  if (convs_per_block < 1) fail("convs_per_block", "must be at least 1");
  if (dense_width < 1) fail("dense_width", "must be positive");
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) fail("leaky_slope", "must lie in (0, 1)");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate", "must lie in [0, 1)");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) fail("bn_momentum", "must lie in [0, 1)");
  if (!(bn_epsilon > 0.0)) fail("bn_epsilon", "must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"canvas", {c.canvas_x, c.canvas_y}},
                     {"stamp", {c.stamp_x, c.stamp_y}},
                     {"shapes", c.shapes},
                     {"stamps", c.stamps},
                     {"v_max", c.v_max},
                     {"encoder_channels", c.encoder_channels},
                     {"convs_per_block", c.convs_per_block},
                     {"dense_width", c.dense_width},
                     {"leaky_slope", c.leaky_slope},
                     {"dropout_rate", c.dropout_rate},
                     {"bn_momentum", c.bn_momentum},
                     {"bn_epsilon", c.bn_epsilon}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("canvas")) {
    c.canvas_x = j.at("canvas").at(0).get<Index>();
    c.canvas_y = j.at("canvas").at(1).get<Index>();
  }
  if (j.contains("stamp")) {
    c.stamp_x = j.at("stamp").at(0).get<Index>();
    c.stamp_y = j.at("stamp").at(1).get<Index>();
  }
  c.shapes = j.value("shapes", c.shapes);
  c.stamps = j.value("stamps", c.stamps);
  c.v_max = j.value("v_max", c.v_max);
  c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
  c.convs_per_block = j.value("convs_per_block", c.convs_per_block);
  c.dense_width = j.value("dense_width", c.dense_width);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.bn_epsilon = j.value("bn_epsilon", c.bn_epsilon);
}

// ---------------------------------------------------------------------------
// Selection-and-localization and stamp layers (value level)

Tensor gumbel_softmax(const Tensor& logits, double tau, SeededRng& rng) {
  Tape tape;
  const Var row = tape.constant(logits.reshaped({1, logits.size()}));
  SeededRng* streams = &rng;
  return gumbel_softmax(row, tau, std::span<SeededRng>(streams, 1)).value().reshaped(logits.shape());
}

Var gumbel_softmax(const Var& logits, double tau, std::span<SeededRng> rngs) {
  if (!(tau > 0.0)) throw ConfigError("gumbel_softmax: temperature must be positive");
  const Tensor& l = logits.value();
  if (l.rank() != 2) throw DimensionError("gumbel_softmax: logits must be [B,K]");
  const Index rows = l.dim(0), k = l.dim(1);
  if (static_cast<Index>(rngs.size()) != rows) {
    throw DimensionError("gumbel_softmax: need one rng per row");
  }
  Tensor noise(l.shape());
  for (Index r = 0; r < rows; ++r) {
    for (Index i = 0; i < k; ++i) noise(r, i) = rngs[static_cast<std::size_t>(r)].gumbel();
  }
  return softmax(scale(add_constant(logits, noise), 1.0 / tau));
}

SLTensor build_sl_tensor(const ShapeLatent& latent) {
  Tape tape;
  const Index nx = latent.px.size(), ny = latent.py.size(), n = latent.ps.size();
  const Var sl = outer3(tape.constant(latent.px.reshaped({1, nx})), tape.constant(latent.py.reshaped({1, ny})),
                        tape.constant(latent.ps.reshaped({1, n})));
  return SLTensor{sl.value().reshaped({nx, ny, n})};
}

SLTensor aggregate_sl(std::span<const SLTensor> tensors) {
  if (tensors.empty()) throw DimensionError("aggregate_sl: need at least one tensor");
  SLTensor total{tensors.front().values};
  for (std::size_t i = 1; i < tensors.size(); ++i) {
    if (tensors[i].values.shape() != total.values.shape()) {
      throw DimensionError("aggregate_sl: SL tensors differ in shape");
    }
    total.values.vec() += tensors[i].values.vec();
  }
  return total;
}

Tensor stamp_layer_forward(const SLTensor& sl, const StampBank& bank, double v_max) {
  const Tensor& v = sl.values;
  if (v.rank() != 3) throw DimensionError("stamp_layer_forward: SL tensor must be [nx,ny,N]");
  Tape tape;
  const Var batched = tape.constant(v.reshaped({1, v.dim(0), v.dim(1), v.dim(2)}));
  const Var canvas = clip_values(stamp_render(batched, tape.reference(bank.omega)), 0.0, v_max);
  const Tensor& out = canvas.value();
  return out.reshaped({out.dim(1), out.dim(2)});
}

namespace {
Index argmax_lowest(const Tensor& p) {
  Index best = 0;
  for (Index i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best;
}
}  // namespace

std::vector<Prediction> extract_predictions(std::span<const ShapeLatent> latents, Index stamp_x,
                                            Index stamp_y) {
  std::vector<Prediction> preds;
  preds.reserve(latents.size());
  for (const ShapeLatent& l : latents) {
    preds.push_back(Prediction{BoundingBox{argmax_lowest(l.px), argmax_lowest(l.py), stamp_x, stamp_y},
                               argmax_lowest(l.ps)});
  }
  return preds;
}

void constrain_stamps(StampBank& bank, double v_max) { clamp_in_place(bank.omega, 0.0, v_max); }

// ---------------------------------------------------------------------------
// StampNet

StampNet::StampNet(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  build(init_seed);
}

std::size_t StampNet::add_parameter(std::string name, Tensor value, bool trainable) {
  params_.emplace_back(std::move(name), std::move(value), trainable);
  return params_.size() - 1;
}

void StampNet::build(std::uint64_t init_seed) {
  const ModelConfig& c = config_;
  std::uint64_t tag = 0;
  auto uniform = [&](Shape shape, double lo, double hi) {
    SeededRng rng = SeededRng::derive(init_seed, {0x1417, tag++});
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
  };
  // He-uniform bound for a leaky ReLU with the configured slope.
  const double gain = 2.0 / (1.0 + c.leaky_slope * c.leaky_slope);
  auto he = [&](Index fan_in) { return std::sqrt(3.0 * gain / static_cast<double>(fan_in)); };

  Index in_ch = 1;
  for (std::size_t b = 0; b < c.encoder_channels.size(); ++b) {
    const Index out_ch = c.encoder_channels[b];
    std::vector<ConvLayer> block;
    for (Index k = 0; k < c.convs_per_block; ++k) {
      const std::string p = "encoder.block" + std::to_string(b) + ".conv" + std::to_string(k);
      const double bound = he(in_ch * 9);
      ConvLayer layer{};
      layer.weight = add_parameter(p + ".weight", uniform({out_ch, in_ch, 3, 3}, -bound, bound));
      layer.bias = add_parameter(p + ".bias", Tensor({out_ch}));
      layer.gamma = add_parameter(p + ".bn_gamma", Tensor({out_ch}, 1.0));
      layer.beta = add_parameter(p + ".bn_beta", Tensor({out_ch}));
      layer.running_mean = add_parameter(p + ".bn_running_mean", Tensor({out_ch}), false);
      layer.running_var = add_parameter(p + ".bn_running_var", Tensor({out_ch}, 1.0), false);
      block.push_back(layer);
      in_ch = out_ch;
    }
    blocks_.push_back(std::move(block));
  }

  const Index flat = c.flattened_length();
  const double trunk_bound = he(flat);
  trunk_.weight = add_parameter("trunk.weight", uniform({c.dense_width, flat}, -trunk_bound, trunk_bound));
  trunk_.bias = add_parameter("trunk.bias", Tensor({c.dense_width}));

  const Index outs[3] = {c.grid_x(), c.grid_y(), c.stamps};
  const char* names[3] = {"x", "y", "s"};
  const double head_bound = std::sqrt(3.0 / static_cast<double>(c.dense_width));
  for (Index s = 0; s < c.shapes; ++s) {
    std::array<DenseLayer, 3> head{};
    for (int h = 0; h < 3; ++h) {
      const std::string p = "head" + std::to_string(s) + "." + names[h];
      head[h].weight = add_parameter(p + ".weight", uniform({outs[h], c.dense_width}, -head_bound, head_bound));
      head[h].bias = add_parameter(p + ".bias", Tensor({outs[h]}));
    }
    heads_.push_back(head);
  }

  stamps_ = add_parameter("stamps", uniform({c.stamps, c.stamp_x, c.stamp_y}, 0.0, 0.1 * c.v_max));
}

std::vector<Parameter*> StampNet::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> StampNet::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<Parameter*> StampNet::trainable_parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p.trainable) out.push_back(&p);
  }
  return out;
}

Parameter* StampNet::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void StampNet::set_stamp_bank(const StampBank& bank) {
  if (bank.omega.shape() != params_[stamps_].value.shape()) {
    throw DimensionError("set_stamp_bank: expected " + shape_string(params_[stamps_].value.shape()));
  }
  params_[stamps_].value = bank.omega;
}

void StampNet::constrain_stamps() { clamp_in_place(params_[stamps_].value, 0.0, config_.v_max); }

void StampNet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename Bind>
Var StampNet::encode(Tape& tape, const Tensor& images, Mode mode, std::span<SeededRng> rngs, Bind&& bind,
                     bool update_stats) {
  const ModelConfig& c = config_;
  if (images.rank() != 3 || images.dim(1) != c.canvas_x || images.dim(2) != c.canvas_y) {
    throw DimensionError("encoder: expected images [B," + std::to_string(c.canvas_x) + "," +
                         std::to_string(c.canvas_y) + "], got " + shape_string(images.shape()));
  }
  const Index batch = images.dim(0);
  BatchNormOptions bn{mode, c.bn_momentum, c.bn_epsilon};

  Var x = tape.constant(images.reshaped({batch, 1, c.canvas_x, c.canvas_y}));
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (const ConvLayer& layer : blocks_[b]) {
      x = add_channel_bias(conv2d(x, bind(layer.weight), Padding::same), bind(layer.bias));
      x = leaky_relu(x, c.leaky_slope);
      if (update_stats) {
        x = batchnorm(x, bind(layer.gamma), bind(layer.beta), params_[layer.running_mean].value,
                      params_[layer.running_var].value, bn);
      } else {
        Tensor rm = params_[layer.running_mean].value;
        Tensor rv = params_[layer.running_var].value;
        x = batchnorm(x, bind(layer.gamma), bind(layer.beta), rm, rv, bn);
      }
    }
    if (static_cast<Index>(b) < c.pooling_stages()) x = maxpool2d(x);
  }
  x = reshape(x, {batch, c.flattened_length()});
  x = leaky_relu(dense(x, bind(trunk_.weight), bind(trunk_.bias)), c.leaky_slope);
  return dropout(x, c.dropout_rate, mode, rngs);
}

template <typename Bind>
StampNet::Output StampNet::run(Tape& tape, const Tensor& images, double tau, std::span<SeededRng> rngs,
                               Mode mode, Bind&& bind, bool update_stats) {
  if (static_cast<Index>(rngs.size()) != images.dim(0)) {
    throw DimensionError("forward: need one rng stream per sample");
  }
  const Var features = encode(tape, images, mode, rngs, bind, update_stats);
  Output out;
  const Var bank = bind(stamps_);
  Var total;
  for (const auto& head : heads_) {
    ShapeVars latent;
    latent.px = gumbel_softmax(dense(features, bind(head[0].weight), bind(head[0].bias)), tau, rngs);
    latent.py = gumbel_softmax(dense(features, bind(head[1].weight), bind(head[1].bias)), tau, rngs);
    latent.ps = gumbel_softmax(dense(features, bind(head[2].weight), bind(head[2].bias)), tau, rngs);
    // Rendering each shape separately and summing equals rendering the
    // aggregated SL tensor, since the stamp layer is linear in it.
    const Var canvas = stamp_render_factored(latent.px, latent.py, latent.ps, bank);
    total = total.valid() ? add(total, canvas) : canvas;
    out.latents.push_back(latent);
  }
  out.reconstruction = clip_values(total, 0.0, config_.v_max);
  return out;
}

StampNet::Output StampNet::forward(Tape& tape, const Tensor& images, double tau, std::span<SeededRng> rngs,
                                   Mode mode) {
  auto bind = [&](std::size_t i) { return tape.parameter(params_[i]); };
  return run(tape, images, tau, rngs, mode, bind, mode == Mode::train);
}

Tensor StampNet::encoder_forward(const Tensor& images) const {
  Tape tape;
  auto bind = [&](std::size_t i) { return tape.reference(params_[i].value); };
  // Eval mode consumes no randomness; dropout is the identity.
  std::vector<SeededRng> unused(static_cast<std::size_t>(images.rank() == 3 ? images.dim(0) : 1));
  return const_cast<StampNet*>(this)->encode(tape, images, Mode::eval, unused, bind, false).value();
}

StampNet::Inference StampNet::infer(const Tensor& images, double tau, std::span<SeededRng> rngs) const {
  Tape tape;
  auto bind = [&](std::size_t i) { return tape.reference(params_[i].value); };
  // update_stats = false: the eval path only reads parameters.
  const Output out = const_cast<StampNet*>(this)->run(tape, images, tau, rngs, Mode::eval, bind, false);
  Inference result;
  result.reconstructions = out.reconstruction.value();
  const Index batch = images.dim(0);
  result.latents.resize(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    for (const ShapeVars& s : out.latents) {
      auto row = [b](const Tensor& t) {
        const Index k = t.dim(1);
        return Tensor({k}, Tensor::Vector(t.matrix(t.dim(0), k).row(b).transpose()));
      };
      result.latents[static_cast<std::size_t>(b)].push_back(
          ShapeLatent{row(s.px.value()), row(s.py.value()), row(s.ps.value())});
    }
  }
  return result;
}

}  // namespace stampnet
