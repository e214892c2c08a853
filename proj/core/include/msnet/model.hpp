#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msnet/graph.hpp"
#include "msnet/normalization.hpp"
#include "msnet/site.hpp"

namespace msnet {

/// Width/resolution-scalable residual U-Net configuration. Stage i has
/// base_channels * 2^i channels; the full-size backbone is
/// {384, 32, 4, 2, 2, S}.
struct ArchConfig {
  int input_size = 64;
  int base_channels = 4;  // desk scale; 32 gives the full-size channel sequence
  int depth = 4;
  int bottleneck_blocks = 2;
  int num_classes = 2;
  int num_sites = 3;

  void validate() const;
  int stage_channels(int stage) const { return base_channels << stage; }
  bool operator==(const ArchConfig&) const = default;
};

/// One row of the feature-size table: name, spatial extent, channel count.
struct LayerShape {
  std::string name;
  int size = 0;
  int channels = 0;
  bool operator==(const LayerShape&) const = default;
};

/// Feature sizes per layer, computed symbolically (nothing is allocated).
std::vector<LayerShape> layer_table(const ArchConfig& config);

struct ConvLayer {
  Parameter kernel;
  Parameter bias;
  int stride = 1;
  int padding = 0;
  bool transposed = false;
};

/// Pre-activation block: [projection] -> (norm, relu, conv) x2 + identity shortcut.
template <class Norm>
struct ResidualBlock {
  std::optional<ConvLayer> projection;
  Norm norm1;
  ConvLayer conv1;
  Norm norm2;
  ConvLayer conv2;
};

/// norm -> relu -> stride-2 deconv, summed with the encoder feature of the same resolution.
template <class Norm>
struct UpsampleBlock {
  Norm norm;
  ConvLayer deconv;
};

template <class Norm>
struct Decoder {
  std::vector<UpsampleBlock<Norm>> upsample;  // deepest level first
  std::vector<ResidualBlock<Norm>> blocks;
  Norm out_norm;
  ConvLayer out_conv;
};

struct Encoder {
  ConvLayer stem;
  // blocks[0] at full resolution, blocks[1..depth-1] after each pooling,
  // then bottleneck_blocks blocks at the lowest resolution.
  std::vector<ResidualBlock<DsbnState>> blocks;
};

/// Universal encoder/decoder (DSBN, one domain per site) plus optional
/// per-site auxiliary decoders (plain BN).
struct ModelParams {
  ArchConfig config;
  Encoder encoder;
  Decoder<DsbnState> decoder;
  std::vector<Decoder<BnState>> aux;

  bool has_aux() const { return !aux.empty(); }
};

struct BuildOptions {
  bool auxiliary = true;
};

/// Deterministic in (config, seed). Kernels ~ N(0, 2/fan_in), biases 0, gamma 1, beta 0.
ModelParams build_model(const ArchConfig& config, std::uint64_t seed, BuildOptions options = {});

struct EncoderFeatures {
  std::vector<Var> skips;  // one per resolution level, full resolution first
  Var bottom;
};

struct UniversalOutput {
  Var probs;
  EncoderFeatures features;
};

EncoderFeatures forward_encoder(Graph& graph, ModelParams& params, Var images, SiteId site, NormMode mode);
UniversalOutput forward_universal(Graph& graph, ModelParams& params, Var images, SiteId site, NormMode mode);
/// Runs auxiliary branch `site` on shared encoder features.
Var forward_aux(Graph& graph, ModelParams& params, const EncoderFeatures& features, SiteId site, NormMode mode);

/// Copies features into `target` as constants (no gradient path back).
EncoderFeatures detach_features(Graph& target, const EncoderFeatures& features);

/// Eval-mode softmax output of the universal network, without recording gradients.
Tensor predict(ModelParams& params, const Tensor& images, SiteId site);

/// Deployment copy: encoder and decoder only.
ModelParams strip_aux(const ModelParams& params);

enum class ParamRole { kKernel, kBias, kGamma, kBeta };

struct ParamRef {
  Parameter* param;
  ParamRole role;
};

std::vector<ParamRef> encoder_parameters(ModelParams& params);
std::vector<ParamRef> decoder_parameters(ModelParams& params);
std::vector<ParamRef> aux_parameters(ModelParams& params, SiteId site);

std::vector<Parameter*> kernels_of(const std::vector<ParamRef>& refs);
std::vector<Parameter*> parameters_of(const std::vector<ParamRef>& refs);

/// Every persistent tensor (parameters and running statistics) with a unique name.
struct NamedTensor {
  std::string name;
  Tensor* tensor;
};
std::vector<NamedTensor> state_tensors(ModelParams& params);

/// Every normalization layer of the universal network (name, per-site states).
struct NormLayerRef {
  std::string name;
  DsbnState* state;
};
std::vector<NormLayerRef> universal_norm_layers(ModelParams& params);

std::size_t parameter_count(ModelParams& params);

}  // namespace msnet

namespace msnet {

/// Every BnState in the model, universal layers first.
std::vector<BnState*> all_bn_states(ModelParams& params);

}  // namespace msnet
