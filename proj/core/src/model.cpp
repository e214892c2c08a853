#include "msnet/model.hpp"

#include <cmath>
#include <random>

#include "msnet/errors.hpp"
#include "msnet/ops.hpp"
#include "msnet/rng.hpp"

namespace msnet {

void ArchConfig::validate() const {
  if (input_size < 1 || base_channels < 1 || depth < 1 || bottleneck_blocks < 1 || num_classes < 2 || num_sites < 1) {
    throw ConfigError("arch: input_size, base_channels, depth, bottleneck_blocks, num_sites must be >= 1 and num_classes >= 2");
  }
  if (input_size % (1 << depth) != 0) {
    throw ConfigError("arch: input_size " + std::to_string(input_size) + " is not divisible by 2^depth = " +
                      std::to_string(1 << depth));
  }
}

std::vector<LayerShape> layer_table(const ArchConfig& config) {
  config.validate();
  const int s = config.input_size;
  const int d = config.depth;
  std::vector<LayerShape> rows;
  rows.push_back({"input", s, 1});
  rows.push_back({"convolution 1", s, config.stage_channels(0)});
  rows.push_back({"residual block 1", s, config.stage_channels(0)});
  for (int i = 1; i <= d; ++i) {
    const int size = s >> i;
    rows.push_back({"pooling " + std::to_string(i), size, config.stage_channels(i - 1)});
    if (i < d) {
      rows.push_back({"residual block " + std::to_string(i + 1), size, config.stage_channels(i)});
    } else {
      for (int j = 1; j <= config.bottleneck_blocks; ++j) {
        rows.push_back({"residual block " + std::to_string(d + 1) + "_" + std::to_string(j), size, config.stage_channels(d)});
      }
    }
  }
  for (int level = d - 1; level >= 0; --level) {
    const int index = 2 * d + 1 - level;
    rows.push_back({"upsample " + std::to_string(index), s >> level, config.stage_channels(level)});
    rows.push_back({"residual block " + std::to_string(index), s >> level, config.stage_channels(level)});
  }
  rows.push_back({"output " + std::to_string(2 * d + 2), s, config.num_classes});
  return rows;
}

namespace {

ConvLayer make_conv(Rng& rng, const std::string& name, int c_in, int c_out, int k, int stride, bool transposed) {
  ConvLayer layer;
  const Shape kshape = transposed ? Shape{std::size_t(c_in), std::size_t(c_out), std::size_t(k), std::size_t(k)}
                                  : Shape{std::size_t(c_out), std::size_t(c_in), std::size_t(k), std::size_t(k)};
  Tensor kernel(kshape);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(c_in * k * k)));
  for (double& v : kernel.values()) v = normal(rng);
  layer.kernel = Parameter{name + ".kernel", std::move(kernel), Tensor()};
  layer.bias = Parameter{name + ".bias", Tensor(Shape{std::size_t(c_out)}), Tensor()};
  layer.stride = stride;
  layer.padding = transposed ? 0 : (k - 1) / 2;
  layer.transposed = transposed;
  return layer;
}

template <class Norm>
struct NormFactory;

template <>
struct NormFactory<DsbnState> {
  int sites;
  DsbnState operator()(int channels, const std::string& name) const { return DsbnState::create(channels, sites, name); }
};

template <>
struct NormFactory<BnState> {
  BnState operator()(int channels, const std::string& name) const { return BnState::create(channels, name); }
};

template <class Norm>
ResidualBlock<Norm> make_block(Rng& rng, const NormFactory<Norm>& norm, const std::string& name, int c_in, int c_out) {
  ResidualBlock<Norm> block{
      c_in != c_out ? std::optional<ConvLayer>(make_conv(rng, name + ".projection", c_in, c_out, 1, 1, false)) : std::nullopt,
      norm(c_out, name + ".norm1"),
      ConvLayer{},
      norm(c_out, name + ".norm2"),
      ConvLayer{}};
  block.conv1 = make_conv(rng, name + ".conv1", c_out, c_out, 3, 1, false);
  block.conv2 = make_conv(rng, name + ".conv2", c_out, c_out, 3, 1, false);
  return block;
}

template <class Norm>
Decoder<Norm> make_decoder(Rng& rng, const NormFactory<Norm>& norm, const std::string& name, const ArchConfig& c) {
  Decoder<Norm> dec;
  for (int level = c.depth - 1; level >= 0; --level) {
    const int index = 2 * c.depth + 1 - level;
    const int c_in = c.stage_channels(level + 1);
    const int c_out = c.stage_channels(level);
    const std::string up = name + ".upsample" + std::to_string(index);
    dec.upsample.push_back(UpsampleBlock<Norm>{norm(c_in, up + ".norm"), make_conv(rng, up + ".deconv", c_in, c_out, 3, 2, true)});
    dec.blocks.push_back(make_block(rng, norm, name + ".block" + std::to_string(index), c_out, c_out));
  }
  dec.out_norm = norm(c.stage_channels(0), name + ".out_norm");
  dec.out_conv = make_conv(rng, name + ".out_conv", c.stage_channels(0), c.num_classes, 1, 1, false);
  return dec;
}

struct NormContext {
  SiteId site;
  NormMode mode;
};

Var normalize(Graph& g, Var x, DsbnState& n, const NormContext& ctx) { return dsbn_forward(g, x, ctx.site, n, ctx.mode); }
Var normalize(Graph& g, Var x, BnState& n, const NormContext& ctx) { return bn_forward(g, x, n, ctx.mode); }

Var apply_conv(Graph& g, Var x, ConvLayer& layer) {
  Var k = g.parameter(layer.kernel);
  Var b = g.parameter(layer.bias);
  return layer.transposed ? transposed_conv2d(x, k, b, layer.stride) : conv2d(x, k, b, layer.stride, layer.padding);
}

template <class Norm>
Var apply_block(Graph& g, Var x, ResidualBlock<Norm>& block, const NormContext& ctx) {
  if (block.projection) x = apply_conv(g, x, *block.projection);
  Var h = apply_conv(g, relu(normalize(g, x, block.norm1, ctx)), block.conv1);
  h = apply_conv(g, relu(normalize(g, h, block.norm2, ctx)), block.conv2);
  return add(x, h);
}

template <class Norm>
Var apply_decoder(Graph& g, const EncoderFeatures& features, Decoder<Norm>& dec, const NormContext& ctx) {
  Var x = features.bottom;
  const std::size_t levels = dec.upsample.size();
  if (features.skips.size() != levels) throw ContractError("decoder: encoder feature count does not match depth");
  for (std::size_t i = 0; i < levels; ++i) {
    const std::size_t level = levels - 1 - i;
    UpsampleBlock<Norm>& up = dec.upsample[i];
    x = apply_conv(g, relu(normalize(g, x, up.norm, ctx)), up.deconv);
    x = add(x, features.skips[level]);
    x = apply_block(g, x, dec.blocks[i], ctx);
  }
  x = apply_conv(g, relu(normalize(g, x, dec.out_norm, ctx)), dec.out_conv);
  return softmax_channel(x);
}

void check_images(const ModelParams& params, const Tensor& images) {
  const auto s = static_cast<std::size_t>(params.config.input_size);
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != s || images.dim(3) != s) {
    throw DimensionError("model input must be [b,1," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                         shape_to_string(images.shape()));
  }
}

void collect_norm(std::vector<ParamRef>& out, BnState& n) {
  out.push_back({&n.gamma, ParamRole::kGamma});
  out.push_back({&n.beta, ParamRole::kBeta});
}

void collect_norm(std::vector<ParamRef>& out, DsbnState& n) {
  for (BnState& s : n.per_site) collect_norm(out, s);
}

void collect_conv(std::vector<ParamRef>& out, ConvLayer& c) {
  out.push_back({&c.kernel, ParamRole::kKernel});
  out.push_back({&c.bias, ParamRole::kBias});
}

template <class Norm>
void collect_block(std::vector<ParamRef>& out, ResidualBlock<Norm>& b) {
  if (b.projection) collect_conv(out, *b.projection);
  collect_norm(out, b.norm1);
  collect_conv(out, b.conv1);
  collect_norm(out, b.norm2);
  collect_conv(out, b.conv2);
}

template <class Norm>
void collect_decoder(std::vector<ParamRef>& out, Decoder<Norm>& d) {
  for (std::size_t i = 0; i < d.upsample.size(); ++i) {
    collect_norm(out, d.upsample[i].norm);
    collect_conv(out, d.upsample[i].deconv);
    collect_block(out, d.blocks[i]);
  }
  collect_norm(out, d.out_norm);
  collect_conv(out, d.out_conv);
}

void norms_of(std::vector<BnState*>& out, BnState& n) { out.push_back(&n); }
void norms_of(std::vector<BnState*>& out, DsbnState& n) {
  for (BnState& s : n.per_site) out.push_back(&s);
}

template <class Norm>
void block_norms(std::vector<BnState*>& out, ResidualBlock<Norm>& b) {
  norms_of(out, b.norm1);
  norms_of(out, b.norm2);
}

template <class Norm>
void decoder_norms(std::vector<BnState*>& out, Decoder<Norm>& d) {
  for (std::size_t i = 0; i < d.upsample.size(); ++i) {
    norms_of(out, d.upsample[i].norm);
    block_norms(out, d.blocks[i]);
  }
  norms_of(out, d.out_norm);
}

}  // namespace

ModelParams build_model(const ArchConfig& config, std::uint64_t seed, BuildOptions options) {
  config.validate();
  ModelParams m;
  m.config = config;
  const NormFactory<DsbnState> dsbn{config.num_sites};

  Rng enc_rng = make_rng(seed, "init.encoder");
  m.encoder.stem = make_conv(enc_rng, "encoder.conv1", 1, config.stage_channels(0), 3, 1, false);
  m.encoder.blocks.push_back(make_block(enc_rng, dsbn, "encoder.block1", config.stage_channels(0), config.stage_channels(0)));
  for (int i = 1; i < config.depth; ++i) {
    m.encoder.blocks.push_back(make_block(enc_rng, dsbn, "encoder.block" + std::to_string(i + 1), config.stage_channels(i - 1),
                                          config.stage_channels(i)));
  }
  for (int j = 1; j <= config.bottleneck_blocks; ++j) {
    const int c_in = config.stage_channels(j == 1 ? config.depth - 1 : config.depth);
    m.encoder.blocks.push_back(make_block(enc_rng, dsbn,
                                          "encoder.block" + std::to_string(config.depth + 1) + "_" + std::to_string(j), c_in,
                                          config.stage_channels(config.depth)));
  }

  Rng dec_rng = make_rng(seed, "init.decoder");
  m.decoder = make_decoder(dec_rng, dsbn, "decoder", config);

  if (options.auxiliary) {
    for (int s = 1; s <= config.num_sites; ++s) {
      Rng aux_rng = make_rng(seed, "init.aux", static_cast<std::uint64_t>(s));
      m.aux.push_back(make_decoder(aux_rng, NormFactory<BnState>{}, "aux" + std::to_string(s), config));
    }
  }

  // Summation skips need the deconv output to match the encoder feature at every level.
  for (int level = 0; level < config.depth; ++level) {
    const auto& deconv = m.decoder.upsample[config.depth - 1 - level].deconv;
    const std::size_t skip_channels = m.encoder.blocks[level].conv2.kernel.value.dim(0);
    if (deconv.kernel.value.dim(1) != skip_channels) throw ConfigError("arch: skip connection channel mismatch");
  }
  return m;
}

EncoderFeatures forward_encoder(Graph& graph, ModelParams& params, Var images, SiteId site, NormMode mode) {
  check_images(params, images.value());
  if (site.value < 1 || site.value > params.config.num_sites) {
    throw SiteRoutingError("site " + std::to_string(site.value) + " outside 1.." + std::to_string(params.config.num_sites));
  }
  const NormContext ctx{site, mode};
  const int depth = params.config.depth;
  EncoderFeatures f;
  Var x = apply_conv(graph, images, params.encoder.stem);
  x = apply_block(graph, x, params.encoder.blocks[0], ctx);
  f.skips.push_back(x);
  for (int i = 1; i <= depth; ++i) {
    x = maxpool2d(x, 3, 2, 1);
    if (i < depth) {
      x = apply_block(graph, x, params.encoder.blocks[i], ctx);
      f.skips.push_back(x);
    } else {
      for (int j = 0; j < params.config.bottleneck_blocks; ++j) x = apply_block(graph, x, params.encoder.blocks[depth + j], ctx);
    }
  }
  f.bottom = x;
  return f;
}

UniversalOutput forward_universal(Graph& graph, ModelParams& params, Var images, SiteId site, NormMode mode) {
  UniversalOutput out;
  out.features = forward_encoder(graph, params, images, site, mode);
  out.probs = apply_decoder(graph, out.features, params.decoder, NormContext{site, mode});
  return out;
}

Var forward_aux(Graph& graph, ModelParams& params, const EncoderFeatures& features, SiteId site, NormMode mode) {
  if (!params.has_aux()) throw ContractError("forward_aux: model has no auxiliary branches (stripped for deployment)");
  if (site.value < 1 || site.value > static_cast<int>(params.aux.size())) {
    throw SiteRoutingError("no auxiliary branch for site " + std::to_string(site.value));
  }
  return apply_decoder(graph, features, params.aux[static_cast<std::size_t>(site.index())], NormContext{site, mode});
}

EncoderFeatures detach_features(Graph& target, const EncoderFeatures& features) {
  EncoderFeatures out;
  for (const Var& s : features.skips) out.skips.push_back(target.constant(s.value()));
  out.bottom = target.constant(features.bottom.value());
  return out;
}

Tensor predict(ModelParams& params, const Tensor& images, SiteId site) {
  Graph graph(GradMode::kDisabled);
  return forward_universal(graph, params, graph.constant(images), site, NormMode::kEval).probs.value();
}

ModelParams strip_aux(const ModelParams& params) {
  ModelParams out;
  out.config = params.config;
  out.encoder = params.encoder;
  out.decoder = params.decoder;
  return out;
}

std::vector<ParamRef> encoder_parameters(ModelParams& params) {
  std::vector<ParamRef> out;
  collect_conv(out, params.encoder.stem);
  for (auto& b : params.encoder.blocks) collect_block(out, b);
  return out;
}

std::vector<ParamRef> decoder_parameters(ModelParams& params) {
  std::vector<ParamRef> out;
  collect_decoder(out, params.decoder);
  return out;
}

std::vector<ParamRef> aux_parameters(ModelParams& params, SiteId site) {
  if (site.value < 1 || site.value > static_cast<int>(params.aux.size())) {
    throw SiteRoutingError("no auxiliary branch for site " + std::to_string(site.value));
  }
  std::vector<ParamRef> out;
  collect_decoder(out, params.aux[static_cast<std::size_t>(site.index())]);
  return out;
}

std::vector<Parameter*> kernels_of(const std::vector<ParamRef>& refs) {
  std::vector<Parameter*> out;
  for (const ParamRef& r : refs)
    if (r.role == ParamRole::kKernel) out.push_back(r.param);
  return out;
}

std::vector<Parameter*> parameters_of(const std::vector<ParamRef>& refs) {
  std::vector<Parameter*> out;
  out.reserve(refs.size());
  for (const ParamRef& r : refs) out.push_back(r.param);
  return out;
}

std::vector<BnState*> all_bn_states(ModelParams& params) {
  std::vector<BnState*> out;
  for (auto& b : params.encoder.blocks) block_norms(out, b);
  decoder_norms(out, params.decoder);
  for (auto& a : params.aux) decoder_norms(out, a);
  return out;
}

std::vector<NamedTensor> state_tensors(ModelParams& params) {
  std::vector<NamedTensor> out;
  auto add_refs = [&](std::vector<ParamRef> refs) {
    for (const ParamRef& r : refs) out.push_back({r.param->name, &r.param->value});
  };
  add_refs(encoder_parameters(params));
  add_refs(decoder_parameters(params));
  for (int s = 1; s <= static_cast<int>(params.aux.size()); ++s) add_refs(aux_parameters(params, SiteId{s}));
  for (BnState* bn : all_bn_states(params)) {
    out.push_back({bn->name + ".running_mean", &bn->running_mean});
    out.push_back({bn->name + ".running_var", &bn->running_var});
  }
  return out;
}

std::vector<NormLayerRef> universal_norm_layers(ModelParams& params) {
  std::vector<NormLayerRef> out;
  auto block = [&](ResidualBlock<DsbnState>& b, const std::string& name) {
    out.push_back({name + ".norm1", &b.norm1});
    out.push_back({name + ".norm2", &b.norm2});
  };
  const int depth = params.config.depth;
  for (std::size_t i = 0; i < params.encoder.blocks.size(); ++i) {
    const auto idx = static_cast<int>(i);
    block(params.encoder.blocks[i], idx < depth ? "encoder.block" + std::to_string(idx + 1)
                                                : "encoder.block" + std::to_string(depth + 1) + "_" + std::to_string(idx - depth + 1));
  }
  for (std::size_t i = 0; i < params.decoder.upsample.size(); ++i) {
    const int index = depth + 2 + static_cast<int>(i);
    out.push_back({"decoder.upsample" + std::to_string(index) + ".norm", &params.decoder.upsample[i].norm});
    block(params.decoder.blocks[i], "decoder.block" + std::to_string(index));
  }
  out.push_back({"decoder.out_norm", &params.decoder.out_norm});
  return out;
}

std::size_t parameter_count(ModelParams& params) {
  std::size_t n = 0;
  auto count = [&](const std::vector<ParamRef>& refs) {
    for (const ParamRef& r : refs) n += r.param->value.numel();
  };
  count(encoder_parameters(params));
  count(decoder_parameters(params));
  for (int s = 1; s <= static_cast<int>(params.aux.size()); ++s) count(aux_parameters(params, SiteId{s}));
  return n;
}

}  // namespace msnet
