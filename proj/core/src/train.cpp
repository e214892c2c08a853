#include "msnet/train.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "msnet/checkpoint.hpp"
#include "msnet/errors.hpp"

namespace msnet {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

SiteId route(const TrainRun& run, SiteId batch_site) {
  return run.model.config.num_sites == 1 ? SiteId{1} : batch_site;
}

std::vector<ParamRef> concat(std::vector<ParamRef> a, const std::vector<ParamRef>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<ParamRef> aux_step_refs(ModelParams& model) {
  std::vector<ParamRef> refs = encoder_parameters(model);
  for (int s = 1; s <= model.config.num_sites; ++s) refs = concat(std::move(refs), aux_parameters(model, SiteId{s}));
  return refs;
}

std::vector<ParamRef> uni_step_refs(ModelParams& model) {
  return concat(encoder_parameters(model), decoder_parameters(model));
}

void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

void check_batches(const TrainRun& run, std::span<const SiteBatch> batches) {
  if (batches.size() != run.site_indices.size())
    throw SiteRoutingError("expected " + std::to_string(run.site_indices.size()) + " site batches, got " +
                           std::to_string(batches.size()));
  for (std::size_t i = 0; i < batches.size(); ++i)
    if (batches[i].site.index() != run.site_indices[i])
      throw SiteRoutingError("batch " + std::to_string(i) + " carries site " + std::to_string(batches[i].site.value) +
                             ", run expects site " + std::to_string(run.site_indices[i] + 1));
}

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kJoint: return "joint";
    case Strategy::kSeparate: return "separate";
    case Strategy::kDsbn: return "dsbn";
    case Strategy::kMsnet: return "msnet";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "joint") return Strategy::kJoint;
  if (name == "separate") return Strategy::kSeparate;
  if (name == "dsbn") return Strategy::kDsbn;
  if (name == "msnet") return Strategy::kMsnet;
  throw ConfigError("unknown strategy '" + name + "' (expected joint, separate, dsbn or msnet)");
}

void TrainConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0,1]");
  if (lr_step < 1) throw ConfigError("lr_step must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must be in [0,1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must be in [0,1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be > 0");
  try {
    weights.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
}

double lr_at(int t, const TrainConfig& config) {
  if (t < 0) throw ContractError("lr_at: negative iteration");
  return config.lr0 * std::pow(config.lr_decay, t / config.lr_step);
}

void adam_step(std::span<Parameter* const> params, AdamState& state, double lr, const TrainConfig& config) {
  if (state.m.empty() && state.v.empty()) {
    for (Parameter* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam state holds " + std::to_string(state.m.size()) + " moments for " +
                         std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    if (!state.m[i].same_shape(p.value) || !state.v[i].same_shape(p.value) || !p.grad.same_shape(p.value))
      throw DimensionError("adam shape mismatch for parameter " + p.name + " " + shape_to_string(p.value.shape()));
  }
  state.step += 1;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* w = params[i]->value.data();
    const double* g = params[i]->grad.data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const std::size_t n = params[i]->value.numel();
    for (std::size_t k = 0; k < n; ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      double mhat = m[k] / c1, vhat = v[k] / c2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + config.adam_epsilon);
    }
  }
}

void write_loss_csv(const LossHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write loss history " + path.string());
  const std::size_t s = history.empty() ? 0 : history.front().uni.size();
  out << "iteration";
  for (const char* kind : {"aux", "uni", "kt"})
    for (std::size_t i = 1; i <= s; ++i) out << ',' << "L_" << kind << '_' << i;
  out << ",lr\n";
  out.precision(17);
  for (const LossRecord& r : history) {
    out << r.iteration;
    for (const auto* v : {&r.aux, &r.uni, &r.kt})
      for (std::size_t i = 0; i < s; ++i) out << ',' << (i < v->size() ? (*v)[i] : kNaN);
    out << ',' << r.lr << '\n';
  }
}

TrainRun make_run(Strategy strategy, ArchConfig arch, const TrainConfig& config, SiteId separate_site) {
  config.validate();
  arch.validate();
  TrainRun run;
  run.strategy = strategy;
  run.seed = config.seed;
  const int data_sites = arch.num_sites;
  if (strategy == Strategy::kSeparate) {
    if (separate_site.value < 1 || separate_site.value > data_sites)
      throw SiteRoutingError("separate site " + std::to_string(separate_site.value) + " outside 1.." +
                             std::to_string(data_sites));
    run.site_indices = {separate_site.index()};
    run.seed = config.seed + static_cast<std::uint64_t>(separate_site.value);
  } else {
    for (int s = 0; s < data_sites; ++s) run.site_indices.push_back(s);
  }
  if (strategy == Strategy::kJoint || strategy == Strategy::kSeparate) arch.num_sites = 1;
  run.model = build_model(arch, run.seed, BuildOptions{strategy == Strategy::kMsnet});
  return run;
}

std::vector<SiteBatch> iteration_batches(const TrainRun& run, std::span<const std::vector<Sample>* const> datasets, int t,
                                         const TrainConfig& config) {
  std::vector<const std::vector<Sample>*> chosen;
  for (int idx : run.site_indices) {
    if (idx >= static_cast<int>(datasets.size()))
      throw SiteRoutingError("run expects site " + std::to_string(idx + 1) + " but only " +
                             std::to_string(datasets.size()) + " datasets were given");
    chosen.push_back(datasets[static_cast<std::size_t>(idx)]);
  }
  const std::uint64_t step = static_cast<std::uint64_t>(t);
  Rng sampling = make_rng(run.seed, "sampling", step);
  Rng augment_rng = make_rng(run.seed, "augment", step);
  const int side = static_cast<int>(chosen.front()->front().width());
  AugmentOptions options{default_shift_max(side), 0.5};
  return make_iteration_batches(chosen, config.batch_size, sampling, config.augment ? &augment_rng : nullptr, options);
}

LossRecord supervised_step(TrainRun& run, std::span<const SiteBatch> batches, double lr, const TrainConfig& config) {
  check_batches(run, batches);
  ModelParams& model = run.model;
  std::vector<ParamRef> refs = uni_step_refs(model);
  std::vector<Parameter*> params = parameters_of(refs);
  std::vector<Parameter*> kernels = kernels_of(refs);

  Graph graph;
  std::vector<Var> losses;
  LossRecord rec;
  rec.lr = lr;
  const std::size_t s = batches.size();
  rec.aux.assign(s, kNaN);
  rec.kt.assign(s, kNaN);
  for (const SiteBatch& b : batches) {
    UniversalOutput out = forward_universal(graph, model, graph.constant(b.images), route(run, b.site), NormMode::kTrain);
    losses.push_back(dice_loss(out.probs, b.onehot));
    rec.uni.push_back(losses.back().value().item());
  }
  Var objective = supervised_objective(graph, losses, kernels, config.weights);
  graph.backward(objective);
  zero_grads(params);
  graph.accumulate_parameter_grads();
  adam_step(params, run.uni_adam, lr, config);
  return rec;
}

std::vector<double> msnet_aux_step(TrainRun& run, std::span<const SiteBatch> batches, double lr, const TrainConfig& config) {
  check_batches(run, batches);
  ModelParams& model = run.model;
  if (!model.has_aux()) throw ContractError("msnet auxiliary step needs auxiliary branches");
  std::vector<ParamRef> refs = aux_step_refs(model);
  std::vector<Parameter*> params = parameters_of(refs);
  std::vector<Parameter*> kernels = kernels_of(refs);

  Graph graph;
  std::vector<Var> losses;
  std::vector<double> values;
  for (const SiteBatch& b : batches) {
    EncoderFeatures f = forward_encoder(graph, model, graph.constant(b.images), b.site, NormMode::kTrain);
    Var probs = forward_aux(graph, model, f, b.site, NormMode::kTrain);
    losses.push_back(dice_loss(probs, b.onehot));
    values.push_back(losses.back().value().item());
  }
  Var objective = aux_objective(graph, losses, model.config.num_sites, kernels, config.weights);
  graph.backward(objective);
  zero_grads(params);
  graph.accumulate_parameter_grads();
  adam_step(params, run.aux_adam, lr, config);
  return values;
}

UniStepLosses msnet_uni_step(TrainRun& run, std::span<const SiteBatch> batches, double lr, const TrainConfig& config) {
  check_batches(run, batches);
  ModelParams& model = run.model;
  if (!model.has_aux()) throw ContractError("msnet universal step needs auxiliary branches");
  std::vector<ParamRef> refs = uni_step_refs(model);
  std::vector<Parameter*> params = parameters_of(refs);
  std::vector<Parameter*> kernels = kernels_of(refs);

  Graph graph;
  std::vector<UniTerms> terms;
  UniStepLosses out;
  for (const SiteBatch& b : batches) {
    UniversalOutput u = forward_universal(graph, model, graph.constant(b.images), b.site, NormMode::kTrain);
    UniTerms term;
    term.supervised = dice_loss(u.probs, b.onehot);
    // Auxiliary prediction on the same encoder features, outside the differentiated graph.
    Graph frozen(GradMode::kDisabled);
    Var aux_probs = forward_aux(frozen, model, detach_features(frozen, u.features), b.site, NormMode::kBatchStats);
    Tensor target = onehot_argmax(aux_probs.value());
    Var kt = kt_loss(u.probs, target);
    if (config.knowledge_transfer) term.kt = kt;
    out.kt.push_back(kt.value().item());
    out.uni.push_back(term.supervised.value().item());
    terms.push_back(term);
  }
  Var objective = uni_objective(graph, terms, model.config.num_sites, kernels, config.weights);
  graph.backward(objective);
  zero_grads(params);
  graph.accumulate_parameter_grads();
  adam_step(params, run.uni_adam, lr, config);
  return out;
}

void train_iteration(TrainRun& run, std::span<const std::vector<Sample>* const> datasets, const TrainConfig& config) {
  const int t = run.iteration;
  const double lr = lr_at(t, config);
  std::vector<SiteBatch> batches = iteration_batches(run, datasets, t, config);
  LossRecord rec;
  if (run.strategy == Strategy::kMsnet) {
    rec.lr = lr;
    rec.aux = msnet_aux_step(run, batches, lr, config);
    UniStepLosses u = msnet_uni_step(run, batches, lr, config);
    rec.uni = std::move(u.uni);
    rec.kt = std::move(u.kt);
  } else {
    rec = supervised_step(run, batches, lr, config);
  }
  rec.iteration = t;
  run.history.push_back(std::move(rec));
  run.iteration = t + 1;
}

void train(TrainRun& run, std::span<const std::vector<Sample>* const> datasets, const TrainConfig& config,
           const TrainOptions& options) {
  config.validate();
  while (run.iteration < config.iterations) {
    train_iteration(run, datasets, config);
    if (options.on_iteration) options.on_iteration(run);
    if (!options.checkpoint.empty() && options.checkpoint_every > 0 && run.iteration % options.checkpoint_every == 0 &&
        run.iteration < config.iterations)
      save_checkpoint(run, options.checkpoint, CheckpointContent::kResumable);
  }
  if (!options.checkpoint.empty()) save_checkpoint(run, options.checkpoint, CheckpointContent::kResumable);
}

std::vector<const std::vector<Sample>*> train_splits(const Corpus& corpus) {
  std::vector<const std::vector<Sample>*> out;
  for (const SiteData& sd : corpus.sites) out.push_back(&sd.train);
  return out;
}

namespace {

TrainRun train_strategy(Strategy strategy, const Corpus& corpus, ArchConfig arch, const TrainConfig& config) {
  arch.num_sites = corpus.num_sites();
  arch.input_size = corpus.image_size;
  TrainRun run = make_run(strategy, arch, config);
  auto sets = train_splits(corpus);
  train(run, sets, config);
  return run;
}

}  // namespace

TrainRun train_joint(const Corpus& corpus, const ArchConfig& arch, const TrainConfig& config) {
  return train_strategy(Strategy::kJoint, corpus, arch, config);
}

TrainRun train_dsbn(const Corpus& corpus, const ArchConfig& arch, const TrainConfig& config) {
  return train_strategy(Strategy::kDsbn, corpus, arch, config);
}

TrainRun train_msnet(const Corpus& corpus, const ArchConfig& arch, const TrainConfig& config) {
  return train_strategy(Strategy::kMsnet, corpus, arch, config);
}

std::vector<TrainRun> train_separate(const Corpus& corpus, const ArchConfig& arch_in, const TrainConfig& config) {
  ArchConfig arch = arch_in;
  arch.num_sites = corpus.num_sites();
  arch.input_size = corpus.image_size;
  auto sets = train_splits(corpus);
  std::vector<TrainRun> runs;
  for (int s = 1; s <= corpus.num_sites(); ++s) {
    TrainRun run = make_run(Strategy::kSeparate, arch, config, SiteId{s});
    train(run, sets, config);
    runs.push_back(std::move(run));
  }
  return runs;
}

}  // namespace msnet
