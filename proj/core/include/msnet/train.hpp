#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msnet/data.hpp"
#include "msnet/loss.hpp"
#include "msnet/model.hpp"

namespace msnet {

enum class Strategy { kJoint, kSeparate, kDsbn, kMsnet };

std::string to_string(Strategy s);
/// Accepts joint, separate, dsbn, msnet. Throws ConfigError otherwise.
Strategy parse_strategy(const std::string& name);

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 5;
  LossWeights weights;
  double lr0 = 1e-3;
  double lr_decay = 0.95;
  int lr_step = 500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 42;
  bool augment = true;
  // false drops the transfer term from the universal objective (auxiliary step still runs)
  bool knowledge_transfer = true;

  void validate() const;
};

double lr_at(int t, const TrainConfig& config);

/// Moments are aligned with the parameter list passed to adam_step; the list
/// order must stay fixed for the lifetime of the state.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam on Parameter::grad. Throws DimensionError when a moment
/// or gradient shape disagrees with its parameter.
void adam_step(std::span<Parameter* const> params, AdamState& state, double lr, const TrainConfig& config);

/// Per-site losses of one iteration. Entries not produced by a strategy are NaN.
struct LossRecord {
  int iteration = 0;
  double lr = 0.0;
  std::vector<double> aux;
  std::vector<double> uni;
  std::vector<double> kt;
};
using LossHistory = std::vector<LossRecord>;

void write_loss_csv(const LossHistory& history, const std::filesystem::path& path);

/// Everything a training loop owns; enough to resume bit-exactly.
struct TrainRun {
  Strategy strategy = Strategy::kMsnet;
  ModelParams model;
  AdamState aux_adam;  // theta_e + all theta_aux (msnet step 1)
  AdamState uni_adam;  // theta_e + theta_d
  int iteration = 0;   // next iteration to run
  std::uint64_t seed = 0;
  // datasets this run trains on, 0-based; Separate runs hold one entry
  std::vector<int> site_indices;
  LossHistory history;
};

/// Fresh run. Joint and Separate use a single normalization domain; DSBN and
/// MS-Net route by site. Only MS-Net carries auxiliary branches. Separate
/// needs `separate_site` and seeds its model with seed + site id.
TrainRun make_run(Strategy strategy, ArchConfig arch, const TrainConfig& config, SiteId separate_site = SiteId{1});

/// The S batches of iteration t for the run's sites.
std::vector<SiteBatch> iteration_batches(const TrainRun& run, std::span<const std::vector<Sample>* const> datasets, int t,
                                         const TrainConfig& config);

/// Supervised step for Joint / Separate / DSBN: dice + L2, update theta_e and theta_d.
LossRecord supervised_step(TrainRun& run, std::span<const SiteBatch> batches, double lr, const TrainConfig& config);

/// MS-Net first update: auxiliary branches and encoder.
std::vector<double> msnet_aux_step(TrainRun& run, std::span<const SiteBatch> batches, double lr, const TrainConfig& config);

struct UniStepLosses {
  std::vector<double> uni;
  std::vector<double> kt;
};
/// MS-Net second update: universal decoder and encoder against ground
/// truth and one-hot auxiliary predictions.
UniStepLosses msnet_uni_step(TrainRun& run, std::span<const SiteBatch> batches, double lr, const TrainConfig& config);

/// One full iteration at run.iteration; appends to history and advances.
void train_iteration(TrainRun& run, std::span<const std::vector<Sample>* const> datasets, const TrainConfig& config);

struct TrainOptions {
  std::filesystem::path checkpoint;  // empty: no checkpoints
  int checkpoint_every = 0;          // 0: only at the end
  std::function<void(const TrainRun&)> on_iteration;
};

/// Runs until run.iteration == config.iterations. `datasets` holds every site
/// in order; the run picks its own subset.
void train(TrainRun& run, std::span<const std::vector<Sample>* const> datasets, const TrainConfig& config,
           const TrainOptions& options = {});

/// Whole-strategy conveniences over a corpus' training splits.
TrainRun train_joint(const Corpus& corpus, const ArchConfig& arch, const TrainConfig& config);
TrainRun train_dsbn(const Corpus& corpus, const ArchConfig& arch, const TrainConfig& config);
TrainRun train_msnet(const Corpus& corpus, const ArchConfig& arch, const TrainConfig& config);
std::vector<TrainRun> train_separate(const Corpus& corpus, const ArchConfig& arch, const TrainConfig& config);

std::vector<const std::vector<Sample>*> train_splits(const Corpus& corpus);

}  // namespace msnet
