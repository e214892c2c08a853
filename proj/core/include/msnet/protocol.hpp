#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msnet/data.hpp"
#include "msnet/metrics.hpp"
#include "msnet/train.hpp"

namespace msnet {

/// Hard segmentation of a whitened batch: foreground where p(fg) > p(bg), then largest component.
std::vector<BinaryMask> segment(ModelParams& model, const Tensor& images, SiteId site, bool keep_largest = true);

/// Sample-level scores for one site's test split. ASD is NaN where either mask is empty.
struct SiteScores {
  std::vector<double> dice;  // percent
  std::vector<double> asd;   // pixels
};

SiteScores evaluate_site(ModelParams& model, SiteId route, const std::vector<Sample>& test, int batch_size = 15);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population std, as the mean±std tables report
  std::size_t n = 0;
  std::size_t failures = 0;  // NaN entries excluded from mean/std
};
Summary summarize(std::span<const double> values);

/// Per-strategy record. Sample vectors are laid out seed-major, then site, then test sample,
/// so records of different strategies on the same corpus pair up entry by entry.
struct MetricsRecord {
  std::string label;
  std::vector<SiteScores> sites;  // pooled over seeds
  std::vector<double> overall_per_seed;

  std::vector<double> all_dice() const;
  std::vector<double> all_asd() const;
  void append(const std::vector<SiteScores>& seed_scores);
};

/// Evaluates every test split. Joint and Separate route everything to their single domain.
std::vector<SiteScores> evaluate_run(TrainRun& run, const Corpus& corpus);
std::vector<SiteScores> evaluate_separate(std::vector<TrainRun>& runs, const Corpus& corpus);

struct BnStatsRow {
  std::string model;  // strategy or separate model label
  int site = 0;
  std::string layer;
  double mean = 0.0;  // channel average of the running mean
  double var = 0.0;   // channel average of the running variance
  bool untrained = false;
};

/// One row per (site, normalization layer) of the universal network.
std::vector<BnStatsRow> bn_stats(ModelParams& model, const std::string& label);
/// One row per (separate model, layer); site = the model's training site.
std::vector<BnStatsRow> bn_stats_separate(std::vector<TrainRun>& runs);
void write_bn_stats_csv(const std::vector<BnStatsRow>& rows, const std::filesystem::path& path);

/// Largest per-layer gap of channel-averaged running means across sites.
struct LayerGap {
  std::string layer;
  double gap = 0.0;
};
std::vector<LayerGap> running_mean_gaps(const std::vector<BnStatsRow>& rows);

struct ProtocolConfig {
  std::vector<Strategy> strategies{Strategy::kJoint, Strategy::kSeparate, Strategy::kDsbn, Strategy::kMsnet};
  std::vector<std::uint64_t> seeds{42};
  std::vector<double> alpha_sweep;  // empty: no sweep
  ArchConfig arch;
  TrainConfig train;
  // Cache of trained runs keyed by (strategy, alpha, seed); empty disables caching.
  std::filesystem::path cache_dir;
  std::function<void(const std::string&)> log;
};

struct ProtocolReport {
  std::vector<MetricsRecord> strategies;
  std::vector<std::pair<double, MetricsRecord>> alpha_sweep;
  nlohmann::json summary;  // config, seeds, t-tests, sweep
};

ProtocolReport run_protocol(const Corpus& corpus, const ProtocolConfig& config);

/// Trains (or loads from the cache) one strategy run for a seed. Separate returns S runs.
/// `train_seconds`, when given, receives the wall time spent training, read back
/// from a `.seconds` file next to cached checkpoints.
std::vector<TrainRun> trained_runs(Strategy strategy, const Corpus& corpus, const ArchConfig& arch, const TrainConfig& train,
                                   const std::filesystem::path& cache_dir,
                                   const std::function<void(const std::string&)>& log = {},
                                   double* train_seconds = nullptr);

/// Rows: strategy, site (1..S or "overall"), metric, mean, std, n.
void write_report_csv(const ProtocolReport& report, const std::filesystem::path& path);
void write_report_json(const ProtocolReport& report, const std::filesystem::path& path);

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json ttest_matrix(const std::vector<MetricsRecord>& records);

}  // namespace msnet
