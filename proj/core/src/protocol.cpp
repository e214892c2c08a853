#include "msnet/protocol.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "msnet/checkpoint.hpp"
#include "msnet/errors.hpp"

namespace msnet {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json summary_json(const Summary& s) {
  return {{"mean", number(s.mean)}, {"std", number(s.std)}, {"n", s.n}, {"failures", s.failures}};
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t corpus_fingerprint(const Corpus& corpus) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const SiteData& sd : corpus.sites)
    for (const auto* split : {&sd.train, &sd.test})
      for (const Sample& s : *split) {
        h = fnv1a(h, s.image.data(), s.image.numel() * sizeof(double));
        h = fnv1a(h, s.mask.data(), s.mask.size());
      }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::vector<BinaryMask> segment(ModelParams& model, const Tensor& images, SiteId site, bool keep_largest) {
  Tensor probs = predict(model, images, site);
  const std::size_t b = probs.dim(0), h = probs.dim(2), w = probs.dim(3), hw = h * w;
  std::vector<BinaryMask> out;
  for (std::size_t n = 0; n < b; ++n) {
    BinaryMask m(h, w);
    const double* bg = probs.data() + n * 2 * hw;
    const double* fg = bg + hw;
    for (std::size_t k = 0; k < hw; ++k) m.bits[k] = fg[k] > bg[k] ? 1 : 0;
    out.push_back(keep_largest ? largest_component(m) : std::move(m));
  }
  return out;
}

SiteScores evaluate_site(ModelParams& model, SiteId route, const std::vector<Sample>& test, int batch_size) {
  SiteScores scores;
  for (std::size_t start = 0; start < test.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(test.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      idx.push_back(i);
    SiteBatch batch = make_batch(test, idx, nullptr, AugmentOptions{});
    std::vector<BinaryMask> pred = segment(model, batch.images, route);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const Sample& s = test[idx[i]];
      BinaryMask truth(s.height(), s.width(), s.mask);
      scores.dice.push_back(100.0 * dice_coefficient(pred[i], truth));
      scores.asd.push_back(pred[i].empty() || truth.empty() ? kNaN : avg_symmetric_distance(pred[i], truth));
    }
  }
  return scores;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  double sum = 0.0;
  for (double v : values) {
    if (std::isnan(v)) {
      ++s.failures;
      continue;
    }
    sum += v;
    ++s.n;
  }
  if (s.n == 0) {
    s.mean = s.std = kNaN;
    return s;
  }
  s.mean = sum / static_cast<double>(s.n);
  double ss = 0.0;
  for (double v : values)
    if (!std::isnan(v)) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(s.n));
  return s;
}

std::vector<double> MetricsRecord::all_dice() const {
  std::vector<double> out;
  for (const SiteScores& s : sites) out.insert(out.end(), s.dice.begin(), s.dice.end());
  return out;
}

std::vector<double> MetricsRecord::all_asd() const {
  std::vector<double> out;
  for (const SiteScores& s : sites) out.insert(out.end(), s.asd.begin(), s.asd.end());
  return out;
}

void MetricsRecord::append(const std::vector<SiteScores>& seed_scores) {
  if (sites.empty()) sites.resize(seed_scores.size());
  if (sites.size() != seed_scores.size()) throw ContractError("metrics record site count changed between seeds");
  std::vector<double> pooled;
  for (std::size_t s = 0; s < seed_scores.size(); ++s) {
    sites[s].dice.insert(sites[s].dice.end(), seed_scores[s].dice.begin(), seed_scores[s].dice.end());
    sites[s].asd.insert(sites[s].asd.end(), seed_scores[s].asd.begin(), seed_scores[s].asd.end());
    pooled.insert(pooled.end(), seed_scores[s].dice.begin(), seed_scores[s].dice.end());
  }
  overall_per_seed.push_back(summarize(pooled).mean);
}

std::vector<SiteScores> evaluate_run(TrainRun& run, const Corpus& corpus) {
  if (run.strategy == Strategy::kSeparate) throw ContractError("separate runs are evaluated with evaluate_separate");
  if (run.model.config.num_sites != 1 && run.model.config.num_sites != corpus.num_sites())
    throw SiteRoutingError("model has " + std::to_string(run.model.config.num_sites) + " sites, corpus has " +
                           std::to_string(corpus.num_sites()));
  std::vector<SiteScores> out;
  for (int s = 1; s <= corpus.num_sites(); ++s) {
    SiteId route = run.model.config.num_sites == 1 ? SiteId{1} : SiteId{s};
    out.push_back(evaluate_site(run.model, route, corpus.sites[static_cast<std::size_t>(s - 1)].test));
  }
  return out;
}

std::vector<SiteScores> evaluate_separate(std::vector<TrainRun>& runs, const Corpus& corpus) {
  if (static_cast<int>(runs.size()) != corpus.num_sites())
    throw SiteRoutingError("need one separate model per site");
  std::vector<SiteScores> out;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    if (runs[s].site_indices != std::vector<int>{static_cast<int>(s)})
      throw SiteRoutingError("separate model " + std::to_string(s + 1) + " was trained on another site");
    out.push_back(evaluate_site(runs[s].model, SiteId{1}, corpus.sites[s].test));
  }
  return out;
}

std::vector<BnStatsRow> bn_stats(ModelParams& model, const std::string& label) {
  std::vector<BnStatsRow> rows;
  auto layers = universal_norm_layers(model);
  for (int s = 1; s <= model.config.num_sites; ++s)
    for (const NormLayerRef& layer : layers) {
      const BnState& bn = layer.state->site(SiteId{s});
      auto avg = [](const Tensor& t) {
        auto v = t.values();
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      };
      rows.push_back({label, s, layer.name, avg(bn.running_mean), avg(bn.running_var), bn.updates == 0});
    }
  return rows;
}

std::vector<BnStatsRow> bn_stats_separate(std::vector<TrainRun>& runs) {
  std::vector<BnStatsRow> rows;
  for (TrainRun& run : runs) {
    const int site = run.site_indices.at(0) + 1;
    for (BnStatsRow r : bn_stats(run.model, "separate" + std::to_string(site))) {
      r.site = site;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

void write_bn_stats_csv(const std::vector<BnStatsRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "model,site,layer,mean,var,untrained\n";
  for (const BnStatsRow& r : rows)
    out << r.model << ',' << r.site << ',' << r.layer << ',' << r.mean << ',' << r.var << ',' << (r.untrained ? 1 : 0)
        << '\n';
}

std::vector<LayerGap> running_mean_gaps(const std::vector<BnStatsRow>& rows) {
  std::map<std::string, std::pair<double, double>> range;
  std::vector<std::string> order;
  for (const BnStatsRow& r : rows) {
    auto [it, fresh] = range.try_emplace(r.layer, r.mean, r.mean);
    if (fresh) order.push_back(r.layer);
    it->second.first = std::min(it->second.first, r.mean);
    it->second.second = std::max(it->second.second, r.mean);
  }
  std::vector<LayerGap> out;
  for (const std::string& name : order) out.push_back({name, range[name].second - range[name].first});
  return out;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},     {"batch_size", c.batch_size},     {"alpha", c.weights.alpha},
          {"eta", c.weights.eta},           {"lr0", c.lr0},                   {"lr_decay", c.lr_decay},
          {"lr_step", c.lr_step},           {"adam_beta1", c.adam_beta1},     {"adam_beta2", c.adam_beta2},
          {"adam_epsilon", c.adam_epsilon}, {"seed", c.seed},                 {"augment", c.augment},
          {"knowledge_transfer", c.knowledge_transfer}};
}

std::vector<TrainRun> trained_runs(Strategy strategy, const Corpus& corpus, const ArchConfig& arch_in,
                                   const TrainConfig& train_config, const std::filesystem::path& cache_dir,
                                   const std::function<void(const std::string&)>& log, double* train_seconds) {
  ArchConfig arch = arch_in;
  if (train_seconds) *train_seconds = 0.0;
  // wall time is kept beside the checkpoint so the checkpoint bytes stay deterministic
  auto seconds_file = [](const std::filesystem::path& f) { return std::filesystem::path(f.string() + ".seconds"); };
  auto stored_seconds = [&](const std::filesystem::path& f) {
    double s = 0.0;
    std::ifstream in(seconds_file(f));
    if (in) in >> s;
    return s;
  };
  arch.num_sites = corpus.num_sites();
  arch.input_size = corpus.image_size;
  nlohmann::json key{{"strategy", to_string(strategy)},
                     {"arch", arch},
                     {"train", to_json(train_config)},
                     {"corpus", hex(corpus_fingerprint(corpus))}};
  const std::string stem = to_string(strategy) + "_s" + std::to_string(train_config.seed) + "_" +
                           hex(derive_seed(0, key.dump(), 0));
  auto sets = train_splits(corpus);
  if (!cache_dir.empty()) std::filesystem::create_directories(cache_dir);
  std::vector<TrainRun> runs;
  const int count = strategy == Strategy::kSeparate ? corpus.num_sites() : 1;
  for (int i = 1; i <= count; ++i) {
    std::filesystem::path file;
    if (!cache_dir.empty()) {
      file = cache_dir / (count > 1 ? stem + "_site" + std::to_string(i) + ".ckpt" : stem + ".ckpt");
      if (std::filesystem::exists(file)) {
        TrainRun run = load_checkpoint(file);
        if (run.iteration == train_config.iterations) {
          if (log) log("cached " + file.filename().string());
          if (train_seconds) *train_seconds += stored_seconds(file);
          runs.push_back(std::move(run));
          continue;
        }
      }
    }
    TrainRun run = std::filesystem::exists(file) ? load_checkpoint(file)
                                                   : make_run(strategy, arch, train_config, SiteId{i});
    const auto t0 = std::chrono::steady_clock::now();
    TrainOptions options;
    options.checkpoint = file;
    options.checkpoint_every = 250;
    train(run, sets, train_config, options);
    if (!file.empty()) save_checkpoint(run, file, CheckpointContent::kModel);  // drop optimizer moments once finished
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!file.empty()) {
      secs += stored_seconds(file);  // earlier partial runs
      std::ofstream(seconds_file(file)) << secs << "\n";
    }
    if (train_seconds) *train_seconds += secs;
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "trained %s seed %llu alpha %.2f%s in %.1f s", to_string(strategy).c_str(),
                    static_cast<unsigned long long>(train_config.seed), train_config.weights.alpha,
                    count > 1 ? (" site " + std::to_string(i)).c_str() : "", secs);
      log(buf);
    }
    runs.push_back(std::move(run));
  }
  return runs;
}

nlohmann::json ttest_matrix(const std::vector<MetricsRecord>& records) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < records.size(); ++i)
    for (std::size_t j = i + 1; j < records.size(); ++j) {
      std::vector<double> di = records[i].all_dice(), dj = records[j].all_dice();
      std::vector<double> ai, aj;
      std::vector<double> asd_i = records[i].all_asd(), asd_j = records[j].all_asd();
      for (std::size_t k = 0; k < asd_i.size() && k < asd_j.size(); ++k)
        if (std::isfinite(asd_i[k]) && std::isfinite(asd_j[k])) {
          ai.push_back(asd_i[k]);
          aj.push_back(asd_j[k]);
        }
      nlohmann::json row{{"a", records[i].label}, {"b", records[j].label}};
      if (di.size() == dj.size() && di.size() >= 2) {
        TTestResult t = paired_t_test(di, dj);
        row["dice"] = {{"t", number(t.t)}, {"p", t.p}, {"dof", t.dof}, {"degenerate", t.degenerate},
                       {"significant", t.p < 0.05}};
      }
      if (ai.size() >= 2) {
        TTestResult t = paired_t_test(ai, aj);
        row["asd"] = {{"t", number(t.t)}, {"p", t.p}, {"dof", t.dof}, {"degenerate", t.degenerate},
                      {"significant", t.p < 0.05}};
      }
      out.push_back(row);
    }
  return out;
}

namespace {

nlohmann::json record_json(const MetricsRecord& r) {
  nlohmann::json sites = nlohmann::json::array();
  for (std::size_t s = 0; s < r.sites.size(); ++s)
    sites.push_back({{"site", s + 1},
                     {"dice", summary_json(summarize(r.sites[s].dice))},
                     {"asd", summary_json(summarize(r.sites[s].asd))}});
  nlohmann::json per_seed = nlohmann::json::array();
  for (double v : r.overall_per_seed) per_seed.push_back(number(v));
  return {{"label", r.label},
          {"overall", {{"dice", summary_json(summarize(r.all_dice()))}, {"asd", summary_json(summarize(r.all_asd()))}}},
          {"overall_dice_per_seed", per_seed},
          {"sites", sites}};
}

}  // namespace

ProtocolReport run_protocol(const Corpus& corpus, const ProtocolConfig& config) {
  if (corpus.sites.empty()) throw DataError("protocol needs a corpus with at least one site");
  for (const SiteData& sd : corpus.sites)
    if (sd.test.empty()) throw DataError("site " + std::to_string(sd.profile.site.value) + " has no test split");
  if (config.seeds.empty()) throw ConfigError("protocol needs at least one seed");
  if (config.strategies.empty() && config.alpha_sweep.empty()) throw ConfigError("protocol has nothing to run");
  if (!config.cache_dir.empty()) std::filesystem::create_directories(config.cache_dir);

  ProtocolReport report;
  auto run_one = [&](Strategy strategy, const TrainConfig& tc, MetricsRecord& record) {
    std::vector<TrainRun> runs = trained_runs(strategy, corpus, config.arch, tc, config.cache_dir, config.log);
    record.append(strategy == Strategy::kSeparate ? evaluate_separate(runs, corpus) : evaluate_run(runs.front(), corpus));
  };

  for (Strategy strategy : config.strategies) {
    MetricsRecord record;
    record.label = to_string(strategy);
    for (std::uint64_t seed : config.seeds) {
      TrainConfig tc = config.train;
      tc.seed = seed;
      run_one(strategy, tc, record);
    }
    report.strategies.push_back(std::move(record));
  }
  for (double alpha : config.alpha_sweep) {
    MetricsRecord record;
    char label[32];
    std::snprintf(label, sizeof label, "msnet_alpha_%.2f", alpha);
    record.label = label;
    for (std::uint64_t seed : config.seeds) {
      TrainConfig tc = config.train;
      tc.seed = seed;
      tc.weights.alpha = alpha;
      run_one(Strategy::kMsnet, tc, record);
    }
    report.alpha_sweep.emplace_back(alpha, std::move(record));
  }

  nlohmann::json profiles = nlohmann::json::array();
  for (const SiteData& sd : corpus.sites) profiles.push_back(sd.profile);
  ArchConfig arch = config.arch;
  arch.num_sites = corpus.num_sites();
  arch.input_size = corpus.image_size;
  nlohmann::json strategies = nlohmann::json::array();
  for (Strategy s : config.strategies) strategies.push_back(to_string(s));
  nlohmann::json results = nlohmann::json::array();
  for (const MetricsRecord& r : report.strategies) results.push_back(record_json(r));
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& [alpha, r] : report.alpha_sweep) {
    nlohmann::json row = record_json(r);
    row["alpha"] = alpha;
    sweep.push_back(row);
  }
  report.summary = {{"config",
                     {{"arch", arch},
                      {"train", to_json(config.train)},
                      {"seeds", config.seeds},
                      {"strategies", strategies},
                      {"corpus",
                       {{"seed", corpus.seed},
                        {"image_size", corpus.image_size},
                        {"train_per_site", corpus.sites.front().train.size()},
                        {"test_per_site", corpus.sites.front().test.size()},
                        {"profiles", profiles},
                        {"fingerprint", hex(corpus_fingerprint(corpus))}}}}},
                    {"results", results},
                    {"ttests", ttest_matrix(report.strategies)},
                    {"alpha_sweep", sweep}};
  return report;
}

void write_report_csv(const ProtocolReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "strategy,site,metric,mean,std,n\n";
  auto emit = [&](const MetricsRecord& r) {
    for (std::size_t s = 0; s < r.sites.size(); ++s) {
      Summary d = summarize(r.sites[s].dice), a = summarize(r.sites[s].asd);
      out << r.label << ',' << s + 1 << ",dice," << d.mean << ',' << d.std << ',' << d.n << '\n';
      out << r.label << ',' << s + 1 << ",asd," << a.mean << ',' << a.std << ',' << a.n << '\n';
    }
    Summary d = summarize(r.all_dice()), a = summarize(r.all_asd());
    out << r.label << ",overall,dice," << d.mean << ',' << d.std << ',' << d.n << '\n';
    out << r.label << ",overall,asd," << a.mean << ',' << a.std << ',' << a.n << '\n';
  };
  for (const MetricsRecord& r : report.strategies) emit(r);
  for (const auto& [alpha, r] : report.alpha_sweep) emit(r);
}

void write_report_json(const ProtocolReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << report.summary.dump(2) << '\n';
}

}  // namespace msnet
