#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>

#include <CLI11.hpp>

#include "msnet/checkpoint.hpp"
#include "msnet/config.hpp"
#include "msnet/errors.hpp"
#include "msnet/protocol.hpp"
#include "msnet/verify.hpp"

namespace msnet::cli {

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string data_dir;
  std::string out_dir;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_file.empty()) apply_config_file(cfg, c.config_file);
  apply_overrides(cfg, c.overrides);
  if (!c.data_dir.empty()) cfg.data_dir = c.data_dir;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  cfg.finalize();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool with_data) {
  app->add_option("--config", c.config_file, "key = value config file")->check(CLI::ExistingFile);
  if (with_data) app->add_option("--data", c.data_dir, "dataset directory (data.dir)");
  app->add_option("--out", c.out_dir, "output directory (out.dir; gen-data writes the dataset here)");
  app->add_option("overrides", c.overrides, "key=value overrides, e.g. strategy=msnet alpha=0.5");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

Corpus load_corpus(const RunConfig& cfg) {
  if (!std::filesystem::exists(cfg.data_dir / "manifest.json"))
    throw DataError("no dataset at " + cfg.data_dir.string() + " (run gen-data first)");
  return read_corpus(cfg.data_dir);
}

std::string checkpoint_name(Strategy s, int site) {
  return s == Strategy::kSeparate ? "separate_site" + std::to_string(site) : to_string(s);
}

int gen_data(const Common& c, std::ostream& out) {
  RunConfig cfg = resolve(c);
  std::filesystem::path dir = c.out_dir.empty() ? cfg.data_dir : cfg.out_dir;
  Corpus corpus = generate_corpus(cfg.corpus);
  write_corpus(corpus, dir);
  out << "wrote " << corpus.num_sites() << " sites x " << cfg.corpus.train_per_site + cfg.corpus.test_per_site
      << " samples (" << cfg.corpus.train_per_site << " train, " << cfg.corpus.test_per_site << " test) to "
      << dir.string() << "\n";
  return kOk;
}

int train_cmd(const Common& c, bool resume, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(c);
  Corpus corpus = load_corpus(cfg);
  if (corpus.num_sites() != static_cast<int>(cfg.corpus.profiles.size()))
    throw ConfigError("dataset has " + std::to_string(corpus.num_sites()) + " sites, config describes " +
                      std::to_string(cfg.corpus.profiles.size()));
  ArchConfig arch = cfg.arch;
  arch.input_size = corpus.image_size;
  arch.num_sites = corpus.num_sites();
  std::filesystem::create_directories(cfg.out_dir);
  write_text(cfg.out_dir / "train_config.json", cfg.to_json().dump(2) + "\n");
  auto sets = train_splits(corpus);

  const int count = cfg.strategy == Strategy::kSeparate ? corpus.num_sites() : 1;
  for (int site = 1; site <= count; ++site) {
    const std::string name = checkpoint_name(cfg.strategy, site);
    const auto ckpt = cfg.out_dir / (name + ".ckpt");
    TrainRun run;
    if (resume && std::filesystem::exists(ckpt)) {
      run = load_checkpoint(ckpt);
      if (run.strategy != cfg.strategy) throw ConfigError("checkpoint " + ckpt.string() + " holds another strategy");
      err << "resuming " << name << " at iteration " << run.iteration << "\n";
    } else {
      run = make_run(cfg.strategy, arch, cfg.train, SiteId{site});
    }
    TrainOptions options;
    options.checkpoint = ckpt;
    options.checkpoint_every = cfg.checkpoint_every;
    const auto t0 = std::chrono::steady_clock::now();
    int last_report = run.iteration;
    options.on_iteration = [&](const TrainRun& r) {
      if (r.iteration - last_report >= 100 || r.iteration == cfg.train.iterations) {
        last_report = r.iteration;
        double total = 0.0;
        for (double v : r.history.back().uni) total += v;
        err << name << " iteration " << r.iteration << "/" << cfg.train.iterations << " dice loss " << std::setprecision(4)
            << total << "\n";
      }
    };
    train(run, sets, cfg.train, options);
    write_loss_csv(run.history, cfg.out_dir / (name + "_loss.csv"));
    if (cfg.strategy == Strategy::kMsnet) {
      TrainRun deploy = run;
      deploy.model = strip_aux(run.model);
      save_checkpoint(deploy, cfg.out_dir / "msnet_deploy.ckpt", CheckpointContent::kModel);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << "trained " << name << " (" << cfg.train.iterations << " iterations, " << std::fixed << std::setprecision(1)
        << secs << " s) -> " << ckpt.string() << "\n";
    out.unsetf(std::ios::fixed);
  }
  return kOk;
}

void print_record(std::ostream& out, const MetricsRecord& r) {
  Summary d = summarize(r.all_dice()), a = summarize(r.all_asd());
  out << std::left << std::setw(18) << r.label << std::right << std::fixed << std::setprecision(2) << " dice " << d.mean
      << " +- " << d.std << "  asd " << a.mean << " +- " << a.std;
  for (std::size_t s = 0; s < r.sites.size(); ++s) out << "  site" << s + 1 << " " << summarize(r.sites[s].dice).mean;
  out << "\n";
  out.unsetf(std::ios::fixed | std::ios::left | std::ios::right);
}

int eval_cmd(const Common& c, const std::vector<std::string>& checkpoints, bool protocol, bool ablate,
             const std::string& bn_stats_path, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(c);
  if (checkpoints.empty() && !protocol && !ablate)
    throw ConfigError("eval needs --checkpoint, --protocol or --ablate-alpha");
  Corpus corpus = load_corpus(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  ProtocolReport report;
  std::vector<BnStatsRow> bn_rows;

  if (!checkpoints.empty()) {
    std::vector<TrainRun> separate;
    for (const std::string& path : checkpoints) {
      TrainRun run = load_checkpoint(path);
      if (run.model.config.input_size != corpus.image_size)
        throw DimensionError("checkpoint " + path + " expects " + std::to_string(run.model.config.input_size) +
                             " pixel images, dataset has " + std::to_string(corpus.image_size));
      if (run.strategy == Strategy::kSeparate) {
        separate.push_back(std::move(run));
        continue;
      }
      MetricsRecord rec;
      rec.label = std::filesystem::path(path).stem().string();
      rec.append(evaluate_run(run, corpus));
      if (!bn_stats_path.empty()) {
        auto rows = bn_stats(run.model, rec.label);
        bn_rows.insert(bn_rows.end(), rows.begin(), rows.end());
      }
      report.strategies.push_back(std::move(rec));
    }
    if (!separate.empty()) {
      std::sort(separate.begin(), separate.end(),
                [](const TrainRun& a, const TrainRun& b) { return a.site_indices < b.site_indices; });
      MetricsRecord rec;
      rec.label = "separate";
      rec.append(evaluate_separate(separate, corpus));
      if (!bn_stats_path.empty()) {
        auto rows = bn_stats_separate(separate);
        bn_rows.insert(bn_rows.end(), rows.begin(), rows.end());
      }
      report.strategies.push_back(std::move(rec));
    }
    report.summary = {{"checkpoints", checkpoints}, {"ttests", ttest_matrix(report.strategies)}};
  } else {
    ProtocolConfig pc;
    pc.strategies = protocol ? cfg.strategies : std::vector<Strategy>{};
    pc.seeds = cfg.seeds;
    pc.alpha_sweep = ablate ? cfg.alpha_grid : std::vector<double>{};
    pc.arch = cfg.arch;
    pc.train = cfg.train;
    pc.cache_dir = cfg.out_dir / "cache";
    pc.log = [&err](const std::string& s) { err << s << "\n"; };
    report = run_protocol(corpus, pc);
    if (!bn_stats_path.empty()) {
      TrainConfig tc = cfg.train;
      tc.seed = cfg.seeds.front();
      auto runs = trained_runs(Strategy::kSeparate, corpus, cfg.arch, tc, pc.cache_dir, pc.log);
      bn_rows = bn_stats_separate(runs);
    }
  }
  report.summary["resolved_config"] = cfg.to_json();

  write_report_csv(report, cfg.out_dir / "report.csv");
  write_report_json(report, cfg.out_dir / "report.json");
  for (const MetricsRecord& r : report.strategies) print_record(out, r);
  if (!report.alpha_sweep.empty()) {
    std::ofstream sweep(cfg.out_dir / "alpha_sweep.csv");
    sweep.precision(10);
    sweep << "alpha,dice_mean,dice_std,asd_mean,asd_std,n\n";
    for (const auto& [alpha, r] : report.alpha_sweep) {
      Summary d = summarize(r.all_dice()), a = summarize(r.all_asd());
      sweep << alpha << ',' << d.mean << ',' << d.std << ',' << a.mean << ',' << a.std << ',' << d.n << '\n';
      print_record(out, r);
    }
  }
  if (!bn_stats_path.empty()) {
    write_bn_stats_csv(bn_rows, bn_stats_path);
    out << "bn statistics: " << bn_rows.size() << " rows -> " << bn_stats_path << "\n";
  }
  out << "report -> " << (cfg.out_dir / "report.csv").string() << ", " << (cfg.out_dir / "report.json").string() << "\n";
  return kOk;
}

int verify_cmd(const std::string& sabotage, std::ostream& out) {
  VerifyOptions options;
  options.sabotage = sabotage;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CheckResult> results = gradient_suite(options);
  for (const CheckResult& r : metric_suite(options)) results.push_back(r);
  bool ok = true;
  for (const CheckResult& r : results) {
    ok = ok && r.passed;
    char line[256];
    std::snprintf(line, sizeof line, "%s %-24s max_err=%.3e tol=%.1e %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                  r.max_error, r.tolerance, r.detail.c_str());
    out << line;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << (ok ? "all checks passed" : "verification FAILED") << " in " << std::fixed << std::setprecision(2) << secs
      << " s\n";
  out.unsetf(std::ios::fixed);
  return ok ? kOk : kRuntimeFailure;
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"MS-Net: domain-specific batch normalization and multi-site knowledge transfer"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common gen, tr, ev;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "write the synthetic multi-site corpus");
  add_common(gen_cmd, gen, false);

  bool resume = false;
  CLI::App* train_app = app.add_subcommand("train", "train one strategy (train.strategy)");
  add_common(train_app, tr, true);
  train_app->add_flag("--resume", resume, "continue from the last checkpoint in --out");

  std::vector<std::string> checkpoints;
  bool protocol = false, ablate = false;
  std::string bn_stats_path;
  CLI::App* eval_app = app.add_subcommand("eval", "evaluate checkpoints or run the comparison protocol");
  add_common(eval_app, ev, true);
  eval_app->add_option("--checkpoint", checkpoints, "checkpoint(s) to evaluate on the test splits");
  eval_app->add_flag("--protocol", protocol, "train and compare eval.strategies over eval.seeds");
  eval_app->add_flag("--ablate-alpha", ablate, "sweep the knowledge-transfer rate over eval.alpha_grid");
  eval_app->add_option("--bn-stats", bn_stats_path, "write channel-averaged running statistics per layer to this CSV");

  std::string sabotage;
  CLI::App* verify_app = app.add_subcommand("verify", "gradient checks and metric oracles");
  verify_app->add_option("--inject-fault", sabotage, "corrupt one backward rule to prove the suite fails")
      ->check(CLI::IsMember(gradient_check_names()));

  CLI::App* keys_app = app.add_subcommand("keys", "list every config key");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kOk : kValidationError;
  }

  try {
    if (*gen_cmd) return gen_data(gen, out);
    if (*train_app) return train_cmd(tr, resume, out, err);
    if (*eval_app) return eval_cmd(ev, checkpoints, protocol, ablate, bn_stats_path, out, err);
    if (*verify_app) return verify_cmd(sabotage, out);
    if (*keys_app) {
      for (const std::string& k : config_keys()) out << k << "\n";
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kValidationError;
  } catch (const DimensionError& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidationError;
  } catch (const SiteRoutingError& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kRuntimeFailure;
}

}  // namespace msnet::cli
