#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <unistd.h>

#include "msnet/checkpoint.hpp"
#include "msnet/errors.hpp"
#include "msnet/train.hpp"

using namespace msnet;

namespace {

ArchConfig tiny_arch(int sites = 3) {
  ArchConfig a;
  a.input_size = 16;
  a.base_channels = 2;
  a.depth = 2;
  a.bottleneck_blocks = 1;
  a.num_sites = sites;
  return a;
}

Corpus tiny_corpus(int sites = 3) {
  CorpusConfig cfg;
  cfg.image_size = 16;
  cfg.train_per_site = 8;
  cfg.test_per_site = 2;
  cfg.seed = 5;
  cfg.profiles.resize(static_cast<std::size_t>(sites));
  for (auto& p : cfg.profiles) {
    p.object_scale_min = 2.0;
    p.object_scale_max = 4.0;
  }
  for (int s = 0; s < sites; ++s) cfg.profiles[s].site = SiteId{s + 1};
  if (sites > 1) cfg.profiles[1].gamma_exponent = 1.8;
  return generate_corpus(cfg);
}

TrainConfig tiny_train(int iterations = 3) {
  TrainConfig c;
  c.iterations = iterations;
  c.batch_size = 2;
  c.seed = 9;
  return c;
}

std::map<std::string, Tensor> snapshot(ModelParams& m) {
  std::map<std::string, Tensor> out;
  for (const NamedTensor& nt : state_tensors(m)) out.emplace(nt.name, *nt.tensor);
  return out;
}

bool group_changed(const std::map<std::string, Tensor>& before, const std::map<std::string, Tensor>& after,
                   const std::string& prefix) {
  for (const auto& [name, t] : before)
    if (name.rfind(prefix, 0) == 0 && !bitwise_equal(t, after.at(name))) return true;
  return false;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("msnet_" + name + "_" + std::to_string(::getpid()));
}

}  // namespace

TEST(Schedule, StepDecay) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(lr_at(0, c), 1.0e-3);
  EXPECT_DOUBLE_EQ(lr_at(499, c), 1.0e-3);
  EXPECT_DOUBLE_EQ(lr_at(500, c), 9.5e-4);
  EXPECT_NEAR(lr_at(1000, c), 9.025e-4, 1e-18);
  EXPECT_NEAR(lr_at(29999, c), 1e-3 * std::pow(0.95, 59), 1e-18);
}

TEST(Schedule, DefaultSchedule) {
  TrainConfig c;
  EXPECT_EQ(c.batch_size, 5);
  EXPECT_EQ(c.adam_beta1, 0.9);
  EXPECT_EQ(c.adam_beta2, 0.999);
  EXPECT_EQ(c.weights.alpha, 0.5);
  EXPECT_EQ(c.weights.eta, 1e-4);
  EXPECT_EQ(c.lr_step, 500);
  EXPECT_EQ(c.lr_decay, 0.95);
}

TEST(Schedule, Validation) {
  TrainConfig c;
  c.lr_decay = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weights.alpha = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_strategy("mixed"), ConfigError);
  EXPECT_EQ(parse_strategy("msnet"), Strategy::kMsnet);
}

TEST(Adam, FirstStepIsMinusLrSign) {
  Parameter w{"w", Tensor::scalar(0.0), Tensor::scalar(1.0)};
  Parameter* ps[] = {&w};
  AdamState st;
  TrainConfig c;
  adam_step(ps, st, 0.1, c);
  // m=0.1, v=0.001; bias corrected both to 1
  EXPECT_NEAR(w.value.item(), -0.1 / (1.0 + 1e-8), 1e-15);
  w.grad = Tensor::scalar(-2.0);
  adam_step(ps, st, 0.1, c);
  double m = 0.9 * 0.1 + 0.1 * -2.0, v = 0.999 * 0.001 + 0.001 * 4.0;
  double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(w.value.item(), -0.1 / (1.0 + 1e-8) - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-14);
  EXPECT_EQ(st.step, 2);
}

TEST(Adam, ZeroGradientAndIndependence) {
  Parameter a{"a", Tensor({2}, std::vector<double>{1, 2}), Tensor({2})};
  Parameter b{"b", Tensor({1}, std::vector<double>{3}), Tensor({1}, std::vector<double>{0.5})};
  Parameter* ps[] = {&a, &b};
  AdamState st;
  for (int i = 0; i < 50; ++i) adam_step(ps, st, 0.01, TrainConfig{});
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(a.value[1], 2.0);
  EXPECT_LT(b.value[0], 3.0);

  Parameter c{"c", Tensor({1}, std::vector<double>{3}), Tensor({1}, std::vector<double>{0.5})};
  Parameter* alone[] = {&c};
  AdamState st2;
  for (int i = 0; i < 50; ++i) adam_step(alone, st2, 0.01, TrainConfig{});
  EXPECT_EQ(c.value[0], b.value[0]);
}

TEST(Adam, ShapeMismatch) {
  Parameter a{"a", Tensor({2}), Tensor({3})};
  Parameter* ps[] = {&a};
  AdamState st;
  EXPECT_THROW(adam_step(ps, st, 0.1, TrainConfig{}), DimensionError);
  Parameter b{"b", Tensor({2}), Tensor({2})};
  Parameter* two[] = {&b, &b};
  AdamState one;
  Parameter* single[] = {&b};
  adam_step(single, one, 0.1, TrainConfig{});
  EXPECT_THROW(adam_step(two, one, 0.1, TrainConfig{}), DimensionError);
}

TEST(MsNet, DeterministicUnderSeed) {
  Corpus corpus = tiny_corpus();
  auto sets = train_splits(corpus);
  TrainRun a = make_run(Strategy::kMsnet, tiny_arch(), tiny_train());
  TrainRun b = make_run(Strategy::kMsnet, tiny_arch(), tiny_train());
  train(a, sets, tiny_train());
  train(b, sets, tiny_train());
  auto sa = snapshot(a.model), sb = snapshot(b.model);
  for (const auto& [name, t] : sa) EXPECT_TRUE(bitwise_equal(t, sb.at(name))) << name;
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.history[i].uni, b.history[i].uni);
    EXPECT_EQ(a.history[i].kt, b.history[i].kt);
    for (double x : a.history[i].aux) EXPECT_TRUE(std::isfinite(x));
  }
}

TEST(MsNet, ParameterGroupIsolation) {
  Corpus corpus = tiny_corpus();
  auto sets = train_splits(corpus);
  TrainConfig cfg = tiny_train();
  TrainRun run = make_run(Strategy::kMsnet, tiny_arch(), cfg);
  auto batches = iteration_batches(run, sets, 0, cfg);

  auto s0 = snapshot(run.model);
  msnet_aux_step(run, batches, lr_at(0, cfg), cfg);
  auto s1 = snapshot(run.model);
  EXPECT_FALSE(group_changed(s0, s1, "decoder."));
  EXPECT_TRUE(group_changed(s0, s1, "encoder."));
  for (int s = 1; s <= 3; ++s) EXPECT_TRUE(group_changed(s0, s1, "aux" + std::to_string(s) + "."));

  msnet_uni_step(run, batches, lr_at(0, cfg), cfg);
  auto s2 = snapshot(run.model);
  EXPECT_FALSE(group_changed(s1, s2, "aux"));
  EXPECT_TRUE(group_changed(s1, s2, "encoder."));
  EXPECT_TRUE(group_changed(s1, s2, "decoder."));
}

TEST(MsNet, ZeroAlphaEqualsDroppedTransferTerm) {
  Corpus corpus = tiny_corpus();
  auto sets = train_splits(corpus);
  TrainConfig zero = tiny_train();
  zero.weights.alpha = 0.0;
  TrainConfig dropped = zero;
  dropped.knowledge_transfer = false;
  TrainRun a = make_run(Strategy::kMsnet, tiny_arch(), zero);
  TrainRun b = make_run(Strategy::kMsnet, tiny_arch(), dropped);
  train(a, sets, zero);
  train(b, sets, dropped);
  auto sa = snapshot(a.model), sb = snapshot(b.model);
  for (const auto& [name, t] : sa) EXPECT_TRUE(bitwise_equal(t, sb.at(name))) << name;
}

TEST(MsNet, SingleSiteUniversalUpdateMatchesJoint) {
  Corpus corpus = tiny_corpus(1);
  auto sets = train_splits(corpus);
  TrainConfig cfg = tiny_train();
  cfg.weights.alpha = 0.0;
  TrainRun ms = make_run(Strategy::kMsnet, tiny_arch(1), cfg);
  TrainRun joint = make_run(Strategy::kJoint, tiny_arch(1), cfg);
  auto batches = iteration_batches(ms, sets, 0, cfg);
  msnet_aux_step(ms, batches, lr_at(0, cfg), cfg);
  // lockstep: joint starts from the msnet universal state after step 1
  auto state = snapshot(ms.model);
  for (NamedTensor& nt : state_tensors(joint.model)) *nt.tensor = state.at(nt.name);

  msnet_uni_step(ms, batches, lr_at(0, cfg), cfg);
  supervised_step(joint, batches, lr_at(0, cfg), cfg);
  auto a = snapshot(ms.model);
  for (const NamedTensor& nt : state_tensors(joint.model)) {
    const Tensor& m = a.at(nt.name);
    for (std::size_t k = 0; k < m.numel(); ++k) ASSERT_NEAR(m[k], (*nt.tensor)[k], 1e-12) << nt.name;
  }
}

TEST(MsNet, SiteMismatchBetweenModelAndData) {
  Corpus corpus = tiny_corpus(2);
  auto sets = train_splits(corpus);
  TrainRun run = make_run(Strategy::kMsnet, tiny_arch(3), tiny_train());
  EXPECT_THROW(train(run, sets, tiny_train()), SiteRoutingError);
}

TEST(Baselines, JointUsesOneDomainAndSeparateSeesOneSite) {
  Corpus corpus = tiny_corpus();
  TrainRun joint = make_run(Strategy::kJoint, tiny_arch(), tiny_train());
  EXPECT_EQ(joint.model.config.num_sites, 1);
  EXPECT_FALSE(joint.model.has_aux());
  EXPECT_EQ(joint.site_indices, (std::vector<int>{0, 1, 2}));

  // other sites' datasets are empty: touching them would throw
  std::vector<Sample> none;
  const std::vector<Sample>* only_site2[] = {&none, &corpus.sites[1].train, &none};
  TrainRun sep = make_run(Strategy::kSeparate, tiny_arch(), tiny_train(), SiteId{2});
  EXPECT_EQ(sep.seed, 9u + 2u);
  train(sep, only_site2, tiny_train());
  EXPECT_EQ(sep.history.size(), 3u);
  EXPECT_EQ(sep.history[0].uni.size(), 1u);

  std::vector<TrainRun> all = train_separate(corpus, tiny_arch(), tiny_train(1));
  ASSERT_EQ(all.size(), 3u);
  EXPECT_FALSE(bitwise_equal(all[0].model.encoder.stem.kernel.value, all[1].model.encoder.stem.kernel.value));
}

TEST(Baselines, JointLossDecreases) {
  Corpus corpus = tiny_corpus();
  TrainConfig cfg = tiny_train(80);
  cfg.lr0 = 3e-3;
  TrainRun run = train_joint(corpus, tiny_arch(), cfg);
  auto avg = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i)
      for (double x : run.history[i].uni) s += x;
    return s;
  };
  EXPECT_LT(avg(70, 80), avg(0, 10));
}

TEST(Checkpoint, ResumableRoundTripAndResume) {
  Corpus corpus = tiny_corpus();
  auto sets = train_splits(corpus);
  TrainConfig cfg = tiny_train(4);
  TrainRun straight = make_run(Strategy::kMsnet, tiny_arch(), cfg);
  train(straight, sets, cfg);

  TrainConfig half = cfg;
  half.iterations = 2;
  TrainRun first = make_run(Strategy::kMsnet, tiny_arch(), cfg);
  train(first, sets, half);
  auto path = temp_path("resume.ckpt");
  save_checkpoint(first, path, CheckpointContent::kResumable);
  TrainRun loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.iteration, 2);
  auto s_first = snapshot(first.model), s_loaded = snapshot(loaded.model);
  for (const auto& [name, t] : s_first) ASSERT_TRUE(bitwise_equal(t, s_loaded.at(name))) << name;
  ASSERT_EQ(loaded.aux_adam.m.size(), first.aux_adam.m.size());
  for (std::size_t i = 0; i < first.uni_adam.v.size(); ++i)
    ASSERT_TRUE(bitwise_equal(first.uni_adam.v[i], loaded.uni_adam.v[i]));

  train(loaded, sets, cfg);
  auto a = snapshot(straight.model), b = snapshot(loaded.model);
  for (const auto& [name, t] : a) ASSERT_TRUE(bitwise_equal(t, b.at(name))) << name;
  ASSERT_EQ(loaded.history.size(), 4u);
  EXPECT_EQ(loaded.history[3].kt, straight.history[3].kt);
  std::filesystem::remove(path);
}

TEST(Checkpoint, BitIdenticalFilesForIdenticalRuns) {
  Corpus corpus = tiny_corpus();
  auto sets = train_splits(corpus);
  auto write = [&](const std::filesystem::path& p) {
    TrainRun run = make_run(Strategy::kDsbn, tiny_arch(), tiny_train(2));
    train(run, sets, tiny_train(2));
    save_checkpoint(run, p, CheckpointContent::kResumable);
  };
  auto p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  write(p1);
  write(p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), {}), c2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(c1, c2);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST(Checkpoint, MismatchedArchAndCorruption) {
  TrainRun run = make_run(Strategy::kDsbn, tiny_arch(), tiny_train());
  auto path = temp_path("arch.ckpt");
  save_checkpoint(run, path, CheckpointContent::kModel);
  ArchConfig wider = tiny_arch();
  wider.base_channels = 3;
  ModelParams other = build_model(wider, 0, BuildOptions{false});
  EXPECT_THROW(load_model_into(other, path), DimensionError);
  ModelParams same = build_model(tiny_arch(), 77, BuildOptions{false});
  load_model_into(same, path);
  EXPECT_TRUE(bitwise_equal(same.encoder.stem.kernel.value, run.model.encoder.stem.kernel.value));

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 16);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  { std::ofstream(path) << "{broken\n"; }
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, StrippedLoadsForInferenceOnly) {
  Corpus corpus = tiny_corpus();
  auto sets = train_splits(corpus);
  TrainRun run = make_run(Strategy::kMsnet, tiny_arch(), tiny_train(2));
  train(run, sets, tiny_train(2));
  TrainRun stripped = run;
  stripped.model = strip_aux(run.model);
  auto path = temp_path("stripped.ckpt");
  save_checkpoint(stripped, path, CheckpointContent::kModel);
  TrainRun back = load_checkpoint(path);
  EXPECT_FALSE(back.model.has_aux());
  auto batch = make_batch(corpus.sites[2].test, std::vector<std::size_t>{0, 1}, nullptr, AugmentOptions{});
  EXPECT_TRUE(bitwise_equal(predict(back.model, batch.images, SiteId{3}), predict(run.model, batch.images, SiteId{3})));
  auto batches = iteration_batches(back, sets, 0, tiny_train());
  EXPECT_THROW(msnet_aux_step(back, batches, 1e-3, tiny_train()), ContractError);
  std::filesystem::remove(path);
}

TEST(History, CsvLayout) {
  LossHistory h{{0, 1e-3, {0.5, 0.4}, {0.3, 0.2}, {0.1, 0.05}}};
  auto path = temp_path("loss.csv");
  write_loss_csv(h, path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "iteration,L_aux_1,L_aux_2,L_uni_1,L_uni_2,L_kt_1,L_kt_2,lr");
  EXPECT_EQ(row.substr(0, 6), "0,0.5,");
  std::filesystem::remove(path);
}
