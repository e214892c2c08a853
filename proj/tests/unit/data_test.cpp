#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "msnet/data.hpp"
#include "msnet/errors.hpp"

using namespace msnet;

namespace {

Sample tiny(std::vector<double> pixels, std::vector<std::uint8_t> mask, std::size_t h, std::size_t w) {
  return Sample{Tensor({1, h, w}, std::move(pixels)), std::move(mask), SiteId{1}};
}

double mean_of(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double var_of(std::span<const double> v) {
  double m = mean_of(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("msnet_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Generate, SameSeedIsBitwiseIdentical) {
  for (const SiteProfile& p : heterogeneous_profiles()) {
    auto a = generate_site(p, 8, 7);
    auto b = generate_site(p, 8, 7);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_TRUE(bitwise_equal(a[i].image, b[i].image));
      EXPECT_EQ(a[i].mask, b[i].mask);
    }
  }
  auto c = generate_site(heterogeneous_profiles()[0], 2, 8);
  EXPECT_FALSE(bitwise_equal(c[0].image, generate_site(heterogeneous_profiles()[0], 2, 7)[0].image));
}

TEST(Generate, SampleDependsOnlyOnIndex) {
  auto p = heterogeneous_profiles()[1];
  auto few = generate_site(p, 3, 5);
  auto many = generate_site(p, 10, 5);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(bitwise_equal(few[i].image, many[i].image));
}

TEST(Generate, ForegroundFractionWithinBounds) {
  for (const SiteProfile& p : heterogeneous_profiles()) {
    auto samples = generate_site(p, 1000, 123);
    double lo = 1.0, hi = 0.0;
    for (const Sample& s : samples) {
      double f = static_cast<double>(s.foreground()) / static_cast<double>(s.mask.size());
      lo = std::min(lo, f);
      hi = std::max(hi, f);
      ASSERT_TRUE(s.image.all_finite());
    }
    EXPECT_GE(lo, 0.02) << "site " << p.site.value;
    EXPECT_LE(hi, 0.40) << "site " << p.site.value;
  }
}

TEST(Generate, GammaShiftsForegroundIntensity) {
  SiteProfile a = heterogeneous_profiles()[0];
  SiteProfile b = a;
  b.gamma_exponent = 1.8;
  auto mean_fg = [](const std::vector<Sample>& samples) {
    double sum = 0;
    std::size_t n = 0;
    for (const Sample& s : samples)
      for (std::size_t k = 0; k < s.mask.size(); ++k)
        if (s.mask[k]) {
          sum += s.image[k];
          ++n;
        }
    return sum / static_cast<double>(n);
  };
  double ma = mean_fg(generate_site(a, 200, 9)), mb = mean_fg(generate_site(b, 200, 9));
  EXPECT_GT(std::abs(ma - mb), 0.1) << ma << " vs " << mb;
}

TEST(Generate, InvertedSiteHasDarkForeground) {
  auto c = generate_site(heterogeneous_profiles()[2], 20, 3);
  double fg = 0, bg = 0;
  std::size_t nf = 0, nb = 0;
  for (const Sample& s : c)
    for (std::size_t k = 0; k < s.mask.size(); ++k) {
      (s.mask[k] ? fg : bg) += s.image[k];
      ++(s.mask[k] ? nf : nb);
    }
  EXPECT_LT(fg / nf, bg / nb);
}

TEST(Generate, ProfileValidation) {
  SiteProfile p;
  p.gamma_exponent = 0.0;
  EXPECT_THROW(generate_site(p, 1, 0), ConfigError);
  p = SiteProfile{};
  p.noise_sigma = -0.1;
  EXPECT_THROW(generate_site(p, 1, 0), ConfigError);
  p = SiteProfile{};
  p.object_scale_max = 40;
  EXPECT_THROW(generate_site(p, 1, 0), ConfigError);
  EXPECT_THROW(generate_site(SiteProfile{}, 0, 0), ConfigError);
}

TEST(Whiten, HandComputation) {
  Sample s = whiten(tiny({0, 1, 2, 3}, {0, 0, 1, 1}, 2, 2));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(s.image[i], (i - 1.5) / std::sqrt(1.25), 1e-15);
  EXPECT_NEAR(mean_of(s.image.values()), 0.0, 1e-12);
  EXPECT_NEAR(var_of(s.image.values()), 1.0, 1e-12);
}

TEST(Whiten, GeneratedSamplesAndIdempotence) {
  for (const Sample& raw : generate_site(heterogeneous_profiles()[2], 10, 1)) {
    Sample w = whiten(raw);
    EXPECT_NEAR(mean_of(w.image.values()), 0.0, 1e-9);
    EXPECT_NEAR(var_of(w.image.values()), 1.0, 1e-6);
    Sample ww = whiten(w);
    for (std::size_t k = 0; k < w.image.numel(); ++k) ASSERT_NEAR(ww.image[k], w.image[k], 1e-9);
    EXPECT_EQ(w.mask, raw.mask);
  }
}

TEST(Whiten, ConstantImageMapsToZero) {
  Sample s = whiten(tiny({4, 4, 4, 4}, {0, 0, 0, 0}, 2, 2));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(s.image[i], 0.0);
}

TEST(Augment, ZeroDrawIsIdentity) {
  Sample s = generate_site(SiteProfile{}, 1, 2)[0];
  Sample t = transform(s, false, 0, 0);
  EXPECT_TRUE(bitwise_equal(s.image, t.image));
  EXPECT_EQ(s.mask, t.mask);
}

TEST(Augment, FlipIsInvolution) {
  Sample s = generate_site(SiteProfile{}, 1, 2)[0];
  Sample t = transform(transform(s, true, 0, 0), true, 0, 0);
  EXPECT_TRUE(bitwise_equal(s.image, t.image));
  EXPECT_EQ(s.mask, t.mask);
  Sample f = transform(tiny({1, 2, 3, 4, 5, 6}, {1, 0, 0, 0, 0, 1}, 2, 3), true, 0, 0);
  EXPECT_EQ(f.image[0], 3);
  EXPECT_EQ(f.image[5], 4);
  EXPECT_EQ(f.mask, (std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0}));
}

TEST(Augment, ShiftZeroFillsAndMovesMaskTogether) {
  Sample s = tiny({1, 2, 3, 4, 5, 6, 7, 8, 9}, {0, 1, 0, 0, 1, 0, 0, 0, 1}, 3, 3);
  Sample t = transform(s, false, 1, -1);
  // row shifted down one, columns shifted left one
  EXPECT_EQ(std::vector<double>(t.image.values().begin(), t.image.values().end()),
            (std::vector<double>{0, 0, 0, 2, 3, 0, 5, 6, 0}));
  EXPECT_EQ(t.mask, (std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 1, 0, 0}));
}

TEST(Augment, MaskCountConservedUpToFrameLoss) {
  Rng rng = make_rng(1, "augment", 0);
  AugmentOptions opt{default_shift_max(64), 0.5};
  EXPECT_EQ(opt.shift_max, 5);
  for (const Sample& s : generate_site(heterogeneous_profiles()[2], 50, 4)) {
    Rng probe = rng;
    Sample t = augment(s, rng, opt);
    // replay the draw to know the shift
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<int> shift(-opt.shift_max, opt.shift_max);
    bool flip = coin(probe) < 0.5;
    int dy = shift(probe), dx = shift(probe);
    Sample base = flip ? transform(s, true, 0, 0) : s;
    std::size_t kept = 0;
    const int h = 64, w = 64;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (base.mask[static_cast<std::size_t>(y) * w + x] && y + dy >= 0 && y + dy < h && x + dx >= 0 && x + dx < w) ++kept;
    EXPECT_EQ(t.foreground(), kept);
    EXPECT_LE(t.foreground(), s.foreground());
  }
}

TEST(Augment, IndicatorImageStaysAligned) {
  Sample s = generate_site(heterogeneous_profiles()[0], 1, 6)[0];
  for (std::size_t k = 0; k < s.mask.size(); ++k) s.image[k] = s.mask[k] ? 1.0 : 0.0;
  Rng rng = make_rng(2, "augment", 0);
  AugmentOptions opt{5, 0.5};
  for (int i = 0; i < 40; ++i) {
    Sample t = augment(s, rng, opt);
    for (std::size_t k = 0; k < t.mask.size(); ++k) ASSERT_EQ(t.image[k], static_cast<double>(t.mask[k]));
  }
}

TEST(Batches, ThreeSitesOfFive) {
  CorpusConfig cfg;
  cfg.train_per_site = 12;
  cfg.test_per_site = 2;
  Corpus corpus = generate_corpus(cfg);
  std::vector<const std::vector<Sample>*> sets;
  for (const SiteData& sd : corpus.sites) sets.push_back(&sd.train);
  Rng rng = make_rng(3, "sampling", 0);
  Rng aug = make_rng(3, "augment", 0);
  auto batches = make_iteration_batches(sets, 5, rng, &aug, AugmentOptions{});
  ASSERT_EQ(batches.size(), 3u);
  for (int s = 0; s < 3; ++s) {
    EXPECT_EQ(batches[s].site.value, s + 1);
    EXPECT_EQ(batches[s].images.shape(), (Shape{5, 1, 64, 64}));
    EXPECT_EQ(batches[s].onehot.shape(), (Shape{5, 2, 64, 64}));
    const std::size_t hw = 64 * 64;
    for (std::size_t n = 0; n < 5; ++n)
      for (std::size_t k = 0; k < hw; ++k) {
        double bg = batches[s].onehot[n * 2 * hw + k], fg = batches[s].onehot[n * 2 * hw + hw + k];
        ASSERT_TRUE((bg == 0.0 || bg == 1.0) && bg + fg == 1.0);
      }
  }
  Rng again = make_rng(3, "sampling", 0);
  Rng aug_again = make_rng(3, "augment", 0);
  auto replay = make_iteration_batches(sets, 5, again, &aug_again, AugmentOptions{});
  for (int s = 0; s < 3; ++s) EXPECT_TRUE(bitwise_equal(batches[s].images, replay[s].images));
}

TEST(Batches, UndersizedDatasetFails) {
  std::vector<Sample> few = generate_site(SiteProfile{}, 3, 0);
  std::vector<const std::vector<Sample>*> sets{&few};
  Rng rng = make_rng(0, "sampling", 0);
  EXPECT_THROW(make_iteration_batches(sets, 5, rng, nullptr, AugmentOptions{}), DataError);
}

TEST(Corpus, DefaultShapeAndRoundTrip) {
  Corpus corpus = generate_corpus(CorpusConfig{});
  ASSERT_EQ(corpus.num_sites(), 3);
  for (const SiteData& sd : corpus.sites) {
    EXPECT_EQ(sd.train.size(), 60u);
    EXPECT_EQ(sd.test.size(), 15u);
  }
  auto dir = temp_dir("corpus");
  write_corpus(corpus, dir);
  Corpus back = read_corpus(dir);
  ASSERT_EQ(back.num_sites(), 3);
  EXPECT_EQ(back.seed, corpus.seed);
  for (int s = 0; s < 3; ++s) {
    EXPECT_EQ(back.sites[s].profile.gamma_exponent, corpus.sites[s].profile.gamma_exponent);
    for (std::size_t i = 0; i < 60; ++i) {
      ASSERT_TRUE(bitwise_equal(back.sites[s].train[i].image, corpus.sites[s].train[i].image));
      ASSERT_EQ(back.sites[s].train[i].mask, corpus.sites[s].train[i].mask);
    }
    EXPECT_TRUE(bitwise_equal(back.sites[s].test[14].image, corpus.sites[s].test[14].image));
  }
  std::filesystem::remove_all(dir);
}

TEST(Corpus, CorruptManifestAndTruncatedPayload) {
  CorpusConfig cfg;
  cfg.train_per_site = 2;
  cfg.test_per_site = 1;
  auto dir = temp_dir("corrupt");
  write_corpus(generate_corpus(cfg), dir);
  std::filesystem::resize_file(dir / "site2_images.f64", 100);
  EXPECT_THROW(read_corpus(dir), DataError);
  std::ofstream(dir / "manifest.json") << "{ not json";
  EXPECT_THROW(read_corpus(dir), DataError);
  std::filesystem::remove_all(dir);
}
