#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msnet/rng.hpp"
#include "msnet/site.hpp"
#include "msnet/tensor.hpp"

namespace msnet {

/// Acquisition characteristics of one synthetic site. The clean image (ellipses
/// on a textured background, intensities in [0,1]) passes through
/// gamma -> contrast/brightness -> multiplicative bias field -> additive noise.
struct SiteProfile {
  SiteId site;
  double gamma_exponent = 1.0;
  double contrast_scale = 1.0;
  double brightness_offset = 0.0;
  double bias_field_amplitude = 0.0;
  double noise_sigma = 0.03;
  double object_scale_min = 6.0;  // ellipse semi-axis bounds, pixels
  double object_scale_max = 12.0;
  std::int64_t texture_seed = 0;

  void validate(int image_size) const;
};

void to_json(nlohmann::json& j, const SiteProfile& p);
void from_json(const nlohmann::json& j, SiteProfile& p);

/// Three-site heterogeneous defaults: A near-identity, B gamma 1.8 with a bias
/// field, C inverted contrast with heavy noise and larger objects.
std::vector<SiteProfile> heterogeneous_profiles();
/// Control corpus: three sites sharing site A's acquisition profile.
std::vector<SiteProfile> homogeneous_profiles();

struct Sample {
  Tensor image;                     // [1,H,W]
  std::vector<std::uint8_t> mask;   // H*W labels in {0,1}
  SiteId site;

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
  std::size_t foreground() const;
};

/// n samples, deterministic in (profile, seed, index).
std::vector<Sample> generate_site(const SiteProfile& profile, int n, std::uint64_t seed, int image_size = 64);

/// Zero mean, unit variance intensities; constant images become all zeros.
Sample whiten(Sample sample);

struct AugmentOptions {
  int shift_max = 5;  // pixels per axis
  double flip_probability = 0.5;
};

/// shift_max for an image width: 8% of the width.
int default_shift_max(int image_size);

/// Optional horizontal flip, then an integer translation with zero fill. Image and mask move together.
Sample transform(const Sample& sample, bool flip, int shift_y, int shift_x);
Sample augment(const Sample& sample, Rng& rng, const AugmentOptions& options);

struct SiteBatch {
  Tensor images;   // [b,1,H,W]
  Tensor onehot;   // [b,2,H,W]
  SiteId site;
};

struct SiteData {
  SiteProfile profile;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct Corpus {
  int image_size = 64;
  std::uint64_t seed = 0;
  std::vector<SiteData> sites;

  int num_sites() const { return static_cast<int>(sites.size()); }
};

struct CorpusConfig {
  std::vector<SiteProfile> profiles = heterogeneous_profiles();
  int train_per_site = 60;
  int test_per_site = 15;
  int image_size = 64;
  std::uint64_t seed = 42;
};

Corpus generate_corpus(const CorpusConfig& config);

/// Stacks samples (whitened, then augmented when `augment_rng` is given) into one batch.
SiteBatch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices, Rng* augment_rng,
                     const AugmentOptions& options);

/// One batch per dataset, in dataset order. Indices are drawn without
/// replacement inside a batch and independently across iterations.
/// A null `augment_rng` disables augmentation.
std::vector<SiteBatch> make_iteration_batches(std::span<const std::vector<Sample>* const> datasets, int batch_size,
                                              Rng& sampling_rng, Rng* augment_rng, const AugmentOptions& options);

/// Writes manifest.json plus per-site little-endian f64 image and u8 mask payloads.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace msnet
