#include "msnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "msnet/binary_io.hpp"
#include "msnet/errors.hpp"

namespace msnet {

namespace {

constexpr double kWhitenVarianceFloor = 1e-8;
constexpr double kEdgeSoftness = 0.7;  // logistic width of the ellipse rim, pixels
constexpr int kTextureWaves = 3;

struct Ellipse {
  double cy, cx, a, b, cos_t, sin_t;

  // normalized radius: <= 1 inside
  double radius(double y, double x) const {
    double dy = y - cy, dx = x - cx;
    double u = dx * cos_t + dy * sin_t;
    double v = -dx * sin_t + dy * cos_t;
    return std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
  }
};

struct Wave {
  double ky, kx;
};

std::vector<Wave> site_texture(std::int64_t texture_seed) {
  Rng rng = make_rng(static_cast<std::uint64_t>(texture_seed), "texture", 0);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> freq(0.15, 0.6);  // radians per pixel
  std::vector<Wave> waves;
  for (int i = 0; i < kTextureWaves; ++i) {
    double th = angle(rng), f = freq(rng);
    waves.push_back({f * std::sin(th), f * std::cos(th)});
  }
  return waves;
}

Sample generate_one(const SiteProfile& p, const std::vector<Wave>& waves, std::uint64_t seed, int index, int size) {
  Rng rng = make_rng(derive_seed(seed, "data.site", static_cast<std::uint64_t>(p.site.value)), "sample",
                     static_cast<std::uint64_t>(index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const int count = unit(rng) < 0.5 ? 1 : 2;
  std::vector<Ellipse> ellipses;
  const double margin = p.object_scale_max + 1.0;
  for (int e = 0; e < count; ++e) {
    double th = uniform(0.0, std::numbers::pi);
    ellipses.push_back({uniform(margin, size - 1 - margin), uniform(margin, size - 1 - margin),
                        uniform(p.object_scale_min, p.object_scale_max), uniform(p.object_scale_min, p.object_scale_max),
                        std::cos(th), std::sin(th)});
  }
  const double fg = uniform(0.6, 0.8);
  const double bg = uniform(0.2, 0.35);
  const double tex_amp = uniform(0.04, 0.08);
  double phase[kTextureWaves];
  for (double& ph : phase) ph = uniform(0.0, 2.0 * std::numbers::pi);
  const double field_angle = uniform(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);

  Sample s{Tensor({1, static_cast<std::size_t>(size), static_cast<std::size_t>(size)}),
           std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size, 0), p.site};
  double* img = s.image.data();
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double texture = 0.0;
      for (int w = 0; w < kTextureWaves; ++w) texture += std::sin(waves[w].ky * y + waves[w].kx * x + phase[w]);
      double cover = 0.0;
      bool inside = false;
      for (const Ellipse& e : ellipses) {
        double r = e.radius(y, x);
        inside = inside || r <= 1.0;
        double signed_dist = (r - 1.0) * std::min(e.a, e.b);
        cover = std::max(cover, 1.0 / (1.0 + std::exp(signed_dist / kEdgeSoftness)));
      }
      double v = bg + tex_amp * texture;
      v = v + cover * (fg - v);
      v = std::clamp(v, 0.0, 1.0);

      v = std::pow(v, p.gamma_exponent);
      v = p.contrast_scale * v + p.brightness_offset;
      double xn = 2.0 * x / (size - 1) - 1.0, yn = 2.0 * y / (size - 1) - 1.0;
      double g = (std::cos(field_angle) * xn + std::sin(field_angle) * yn) / std::numbers::sqrt2;
      v *= 1.0 + p.bias_field_amplitude * g;
      v += p.noise_sigma * noise(rng);

      std::size_t k = static_cast<std::size_t>(y) * size + x;
      img[k] = v;
      s.mask[k] = inside ? 1 : 0;
    }
  }
  return s;
}

}  // namespace

void SiteProfile::validate(int image_size) const {
  auto fail = [&](const std::string& what) {
    throw ConfigError("site " + std::to_string(site.value) + " profile: " + what);
  };
  if (site.value < 1) fail("site id must be >= 1");
  if (!(gamma_exponent > 0.0) || !std::isfinite(gamma_exponent)) fail("gamma_exponent must be > 0");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be >= 0");
  if (!std::isfinite(contrast_scale) || !std::isfinite(brightness_offset)) fail("contrast/brightness must be finite");
  if (!(bias_field_amplitude >= 0.0 && bias_field_amplitude < 1.0)) fail("bias_field_amplitude must be in [0,1)");
  if (!(object_scale_min > 0.0) || !(object_scale_max >= object_scale_min))
    fail("object scale range must satisfy 0 < min <= max");
  if (2.0 * (object_scale_max + 1.0) >= image_size - 1)
    fail("object_scale_max " + std::to_string(object_scale_max) + " does not fit a " + std::to_string(image_size) +
         " pixel image");
}

void to_json(nlohmann::json& j, const SiteProfile& p) {
  j = nlohmann::json{{"site", p.site.value},
                     {"gamma_exponent", p.gamma_exponent},
                     {"contrast_scale", p.contrast_scale},
                     {"brightness_offset", p.brightness_offset},
                     {"bias_field_amplitude", p.bias_field_amplitude},
                     {"noise_sigma", p.noise_sigma},
                     {"object_scale_min", p.object_scale_min},
                     {"object_scale_max", p.object_scale_max},
                     {"texture_seed", p.texture_seed}};
}

void from_json(const nlohmann::json& j, SiteProfile& p) {
  p.site.value = j.at("site").get<int>();
  j.at("gamma_exponent").get_to(p.gamma_exponent);
  j.at("contrast_scale").get_to(p.contrast_scale);
  j.at("brightness_offset").get_to(p.brightness_offset);
  j.at("bias_field_amplitude").get_to(p.bias_field_amplitude);
  j.at("noise_sigma").get_to(p.noise_sigma);
  j.at("object_scale_min").get_to(p.object_scale_min);
  j.at("object_scale_max").get_to(p.object_scale_max);
  j.at("texture_seed").get_to(p.texture_seed);
}

std::vector<SiteProfile> heterogeneous_profiles() {
  SiteProfile a;
  a.site = SiteId{1};
  a.texture_seed = 11;

  SiteProfile b;
  b.site = SiteId{2};
  b.gamma_exponent = 1.8;
  b.bias_field_amplitude = 0.5;
  b.texture_seed = 22;

  SiteProfile c;
  c.site = SiteId{3};
  c.contrast_scale = -1.0;
  c.brightness_offset = 1.0;
  c.noise_sigma = 0.15;
  c.object_scale_min = 9.0;
  c.object_scale_max = 15.0;
  c.texture_seed = 33;
  return {a, b, c};
}

std::vector<SiteProfile> homogeneous_profiles() {
  std::vector<SiteProfile> out;
  for (int s = 1; s <= 3; ++s) {
    SiteProfile p = heterogeneous_profiles().front();
    p.site = SiteId{s};
    out.push_back(p);
  }
  return out;
}

std::size_t Sample::foreground() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::vector<Sample> generate_site(const SiteProfile& profile, int n, std::uint64_t seed, int image_size) {
  if (n < 1) throw ConfigError("generate_site needs n >= 1, got " + std::to_string(n));
  profile.validate(image_size);
  const std::vector<Wave> waves = site_texture(profile.texture_seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(generate_one(profile, waves, seed, i, image_size));
  return out;
}

Sample whiten(Sample sample) {
  auto v = sample.image.values();
  const double n = static_cast<double>(v.size());
  double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  if (var < kWhitenVarianceFloor) {
    std::fill(v.begin(), v.end(), 0.0);
    return sample;
  }
  const double inv = 1.0 / std::sqrt(var);
  for (double& x : v) x = (x - mean) * inv;
  return sample;
}

int default_shift_max(int image_size) { return static_cast<int>(std::lround(0.08 * image_size)); }

Sample transform(const Sample& sample, bool flip, int shift_y, int shift_x) {
  const int h = static_cast<int>(sample.height()), w = static_cast<int>(sample.width());
  Sample out{Tensor(sample.image.shape(), 0.0), std::vector<std::uint8_t>(sample.mask.size(), 0), sample.site};
  const double* src = sample.image.data();
  double* dst = out.image.data();
  for (int y = 0; y < h; ++y) {
    int sy = y - shift_y;
    if (sy < 0 || sy >= h) continue;
    for (int x = 0; x < w; ++x) {
      int sx = x - shift_x;
      if (sx < 0 || sx >= w) continue;
      if (flip) sx = w - 1 - sx;
      std::size_t from = static_cast<std::size_t>(sy) * w + sx, to = static_cast<std::size_t>(y) * w + x;
      dst[to] = src[from];
      out.mask[to] = sample.mask[from];
    }
  }
  return out;
}

Sample augment(const Sample& sample, Rng& rng, const AugmentOptions& options) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> shift(-options.shift_max, options.shift_max);
  bool flip = coin(rng) < options.flip_probability;
  int dy = shift(rng);
  int dx = shift(rng);
  return transform(sample, flip, dy, dx);
}

SiteBatch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices, Rng* augment_rng,
                     const AugmentOptions& options) {
  if (indices.empty()) throw DataError("empty batch");
  const Sample& first = samples.at(indices[0]);
  const std::size_t h = first.height(), w = first.width(), hw = h * w, b = indices.size();
  SiteBatch batch{Tensor({b, 1, h, w}), Tensor({b, 2, h, w}), first.site};
  for (std::size_t i = 0; i < b; ++i) {
    const Sample& raw = samples.at(indices[i]);
    if (raw.height() != h || raw.width() != w) throw DataError("mixed image sizes in one batch");
    if (raw.site != first.site) throw DataError("mixed sites in one batch");
    Sample s = whiten(raw);
    if (augment_rng) s = augment(s, *augment_rng, options);
    std::copy(s.image.data(), s.image.data() + hw, batch.images.data() + i * hw);
    double* bg = batch.onehot.data() + i * 2 * hw;
    double* fg = bg + hw;
    for (std::size_t k = 0; k < hw; ++k) {
      if (s.mask[k] > 1) throw DataError("mask label > 1");
      fg[k] = s.mask[k];
      bg[k] = 1.0 - s.mask[k];
    }
  }
  return batch;
}

std::vector<SiteBatch> make_iteration_batches(std::span<const std::vector<Sample>* const> datasets, int batch_size,
                                              Rng& sampling_rng, Rng* augment_rng, const AugmentOptions& options) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<SiteBatch> out;
  out.reserve(datasets.size());
  for (const std::vector<Sample>* data : datasets) {
    if (data->size() < static_cast<std::size_t>(batch_size))
      throw DataError("dataset has " + std::to_string(data->size()) + " samples, fewer than batch size " +
                      std::to_string(batch_size));
    std::vector<std::size_t> order(data->size());
    std::iota(order.begin(), order.end(), 0);
    // partial Fisher-Yates: first batch_size entries are a uniform draw without replacement
    for (std::size_t i = 0; i < static_cast<std::size_t>(batch_size); ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
      std::swap(order[i], order[pick(sampling_rng)]);
    }
    out.push_back(make_batch(*data, std::span(order).first(static_cast<std::size_t>(batch_size)), augment_rng, options));
  }
  return out;
}

Corpus generate_corpus(const CorpusConfig& config) {
  if (config.profiles.empty()) throw ConfigError("corpus needs at least one site profile");
  if (config.train_per_site < 1 || config.test_per_site < 1) throw ConfigError("train and test counts must be >= 1");
  Corpus corpus;
  corpus.image_size = config.image_size;
  corpus.seed = config.seed;
  for (std::size_t i = 0; i < config.profiles.size(); ++i) {
    const SiteProfile& p = config.profiles[i];
    if (p.site.value != static_cast<int>(i) + 1)
      throw ConfigError("site profiles must be numbered 1..S in order; got site " + std::to_string(p.site.value) +
                        " at position " + std::to_string(i + 1));
    std::vector<Sample> all = generate_site(p, config.train_per_site + config.test_per_site, config.seed, config.image_size);
    SiteData sd{p, {}, {}};
    sd.train.assign(all.begin(), all.begin() + config.train_per_site);
    sd.test.assign(all.begin() + config.train_per_site, all.end());
    corpus.sites.push_back(std::move(sd));
  }
  return corpus;
}

namespace {

std::string images_file(int site) { return "site" + std::to_string(site) + "_images.f64"; }
std::string masks_file(int site) { return "site" + std::to_string(site) + "_masks.u8"; }

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format", "msnet-dataset"},
                          {"version", 1},
                          {"seed", corpus.seed},
                          {"image_size", corpus.image_size},
                          {"sites", nlohmann::json::array()}};
  const std::size_t hw = static_cast<std::size_t>(corpus.image_size) * corpus.image_size;
  for (const SiteData& sd : corpus.sites) {
    const int site = sd.profile.site.value;
    std::ostringstream img(std::ios::binary), msk(std::ios::binary);
    nlohmann::json samples = nlohmann::json::array();
    std::size_t k = 0;
    auto emit = [&](const std::vector<Sample>& list, const char* split) {
      for (const Sample& s : list) {
        if (s.image.numel() != hw) throw DataError("sample size does not match corpus image_size");
        write_f64_le(img, s.image.values());
        msk.write(reinterpret_cast<const char*>(s.mask.data()), static_cast<std::streamsize>(s.mask.size()));
        samples.push_back({{"index", k},
                           {"split", split},
                           {"site", s.site.value},
                           {"shape", {1, corpus.image_size, corpus.image_size}},
                           {"image_offset", k * hw * 8},
                           {"mask_offset", k * hw}});
        ++k;
      }
    };
    emit(sd.train, "train");
    emit(sd.test, "test");
    write_file_atomic(dir / images_file(site), img.str());
    write_file_atomic(dir / masks_file(site), msk.str());
    manifest["sites"].push_back({{"site", site},
                                 {"profile", sd.profile},
                                 {"images", images_file(site)},
                                 {"masks", masks_file(site)},
                                 {"samples", samples}});
  }
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Corpus read_corpus(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt dataset manifest: " + std::string(e.what()));
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
  try {
    if (manifest.at("format") != "msnet-dataset") throw DataError("not an msnet dataset manifest");
    Corpus corpus;
    corpus.seed = manifest.at("seed").get<std::uint64_t>();
    corpus.image_size = manifest.at("image_size").get<int>();
    if (corpus.image_size < 1) throw DataError("bad image_size");
    const std::size_t side = static_cast<std::size_t>(corpus.image_size), hw = side * side;
    for (const auto& js : manifest.at("sites")) {
      SiteData sd;
      sd.profile = js.at("profile").get<SiteProfile>();
      const int site = js.at("site").get<int>();
      if (site != sd.profile.site.value || site != corpus.num_sites() + 1)
        throw DataError("site numbering in manifest is inconsistent at site " + std::to_string(site));
      const std::string img = read_file(dir / js.at("images").get<std::string>());
      const std::string msk = read_file(dir / js.at("masks").get<std::string>());
      const auto& samples = js.at("samples");
      if (img.size() != samples.size() * hw * 8 || msk.size() != samples.size() * hw)
        throw DataError("payload size for site " + std::to_string(site) + " does not match manifest shapes");
      for (const auto& jsmp : samples) {
        auto shape = jsmp.at("shape").get<std::vector<std::size_t>>();
        if (shape != Shape{1, side, side}) throw DataError("sample shape mismatch in manifest");
        const auto io = jsmp.at("image_offset").get<std::size_t>(), mo = jsmp.at("mask_offset").get<std::size_t>();
        if (io + hw * 8 > img.size() || mo + hw > msk.size()) throw DataError("sample offset out of range");
        Sample s{Tensor({1, side, side}), std::vector<std::uint8_t>(hw), SiteId{jsmp.at("site").get<int>()}};
        std::istringstream in(img.substr(io, hw * 8), std::ios::binary);
        read_f64_le(in, s.image.values());
        std::copy_n(reinterpret_cast<const std::uint8_t*>(msk.data() + mo), hw, s.mask.begin());
        if (std::any_of(s.mask.begin(), s.mask.end(), [](std::uint8_t m) { return m > 1; }))
          throw DataError("mask payload contains labels > 1");
        const std::string split = jsmp.at("split").get<std::string>();
        if (split == "train") sd.train.push_back(std::move(s));
        else if (split == "test") sd.test.push_back(std::move(s));
        else throw DataError("unknown split '" + split + "'");
      }
      corpus.sites.push_back(std::move(sd));
    }
    return corpus;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt dataset manifest: " + std::string(e.what()));
  }
}

}  // namespace msnet
