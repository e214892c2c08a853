#include "msnet/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "msnet/checkpoint.hpp"
#include "msnet/errors.hpp"
#include "msnet/protocol.hpp"

namespace msnet {

namespace {

using Setter = std::function<void(RunConfig&, const std::string&)>;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const std::string t = trim(text);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

const std::vector<std::string> kProfileFields{"gamma_exponent",       "contrast_scale", "brightness_offset",
                                              "bias_field_amplitude", "noise_sigma",    "object_scale_min",
                                              "object_scale_max",     "texture_seed"};

const std::map<std::string, Setter>& schema() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto num = [](auto getter) {
      return Setter([getter](RunConfig& c, const std::string& v) {
        auto& ref = getter(c);
        ref = parse_number<std::remove_reference_t<decltype(ref)>>("", v);
      });
    };
    t["seed"] = num([](RunConfig& c) -> std::uint64_t& { return c.seed; });
    t["arch.base_channels"] = num([](RunConfig& c) -> int& { return c.arch.base_channels; });
    t["arch.depth"] = num([](RunConfig& c) -> int& { return c.arch.depth; });
    t["arch.bottleneck_blocks"] = num([](RunConfig& c) -> int& { return c.arch.bottleneck_blocks; });
    t["train.strategy"] = [](RunConfig& c, const std::string& v) { c.strategy = parse_strategy(trim(v)); };
    t["train.iterations"] = num([](RunConfig& c) -> int& { return c.train.iterations; });
    t["train.batch_size"] = num([](RunConfig& c) -> int& { return c.train.batch_size; });
    t["train.alpha"] = num([](RunConfig& c) -> double& { return c.train.weights.alpha; });
    t["train.eta"] = num([](RunConfig& c) -> double& { return c.train.weights.eta; });
    t["train.lr0"] = num([](RunConfig& c) -> double& { return c.train.lr0; });
    t["train.lr_decay"] = num([](RunConfig& c) -> double& { return c.train.lr_decay; });
    t["train.lr_step"] = num([](RunConfig& c) -> int& { return c.train.lr_step; });
    t["train.adam_beta1"] = num([](RunConfig& c) -> double& { return c.train.adam_beta1; });
    t["train.adam_beta2"] = num([](RunConfig& c) -> double& { return c.train.adam_beta2; });
    t["train.adam_epsilon"] = num([](RunConfig& c) -> double& { return c.train.adam_epsilon; });
    t["train.augment"] = [](RunConfig& c, const std::string& v) { c.train.augment = parse_bool("", v); };
    t["train.knowledge_transfer"] = [](RunConfig& c, const std::string& v) {
      c.train.knowledge_transfer = parse_bool("", v);
    };
    t["train.checkpoint_every"] = num([](RunConfig& c) -> int& { return c.checkpoint_every; });
    t["data.seed"] = [](RunConfig& c, const std::string& v) { c.data_seed = parse_number<std::uint64_t>("", v); };
    t["data.image_size"] = num([](RunConfig& c) -> int& { return c.corpus.image_size; });
    t["data.train_per_site"] = num([](RunConfig& c) -> int& { return c.corpus.train_per_site; });
    t["data.test_per_site"] = num([](RunConfig& c) -> int& { return c.corpus.test_per_site; });
    t["data.preset"] = [](RunConfig& c, const std::string& v) {
      const std::string p = trim(v);
      if (p == "heterogeneous") c.corpus.profiles = heterogeneous_profiles();
      else if (p == "homogeneous") c.corpus.profiles = homogeneous_profiles();
      else throw ConfigError("expected heterogeneous or homogeneous, got '" + p + "'");
      c.preset = p;
    };
    t["data.dir"] = [](RunConfig& c, const std::string& v) { c.data_dir = trim(v); };
    t["eval.strategies"] = [](RunConfig& c, const std::string& v) {
      c.strategies.clear();
      for (const std::string& s : split_list(v)) c.strategies.push_back(parse_strategy(s));
    };
    t["eval.seeds"] = [](RunConfig& c, const std::string& v) {
      c.seeds.clear();
      for (const std::string& s : split_list(v)) c.seeds.push_back(parse_number<std::uint64_t>("", s));
      if (c.seeds.empty()) throw ConfigError("expected at least one seed");
    };
    t["eval.alpha_grid"] = [](RunConfig& c, const std::string& v) {
      c.alpha_grid.clear();
      for (const std::string& s : split_list(v)) c.alpha_grid.push_back(parse_number<double>("", s));
    };
    t["out.dir"] = [](RunConfig& c, const std::string& v) { c.out_dir = trim(v); };
    for (int site = 1; site <= 3; ++site)
      for (const std::string& field : kProfileFields) {
        const std::string key = "data.site" + std::to_string(site) + "." + field;
        t[key] = [site, field](RunConfig& c, const std::string& v) {
          SiteProfile& p = c.corpus.profiles.at(static_cast<std::size_t>(site - 1));
          nlohmann::json j = p;
          if (field == "texture_seed") j[field] = parse_number<std::int64_t>("", v);
          else j[field] = parse_number<double>("", v);
          p = j.get<SiteProfile>();
        };
      }
    return t;
  }();
  return table;
}

std::string resolve(const std::string& key) {
  const auto& t = schema();
  if (t.count(key)) return key;
  std::vector<std::string> matches;
  for (const auto& [name, setter] : t)
    if (name.size() > key.size() && name.compare(name.size() - key.size(), key.size(), key) == 0 &&
        name[name.size() - key.size() - 1] == '.')
      matches.push_back(name);
  if (matches.size() == 1) return matches.front();
  if (matches.empty()) throw ConfigError("unknown config key '" + key + "'");
  std::string list;
  for (const std::string& m : matches) list += (list.empty() ? "" : ", ") + m;
  throw ConfigError("ambiguous config key '" + key + "' (could be " + list + ")");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [name, setter] : schema()) keys.push_back(name);
  return keys;
}

void apply_setting(RunConfig& config, const std::string& raw_key, const std::string& value) {
  const std::string key = resolve(trim(raw_key));
  try {
    schema().at(key)(config, value);
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    if (msg.rfind("config key", 0) == 0) msg = msg.substr(msg.find(':') + 2);
    throw ConfigError("config key '" + key + "': " + msg);
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line, section;
  std::vector<std::pair<std::string, std::string>> settings;
  for (int n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(path.string() + ":" + std::to_string(n) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key = value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    settings.emplace_back(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
  }
  // presets replace whole profiles, so they go before per-site fields
  std::stable_partition(settings.begin(), settings.end(), [](const auto& kv) {
    return kv.first == "data.preset" || kv.first == "preset";
  });
  for (const auto& [k, v] : settings) apply_setting(config, k, v);
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments) {
  std::vector<std::pair<std::string, std::string>> settings;
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not key=value");
    settings.emplace_back(trim(a.substr(0, eq)), a.substr(eq + 1));
  }
  std::stable_partition(settings.begin(), settings.end(), [](const auto& kv) {
    return kv.first == "data.preset" || kv.first == "preset";
  });
  for (const auto& [k, v] : settings) apply_setting(config, k, v);
}

void RunConfig::finalize() {
  train.seed = seed;
  corpus.seed = data_seed.value_or(seed);
  arch.num_sites = static_cast<int>(corpus.profiles.size());
  arch.input_size = corpus.image_size;
  arch.validate();
  train.validate();
  if (checkpoint_every < 0) throw ConfigError("config key 'train.checkpoint_every' must be >= 0");
  for (double a : alpha_grid)
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("config key 'eval.alpha_grid': alpha must lie in [0,1]");
  for (const SiteProfile& p : corpus.profiles) p.validate(corpus.image_size);
  if (corpus.train_per_site < train.batch_size)
    throw ConfigError("config key 'data.train_per_site' must be at least train.batch_size");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json profiles = nlohmann::json::array();
  for (const SiteProfile& p : corpus.profiles) profiles.push_back(p);
  nlohmann::json strats = nlohmann::json::array();
  for (Strategy s : strategies) strats.push_back(to_string(s));
  return {{"seed", seed},
          {"arch", arch},
          {"train", msnet::to_json(train)},
          {"strategy", to_string(strategy)},
          {"checkpoint_every", checkpoint_every},
          {"data",
           {{"seed", corpus.seed},
            {"preset", preset},
            {"image_size", corpus.image_size},
            {"train_per_site", corpus.train_per_site},
            {"test_per_site", corpus.test_per_site},
            {"profiles", profiles},
            {"dir", data_dir.string()}}},
          {"eval", {{"strategies", strats}, {"seeds", seeds}, {"alpha_grid", alpha_grid}}},
          {"out", {{"dir", out_dir.string()}}}};
}

}  // namespace msnet
