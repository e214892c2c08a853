#include "msnet/checkpoint.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "msnet/binary_io.hpp"
#include "msnet/errors.hpp"

namespace msnet {

void to_json(nlohmann::json& j, const ArchConfig& a) {
  j = nlohmann::json{{"input_size", a.input_size},   {"base_channels", a.base_channels},
                     {"depth", a.depth},             {"bottleneck_blocks", a.bottleneck_blocks},
                     {"num_classes", a.num_classes}, {"num_sites", a.num_sites}};
}

void from_json(const nlohmann::json& j, ArchConfig& a) {
  j.at("input_size").get_to(a.input_size);
  j.at("base_channels").get_to(a.base_channels);
  j.at("depth").get_to(a.depth);
  j.at("bottleneck_blocks").get_to(a.bottleneck_blocks);
  j.at("num_classes").get_to(a.num_classes);
  j.at("num_sites").get_to(a.num_sites);
}

namespace {

constexpr const char* kFormat = "msnet-checkpoint";

nlohmann::json values_json(const std::vector<double>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (double x : v) a.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
  return a;
}

std::vector<double> values_from(const nlohmann::json& a) {
  std::vector<double> v;
  for (const auto& x : a) v.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
  return v;
}

struct Entry {
  std::string name;
  const Tensor* tensor;
};

struct Parsed {
  nlohmann::json manifest;
  std::string payload;
  std::map<std::string, std::pair<Shape, std::size_t>> index;

  Tensor read(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw CheckpointError("checkpoint lacks tensor " + name);
    const auto& [shape, offset] = it->second;
    Tensor t(shape);
    std::istringstream in(payload.substr(offset, t.numel() * 8), std::ios::binary);
    read_f64_le(in, t.values());
    return t;
  }
};

Parsed parse(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(e.what());
  }
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw CheckpointError("corrupt checkpoint " + path.string() + ": no manifest line");
  Parsed p;
  try {
    p.manifest = nlohmann::json::parse(bytes.substr(0, nl));
    if (p.manifest.at("format") != kFormat) throw CheckpointError("not an msnet checkpoint: " + path.string());
    p.payload = bytes.substr(nl + 1);
    for (const auto& t : p.manifest.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      std::size_t offset = t.at("offset").get<std::size_t>();
      if (offset + shape_numel(shape) * 8 > p.payload.size())
        throw CheckpointError("corrupt checkpoint " + path.string() + ": tensor " + t.at("name").get<std::string>() +
                              " runs past the payload");
      p.index[t.at("name").get<std::string>()] = {shape, offset};
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
  }
  return p;
}

void fill_model(ModelParams& model, const Parsed& p) {
  for (NamedTensor& nt : state_tensors(model)) {
    auto it = p.index.find(nt.name);
    if (it == p.index.end()) throw CheckpointError("checkpoint lacks tensor " + nt.name);
    if (it->second.first != nt.tensor->shape())
      throw DimensionError("checkpoint tensor " + nt.name + " has shape " + shape_to_string(it->second.first) +
                           ", model expects " + shape_to_string(nt.tensor->shape()));
    *nt.tensor = p.read(nt.name);
  }
  const auto& updates = p.manifest.at("bn_updates");
  for (BnState* bn : all_bn_states(model))
    if (updates.contains(bn->name)) bn->updates = updates.at(bn->name).get<std::uint64_t>();
}

}  // namespace

void save_checkpoint(const TrainRun& run_in, const std::filesystem::path& path, CheckpointContent content) {
  TrainRun& run = const_cast<TrainRun&>(run_in);  // state_tensors hands out mutable views; nothing is written
  std::vector<Entry> entries;
  for (const NamedTensor& nt : state_tensors(run.model)) entries.push_back({nt.name, nt.tensor});

  nlohmann::json manifest{{"format", kFormat},
                          {"version", 1},
                          {"strategy", to_string(run.strategy)},
                          {"arch", run.model.config},
                          {"stripped", run.strategy == Strategy::kMsnet && !run.model.has_aux()},
                          {"seed", run.seed},
                          {"site_indices", run.site_indices},
                          {"resumable", content == CheckpointContent::kResumable}};
  nlohmann::json updates = nlohmann::json::object();
  for (BnState* bn : all_bn_states(run.model)) updates[bn->name] = bn->updates;
  manifest["bn_updates"] = updates;

  manifest["iteration"] = run.iteration;
  nlohmann::json hist = nlohmann::json::array();
  for (const LossRecord& r : run.history)
    hist.push_back({{"t", r.iteration}, {"lr", r.lr}, {"aux", values_json(r.aux)}, {"uni", values_json(r.uni)},
                    {"kt", values_json(r.kt)}});
  manifest["history"] = hist;
  if (content == CheckpointContent::kResumable) {
    nlohmann::json adam = nlohmann::json::object();
    for (auto [label, state] : {std::pair{"aux", &run.aux_adam}, std::pair{"uni", &run.uni_adam}}) {
      adam[label] = {{"step", state->step}, {"moments", state->m.size()}};
      for (std::size_t i = 0; i < state->m.size(); ++i) {
        entries.push_back({"adam." + std::string(label) + ".m." + std::to_string(i), &state->m[i]});
        entries.push_back({"adam." + std::string(label) + ".v." + std::to_string(i), &state->v[i]});
      }
    }
    manifest["adam"] = adam;
  }

  nlohmann::json tensors = nlohmann::json::array();
  std::ostringstream payload(std::ios::binary);
  std::size_t offset = 0;
  for (const Entry& e : entries) {
    tensors.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset}});
    write_f64_le(payload, e.tensor->values());
    offset += e.tensor->numel() * 8;
  }
  manifest["tensors"] = tensors;
  write_file_atomic(path, manifest.dump() + "\n" + payload.str());
}

TrainRun load_checkpoint(const std::filesystem::path& path) {
  Parsed p = parse(path);
  try {
    const auto& m = p.manifest;
    TrainRun run;
    run.strategy = parse_strategy(m.at("strategy").get<std::string>());
    ArchConfig arch = m.at("arch").get<ArchConfig>();
    const bool stripped = m.at("stripped").get<bool>();
    run.model = build_model(arch, 0, BuildOptions{run.strategy == Strategy::kMsnet && !stripped});
    run.seed = m.at("seed").get<std::uint64_t>();
    run.site_indices = m.at("site_indices").get<std::vector<int>>();
    fill_model(run.model, p);
    run.iteration = m.at("iteration").get<int>();
    for (const auto& h : m.at("history")) {
      LossRecord r;
      r.iteration = h.at("t").get<int>();
      r.lr = h.at("lr").get<double>();
      r.aux = values_from(h.at("aux"));
      r.uni = values_from(h.at("uni"));
      r.kt = values_from(h.at("kt"));
      run.history.push_back(std::move(r));
    }
    if (m.at("resumable").get<bool>()) {
      for (auto [label, state] : {std::pair{"aux", &run.aux_adam}, std::pair{"uni", &run.uni_adam}}) {
        const auto& a = m.at("adam").at(label);
        state->step = a.at("step").get<std::int64_t>();
        const std::size_t n = a.at("moments").get<std::size_t>();
        for (std::size_t i = 0; i < n; ++i) {
          state->m.push_back(p.read("adam." + std::string(label) + ".m." + std::to_string(i)));
          state->v.push_back(p.read("adam." + std::string(label) + ".v." + std::to_string(i)));
        }
      }
    }
    return run;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint " + path.string() + " describes an invalid model: " + e.what());
  }
}

void load_model_into(ModelParams& target, const std::filesystem::path& path) {
  Parsed p = parse(path);
  try {
    ArchConfig arch = p.manifest.at("arch").get<ArchConfig>();
    if (!(arch == target.config)) {
      nlohmann::json want = target.config, have = arch;
      throw DimensionError("checkpoint architecture " + have.dump() + " does not match model " + want.dump());
    }
    fill_model(target, p);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest in " + path.string() + ": " + e.what());
  }
}

}  // namespace msnet
