#pragma once

// Root configuration, its canonical JSON form, and the config hash stamped
// into every artifact.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "calsam/bounds.hpp"
#include "calsam/metrics.hpp"
#include "calsam/synthdata.hpp"
#include "calsam/trainer.hpp"

namespace calsam {

using json = nlohmann::json;

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct DataConfig {
  int centers = 3;
  std::size_t n_per_center = 30;  // 60 train / 30 target with the default target fraction
  synth::Protocol protocol = synth::Protocol::scanner_split;
  std::uint64_t seed = 7;
  Extents shape{32, 32, 32};  // reference setup: 128^3
  synth::SynthParams synth;
  synth::SplitOptions split;
};

struct MetricConfig {
  std::size_t bins = kDefaultBins;
  double threshold = kMaskThreshold;  // fixed; recorded for provenance
  std::string hd95_convention = "pooled-symmetric-linear";
};

struct BoundsConfig {
  double delta = 0.05;
  double c = 1.0;
  std::size_t fisher_samples = 30;
};

struct OverheadConfig {
  std::size_t steps = 100;
  std::size_t warmup = 10;
};

struct RootConfig {
  DataConfig data;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{std::begin(kDefaultSeeds), std::end(kDefaultSeeds)};
  MetricConfig metrics;
  BoundsConfig bounds;
  OverheadConfig overhead;
  std::string output = "runs";

  void validate() const {
    if (data.centers < 2) throw std::invalid_argument("data.centers must be at least 2");
    if (data.n_per_center < 1) throw std::invalid_argument("data.n_per_center must be at least 1");
    if (data.shape.nx < 8 || data.shape.ny < 8 || data.shape.nz < 8) {
      throw std::invalid_argument("data.shape extents must be at least 8");
    }
    train.validate();
    if (seeds.empty()) throw std::invalid_argument("seeds must not be empty");
    if (metrics.bins < 1) throw std::invalid_argument("metrics.bins must be at least 1");
    if (metrics.threshold != kMaskThreshold) throw std::invalid_argument("metrics.threshold is fixed at 0.5");
    BoundInputs probe;
    probe.delta = bounds.delta;
    probe.c = bounds.c;
    probe.validate();
    if (bounds.fisher_samples < 1) throw std::invalid_argument("bounds.fisher_samples must be at least 1");
    if (overhead.steps < 1) throw std::invalid_argument("overhead.steps must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// JSON

inline json extents_json(const Extents& e) { return json::array({e.nx, e.ny, e.nz}); }

inline Extents extents_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("extents must be [nx, ny, nz]");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

inline json to_json(const RootConfig& c) {
  const auto& s = c.data.synth;
  const auto& t = c.train;
  const auto& w = t.weights;
  json j;
  j["data"] = {
      {"centers", c.data.centers},
      {"n_per_center", c.data.n_per_center},
      {"protocol", synth::to_string(c.data.protocol)},
      {"seed", c.data.seed},
      {"shape", extents_json(c.data.shape)},
      {"synth",
       {{"vendor_gain", s.vendor_gain},
        {"vendor_bias", s.vendor_bias},
        {"vendor_noise", s.vendor_noise},
        {"acquisition_noise", s.acquisition_noise},
        {"texture_amplitude", s.texture_amplitude},
        {"lesion_contrast", s.lesion_contrast},
        {"prompt_sigma", s.prompt_sigma},
        {"spacing", s.spacing}}},
      {"split",
       {{"target_fraction", c.data.split.target_fraction},
        {"holdout_per_center", c.data.split.holdout_per_center},
        {"include_motion", c.data.split.include_motion},
        {"motion_severity", c.data.split.motion_severity}}},
  };
  j["train"] = {
      {"ablation", to_string(t.ablation)},
      {"weights",
       {{"lambda1", w.lambda1},
        {"lambda2", w.lambda2},
        {"tau", w.tau},
        {"gamma", w.gamma},
        {"fip_inner", to_string(w.fip_inner)},
        {"bce_reduction", w.bce_reduction == Reduction::mean ? "mean" : "sum"}}},
      {"lr0", t.lr0},
      {"epochs", t.epochs},
      {"batch_size", t.batch_size},
      {"betas", {t.beta1, t.beta2}},
      {"adam_eps", t.adam_eps},
      {"seed", t.seed},
      {"guided", t.guided},
      {"clip_norm", t.clip_norm ? json(*t.clip_norm) : json(nullptr)},
      {"focal_focus", t.focal_focus},
  };
  j["seeds"] = c.seeds;
  j["metrics"] = {{"bins", c.metrics.bins},
                  {"threshold", c.metrics.threshold},
                  {"hd95_convention", c.metrics.hd95_convention}};
  j["bounds"] = {{"delta", c.bounds.delta}, {"c", c.bounds.c}, {"fisher_samples", c.bounds.fisher_samples}};
  j["overhead"] = {{"steps", c.overhead.steps}, {"warmup", c.overhead.warmup}};
  j["output"] = c.output;
  return j;
}

inline RootConfig root_config_from(const json& j) {
  RootConfig c;
  const auto& d = j.at("data");
  c.data.centers = d.at("centers").get<int>();
  c.data.n_per_center = d.at("n_per_center").get<std::size_t>();
  c.data.protocol = synth::parse_protocol(d.at("protocol").get<std::string>());
  c.data.seed = d.at("seed").get<std::uint64_t>();
  c.data.shape = extents_from(d.at("shape"));
  const auto& s = d.at("synth");
  auto& sp = c.data.synth;
  sp.vendor_gain = s.at("vendor_gain").get<double>();
  sp.vendor_bias = s.at("vendor_bias").get<double>();
  sp.vendor_noise = s.at("vendor_noise").get<double>();
  sp.acquisition_noise = s.at("acquisition_noise").get<double>();
  sp.texture_amplitude = s.at("texture_amplitude").get<double>();
  sp.lesion_contrast = s.at("lesion_contrast").get<double>();
  sp.prompt_sigma = s.at("prompt_sigma").get<double>();
  sp.spacing = s.at("spacing").get<Spacing>();
  const auto& sl = d.at("split");
  c.data.split.target_fraction = sl.at("target_fraction").get<double>();
  c.data.split.holdout_per_center = sl.at("holdout_per_center").get<std::size_t>();
  c.data.split.include_motion = sl.at("include_motion").get<bool>();
  c.data.split.motion_severity = sl.at("motion_severity").get<int>();

  const auto& t = j.at("train");
  auto& tc = c.train;
  tc.ablation = parse_ablation(t.at("ablation").get<std::string>());
  const auto& w = t.at("weights");
  tc.weights.lambda1 = w.at("lambda1").get<double>();
  tc.weights.lambda2 = w.at("lambda2").get<double>();
  tc.weights.tau = w.at("tau").get<double>();
  tc.weights.gamma = w.at("gamma").get<double>();
  tc.weights.fip_inner = parse_inner_loss(w.at("fip_inner").get<std::string>());
  const auto red = w.at("bce_reduction").get<std::string>();
  if (red != "mean" && red != "sum") throw std::invalid_argument("train.weights.bce_reduction must be mean or sum");
  tc.weights.bce_reduction = red == "mean" ? Reduction::mean : Reduction::sum;
  tc.lr0 = t.at("lr0").get<double>();
  tc.epochs = t.at("epochs").get<int>();
  tc.batch_size = t.at("batch_size").get<std::size_t>();
  const auto betas = t.at("betas").get<std::vector<double>>();
  if (betas.size() != 2) throw std::invalid_argument("train.betas must hold two values");
  tc.beta1 = betas[0];
  tc.beta2 = betas[1];
  tc.adam_eps = t.at("adam_eps").get<double>();
  tc.seed = t.at("seed").get<std::uint64_t>();
  tc.guided = t.at("guided").get<bool>();
  tc.volume_shape = c.data.shape;  // training always runs on the generated volumes
  if (t.at("clip_norm").is_null()) {
    tc.clip_norm.reset();
  } else {
    tc.clip_norm = t.at("clip_norm").get<double>();
  }
  tc.focal_focus = t.at("focal_focus").get<double>();

  c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  const auto& m = j.at("metrics");
  c.metrics.bins = m.at("bins").get<std::size_t>();
  c.metrics.threshold = m.at("threshold").get<double>();
  c.metrics.hd95_convention = m.at("hd95_convention").get<std::string>();
  const auto& b = j.at("bounds");
  c.bounds.delta = b.at("delta").get<double>();
  c.bounds.c = b.at("c").get<double>();
  c.bounds.fisher_samples = b.at("fisher_samples").get<std::size_t>();
  const auto& o = j.at("overhead");
  c.overhead.steps = o.at("steps").get<std::size_t>();
  c.overhead.warmup = o.at("warmup").get<std::size_t>();
  c.output = j.at("output").get<std::string>();
  c.validate();
  return c;
}

/// Hash of the canonical (sorted-key) JSON, output directory excluded so a
/// relocated run keeps its identity.
inline std::string config_hash(const RootConfig& c) {
  json j = to_json(c);
  j.erase("output");
  return hex64(fnv1a64(j.dump()));
}

/// Hash of the data section alone; a manifest is reusable by any config
/// that agrees on it.
inline std::string data_hash(const RootConfig& c) { return hex64(fnv1a64(to_json(c)["data"].dump())); }

/// Applies "dotted.path=value" to a config. The value is parsed as JSON when
/// possible and taken as a string otherwise. Unknown paths are rejected.
inline RootConfig apply_override(const RootConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' is not of the form path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  std::string pointer;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw std::invalid_argument("override path '" + path + "' has an empty segment");
    pointer += "/" + part;
  }
  json j = to_json(c);
  const json::json_pointer ptr(pointer);
  if (!j.contains(ptr)) throw std::invalid_argument("unknown config field '" + path + "'");
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  j[ptr] = value;
  try {
    return root_config_from(j);
  } catch (const json::exception& e) {
    throw std::invalid_argument("override '" + assignment + "': " + e.what());
  }
}

inline RootConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("config file '" + path + "' is not valid JSON");
  // Missing fields fall back to defaults.
  json merged = to_json(RootConfig{});
  merged.merge_patch(j);
  try {
    return root_config_from(merged);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config file '" + path + "': " + e.what());
  }
}

}  // namespace calsam
