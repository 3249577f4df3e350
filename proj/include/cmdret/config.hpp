#pragma once

// Run configuration: a line-oriented "key = value" file plus overrides.
// Every key has one canonical spelling shared by the file and the command
// line; unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cmdret/dataio/synth.hpp"
#include "cmdret/errors.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/optim.hpp"

namespace cmdret {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  dataio::SynthConfig synth;

  std::string manifest;
  std::string split;        // empty: every manifest entry
  std::string eval_split;   // empty: same as split
  std::string out_dir = "run";
  std::string checkpoint;   // eval input; empty: <out_dir>/checkpoints/final.ckpt
  std::string resume;
  std::size_t checkpoint_every = 0;

  std::size_t gradcheck_batch = 4;
  double gradcheck_step = 1e-5;
  double gradcheck_tolerance = 1e-4;
  std::string inject_grad_fault;

  std::vector<double> alphas{0.0, 0.25, 0.5, 0.75, 1.0};
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_integer(const std::string& key, const std::string& text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

inline double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_double(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

template <class T>
ConfigKey size_key(std::string name, std::string help, T RunConfig::*outer, std::size_t T::*field) {
  return {name, std::move(help),
          [=](RunConfig& c, const std::string& v) { (c.*outer).*field = parse_integer<std::size_t>(name, v); },
          [=](const RunConfig& c) { return std::to_string((c.*outer).*field); }};
}

template <class T>
ConfigKey double_key(std::string name, std::string help, T RunConfig::*outer, double T::*field) {
  return {name, std::move(help), [=](RunConfig& c, const std::string& v) { (c.*outer).*field = parse_double(name, v); },
          [=](const RunConfig& c) { return format_double((c.*outer).*field); }};
}

template <class T>
ConfigKey bool_key(std::string name, std::string help, T RunConfig::*outer, bool T::*field) {
  return {name, std::move(help), [=](RunConfig& c, const std::string& v) { (c.*outer).*field = parse_bool(name, v); },
          [=](const RunConfig& c) { return std::string((c.*outer).*field ? "true" : "false"); }};
}

inline ConfigKey string_key(std::string name, std::string help, std::string RunConfig::*field) {
  return {name, std::move(help), [=](RunConfig& c, const std::string& v) { c.*field = v; },
          [=](const RunConfig& c) { return c.*field; }};
}

inline ConfigKey top_size_key(std::string name, std::string help, std::size_t RunConfig::*field) {
  return {name, std::move(help),
          [=](RunConfig& c, const std::string& v) { c.*field = parse_integer<std::size_t>(name, v); },
          [=](const RunConfig& c) { return std::to_string(c.*field); }};
}

inline ConfigKey top_double_key(std::string name, std::string help, double RunConfig::*field) {
  return {name, std::move(help), [=](RunConfig& c, const std::string& v) { c.*field = parse_double(name, v); },
          [=](const RunConfig& c) { return format_double(c.*field); }};
}

}  // namespace detail

/// Every recognized key, in echo order.
inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(size_key("upstream_layers", "number of upstream speech layers", &RunConfig::model,
                         &ModelConfig::upstream_layers));
    k.push_back(size_key("speech_dim", "speech feature width D", &RunConfig::model, &ModelConfig::speech_dim));
    k.push_back(size_key("shared_dim", "shared embedding width E", &RunConfig::model, &ModelConfig::shared_dim));
    k.push_back(size_key("heads", "attention heads", &RunConfig::model, &ModelConfig::heads));
    k.push_back(size_key("ffn_multiplier", "feed-forward width as a multiple of D", &RunConfig::model,
                         &ModelConfig::ffn_multiplier));
    k.push_back(bool_key("pre_norm", "pre-norm transformer layer", &RunConfig::model, &ModelConfig::pre_norm));
    k.push_back(bool_key("positional_encoding", "add sinusoidal positions", &RunConfig::model,
                         &ModelConfig::positional_encoding));
    k.push_back(double_key("init_temperature", "initial softmax temperature", &RunConfig::model,
                           &ModelConfig::init_temperature));
    k.push_back(bool_key("clamp_logit_scale", "clamp 1/tau", &RunConfig::model, &ModelConfig::clamp_logit_scale));
    k.push_back(double_key("max_logit_scale", "upper bound for 1/tau when clamped", &RunConfig::model,
                           &ModelConfig::max_logit_scale));

    k.push_back(size_key("batch_size", "training batch size", &RunConfig::train, &TrainConfig::batch_size));
    k.push_back(size_key("total_steps", "optimizer steps", &RunConfig::train, &TrainConfig::total_steps));
    k.push_back(size_key("warmup_steps", "linear warmup steps", &RunConfig::train, &TrainConfig::warmup_steps));
    k.push_back(double_key("peak_lr", "learning rate at the end of warmup", &RunConfig::train, &TrainConfig::peak_lr));
    k.push_back(double_key("final_lr", "learning rate at total_steps", &RunConfig::train, &TrainConfig::final_lr));
    k.push_back(double_key("weight_decay", "weight decay", &RunConfig::train, &TrainConfig::weight_decay));
    k.push_back(double_key("alpha", "weight of the denoising loss", &RunConfig::train, &TrainConfig::alpha));
    k.push_back(double_key("noise_ratio", "fraction of patches replaced", &RunConfig::train, &TrainConfig::noise_ratio));
    k.push_back({"seed", "random seed",
                 [](RunConfig& c, const std::string& v) {
                   c.train.seed = parse_integer<std::uint64_t>("seed", v);
                   c.synth.seed = c.train.seed;
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    k.push_back({"lr_decay", "linear, cosine or exponential",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "linear") c.train.decay = DecayShape::linear;
                   else if (v == "cosine") c.train.decay = DecayShape::cosine;
                   else if (v == "exponential") c.train.decay = DecayShape::exponential;
                   else throw ConfigError("lr_decay: expected linear, cosine or exponential, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   switch (c.train.decay) {
                     case DecayShape::cosine: return std::string("cosine");
                     case DecayShape::exponential: return std::string("exponential");
                     default: return std::string("linear");
                   }
                 }});
    k.push_back({"weight_decay_mode", "decoupled or coupled",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "decoupled") c.train.weight_decay_mode = WeightDecayMode::decoupled;
                   else if (v == "coupled") c.train.weight_decay_mode = WeightDecayMode::coupled;
                   else throw ConfigError("weight_decay_mode: expected decoupled or coupled, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.train.weight_decay_mode == WeightDecayMode::coupled ? "coupled" : "decoupled");
                 }});

    k.push_back(string_key("manifest", "dataset manifest", &RunConfig::manifest));
    k.push_back(string_key("split", "manifest split used for training", &RunConfig::split));
    k.push_back(string_key("eval_split", "manifest split used for evaluation", &RunConfig::eval_split));
    k.push_back(string_key("out_dir", "output directory", &RunConfig::out_dir));
    k.push_back(string_key("checkpoint", "checkpoint to evaluate", &RunConfig::checkpoint));
    k.push_back(string_key("resume", "checkpoint to resume training from", &RunConfig::resume));
    k.push_back(top_size_key("checkpoint_every", "steps between checkpoints (0: final only)",
                             &RunConfig::checkpoint_every));

    k.push_back(size_key("num_images", "synthetic images", &RunConfig::synth, &dataio::SynthConfig::num_images));
    k.push_back(size_key("captions_per_image", "synthetic captions per image", &RunConfig::synth,
                         &dataio::SynthConfig::captions_per_image));
    k.push_back(size_key("frames", "synthetic maximum frames T", &RunConfig::synth, &dataio::SynthConfig::frames));
    k.push_back(size_key("patches", "synthetic patches N", &RunConfig::synth, &dataio::SynthConfig::patches));
    k.push_back(double_key("difficulty", "synthetic noise level", &RunConfig::synth,
                           &dataio::SynthConfig::difficulty));

    k.push_back(top_size_key("gradcheck_batch", "gradcheck batch size", &RunConfig::gradcheck_batch));
    k.push_back(top_double_key("gradcheck_step", "finite-difference half width", &RunConfig::gradcheck_step));
    k.push_back(top_double_key("gradcheck_tolerance", "maximum relative error", &RunConfig::gradcheck_tolerance));
    k.push_back(string_key("inject_grad_fault", "parameter whose gradient is deliberately corrupted",
                           &RunConfig::inject_grad_fault));

    k.push_back({"alphas", "comma-separated alpha values for sweep-alpha",
                 [](RunConfig& c, const std::string& v) { c.alphas = parse_double_list("alphas", v); },
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.alphas.size(); ++i) s += (i ? "," : "") + format_double(c.alphas[i]);
                   return s;
                 }});
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_config_key(key).set(cfg, value);
}

/// Parses "key = value" lines. '#' starts a comment; blank lines are skipped.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::istream& in,
                                                                          const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    const std::string body = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(body.substr(0, eq));
    const std::string value = detail::trim(body.substr(eq + 1));
    try {
      find_config_key(key);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    out.emplace_back(key, value);
  }
  return out;
}

/// File settings first, then overrides; the last writer wins.
inline RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    for (const auto& [k, v] : parse_config_text(in, file->string())) apply_setting(cfg, k, v);
  }
  for (const auto& [k, v] : overrides) apply_setting(cfg, k, v);
  cfg.synth.upstream_layers = cfg.model.upstream_layers;
  cfg.synth.speech_dim = cfg.model.speech_dim;
  cfg.synth.shared_dim = cfg.model.shared_dim;
  return cfg;
}

/// Fully resolved configuration, one "key = value" line per key. Feeding it
/// back through parse_config_text reproduces the same configuration.
inline std::string echo_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : config_keys()) os << k.name << " = " << k.get(cfg) << '\n';
  return os.str();
}

}  // namespace cmdret
