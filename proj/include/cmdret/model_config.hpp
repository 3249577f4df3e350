#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "cmdret/errors.hpp"
#include "cmdret/numerics/tensor.hpp"
#include "cmdret/params.hpp"
#include "cmdret/rng.hpp"

namespace cmdret {

/// Model dimensions and architecture switches. Desk-scale defaults.
struct ModelConfig {
  std::size_t upstream_layers = 3;  // CNN output + transformer hidden states
  std::size_t speech_dim = 16;      // D, upstream speech feature width
  std::size_t shared_dim = 16;      // E, shared speech/image embedding width
  std::size_t heads = 8;
  std::size_t ffn_multiplier = 4;
  bool pre_norm = false;
  bool positional_encoding = false;
  double init_temperature = 0.07;
  bool clamp_logit_scale = false;
  double max_logit_scale = 100.0;

  std::size_t head_dim() const { return speech_dim / heads; }
  std::size_t ffn_dim() const { return ffn_multiplier * speech_dim; }

  void validate() const {
    if (upstream_layers < 2) {
      throw ConfigError("upstream_layers must be at least 2 (CNN output plus one hidden layer)");
    }
    if (speech_dim == 0 || shared_dim == 0 || heads == 0 || ffn_multiplier == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (speech_dim % heads != 0) {
      throw ConfigError("speech_dim " + std::to_string(speech_dim) +
                        " is not divisible by heads " + std::to_string(heads));
    }
    if (!(init_temperature > 0.0)) throw ConfigError("init_temperature must be positive");
    if (!(max_logit_scale > 0.0)) throw ConfigError("max_logit_scale must be positive");
  }

  /// Stable textual form; hashed into checkpoints.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "upstream_layers=" << upstream_layers << ";speech_dim=" << speech_dim
       << ";shared_dim=" << shared_dim << ";heads=" << heads << ";ffn_multiplier=" << ffn_multiplier
       << ";pre_norm=" << pre_norm << ";positional_encoding=" << positional_encoding
       << ";clamp_logit_scale=" << clamp_logit_scale << ";max_logit_scale=" << max_logit_scale;
    return os.str();
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : canonical()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

namespace names {
inline const std::string layer_logits = "speech.layer_logits";
inline const std::string cls_token = "speech.cls_token";
inline const std::string attn_q_w = "speech.attn.q.weight";
inline const std::string attn_q_b = "speech.attn.q.bias";
inline const std::string attn_k_w = "speech.attn.k.weight";
inline const std::string attn_k_b = "speech.attn.k.bias";
inline const std::string attn_v_w = "speech.attn.v.weight";
inline const std::string attn_v_b = "speech.attn.v.bias";
inline const std::string attn_o_w = "speech.attn.o.weight";
inline const std::string attn_o_b = "speech.attn.o.bias";
inline const std::string ln1_gamma = "speech.ln1.gamma";
inline const std::string ln1_beta = "speech.ln1.beta";
inline const std::string ffn_in_w = "speech.ffn.in.weight";
inline const std::string ffn_in_b = "speech.ffn.in.bias";
inline const std::string ffn_out_w = "speech.ffn.out.weight";
inline const std::string ffn_out_b = "speech.ffn.out.bias";
inline const std::string ln2_gamma = "speech.ln2.gamma";
inline const std::string ln2_beta = "speech.ln2.beta";
inline const std::string proj_w = "speech.proj.weight";
inline const std::string proj_b = "speech.proj.bias";
inline const std::string fusion_fc_w = "fusion.fc.weight";
inline const std::string fusion_fc_b = "fusion.fc.bias";
inline const std::string fusion_ln_gamma = "fusion.ln.gamma";
inline const std::string fusion_ln_beta = "fusion.ln.beta";
inline const std::string log_tau = "log_tau";
}  // namespace names

enum class Init { zeros, ones, xavier, small_normal, log_temperature };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamGroup group;
  bool decay;
  Init init;
};

/// Every trainable tensor of the model, in registration order.
inline std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.speech_dim, e = cfg.shared_dim, f = cfg.ffn_dim();
  using G = ParamGroup;
  std::vector<ParamSpec> s;
  s.push_back({names::layer_logits, {cfg.upstream_layers}, G::layer_logits, false, Init::zeros});
  s.push_back({names::cls_token, {d}, G::encoder, false, Init::small_normal});
  for (const auto& [w, b] : {std::pair{names::attn_q_w, names::attn_q_b},
                             std::pair{names::attn_k_w, names::attn_k_b},
                             std::pair{names::attn_v_w, names::attn_v_b},
                             std::pair{names::attn_o_w, names::attn_o_b}}) {
    s.push_back({w, {d, d}, G::encoder, true, Init::xavier});
    s.push_back({b, {d}, G::encoder, false, Init::zeros});
  }
  s.push_back({names::ln1_gamma, {d}, G::encoder, false, Init::ones});
  s.push_back({names::ln1_beta, {d}, G::encoder, false, Init::zeros});
  s.push_back({names::ffn_in_w, {d, f}, G::encoder, true, Init::xavier});
  s.push_back({names::ffn_in_b, {f}, G::encoder, false, Init::zeros});
  s.push_back({names::ffn_out_w, {f, d}, G::encoder, true, Init::xavier});
  s.push_back({names::ffn_out_b, {d}, G::encoder, false, Init::zeros});
  s.push_back({names::ln2_gamma, {d}, G::encoder, false, Init::ones});
  s.push_back({names::ln2_beta, {d}, G::encoder, false, Init::zeros});
  s.push_back({names::proj_w, {d, e}, G::encoder, true, Init::xavier});
  s.push_back({names::proj_b, {e}, G::encoder, false, Init::zeros});
  s.push_back({names::fusion_fc_w, {e, e}, G::fusion, true, Init::xavier});
  s.push_back({names::fusion_fc_b, {e}, G::fusion, false, Init::zeros});
  s.push_back({names::fusion_ln_gamma, {e}, G::fusion, false, Init::ones});
  s.push_back({names::fusion_ln_beta, {e}, G::fusion, false, Init::zeros});
  s.push_back({names::log_tau, {}, G::temperature, false, Init::log_temperature});
  return s;
}

/// Trainable scalar count without allocating the parameters.
inline std::size_t count_parameters(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& spec : parameter_specs(cfg)) n += shape_numel(spec.shape);
  return n;
}

inline ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed, Stream::init);
  ParamStore store;
  for (auto& spec : parameter_specs(cfg)) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case Init::zeros: break;
      case Init::ones:
        for (double& v : t.values()) v = 1.0;
        break;
      case Init::xavier: {
        const double limit = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
        for (double& v : t.values()) v = rng.uniform(-limit, limit);
        break;
      }
      case Init::small_normal:
        for (double& v : t.values()) v = 0.02 * rng.normal();
        break;
      case Init::log_temperature:
        t[0] = std::log(cfg.init_temperature);
        break;
    }
    store.add(spec.name, std::move(t), spec.group, spec.decay);
  }
  return store;
}

}  // namespace cmdret
