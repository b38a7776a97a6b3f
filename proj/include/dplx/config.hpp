#pragma once

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dplx/training.hpp"

namespace dplx {

/// Everything a run needs, read from an INI file with sections [run], [data],
/// [model], [train], [diffusion] and [eval].
struct RunConfig {
  std::uint64_t seed = 1;
  bool seed_set = false;  // false: fall back to DPLX_SEED, then 1
  std::string precision = "single";

  CorpusSpec data;
  std::string data_path;  // JSONL corpus; generated from `data` when empty
  ModelConfig model;
  TrainConfig train;
  std::size_t beam = 10;

  RunConfig() {
    data.vocab = 12;
    data.max_len = 24;
    data.pairs = 20000;
    data.difficulty = Difficulty::reverse_shift;
  }

  /// Model dims that follow from the data section.
  ModelConfig resolved_model() const {
    ModelConfig m = model;
    m.vocab = data.vocab;
    m.max_units = data.max_len;
    return m;
  }

  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }

  /// Fixes the seed from DPLX_SEED when neither the file nor a flag set it.
  void resolve_seed() {
    if (seed_set) return;
    if (const char* env = std::getenv("DPLX_SEED")) {
      try {
        seed = std::stoull(env);
      } catch (const std::exception&) {
        throw ConfigError(std::string("DPLX_SEED is not an unsigned integer: '") + env + "'");
      }
    }
    seed_set = true;
  }

  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;

  std::string to_ini() const {
    std::ostringstream os;
    std::string section;
    for (auto& [k, v] : entries()) {
      const auto dot = k.find('.');
      const auto sec = k.substr(0, dot);
      if (sec != section) {
        if (!section.empty()) os << '\n';
        os << '[' << sec << "]\n";
        section = sec;
      }
      os << k.substr(dot + 1) << " = " << v << '\n';
    }
    return os.str();
  }

  /// Hash over everything that shapes parameters or the training trajectory's
  /// identity; budgets and logging cadence are left out so a run can be extended.
  std::string hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (auto& [k, v] : entries()) {
      if (k.rfind("model.", 0) == 0 || k.rfind("data.", 0) == 0 || k == "run.seed" || k == "run.precision" ||
          k == "train.mode" || k == "train.batch_tokens")
        h = fnv1a(k + "=" + v + ";", h);
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  static RunConfig from_ini(const std::string& path) {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::read_ini(path, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("cannot read config: ") + e.what());
    }
    RunConfig cfg;
    for (auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError("config key '" + section + "' lies outside any section");
      for (auto& [key, val] : body) cfg.set(section + "." + key, val.get_value<std::string>());
    }
    return cfg;
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write resolved config to '" + path + "'");
    os << to_ini();
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  if constexpr (std::is_unsigned_v<T>)
    if (v.find('-') != std::string::npos) throw ConfigError("config key '" + key + "' must be non-negative");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string fmt(bool v) { return v ? "true" : "false"; }

}  // namespace detail

inline void RunConfig::set(const std::string& raw_key, const std::string& raw_value) {
  const std::string key = detail::trim(raw_key), v = detail::trim(raw_value);
  using detail::parse_bool;
  using detail::parse_number;
  using Z = std::size_t;
  static const std::map<std::string, std::function<void(RunConfig&, const std::string&, const std::string&)>> setters = {
      {"run.seed", [](RunConfig& c, auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(k, v); c.seed_set = true; }},
      {"run.precision", [](RunConfig& c, auto&, auto& v) {
         if (v != "single" && v != "double") throw ConfigError("run.precision must be single or double");
         c.precision = v;
       }},
      {"data.path", [](RunConfig& c, auto&, auto& v) { c.data_path = v; }},
      {"data.pairs", [](RunConfig& c, auto& k, auto& v) { c.data.pairs = parse_number<Z>(k, v); }},
      {"data.vocab", [](RunConfig& c, auto& k, auto& v) { c.data.vocab = parse_number<int>(k, v); }},
      {"data.max_len", [](RunConfig& c, auto& k, auto& v) { c.data.max_len = parse_number<Z>(k, v); }},
      {"data.difficulty", [](RunConfig& c, auto&, auto& v) { c.data.difficulty = parse_difficulty(v); }},
      {"data.seed", [](RunConfig& c, auto& k, auto& v) { c.data.seed = parse_number<std::uint64_t>(k, v); }},
      {"data.shift", [](RunConfig& c, auto& k, auto& v) { c.data.shift = parse_number<int>(k, v); }},
      {"model.width", [](RunConfig& c, auto& k, auto& v) { c.model.width = parse_number<Z>(k, v); }},
      {"model.layers", [](RunConfig& c, auto& k, auto& v) { c.model.layers = parse_number<Z>(k, v); }},
      {"model.heads", [](RunConfig& c, auto& k, auto& v) { c.model.heads = parse_number<Z>(k, v); }},
      {"model.kernel", [](RunConfig& c, auto& k, auto& v) { c.model.kernel = parse_number<Z>(k, v); }},
      {"model.ffn_mult", [](RunConfig& c, auto& k, auto& v) { c.model.ffn_mult = parse_number<Z>(k, v); }},
      {"model.dropout", [](RunConfig& c, auto& k, auto& v) { c.model.dropout = parse_number<double>(k, v); }},
      {"model.encoders_trainable", [](RunConfig& c, auto& k, auto& v) { c.model.encoders_trainable = parse_bool(k, v); }},
      {"model.position_features", [](RunConfig& c, auto& k, auto& v) { c.model.position_features = parse_bool(k, v); }},
      {"train.k1", [](RunConfig& c, auto& k, auto& v) { c.train.k1 = parse_number<Z>(k, v); }},
      {"train.k2", [](RunConfig& c, auto& k, auto& v) { c.train.k2 = parse_number<Z>(k, v); }},
      {"train.k3", [](RunConfig& c, auto& k, auto& v) { c.train.k3 = parse_number<Z>(k, v); }},
      {"train.lr", [](RunConfig& c, auto& k, auto& v) { c.train.adam.lr = parse_number<double>(k, v); }},
      {"train.warmup", [](RunConfig& c, auto& k, auto& v) { c.train.adam.warmup = parse_number<Z>(k, v); }},
      {"train.beta1", [](RunConfig& c, auto& k, auto& v) { c.train.adam.beta1 = parse_number<double>(k, v); }},
      {"train.beta2", [](RunConfig& c, auto& k, auto& v) { c.train.adam.beta2 = parse_number<double>(k, v); }},
      {"train.eps", [](RunConfig& c, auto& k, auto& v) { c.train.adam.eps = parse_number<double>(k, v); }},
      {"train.clip_norm", [](RunConfig& c, auto& k, auto& v) { c.train.adam.clip_norm = parse_number<double>(k, v); }},
      {"train.batch_tokens", [](RunConfig& c, auto& k, auto& v) { c.train.batch_tokens = parse_number<Z>(k, v); }},
      {"train.mode", [](RunConfig& c, auto&, auto& v) { c.train.mode = parse_loss_mode(v); }},
      {"train.w1", [](RunConfig& c, auto& k, auto& v) { c.train.weights.w[0] = parse_number<double>(k, v); }},
      {"train.w2", [](RunConfig& c, auto& k, auto& v) { c.train.weights.w[1] = parse_number<double>(k, v); }},
      {"train.w3", [](RunConfig& c, auto& k, auto& v) { c.train.weights.w[2] = parse_number<double>(k, v); }},
      {"train.w4", [](RunConfig& c, auto& k, auto& v) { c.train.weights.w[3] = parse_number<double>(k, v); }},
      {"train.w5", [](RunConfig& c, auto& k, auto& v) { c.train.weights.w[4] = parse_number<double>(k, v); }},
      {"train.w6", [](RunConfig& c, auto& k, auto& v) { c.train.weights.w[5] = parse_number<double>(k, v); }},
      {"train.stage2_composite", [](RunConfig& c, auto& k, auto& v) { c.train.stage2_composite = parse_bool(k, v); }},
      {"train.log_interval", [](RunConfig& c, auto& k, auto& v) { c.train.log_interval = parse_number<Z>(k, v); }},
      {"train.eval_interval", [](RunConfig& c, auto& k, auto& v) { c.train.eval_interval = parse_number<Z>(k, v); }},
      {"train.eval_pairs", [](RunConfig& c, auto& k, auto& v) { c.train.eval_pairs = parse_number<Z>(k, v); }},
      {"train.record_wallclock", [](RunConfig& c, auto& k, auto& v) { c.train.record_wallclock = parse_bool(k, v); }},
      {"diffusion.schedule", [](RunConfig& c, auto&, auto& v) { c.train.diffusion.kind = parse_schedule_kind(v); }},
      {"diffusion.steps", [](RunConfig& c, auto& k, auto& v) { c.train.diffusion.steps = parse_number<Z>(k, v); }},
      {"diffusion.beta_start_x", [](RunConfig& c, auto& k, auto& v) { c.train.diffusion.beta_start_x = parse_number<double>(k, v); }},
      {"diffusion.beta_end_x", [](RunConfig& c, auto& k, auto& v) { c.train.diffusion.beta_end_x = parse_number<double>(k, v); }},
      {"diffusion.beta_start_y", [](RunConfig& c, auto& k, auto& v) { c.train.diffusion.beta_start_y = parse_number<double>(k, v); }},
      {"diffusion.beta_end_y", [](RunConfig& c, auto& k, auto& v) { c.train.diffusion.beta_end_y = parse_number<double>(k, v); }},
      {"diffusion.lambda1", [](RunConfig& c, auto& k, auto& v) { c.train.diffusion.lambda1 = parse_number<double>(k, v); }},
      {"diffusion.lambda2", [](RunConfig& c, auto& k, auto& v) { c.train.diffusion.lambda2 = parse_number<double>(k, v); }},
      {"eval.beam", [](RunConfig& c, auto& k, auto& v) { c.beam = parse_number<Z>(k, v); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(*this, key, v);
}

inline std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  using detail::fmt;
  using std::to_string;
  const auto& t = train;
  const auto& d = train.diffusion;
  return {
      {"run.seed", to_string(seed)},
      {"run.precision", precision},
      {"data.path", data_path},
      {"data.pairs", to_string(data.pairs)},
      {"data.vocab", to_string(data.vocab)},
      {"data.max_len", to_string(data.max_len)},
      {"data.difficulty", dplx::to_string(data.difficulty)},
      {"data.seed", to_string(data.seed)},
      {"data.shift", to_string(data.shift)},
      {"model.width", to_string(model.width)},
      {"model.layers", to_string(model.layers)},
      {"model.heads", to_string(model.heads)},
      {"model.kernel", to_string(model.kernel)},
      {"model.ffn_mult", to_string(model.ffn_mult)},
      {"model.dropout", fmt(model.dropout)},
      {"model.encoders_trainable", fmt(model.encoders_trainable)},
      {"model.position_features", fmt(model.position_features)},
      {"train.k1", to_string(t.k1)},
      {"train.k2", to_string(t.k2)},
      {"train.k3", to_string(t.k3)},
      {"train.lr", fmt(t.adam.lr)},
      {"train.warmup", to_string(t.adam.warmup)},
      {"train.beta1", fmt(t.adam.beta1)},
      {"train.beta2", fmt(t.adam.beta2)},
      {"train.eps", fmt(t.adam.eps)},
      {"train.clip_norm", fmt(t.adam.clip_norm)},
      {"train.batch_tokens", to_string(t.batch_tokens)},
      {"train.mode", dplx::to_string(t.mode)},
      {"train.w1", fmt(t.weights.w[0])},
      {"train.w2", fmt(t.weights.w[1])},
      {"train.w3", fmt(t.weights.w[2])},
      {"train.w4", fmt(t.weights.w[3])},
      {"train.w5", fmt(t.weights.w[4])},
      {"train.w6", fmt(t.weights.w[5])},
      {"train.stage2_composite", fmt(t.stage2_composite)},
      {"train.log_interval", to_string(t.log_interval)},
      {"train.eval_interval", to_string(t.eval_interval)},
      {"train.eval_pairs", to_string(t.eval_pairs)},
      {"train.record_wallclock", fmt(t.record_wallclock)},
      {"diffusion.schedule", dplx::to_string(d.kind)},
      {"diffusion.steps", to_string(d.steps)},
      {"diffusion.beta_start_x", fmt(d.beta_start_x)},
      {"diffusion.beta_end_x", fmt(d.beta_end_x)},
      {"diffusion.beta_start_y", fmt(d.beta_start_y)},
      {"diffusion.beta_end_y", fmt(d.beta_end_y)},
      {"diffusion.lambda1", fmt(d.lambda1)},
      {"diffusion.lambda2", fmt(d.lambda2)},
      {"eval.beam", to_string(beam)},
  };
}

/// Full-scale budgets and the large model; parameter-count checks only.
inline void apply_paper_preset(RunConfig& c) {
  c.train.k1 = 200000;
  c.train.k2 = 200000;
  c.train.k3 = 200000;
  const auto big = ModelConfig::paper_large();
  c.model.width = big.width;
  c.model.layers = big.layers;
  c.model.heads = big.heads;
  c.model.kernel = big.kernel;
  c.data.max_len = big.max_units;
  c.data.vocab = big.vocab;
}

}  // namespace dplx
