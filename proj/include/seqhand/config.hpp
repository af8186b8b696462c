#pragma once

// Flat `key = value` configuration. Every hyperparameter of the model and of
// the two training stages lives in ModelConfig; text round-trips exactly.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "seqhand/errors.hpp"

namespace seqhand {

// Ordered key -> raw value text.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& origin = "config") {
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto text = trim(line);
      if (text.empty()) continue;
      const auto eq = text.find('=');
      if (eq == std::string::npos) {
        throw ContractError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      const auto key = trim(text.substr(0, eq));
      if (key.empty()) {
        throw ContractError(origin + ":" + std::to_string(lineno) + ": empty key");
      }
      kv.values_[key] = trim(text.substr(eq + 1));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file '" + path + "'");
    return parse(in, path);
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  // Later entries win.
  void merge(const KeyValues& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  std::string str() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, std::string> values_;
};

namespace config_detail {

inline std::string format(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}
inline std::string format(std::size_t v) { return std::to_string(v); }
inline std::string format(std::uint64_t v, int) { return std::to_string(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(const std::string& v) { return v; }
inline std::string format(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline void parse(const std::string& key, const std::string& text, double& out) {
  std::size_t used = 0;
  try {
    out = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty()) {
    throw ContractError("config key '" + key + "': '" + text + "' is not a number");
  }
}

template <class Int>
void parse_int(const std::string& key, const std::string& text, Int& out) {
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ContractError("config key '" + key + "': '" + text + "' is not a non-negative integer");
  }
}

inline void parse(const std::string& key, const std::string& text, std::size_t& out) {
  parse_int(key, text, out);
}

inline void parse(const std::string& key, const std::string& text, bool& out) {
  if (text == "true" || text == "1") {
    out = true;
  } else if (text == "false" || text == "0") {
    out = false;
  } else {
    throw ContractError("config key '" + key + "': '" + text + "' is not a boolean");
  }
}

inline void parse(const std::string&, const std::string& text, std::string& out) { out = text; }

inline void parse(const std::string& key, const std::string& text, std::vector<std::size_t>& out) {
  out.clear();
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t v = 0;
    parse_int(key, KeyValues::trim(item), v);
    out.push_back(v);
  }
  if (out.empty()) throw ContractError("config key '" + key + "': empty list");
}

}  // namespace config_detail

enum class ScheduleUnit { epochs, steps };

// Initial rate, multiplied by `decay` after every `decay_every` units, for
// `budget` units in total.
struct Schedule {
  double rate = 1e-3;
  double decay = 0.1;
  std::size_t decay_every = 100;
  std::string unit = "epochs";  // "epochs" or "steps"
  std::size_t budget = 500;

  ScheduleUnit unit_kind() const {
    if (unit == "epochs") return ScheduleUnit::epochs;
    if (unit == "steps") return ScheduleUnit::steps;
    throw ContractError("schedule unit must be 'epochs' or 'steps', got '" + unit + "'");
  }

  std::size_t total_steps(std::size_t steps_per_epoch) const {
    return unit_kind() == ScheduleUnit::epochs ? budget * steps_per_epoch : budget;
  }

  double rate_at(std::size_t step, std::size_t steps_per_epoch) const {
    const std::size_t elapsed =
        unit_kind() == ScheduleUnit::epochs ? step / std::max<std::size_t>(steps_per_epoch, 1) : step;
    const std::size_t drops = decay_every ? elapsed / decay_every : 0;
    double r = rate;
    for (std::size_t i = 0; i < drops; ++i) r *= decay;
    return r;
  }

  template <class V>
  void visit(const std::string& prefix, V&& v) {
    v(prefix + ".rate", rate);
    v(prefix + ".decay", decay);
    v(prefix + ".decay_every", decay_every);
    v(prefix + ".unit", unit);
    v(prefix + ".budget", budget);
  }
};

struct ModelConfig {
  std::size_t seq_len = 5;
  std::size_t max_seq_len = 16;
  std::size_t img_h = 32;
  std::size_t img_w = 32;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;    // f
  std::size_t heads = 8;         // H
  std::size_t context_dim = 64;  // L
  std::size_t ff_dim = 128;
  std::size_t joints = 21;
  std::size_t head_hidden = 128;
  std::vector<std::size_t> conv_channels{16, 32, 64, 64};
  bool coord_channels = true;
  bool use_positions = true;
  std::vector<std::size_t> unet_nodes{21, 12, 6, 3};
  std::vector<std::size_t> unet_widths{32, 64, 128};
  double adjacency_prior = 0.05;
  double alpha = 0.1;
  std::string loss_reduction = "mean";  // per-joint distances: "mean" or "sum"
  bool step2_reinit_heads = false;
  std::size_t batch_size = 8;  // sequences; stage 1 uses batch_size * seq_len frames
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double divergence_factor = 1e3;
  std::size_t seed = 1;
  Schedule step1{1e-3, 0.1, 100, "epochs", 500};
  Schedule step2{1e-3, 0.9, 100, "epochs", 350};

  template <class V>
  void visit(V&& v) {
    v("seq_len", seq_len);
    v("max_seq_len", max_seq_len);
    v("img_h", img_h);
    v("img_w", img_w);
    v("channels", channels);
    v("embed_dim", embed_dim);
    v("heads", heads);
    v("context_dim", context_dim);
    v("ff_dim", ff_dim);
    v("joints", joints);
    v("head_hidden", head_hidden);
    v("conv_channels", conv_channels);
    v("coord_channels", coord_channels);
    v("use_positions", use_positions);
    v("unet_nodes", unet_nodes);
    v("unet_widths", unet_widths);
    v("adjacency_prior", adjacency_prior);
    v("alpha", alpha);
    v("loss_reduction", loss_reduction);
    v("step2_reinit_heads", step2_reinit_heads);
    v("batch_size", batch_size);
    v("adam.beta1", adam_beta1);
    v("adam.beta2", adam_beta2);
    v("adam.eps", adam_eps);
    v("divergence_factor", divergence_factor);
    v("seed", seed);
    step1.visit("step1", v);
    step2.visit("step2", v);
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw ContractError("config: " + what); };
    if (heads == 0 || embed_dim % heads) fail("embed_dim must be divisible by heads");
    if (context_dim != embed_dim) fail("context_dim must equal embed_dim (residual block)");
    if (joints != 21) fail("joints must be 21");
    if (!(alpha >= 0)) fail("alpha must be non-negative");
    if (!(step1.rate > 0) || !(step2.rate > 0)) fail("learning rates must be positive");
    if (!(step1.decay > 0) || !(step2.decay > 0)) fail("decay factors must be positive");
    step1.unit_kind();
    step2.unit_kind();
    if (seq_len == 0 || seq_len > max_seq_len) fail("seq_len must be in [1, max_seq_len]");
    if (img_h < 8 || img_w < 8) fail("frames must be at least 8x8");
    if (channels != 3) fail("channels must be 3");
    if (conv_channels.empty()) fail("conv_channels must not be empty");
    if (unet_nodes.empty() || unet_nodes.front() != joints) fail("unet_nodes must start at 21");
    if (unet_widths.size() + 1 != unet_nodes.size()) fail("need one unet width per pooled level");
    if (loss_reduction != "mean" && loss_reduction != "sum") {
      fail("loss_reduction must be 'mean' or 'sum'");
    }
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(adjacency_prior > 0)) fail("adjacency_prior must be positive");
  }

  KeyValues to_kv() const {
    KeyValues kv;
    const_cast<ModelConfig*>(this)->visit(
        [&](const std::string& key, auto& field) { kv.set(key, config_detail::format(field)); });
    return kv;
  }

  // Applies known keys; returns the keys it did not recognize.
  std::vector<std::string> apply(const KeyValues& kv) {
    std::map<std::string, bool> used;
    for (const auto& [k, v] : kv.entries()) used[k] = false;
    visit([&](const std::string& key, auto& field) {
      auto it = kv.entries().find(key);
      if (it == kv.entries().end()) return;
      config_detail::parse(key, it->second, field);
      used[key] = true;
    });
    std::vector<std::string> unknown;
    for (const auto& [k, u] : used)
      if (!u) unknown.push_back(k);
    return unknown;
  }

  static ModelConfig from_kv(const KeyValues& kv) {
    ModelConfig cfg;
    const auto unknown = cfg.apply(kv);
    if (!unknown.empty()) throw ContractError("unknown config key '" + unknown.front() + "'");
    cfg.validate();
    return cfg;
  }
};

}  // namespace seqhand
