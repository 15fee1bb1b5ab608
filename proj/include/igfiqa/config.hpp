#pragma once

// Flat key=value config files. One key per line, '#' starts a comment.
// Keys are the field names of SynthConfig / TrainConfig.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "igfiqa/common.hpp"
#include "igfiqa/synthdata.hpp"
#include "igfiqa/trainer.hpp"

namespace igfiqa {

struct ConfigEntry {
  std::string value;
  int line = 0;  // 0 for values set programmatically (CLI overrides)
};

class KeyValues {
 public:
  static KeyValues parse(std::istream& is, const std::string& source = "<config>") {
    KeyValues kv;
    kv.source_ = source;
    std::string raw;
    int line = 0;
    while (std::getline(is, raw)) {
      ++line;
      std::string text = raw.substr(0, raw.find('#'));
      text = trim(text);
      if (text.empty()) continue;
      const auto eq = text.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(line) + ": expected key=value, got '" + text + "'");
      std::string key = trim(text.substr(0, eq));
      std::string value = trim(text.substr(eq + 1));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(line) + ": empty key");
      if (kv.entries_.count(key))
        throw ConfigError(source + ":" + std::to_string(line) + ": duplicate key '" + key + "' (first on line " +
                          std::to_string(kv.entries_[key].line) + ")");
      kv.entries_[key] = {value, line};
    }
    return kv;
  }

  static KeyValues parse_string(const std::string& text, const std::string& source = "<config>") {
    std::istringstream is(text);
    return parse(is, source);
  }

  static KeyValues load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    return parse(is, path);
  }

  void set(const std::string& key, const std::string& value) { entries_[key] = {value, 0}; }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, ConfigEntry>& entries() const { return entries_; }
  const std::string& source() const { return source_; }

  std::string where(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end() || it->second.line == 0) return "key '" + key + "'";
    return source_ + ":" + std::to_string(it->second.line) + ": key '" + key + "'";
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, ConfigEntry> entries_;
  std::string source_ = "<config>";
};

/// Typed reads over a KeyValues set; `finish()` rejects keys nobody read.
class ConfigReader {
 public:
  explicit ConfigReader(const KeyValues& kv) : kv_(kv) {}

  template <typename T>
  void read(const std::string& key, T& out, bool required = false) {
    used_.insert(key);
    auto it = kv_.entries().find(key);
    if (it == kv_.entries().end()) {
      if (required) throw ConfigError("missing required key '" + key + "'");
      return;
    }
    out = convert<T>(key, it->second.value);
  }

  void finish() const {
    for (const auto& [key, entry] : kv_.entries())
      if (!used_.count(key)) throw ConfigError(kv_.where(key) + ": unknown key");
  }

 private:
  template <typename T>
  T convert(const std::string& key, const std::string& v) const {
    auto bad = [&](const std::string& expected) {
      return ConfigError(kv_.where(key) + ": expected " + expected + ", got '" + v + "'");
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw bad("true or false");
    } else if constexpr (std::is_same_v<T, double>) {
      std::size_t pos = 0;
      double d = 0.0;
      try {
        d = std::stod(v, &pos);
      } catch (const std::exception&) {
        throw bad("a number");
      }
      if (pos != v.size()) throw bad("a number");
      return d;
    } else if constexpr (std::is_integral_v<T>) {
      T x{};
      const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc() || p != v.data() + v.size()) throw bad("a non-negative integer");
      return x;
    } else if constexpr (std::is_same_v<T, std::vector<std::uint32_t>>) {
      std::vector<std::uint32_t> out;
      if (v.empty()) return out;
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(convert<std::uint32_t>(key, item));
      return out;
    } else if constexpr (std::is_same_v<T, TrackerSource>) {
      if (v == "clean") return TrackerSource::kClean;
      if (v == "augmented") return TrackerSource::kAugmented;
      if (v == "both") return TrackerSource::kBoth;
      throw bad("clean, augmented or both");
    } else if constexpr (std::is_same_v<T, Reduction>) {
      if (v == "sum") return Reduction::kSum;
      if (v == "mean") return Reduction::kMean;
      throw bad("sum or mean");
    } else if constexpr (std::is_same_v<T, AlphaSchedule>) {
      if (v == "linear") return AlphaSchedule::kLinear;
      if (v == "fixed") return AlphaSchedule::kFixed;
      throw bad("linear or fixed");
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  const KeyValues& kv_;
  std::set<std::string> used_;
};

inline SynthConfig synth_config_from(const KeyValues& kv) {
  SynthConfig c;
  ConfigReader r(kv);
  r.read("num_classes", c.num_classes, true);
  r.read("samples_per_class", c.samples_per_class, true);
  r.read("image_side", c.image_side);
  r.read("duplicate_class_fraction", c.duplicate_class_fraction);
  r.read("pose_spread", c.pose_spread);
  r.read("degrade_fraction", c.degrade_fraction);
  r.read("duplicate_tolerance", c.duplicate_tolerance);
  r.read("seed", c.seed);
  r.read("split", c.split);
  r.finish();
  c.validate();
  return c;
}

inline TrainConfig train_config_from(const KeyValues& kv, TrainConfig c = {}) {
  ConfigReader r(kv);
  r.read("batch_size", c.batch_size);
  r.read("lambda", c.lambda);
  r.read("lr", c.lr);
  r.read("lr_milestones", c.lr_milestones);
  r.read("lr_divisor", c.lr_divisor);
  r.read("momentum", c.momentum);
  r.read("weight_decay", c.weight_decay);
  r.read("epochs", c.epochs);
  r.read("augment_p", c.augment_p);
  r.read("seed", c.seed);
  r.read("propagate_lig_to_backbone", c.propagate_lig_to_backbone);
  r.read("tracker_source", c.tracker_source);
  r.read("beta", c.beta);
  r.read("s", c.s);
  r.read("m", c.m);
  r.read("hidden_dim", c.hidden_dim);
  r.read("embed_dim", c.embed_dim);
  r.read("alpha_schedule", c.alpha_schedule);
  r.read("alpha_start", c.alpha_start);
  r.read("alpha_end", c.alpha_end);
  r.read("use_ig_weights", c.use_ig_weights);
  r.read("split_batch", c.split_batch);
  r.read("lig_reduction", c.lig_reduction);
  r.read("head_bias", c.head_bias);
  r.finish();
  c.validate();
  return c;
}

namespace detail {
inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
}  // namespace detail

inline std::map<std::string, std::string> to_key_values(const SynthConfig& c) {
  using detail::fmt_double;
  return {{"num_classes", std::to_string(c.num_classes)},
          {"samples_per_class", std::to_string(c.samples_per_class)},
          {"image_side", std::to_string(c.image_side)},
          {"duplicate_class_fraction", fmt_double(c.duplicate_class_fraction)},
          {"pose_spread", fmt_double(c.pose_spread)},
          {"degrade_fraction", fmt_double(c.degrade_fraction)},
          {"duplicate_tolerance", fmt_double(c.duplicate_tolerance)},
          {"seed", std::to_string(c.seed)},
          {"split", std::to_string(c.split)}};
}

inline std::map<std::string, std::string> to_key_values(const TrainConfig& c) {
  using detail::fmt_double;
  std::string ms;
  for (auto e : c.lr_milestones) ms += (ms.empty() ? "" : ",") + std::to_string(e);
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  const char* src[] = {"clean", "augmented", "both"};
  return {{"batch_size", std::to_string(c.batch_size)},
          {"lambda", fmt_double(c.lambda)},
          {"lr", fmt_double(c.lr)},
          {"lr_milestones", ms},
          {"lr_divisor", fmt_double(c.lr_divisor)},
          {"momentum", fmt_double(c.momentum)},
          {"weight_decay", fmt_double(c.weight_decay)},
          {"epochs", std::to_string(c.epochs)},
          {"augment_p", fmt_double(c.augment_p)},
          {"seed", std::to_string(c.seed)},
          {"propagate_lig_to_backbone", b(c.propagate_lig_to_backbone)},
          {"tracker_source", src[static_cast<int>(c.tracker_source)]},
          {"beta", fmt_double(c.beta)},
          {"s", fmt_double(c.s)},
          {"m", fmt_double(c.m)},
          {"hidden_dim", std::to_string(c.hidden_dim)},
          {"embed_dim", std::to_string(c.embed_dim)},
          {"alpha_schedule", c.alpha_schedule == AlphaSchedule::kFixed ? "fixed" : "linear"},
          {"alpha_start", fmt_double(c.alpha_start)},
          {"alpha_end", fmt_double(c.alpha_end)},
          {"use_ig_weights", b(c.use_ig_weights)},
          {"split_batch", b(c.split_batch)},
          {"lig_reduction", c.lig_reduction == Reduction::kMean ? "mean" : "sum"},
          {"head_bias", b(c.head_bias)}};
}

}  // namespace igfiqa
