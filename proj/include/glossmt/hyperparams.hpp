#pragma once

#include <array>
#include <string>
#include <string_view>

#include "glossmt/error.hpp"
#include "glossmt/kv.hpp"

namespace glossmt {

// One point of the architecture grid plus the fixed optimizer constants.
// Defaults are the best architecture found on PHOENIX14T.
struct HyperParams {
  int num_layers = 5;
  int ff_dim = 256;
  int embed_dim = 64;
  int num_heads = 2;
  double dropout = 0.3;
  int batch_size = 4096;  // padded target tokens per batch
  double label_smoothing = 0.6;
  int warmup_steps = 300;

  double lr_scale = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.998;

  static constexpr std::array<std::string_view, 8> kGridNames = {
      "num_layers", "ff_dim",     "embed_dim",       "num_heads",
      "dropout",    "batch_size", "label_smoothing", "warmup_steps"};

  double get(std::string_view name) const {
    if (name == "num_layers") return num_layers;
    if (name == "ff_dim") return ff_dim;
    if (name == "embed_dim") return embed_dim;
    if (name == "num_heads") return num_heads;
    if (name == "dropout") return dropout;
    if (name == "batch_size") return batch_size;
    if (name == "label_smoothing") return label_smoothing;
    if (name == "warmup_steps") return warmup_steps;
    if (name == "lr_scale") return lr_scale;
    if (name == "beta1") return beta1;
    if (name == "beta2") return beta2;
    throw ConfigError("unknown hyper-parameter '" + std::string(name) + "'");
  }

  void set(std::string_view name, double value) {
    auto as_int = [&](int& field) {
      if (value != static_cast<double>(static_cast<int>(value))) {
        throw ConfigError(std::string(name) + " must be an integer, got " + format_double(value));
      }
      field = static_cast<int>(value);
    };
    if (name == "num_layers") return as_int(num_layers);
    if (name == "ff_dim") return as_int(ff_dim);
    if (name == "embed_dim") return as_int(embed_dim);
    if (name == "num_heads") return as_int(num_heads);
    if (name == "dropout") { dropout = value; return; }
    if (name == "batch_size") return as_int(batch_size);
    if (name == "label_smoothing") { label_smoothing = value; return; }
    if (name == "warmup_steps") return as_int(warmup_steps);
    if (name == "lr_scale") { lr_scale = value; return; }
    if (name == "beta1") { beta1 = value; return; }
    if (name == "beta2") { beta2 = value; return; }
    throw ConfigError("unknown hyper-parameter '" + std::string(name) + "'");
  }

  void validate() const {
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (ff_dim < 1 || embed_dim < 1) throw ConfigError("ff_dim and embed_dim must be >= 1");
    if (num_heads < 1 || embed_dim % num_heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
      throw ConfigError("label_smoothing must lie in [0, 1)");
    }
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (!(lr_scale > 0.0)) throw ConfigError("lr_scale must be positive");
  }

  // Reads any hyper-parameter keys present in `kv` (optionally under a prefix).
  void apply(const KeyValues& kv, const std::string& prefix = "") {
    for (std::string_view name : kGridNames) {
      const std::string key = prefix + std::string(name);
      if (kv.has(key)) set(name, kv.get_double(key));
    }
    for (std::string_view name : {"lr_scale", "beta1", "beta2"}) {
      const std::string key = prefix + std::string(name);
      if (kv.has(key)) set(name, kv.get_double(key));
    }
  }

  void store(KeyValues& kv, const std::string& prefix = "") const {
    for (std::string_view name : kGridNames) kv.set(prefix + std::string(name), format_double(get(name)));
    for (std::string_view name : {"lr_scale", "beta1", "beta2"}) {
      kv.set(prefix + std::string(name), format_double(get(name)));
    }
  }

  // Canonical text of the grid coordinates; identifies a search point.
  std::string grid_key() const {
    std::string key;
    for (std::string_view name : kGridNames) {
      if (!key.empty()) key += ',';
      key += std::string(name) + "=" + format_double(get(name));
    }
    return key;
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

}  // namespace glossmt
