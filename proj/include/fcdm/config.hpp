#pragma once

#include <json.hpp>

#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "fcdm/tensor.hpp"

namespace fcdm {

using json = nlohmann::json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Rejects keys of `j` outside `allowed`, naming the first offender.
inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
}

template <class V>
void read_key(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

struct FcdmConfig {
  std::size_t base_channels = 128;
  std::size_t base_blocks = 2;
  std::size_t expansion_ratio = 3;
  std::size_t kernel_size = 7;
  std::size_t num_downsamples = 2;
  /// Explicit per-stage depths; empty means the doubling rule.
  std::vector<std::size_t> depths;
  std::size_t in_channels = 4;
  std::size_t input_resolution = 32;
  std::size_t num_classes = 1000;
  bool learn_sigma = true;
  std::string block_variant = "fcdm";  // fcdm | resnet
  std::string channel_norm = "grn";    // grn | cca | none
  bool use_inverted_bottleneck = true;
  bool use_feedforward = false;
  bool isotropic = false;
  /// Width of the conditioning vector; 0 means base_channels.
  std::size_t cond_dim = 0;
  std::size_t freq_dim = 256;
  std::size_t upsample_kernel = 3;
  std::size_t fusion_kernel = 3;
  std::string skip_fusion = "concat";  // concat | add

  std::size_t num_stages() const { return isotropic ? 1 : 2 * num_downsamples + 1; }

  std::size_t d_cond() const { return cond_dim ? cond_dim : base_channels; }

  std::size_t ratio() const { return use_inverted_bottleneck ? expansion_ratio : 1; }

  std::size_t out_channels() const { return in_channels * (learn_sigma ? 2 : 1); }

  /// Doubling distance of stage i from the ends of the U.
  std::size_t level(std::size_t i) const {
    if (isotropic) return 0;
    return i <= num_downsamples ? i : 2 * num_downsamples - i;
  }

  std::vector<std::size_t> stage_depths() const {
    if (!depths.empty()) return depths;
    if (isotropic) {
      std::size_t total = 0;
      for (std::size_t i = 0; i < 2 * num_downsamples + 1; ++i)
        total += base_blocks << (i <= num_downsamples ? i : 2 * num_downsamples - i);
      return {total};
    }
    std::vector<std::size_t> d;
    for (std::size_t i = 0; i < num_stages(); ++i) d.push_back(base_blocks << level(i));
    return d;
  }

  std::vector<std::size_t> stage_channels() const {
    std::vector<std::size_t> c;
    for (std::size_t i = 0; i < num_stages(); ++i) c.push_back(base_channels << level(i));
    return c;
  }

  std::vector<std::size_t> stage_resolutions() const {
    std::vector<std::size_t> r;
    for (std::size_t i = 0; i < num_stages(); ++i) r.push_back(input_resolution >> level(i));
    return r;
  }

  /// Throws ConfigError naming the offending field.
  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("model config: " + field + " " + why);
    };
    if (base_channels < 1) fail("base_channels", "must be >= 1");
    if (base_blocks < 1 && depths.empty()) fail("base_blocks", "must be >= 1");
    if (expansion_ratio < 1) fail("expansion_ratio", "must be >= 1");
    if (kernel_size % 2 == 0) fail("kernel_size", "must be odd");
    if (upsample_kernel % 2 == 0) fail("upsample_kernel", "must be odd");
    if (fusion_kernel % 2 == 0) fail("fusion_kernel", "must be odd");
    if (in_channels < 1) fail("in_channels", "must be >= 1");
    if (num_classes < 1) fail("num_classes", "must be >= 1");
    if (freq_dim < 2 || freq_dim % 2) fail("freq_dim", "must be even and >= 2");
    if (input_resolution < 1) fail("input_resolution", "must be >= 1");
    if (!isotropic && input_resolution % (std::size_t{1} << num_downsamples))
      fail("input_resolution", "must be divisible by 2^num_downsamples");
    if (block_variant != "fcdm" && block_variant != "resnet") fail("block_variant", "must be fcdm or resnet");
    if (channel_norm != "grn" && channel_norm != "cca" && channel_norm != "none")
      fail("channel_norm", "must be grn, cca or none");
    if (skip_fusion != "concat" && skip_fusion != "add") fail("skip_fusion", "must be concat or add");
    if (!depths.empty()) {
      if (depths.size() != num_stages())
        fail("depths", "must list " + std::to_string(num_stages()) + " stages, got " + std::to_string(depths.size()));
      for (auto d : depths)
        if (d < 1) fail("depths", "entries must be >= 1");
    }
  }

  friend bool operator==(const FcdmConfig&, const FcdmConfig&) = default;
};

inline void to_json(json& j, const FcdmConfig& c) {
  j = json{{"base_channels", c.base_channels},
           {"base_blocks", c.base_blocks},
           {"expansion_ratio", c.expansion_ratio},
           {"kernel_size", c.kernel_size},
           {"num_downsamples", c.num_downsamples},
           {"depths", c.depths},
           {"in_channels", c.in_channels},
           {"input_resolution", c.input_resolution},
           {"num_classes", c.num_classes},
           {"learn_sigma", c.learn_sigma},
           {"block_variant", c.block_variant},
           {"channel_norm", c.channel_norm},
           {"use_inverted_bottleneck", c.use_inverted_bottleneck},
           {"use_feedforward", c.use_feedforward},
           {"isotropic", c.isotropic},
           {"cond_dim", c.cond_dim},
           {"freq_dim", c.freq_dim},
           {"upsample_kernel", c.upsample_kernel},
           {"fusion_kernel", c.fusion_kernel},
           {"skip_fusion", c.skip_fusion}};
}

inline void from_json(const json& j, FcdmConfig& c) {
  const std::string w = "model";
  check_keys(j, {"base_channels", "base_blocks", "expansion_ratio", "kernel_size", "num_downsamples", "depths",
                 "in_channels", "input_resolution", "num_classes", "learn_sigma", "block_variant", "channel_norm",
                 "use_inverted_bottleneck", "use_feedforward", "isotropic", "cond_dim", "freq_dim",
                 "upsample_kernel", "fusion_kernel", "skip_fusion"},
             w);
  read_key(j, "base_channels", c.base_channels, w);
  read_key(j, "base_blocks", c.base_blocks, w);
  read_key(j, "expansion_ratio", c.expansion_ratio, w);
  read_key(j, "kernel_size", c.kernel_size, w);
  read_key(j, "num_downsamples", c.num_downsamples, w);
  read_key(j, "depths", c.depths, w);
  read_key(j, "in_channels", c.in_channels, w);
  read_key(j, "input_resolution", c.input_resolution, w);
  read_key(j, "num_classes", c.num_classes, w);
  read_key(j, "learn_sigma", c.learn_sigma, w);
  read_key(j, "block_variant", c.block_variant, w);
  read_key(j, "channel_norm", c.channel_norm, w);
  read_key(j, "use_inverted_bottleneck", c.use_inverted_bottleneck, w);
  read_key(j, "use_feedforward", c.use_feedforward, w);
  read_key(j, "isotropic", c.isotropic, w);
  read_key(j, "cond_dim", c.cond_dim, w);
  read_key(j, "freq_dim", c.freq_dim, w);
  read_key(j, "upsample_kernel", c.upsample_kernel, w);
  read_key(j, "fusion_kernel", c.fusion_kernel, w);
  read_key(j, "skip_fusion", c.skip_fusion, w);
  c.validate();
}

inline std::string stage_name(std::size_t i) { return "stage" + std::to_string(i); }

inline std::string block_name(std::size_t stage, std::size_t block) {
  return stage_name(stage) + ".block" + std::to_string(block);
}

/// Named architecture presets: fcdm-s/b/l/xl operate on 32x32x4 latents
/// (256x256 images), fcdm-toy on 8x8x3 pixels with 4 classes.
inline FcdmConfig model_preset(const std::string& name) {
  FcdmConfig c;
  if (name == "fcdm-s") {
    c.base_channels = 128;
    c.base_blocks = 2;
  } else if (name == "fcdm-b") {
    c.base_channels = 256;
    c.base_blocks = 2;
  } else if (name == "fcdm-l") {
    c.base_channels = 512;
    c.base_blocks = 2;
  } else if (name == "fcdm-xl") {
    c.base_channels = 512;
    c.base_blocks = 3;
  } else if (name == "fcdm-toy") {
    c.base_channels = 32;
    c.base_blocks = 1;
    c.in_channels = 3;
    c.input_resolution = 8;
    c.num_classes = 4;
  } else {
    throw ConfigError("unknown model preset: " + name + " (expected fcdm-s, fcdm-b, fcdm-l, fcdm-xl, fcdm-toy)");
  }
  return c;
}

inline const std::vector<std::string>& model_preset_names() {
  static const std::vector<std::string> names{"fcdm-s", "fcdm-b", "fcdm-l", "fcdm-xl", "fcdm-toy"};
  return names;
}

}  // namespace fcdm
