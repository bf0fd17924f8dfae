#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>

namespace rsa::ckpt {

namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint is a directory: weights.pt (torch archive) + meta.json
// {format_version, kind, config_hash, config}. Writes go through a temporary
// directory and a rename so an interrupted save never leaves a half-written
// checkpoint behind.
void save(const fs::path& dir, const std::string& kind, const std::string& config_hash,
          const nlohmann::json& config, const torch::nn::Module& module);

struct Meta {
  std::string kind;
  std::string config_hash;
  nlohmann::json config;
};

Meta read_meta(const fs::path& dir, const std::string& expected_kind);

// Loads weights into a module whose structure was rebuilt from Meta::config.
void load_weights(const fs::path& dir, torch::nn::Module& module);

}  // namespace rsa::ckpt
