#include "rsa/checkpoint.hpp"

#include "rsa/array_io.hpp"

namespace rsa::ckpt {

void save(const fs::path& dir, const std::string& kind, const std::string& config_hash,
          const nlohmann::json& config, const torch::nn::Module& module) {
  fs::path tmp = dir;
  tmp += ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.save_to((tmp / "weights.pt").string());
  const nlohmann::json meta = {{"format_version", kFormatVersion},
                               {"kind", kind},
                               {"config_hash", config_hash},
                               {"config", config}};
  io::write_text(tmp / "meta.json", meta.dump(2) + "\n");

  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Meta read_meta(const fs::path& dir, const std::string& expected_kind) {
  if (!fs::exists(dir / "meta.json")) throw CheckpointError("checkpoint " + dir.string() + " has no meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_text(dir / "meta.json"));
  } catch (const std::exception& e) {
    throw CheckpointError("corrupted checkpoint " + dir.string() + ": " + e.what());
  }
  if (meta.value("format_version", -1) != kFormatVersion) {
    throw CheckpointError("checkpoint " + dir.string() + " has unsupported format version");
  }
  if (meta.value("kind", "") != expected_kind) {
    throw CheckpointError("checkpoint " + dir.string() + " holds '" + meta.value("kind", "") + "', expected '" +
                          expected_kind + "'");
  }
  return Meta{meta.at("kind").get<std::string>(), meta.value("config_hash", ""), meta.at("config")};
}

void load_weights(const fs::path& dir, torch::nn::Module& module) {
  try {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "weights.pt").string());
    module.load(archive);
  } catch (const std::exception& e) {
    throw CheckpointError("corrupted checkpoint " + dir.string() + ": cannot load weights (" +
                          std::string(e.what()).substr(0, 200) + ")");
  }
}

}  // namespace rsa::ckpt
