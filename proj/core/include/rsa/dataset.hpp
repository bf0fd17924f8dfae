#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rsa/domain.hpp"

namespace rsa {

namespace fs = std::filesystem;

enum class Split { train, test };
enum class Domain { source, target };

std::string to_string(Split s);
std::string to_string(Domain d);
Split parse_split(const std::string& s);
Domain parse_domain(const std::string& s);

struct ManifestRecord {
  std::string id;
  Split split = Split::train;
  Domain domain = Domain::source;
  bool operator==(const ManifestRecord&) const = default;
};

// Newline-delimited JSON records {id, split, domain}. Sample directories live
// at <manifest dir>/<domain>/<id>/.
std::vector<ManifestRecord> read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records);
fs::path sample_dir(const fs::path& root, const ManifestRecord& record);

using SplitCounts = std::map<std::pair<Split, Domain>, std::size_t>;

struct LabeledSample {
  Image2D image;
  BinaryMask mask;
};

// Images only. This is the sole view adaptation code receives for target data;
// it deliberately has no mask accessor.
class UnlabeledView {
 public:
  UnlabeledView() = default;
  explicit UnlabeledView(std::vector<Image2D> images)
      : images_(std::make_shared<const std::vector<Image2D>>(std::move(images))) {}

  std::size_t size() const { return images_ ? images_->size() : 0; }
  bool empty() const { return size() == 0; }
  const Image2D& operator[](std::size_t i) const { return images_->at(i); }
  auto begin() const { return images_ ? images_->begin() : empty_.begin(); }
  auto end() const { return images_ ? images_->end() : empty_.end(); }

  UnlabeledView head(std::size_t n) const;

 private:
  std::shared_ptr<const std::vector<Image2D>> images_;
  inline static const std::vector<Image2D> empty_{};
};

// Ground truth keyed by id, for evaluation harnesses only.
class GroundTruth {
 public:
  GroundTruth() = default;
  explicit GroundTruth(std::map<std::string, LabeledSample> samples) : samples_(std::move(samples)) {}

  std::size_t size() const { return samples_.size(); }
  bool contains(const std::string& id) const { return samples_.count(id) > 0; }
  const BinaryMask& mask(const std::string& id) const;
  const Image2D& image(const std::string& id) const;
  const std::map<std::string, LabeledSample>& samples() const { return samples_; }
  std::vector<LabeledSample> pairs() const;

 private:
  std::map<std::string, LabeledSample> samples_;
};

// A loaded slice dataset. Source data is exposed with labels; target data is
// exposed as images only, and target masks only through evaluation_truth().
class Dataset {
 public:
  static Dataset open(const fs::path& manifest_path);

  const std::vector<ManifestRecord>& records() const { return records_; }
  SplitCounts counts() const;
  const fs::path& root() const { return root_; }

  // (image, mask) pairs in manifest order; masks for target records are
  // withheld (nullopt).
  std::vector<std::pair<Image2D, std::optional<BinaryMask>>> samples() const;

  std::vector<LabeledSample> source(Split split) const;
  UnlabeledView target_images(Split split) const;
  GroundTruth evaluation_truth(Split split, Domain domain) const;

 private:
  struct Entry {
    ManifestRecord record;
    Image2D image;
    std::optional<BinaryMask> mask;
  };

  fs::path root_;
  std::vector<ManifestRecord> records_;
  std::vector<Entry> entries_;
};

}  // namespace rsa
