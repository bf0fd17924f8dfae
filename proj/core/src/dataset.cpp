#include "rsa/dataset.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "rsa/array_io.hpp"

namespace rsa {

using nlohmann::json;

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }
std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::invalid_argument("unknown domain '" + s + "'");
}

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing manifest " + path.string());
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      records.push_back({j.at("id").get<std::string>(), parse_split(j.at("split").get<std::string>()),
                         parse_domain(j.at("domain").get<std::string>())});
    } catch (const std::exception& e) {
      throw io::FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  std::string text;
  for (const auto& r : records) {
    text += json{{"id", r.id}, {"split", to_string(r.split)}, {"domain", to_string(r.domain)}}.dump();
    text += '\n';
  }
  io::write_text(path, text);
}

fs::path sample_dir(const fs::path& root, const ManifestRecord& record) {
  return root / to_string(record.domain) / record.id;
}

UnlabeledView UnlabeledView::head(std::size_t n) const {
  std::vector<Image2D> out;
  for (std::size_t i = 0; i < std::min(n, size()); ++i) out.push_back((*images_)[i]);
  return UnlabeledView(std::move(out));
}

const BinaryMask& GroundTruth::mask(const std::string& id) const {
  auto it = samples_.find(id);
  if (it == samples_.end()) throw std::out_of_range("no ground truth for id " + id);
  return it->second.mask;
}

const Image2D& GroundTruth::image(const std::string& id) const {
  auto it = samples_.find(id);
  if (it == samples_.end()) throw std::out_of_range("no ground truth for id " + id);
  return it->second.image;
}

std::vector<LabeledSample> GroundTruth::pairs() const {
  std::vector<LabeledSample> out;
  out.reserve(samples_.size());
  for (const auto& [id, s] : samples_) out.push_back(s);
  return out;
}

Dataset Dataset::open(const fs::path& manifest_path) {
  Dataset ds;
  ds.root_ = manifest_path.parent_path();
  ds.records_ = read_manifest(manifest_path);
  ds.entries_.reserve(ds.records_.size());
  for (const auto& rec : ds.records_) {
    const fs::path dir = sample_dir(ds.root_, rec);
    Entry e{rec, io::load_sample_image(dir), std::nullopt};
    if (e.image.id.empty()) e.image.id = rec.id;
    if (io::sample_has_mask(dir)) {
      BinaryMask m = io::load_sample_mask(dir);
      if (m.shape() != e.image.shape()) {
        throw std::invalid_argument("shape mismatch for sample " + rec.id + ": image " +
                                    to_string(e.image.shape()) + ", mask " + to_string(m.shape()));
      }
      m.id = rec.id;
      e.mask = std::move(m);
    }
    ds.entries_.push_back(std::move(e));
  }
  return ds;
}

SplitCounts Dataset::counts() const {
  SplitCounts c;
  for (const auto& r : records_) ++c[{r.split, r.domain}];
  return c;
}

std::vector<std::pair<Image2D, std::optional<BinaryMask>>> Dataset::samples() const {
  std::vector<std::pair<Image2D, std::optional<BinaryMask>>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) {
    out.emplace_back(e.image, e.record.domain == Domain::source ? e.mask : std::nullopt);
  }
  return out;
}

std::vector<LabeledSample> Dataset::source(Split split) const {
  std::vector<LabeledSample> out;
  for (const auto& e : entries_) {
    if (e.record.domain != Domain::source || e.record.split != split) continue;
    if (!e.mask) throw std::runtime_error("source sample " + e.record.id + " has no mask");
    out.push_back({e.image, *e.mask});
  }
  return out;
}

UnlabeledView Dataset::target_images(Split split) const {
  std::vector<Image2D> out;
  for (const auto& e : entries_) {
    if (e.record.domain == Domain::target && e.record.split == split) out.push_back(e.image);
  }
  return UnlabeledView(std::move(out));
}

GroundTruth Dataset::evaluation_truth(Split split, Domain domain) const {
  std::map<std::string, LabeledSample> out;
  for (const auto& e : entries_) {
    if (e.record.domain != domain || e.record.split != split || !e.mask) continue;
    out.emplace(e.record.id, LabeledSample{e.image, *e.mask});
  }
  return GroundTruth(std::move(out));
}

}  // namespace rsa
