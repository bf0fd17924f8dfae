#include "rsa/array_io.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace rsa::io {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "array container assumes little-endian hosts");

namespace {

constexpr std::array<char, 8> kMagic = {'R', 'S', 'A', 'A', 'R', 'R', '0', '1'};

template <typename T>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<double>() { return "float64"; }
template <>
constexpr const char* dtype_name<std::uint8_t>() { return "uint8"; }

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const fs::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw FormatError("truncated array file " + path.string());
  }
  return value;
}

template <typename T>
void write_grid(const fs::path& path, const Grid<T>& grid, std::size_t chunk_rows) {
  if (chunk_rows == 0) throw std::invalid_argument("chunk_rows must be positive");
  const std::size_t rows = grid.rows();
  const std::size_t chunks = rows == 0 ? 0 : (rows + chunk_rows - 1) / chunk_rows;
  json header = {{"dtype", dtype_name<T>()},
                 {"shape", {grid.rows(), grid.cols()}},
                 {"chunk_rows", chunk_rows},
                 {"chunks", chunks}};
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  const auto values = grid.values();
  for (std::size_t k = 0; k < chunks; ++k) {
    const std::size_t r0 = k * chunk_rows;
    const std::size_t r1 = std::min(rows, r0 + chunk_rows);
    const auto* bytes = reinterpret_cast<const unsigned char*>(values.data() + r0 * grid.cols());
    const std::size_t nbytes = (r1 - r0) * grid.cols() * sizeof(T);
    const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes, static_cast<uInt>(nbytes)));
    put<std::uint32_t>(out, crc);
    put<std::uint64_t>(out, nbytes);
    out.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(nbytes));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

template <typename T>
Grid<T> read_grid(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing array file " + path.string());
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError("bad magic in " + path.string());
  }
  const auto hlen = get<std::uint32_t>(in, path);
  if (hlen > (1u << 20)) throw FormatError("oversized header in " + path.string());
  std::string text(hlen, '\0');
  if (!in.read(text.data(), hlen)) throw FormatError("truncated header in " + path.string());

  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("corrupt header in " + path.string() + ": " + e.what());
  }
  if (header.value("dtype", "") != dtype_name<T>()) {
    throw FormatError("dtype mismatch in " + path.string() + ": expected " + dtype_name<T>());
  }
  const auto rows = header.at("shape").at(0).get<std::size_t>();
  const auto cols = header.at("shape").at(1).get<std::size_t>();
  const auto chunk_rows = header.at("chunk_rows").get<std::size_t>();
  const auto chunks = header.at("chunks").get<std::size_t>();
  if (chunk_rows == 0 || chunks != (rows + chunk_rows - 1) / chunk_rows) {
    throw FormatError("inconsistent chunking in " + path.string());
  }

  std::vector<T> data(rows * cols);
  auto* dst = reinterpret_cast<unsigned char*>(data.data());
  std::size_t offset = 0;
  for (std::size_t k = 0; k < chunks; ++k) {
    const auto crc = get<std::uint32_t>(in, path);
    const auto nbytes = get<std::uint64_t>(in, path);
    if (offset + nbytes > data.size() * sizeof(T)) throw FormatError("chunk overflow in " + path.string());
    if (!in.read(reinterpret_cast<char*>(dst + offset), static_cast<std::streamsize>(nbytes))) {
      throw FormatError("truncated chunk in " + path.string());
    }
    if (static_cast<std::uint32_t>(crc32(0L, dst + offset, static_cast<uInt>(nbytes))) != crc) {
      throw FormatError("checksum mismatch in chunk " + std::to_string(k) + " of " + path.string());
    }
    offset += nbytes;
  }
  if (offset != data.size() * sizeof(T)) throw FormatError("short payload in " + path.string());
  return Grid<T>(Shape{rows, cols}, std::move(data));
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw FormatError("corrupt JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

}  // namespace

void write_array(const fs::path& path, const RealGrid& grid, std::size_t chunk_rows) {
  write_grid(path, grid, chunk_rows);
}
void write_array(const fs::path& path, const BitGrid& grid, std::size_t chunk_rows) {
  write_grid(path, grid, chunk_rows);
}
RealGrid read_real_array(const fs::path& path) { return read_grid<double>(path); }
BitGrid read_bit_array(const fs::path& path) { return read_grid<std::uint8_t>(path); }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
}

void save(const fs::path& dir, const Image2D& image) {
  write_array(dir / "image.arr", image.pixels);
  write_json(dir / "meta.json", {{"type", "Image2D"},
                                 {"id", image.id},
                                 {"value_range", {image.value_range.lo, image.value_range.hi}},
                                 {"spacing_mm", {image.spacing_mm.row, image.spacing_mm.col}}});
}

void save(const fs::path& dir, const BinaryMask& mask) {
  write_array(dir / "mask.arr", mask.pixels);
  write_json(dir / "meta.json", {{"type", "BinaryMask"}, {"id", mask.id}});
}

void save(const fs::path& dir, const EdgeMap& edge) {
  write_array(dir / "edge.arr", edge.pixels);
  write_json(dir / "meta.json", {{"type", "EdgeMap"}, {"threshold", edge.threshold}});
}

void save(const fs::path& dir, const NIGField& field) {
  write_array(dir / "gamma.arr", field.gamma);
  write_array(dir / "omega.arr", field.omega);
  write_array(dir / "alpha.arr", field.alpha);
  write_array(dir / "beta.arr", field.beta);
  write_json(dir / "meta.json", {{"type", "NIGField"}});
}

void save(const fs::path& dir, const UncertaintyMap& u) {
  write_array(dir / "uncertainty.arr", u.pixels);
  write_json(dir / "meta.json", {{"type", "UncertaintyMap"}});
}

Image2D load_image(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  Image2D image;
  image.id = meta.value("id", "");
  image.pixels = read_real_array(dir / "image.arr");
  if (meta.contains("value_range")) {
    image.value_range = {meta["value_range"][0].get<double>(), meta["value_range"][1].get<double>()};
  }
  if (meta.contains("spacing_mm")) {
    image.spacing_mm = {meta["spacing_mm"][0].get<double>(), meta["spacing_mm"][1].get<double>()};
  }
  return image;
}

BinaryMask load_mask(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  return BinaryMask{meta.value("id", ""), read_bit_array(dir / "mask.arr")};
}

EdgeMap load_edge(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  return EdgeMap{read_bit_array(dir / "edge.arr"), meta.at("threshold").get<double>()};
}

NIGField load_nig(const fs::path& dir) {
  return NIGField{read_real_array(dir / "gamma.arr"), read_real_array(dir / "omega.arr"),
                  read_real_array(dir / "alpha.arr"), read_real_array(dir / "beta.arr")};
}

UncertaintyMap load_uncertainty(const fs::path& dir) {
  return UncertaintyMap{read_real_array(dir / "uncertainty.arr")};
}

void save_sample(const fs::path& dir, const Image2D& image, const BinaryMask* mask,
                 bool mask_eval_only) {
  save(dir, image);
  if (mask) {
    write_array(dir / "mask.arr", mask->pixels);
    json meta = read_json(dir / "meta.json");
    meta["mask_eval_only"] = mask_eval_only;
    write_json(dir / "meta.json", meta);
  }
}

Image2D load_sample_image(const fs::path& dir) { return load_image(dir); }

bool sample_has_mask(const fs::path& dir) { return fs::exists(dir / "mask.arr"); }

BinaryMask load_sample_mask(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  return BinaryMask{meta.value("id", ""), read_bit_array(dir / "mask.arr")};
}

}  // namespace rsa::io
