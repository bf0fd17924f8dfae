#pragma once

// Chunked array container (".arr").
//
// Layout, all integers little-endian:
//   bytes 0..7   magic "RSAARR01"
//   u32          length L of the JSON header
//   L bytes      JSON header {"dtype": "float64"|"uint8", "shape": [rows, cols],
//                             "chunk_rows": R, "chunks": K}
//   K chunks     each: u32 crc32(payload), u64 payload byte count, payload
//                (row-major, at most R rows per chunk)
//
// Metadata that is not an array lives in a JSON sidecar next to the arrays.

#include <filesystem>
#include <stdexcept>
#include <string>

#include "rsa/domain.hpp"

namespace rsa::io {

namespace fs = std::filesystem;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kDefaultChunkRows = 64;

void write_array(const fs::path& path, const RealGrid& grid, std::size_t chunk_rows = kDefaultChunkRows);
void write_array(const fs::path& path, const BitGrid& grid, std::size_t chunk_rows = kDefaultChunkRows);
RealGrid read_real_array(const fs::path& path);
BitGrid read_bit_array(const fs::path& path);

// Whole-file helpers used by the checkpoint and sample layers.
std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

// Per-type directory containers. Each writes arrays plus a meta.json.
void save(const fs::path& dir, const Image2D& image);
void save(const fs::path& dir, const BinaryMask& mask);
void save(const fs::path& dir, const EdgeMap& edge);
void save(const fs::path& dir, const NIGField& field);
void save(const fs::path& dir, const UncertaintyMap& u);

Image2D load_image(const fs::path& dir);
BinaryMask load_mask(const fs::path& dir);
EdgeMap load_edge(const fs::path& dir);
NIGField load_nig(const fs::path& dir);
UncertaintyMap load_uncertainty(const fs::path& dir);

// Sample layout: <dir>/image.arr, <dir>/mask.arr (optional), <dir>/meta.json.
// mask_eval_only marks ground truth that adaptation must never consume.
void save_sample(const fs::path& dir, const Image2D& image, const BinaryMask* mask,
                 bool mask_eval_only = false);
Image2D load_sample_image(const fs::path& dir);
bool sample_has_mask(const fs::path& dir);
BinaryMask load_sample_mask(const fs::path& dir);

}  // namespace rsa::io
