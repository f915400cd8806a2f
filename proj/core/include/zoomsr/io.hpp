#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "zoomsr/image.hpp"
#include "zoomsr/tensor.hpp"

namespace zoomsr {

// ----- STNT binary tensor format -------------------------------------------
// magic "STNT", u32 version=1, u32 rank, rank x u64 dims, little-endian f64
// payload in row-major order.

void write_stnt(std::ostream& os, const Shape& shape, const std::vector<double>& data);
void write_stnt(const std::filesystem::path& path, const Tensor& t);
Tensor read_stnt(std::istream& is);
Tensor read_stnt(const std::filesystem::path& path);

// ----- flat key-value config files ------------------------------------------
// One "key = value" per line; '#' starts a comment. Keys keep file order.

class KvFile {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);
  void set_u64(const std::string& key, std::uint64_t value);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;           // throws FormatError
  std::string get_or(const std::string& key, std::string def) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string serialize() const;
  static KvFile parse(const std::string& text);
  static KvFile load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

std::string format_double(double v);  // round-trippable %.17g

// ----- image files -----------------------------------------------------------
// LR raw frames: 16-bit big-endian binary PGM (P5, maxval 65535).
// HR / ground-truth frames: 8-bit binary PPM (P6).

void write_pgm16(const std::filesystem::path& path, std::size_t width, std::size_t height,
                 const std::vector<std::uint16_t>& samples);
void read_pgm16(const std::filesystem::path& path, std::size_t& width, std::size_t& height,
                std::vector<std::uint16_t>& samples);

// Values are quantized with round-half-up on write and mapped back to v/255.
void write_ppm8(const std::filesystem::path& path, const RgbImage& img);
RgbImage read_ppm8(const std::filesystem::path& path);

}  // namespace zoomsr
