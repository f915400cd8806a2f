#include "zoomsr/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace zoomsr {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("STNT: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw FormatError("STNT: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

static_assert(sizeof(double) == 8, "f64 payload requires 8-byte double");

bool host_little_endian() {
  const std::uint32_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

}  // namespace

void write_stnt(std::ostream& os, const Shape& shape, const std::vector<double>& data) {
  os.write("STNT", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put_u64(os, d);
  if (host_little_endian()) {
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * 8));
  } else {
    for (double v : data) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64(os, bits);
    }
  }
}

void write_stnt(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  write_stnt(os, t.shape(), t.data());
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor read_stnt(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "STNT", 4) != 0) throw FormatError("STNT: bad magic");
  const std::uint32_t version = get_u32(is);
  if (version != 1) throw FormatError("STNT: unsupported version " + std::to_string(version));
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) throw FormatError("STNT: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get_u64(is));
  const std::size_t n = numel(shape);
  std::vector<double> data(n);
  if (host_little_endian()) {
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 8));
    if (!is) throw FormatError("STNT: truncated payload");
  } else {
    for (auto& v : data) {
      const std::uint64_t bits = get_u64(is);
      std::memcpy(&v, &bits, 8);
    }
  }
  return Tensor::constant(std::move(shape), std::move(data));
}

Tensor read_stnt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  return read_stnt(is);
}

// --------------------------------------------------------------- KvFile ----

void KvFile::set(const std::string& key, const std::string& value) {
  auto it = index_.find(key);
  if (it != index_.end()) {
    entries_[it->second].second = value;
  } else {
    index_[key] = entries_.size();
    entries_.emplace_back(key, value);
  }
}

void KvFile::set(const std::string& key, double value) { set(key, format_double(value)); }
void KvFile::set(const std::string& key, std::int64_t value) { set(key, std::to_string(value)); }
void KvFile::set_u64(const std::string& key, std::uint64_t value) {
  set(key, std::to_string(value));
}

bool KvFile::has(const std::string& key) const { return index_.count(key) != 0; }

const std::string& KvFile::get(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) throw FormatError("missing key: " + key);
  return entries_[it->second].second;
}

std::string KvFile::get_or(const std::string& key, std::string def) const {
  auto it = index_.find(key);
  return it == index_.end() ? std::move(def) : entries_[it->second].second;
}

double KvFile::get_double(const std::string& key) const {
  const std::string& s = get(key);
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("key '" + key + "' is not a number: '" + s + "'");
  }
}

std::int64_t KvFile::get_int(const std::string& key) const {
  const std::string& s = get(key);
  try {
    std::size_t pos = 0;
    const std::int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("key '" + key + "' is not an integer: '" + s + "'");
  }
}

std::uint64_t KvFile::get_u64(const std::string& key) const {
  const std::string& s = get(key);
  try {
    std::size_t pos = 0;
    const std::uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("key '" + key + "' is not an unsigned integer: '" + s + "'");
  }
}

std::string KvFile::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
  return os.str();
}

KvFile KvFile::parse(const std::string& text) {
  KvFile kv;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw FormatError("kv parse error at line " + std::to_string(lineno) + ": '" + t + "'");
    }
    kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return kv;
}

KvFile KvFile::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void KvFile::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << serialize();
  if (!os) throw IoError("write failed: " + path.string());
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ----------------------------------------------------------- PGM / PPM -----

void write_pgm16(const std::filesystem::path& path, std::size_t width, std::size_t height,
                 const std::vector<std::uint16_t>& samples) {
  if (samples.size() != width * height) throw DimensionError("pgm16: sample count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "P5\n" << width << " " << height << "\n65535\n";
  std::vector<unsigned char> buf(samples.size() * 2);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    buf[2 * i] = static_cast<unsigned char>(samples[i] >> 8);  // big-endian per PNM spec
    buf[2 * i + 1] = static_cast<unsigned char>(samples[i] & 0xff);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

namespace {

// Reads one PNM token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      break;
    }
  }
  while ((c = is.get()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(c));
  if (tok.empty()) throw FormatError("PNM: unexpected end of header");
  return tok;
}

std::size_t pnm_number(std::istream& is) {
  const std::string tok = pnm_token(is);
  try {
    return static_cast<std::size_t>(std::stoull(tok));
  } catch (const std::exception&) {
    throw FormatError("PNM: bad number '" + tok + "'");
  }
}

}  // namespace

void read_pgm16(const std::filesystem::path& path, std::size_t& width, std::size_t& height,
                std::vector<std::uint16_t>& samples) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  if (pnm_token(is) != "P5") throw FormatError("PGM: expected P5: " + path.string());
  width = pnm_number(is);
  height = pnm_number(is);
  const std::size_t maxval = pnm_number(is);
  if (maxval != 65535) throw FormatError("PGM: expected maxval 65535, got " + std::to_string(maxval));
  std::vector<unsigned char> buf(width * height * 2);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw FormatError("PGM: truncated payload: " + path.string());
  samples.resize(width * height);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i] = static_cast<std::uint16_t>((std::uint16_t(buf[2 * i]) << 8) | buf[2 * i + 1]);
  }
}

void write_ppm8(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.pixels() * 3);
  std::size_t o = 0;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        buf[o++] = static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
      }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

RgbImage read_ppm8(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  if (pnm_token(is) != "P6") throw FormatError("PPM: expected P6: " + path.string());
  const std::size_t width = pnm_number(is);
  const std::size_t height = pnm_number(is);
  const std::size_t maxval = pnm_number(is);
  if (maxval != 255) throw FormatError("PPM: expected maxval 255, got " + std::to_string(maxval));
  std::vector<unsigned char> buf(width * height * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw FormatError("PPM: truncated payload: " + path.string());
  RgbImage img(width, height, PixelOrigin::kSrgb8);
  std::size_t o = 0;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = double(buf[o++]) / 255.0;
  return img;
}

}  // namespace zoomsr
