#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "disco/error.hpp"
#include "disco/tensor.hpp"

namespace disco {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(errc::io, "cannot open " + path.string());
  std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

// write via temp file + rename so readers never observe partial content
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(errc::io, "cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) fail(errc::io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// ----------------------------------------------------------------------------
// binary PPM (P6, 8-bit), the only image format emitted or consumed

inline std::string ppm_bytes(const Tensor& img) {
  if (img.rank() != 3 || img.dim(2) != 3) fail(errc::shape, "ppm: want (H,W,3), got " + shape_str(img.shape));
  int h = img.dim(0), w = img.dim(1);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + std::size_t(h) * w * 3);
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    double v = (*img.data)[std::size_t(i)];
    double q = std::round(std::min(1.0, std::max(0.0, v)) * 255.0);
    out.push_back(char(static_cast<unsigned char>(q)));
  }
  return out;
}

inline void save_ppm(const Tensor& img, const std::filesystem::path& path) {
  write_file_atomic(path, ppm_bytes(img));
}

inline Tensor parse_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> int {
    skip_ws();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) fail(errc::corrupt, "ppm: expected integer in header");
    return std::stoi(bytes.substr(start, pos - start));
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') fail(errc::corrupt, "ppm: not a P6 file");
  pos = 2;
  int w = read_int(), h = read_int(), maxval = read_int();
  if (maxval != 255) fail(errc::corrupt, "ppm: only maxval 255 supported");
  ++pos; // single whitespace after maxval
  std::size_t need = std::size_t(w) * h * 3;
  if (bytes.size() - pos < need) fail(errc::corrupt, "ppm: truncated pixel data");
  std::vector<double> v(need, 0.0);
  for (std::size_t i = 0; i < need; ++i)
    v[i] = double(static_cast<unsigned char>(bytes[pos + i])) / 255.0;
  return Tensor({h, w, 3}, std::move(v));
}

inline Tensor load_ppm(const std::filesystem::path& path) { return parse_ppm(read_file(path)); }

} // namespace disco
