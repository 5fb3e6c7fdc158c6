#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "attri/errors.hpp"
#include "attri/grid.hpp"

namespace attri::eval {

class ImageLoadError : public IoError {
 public:
  using IoError::IoError;
};

/// Encoded image file as handed to scorers. Only the PNG header is decoded; real scorer
/// backends decode pixels themselves.
struct Image {
  std::string path;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<unsigned char> bytes;

  bool same_content(const Image& o) const { return bytes == o.bytes; }
};

inline constexpr std::array<unsigned char, 8> kPngSignature = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

inline std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

inline Image load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageLoadError("cannot open image " + path.string());
  Image img;
  img.path = path.string();
  img.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  const auto& b = img.bytes;
  if (b.size() < 33 || std::memcmp(b.data(), kPngSignature.data(), 8) != 0) {
    throw ImageLoadError("not a PNG file: " + path.string());
  }
  if (read_be32(b.data() + 8) != 13 || std::memcmp(b.data() + 12, "IHDR", 4) != 0) {
    throw ImageLoadError("PNG without a leading IHDR chunk: " + path.string());
  }
  img.width = read_be32(b.data() + 16);
  img.height = read_be32(b.data() + 20);
  if (img.width == 0 || img.height == 0) throw ImageLoadError("PNG with zero size: " + path.string());
  return img;
}

/// 8-bit RGB PNG, rows top to bottom, `rgb.size() == 3 * width * height`.
inline std::string encode_png(std::uint32_t width, std::uint32_t height, const std::vector<unsigned char>& rgb) {
  if (rgb.size() != std::size_t{3} * width * height) throw ShapeMismatch("RGB buffer does not match PNG size");
  std::vector<unsigned char> raw;
  raw.reserve((std::size_t{3} * width + 1) * height);
  for (std::uint32_t y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), rgb.begin() + static_cast<std::ptrdiff_t>(std::size_t{3} * width * y),
               rgb.begin() + static_cast<std::ptrdiff_t>(std::size_t{3} * width * (y + 1)));
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> packed(packed_size);
  if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw IoError("zlib compression failed");
  }
  packed.resize(packed_size);

  std::string out(reinterpret_cast<const char*>(kPngSignature.data()), kPngSignature.size());
  auto be32 = [](std::string& s, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xff));
  };
  auto chunk = [&](const char* type, const unsigned char* data, std::size_t n) {
    be32(out, static_cast<std::uint32_t>(n));
    std::string body(type, 4);
    body.append(reinterpret_cast<const char*>(data), n);
    out += body;
    be32(out, static_cast<std::uint32_t>(
                  crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
  };
  unsigned char ihdr[13] = {};
  for (int i = 0; i < 4; ++i) {
    ihdr[i] = static_cast<unsigned char>(width >> (24 - 8 * i));
    ihdr[4 + i] = static_cast<unsigned char>(height >> (24 - 8 * i));
  }
  ihdr[8] = 8;  // bit depth
  ihdr[9] = 2;  // truecolor
  chunk("IHDR", ihdr, sizeof ihdr);
  chunk("IDAT", packed.data(), packed.size());
  chunk("IEND", nullptr, 0);
  return out;
}

/// Grayscale portable float map ("Pf"), little-endian, rows stored bottom to top.
inline std::string encode_pfm(const Grid& g) {
  std::ostringstream out;
  out << "Pf\n" << g.width << ' ' << g.height << "\n-1.0\n";
  for (std::size_t y = g.height; y-- > 0;) {
    for (std::size_t x = 0; x < g.width; ++x) {
      const auto v = static_cast<float>(g.at(y, x));
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      for (int i = 0; i < 4; ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  }
  return out.str();
}

inline Grid decode_pfm(const std::string& data) {
  std::istringstream in(data);
  std::string magic;
  std::size_t w = 0, h = 0;
  double scale = 0;
  in >> magic >> w >> h >> scale;
  in.get();
  if (magic != "Pf" || w == 0 || h == 0 || scale >= 0) throw IoError("unsupported PFM header");
  Grid g(h, w);
  for (std::size_t y = h; y-- > 0;) {
    for (std::size_t x = 0; x < w; ++x) {
      unsigned char b[4];
      if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated PFM data");
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t{b[3]} << 24);
      float v;
      std::memcpy(&v, &bits, 4);
      g.at(y, x) = v;
    }
  }
  return g;
}

}  // namespace attri::eval
