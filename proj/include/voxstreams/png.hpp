#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "voxstreams/image.hpp"
#include "voxstreams/tensor.hpp"

// Minimal 8-bit RGB PNG codec. The writer emits stored (uncompressed)
// deflate blocks, which every PNG reader accepts. The reader handles all
// five scanline filters but only stored deflate streams, i.e. files this
// writer produced. Enough for inspectable reconstruction outputs and for
// the evaluate CLI to round-trip them.
namespace voxstreams::png {

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t n = 0; n < 256; ++n) {
      std::uint32_t c = n;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[n] = c;
    }
    return t;
  }();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

inline std::uint32_t adler32(const std::uint8_t* data, std::size_t len) {
  std::uint32_t a = 1, b = 0;
  for (std::size_t i = 0; i < len; ++i) {
    a = (a + data[i]) % 65521u;
    b = (b + a) % 65521u;
  }
  return (b << 16) | a;
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& payload) {
  put_be32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  put_be32(out, crc32(out.data() + crc_start, out.size() - crc_start));
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Tensor& image) {
  img::require_image(image, "png::encode");
  const auto h = static_cast<std::uint32_t>(image.shape[0]);
  const auto w = static_cast<std::uint32_t>(image.shape[1]);

  // Raw image stream: per row a filter byte (0 = None) + RGB bytes.
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(h) * (1 + 3 * w));
  for (std::uint32_t y = 0; y < h; ++y) {
    raw.push_back(0);
    for (std::uint32_t x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at3(y, x, c), 0.0, 1.0);
        raw.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
    }
  }

  // zlib stream with stored deflate blocks.
  std::vector<std::uint8_t> z;
  z.push_back(0x78);
  z.push_back(0x01);
  std::size_t off = 0;
  while (off < raw.size() || raw.empty()) {
    const std::size_t n = std::min<std::size_t>(65535, raw.size() - off);
    const bool final = off + n == raw.size();
    z.push_back(final ? 1 : 0);
    z.push_back(static_cast<std::uint8_t>(n & 0xFF));
    z.push_back(static_cast<std::uint8_t>(n >> 8));
    z.push_back(static_cast<std::uint8_t>(~n & 0xFF));
    z.push_back(static_cast<std::uint8_t>((~n >> 8) & 0xFF));
    z.insert(z.end(), raw.begin() + off, raw.begin() + off + n);
    off += n;
    if (raw.empty()) break;
  }
  detail::put_be32(z, detail::adler32(raw.data(), raw.size()));

  std::vector<std::uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, w);
  detail::put_be32(ihdr, h);
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor RGB
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::put_chunk(out, "IHDR", ihdr);
  detail::put_chunk(out, "IDAT", z);
  detail::put_chunk(out, "IEND", {});
  return out;
}

inline Tensor decode(const std::vector<std::uint8_t>& bytes) {
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0) {
    throw RuntimeError("png::decode: not a PNG file");
  }
  std::size_t pos = 8;
  std::uint32_t w = 0, h = 0;
  std::vector<std::uint8_t> idat;
  bool seen_ihdr = false;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t len = detail::get_be32(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) throw RuntimeError("png::decode: truncated chunk");
    const std::string type(bytes.begin() + pos + 4, bytes.begin() + pos + 8);
    const std::uint8_t* payload = bytes.data() + pos + 8;
    if (type == "IHDR") {
      w = detail::get_be32(payload);
      h = detail::get_be32(payload + 4);
      if (payload[8] != 8 || payload[9] != 2 || payload[12] != 0) {
        throw RuntimeError("png::decode: only 8-bit non-interlaced RGB supported");
      }
      seen_ihdr = true;
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (!seen_ihdr || w == 0 || h == 0) throw RuntimeError("png::decode: missing IHDR");

  // Inflate, stored blocks only.
  if (idat.size() < 2) throw RuntimeError("png::decode: empty IDAT");
  std::size_t zp = 2;
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(h) * (1 + 3 * static_cast<std::size_t>(w)));
  while (true) {
    if (zp >= idat.size()) throw RuntimeError("png::decode: truncated deflate stream");
    const std::uint8_t header = idat[zp++];
    if (((header >> 1) & 3) != 0) {
      throw RuntimeError("png::decode: compressed deflate blocks not supported by this reader");
    }
    if (zp + 4 > idat.size()) throw RuntimeError("png::decode: truncated stored block");
    const std::size_t n = idat[zp] | (std::size_t(idat[zp + 1]) << 8);
    zp += 4;
    if (zp + n > idat.size()) throw RuntimeError("png::decode: truncated stored block data");
    raw.insert(raw.end(), idat.begin() + zp, idat.begin() + zp + n);
    zp += n;
    if (header & 1) break;
  }

  const std::size_t stride = 3 * static_cast<std::size_t>(w);
  if (raw.size() != static_cast<std::size_t>(h) * (stride + 1)) {
    throw RuntimeError("png::decode: unexpected raw stream length");
  }

  // Undo scanline filters in place on a bytes buffer.
  std::vector<std::uint8_t> pix(static_cast<std::size_t>(h) * stride);
  for (std::uint32_t y = 0; y < h; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
    std::uint8_t* dst = pix.data() + y * stride;
    const std::uint8_t* prev = y > 0 ? pix.data() + (y - 1) * stride : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= 3 ? dst[i - 3] : 0;
      const int b = prev ? prev[i] : 0;
      const int c = (prev && i >= 3) ? prev[i - 3] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default: throw RuntimeError("png::decode: unknown filter type");
      }
      dst[i] = static_cast<std::uint8_t>(v & 0xFF);
    }
  }

  Tensor image({static_cast<std::int64_t>(h), static_cast<std::int64_t>(w), 3});
  for (std::size_t i = 0; i < pix.size(); ++i) {
    image.data[i] = static_cast<double>(pix[i]) / 255.0;
  }
  return image;
}

inline void write_file(const std::filesystem::path& path, const Tensor& image) {
  const auto bytes = encode(image);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeError("png::write_file: cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw RuntimeError("png::write_file: write failed for " + path.string());
}

inline Tensor read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeError("png::read_file: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace voxstreams::png
