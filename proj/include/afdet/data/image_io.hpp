#pragma once

#include <zlib.h>

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/tensor.hpp"

namespace afdet::data {

// Images move through the library as 3 x H x W float tensors in [0,1].
// Supported on disk: binary PPM (P6) and 8-bit RGB PNG, both with maxval 255.
// write-then-read is exact for values on the 1/255 grid.

inline std::uint8_t to_byte(float v) {
  const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline Tensor bytes_to_tensor(const std::vector<std::uint8_t>& rgb,
                              std::int64_t h, std::int64_t w) {
  Tensor img({3, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        img(c, y, x) =
            static_cast<float>(rgb[static_cast<std::size_t>((y * w + x) * 3 + c)]) /
            255.0f;
  return img;
}

inline std::vector<std::uint8_t> tensor_to_bytes(const Tensor& img) {
  require(img.rank() == 3 && img.dim(0) == 3,
          "write_image: tensor must be 3 x H x W");
  const std::int64_t h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h * w * 3));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        rgb[static_cast<std::size_t>((y * w + x) * 3 + c)] = to_byte(img(c, y, x));
  return rgb;
}

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is.good()) throw RuntimeFailure("cannot open image file: " + path);
  std::string data((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  return data;
}

// Writes to <path>.tmp and renames so readers never observe partial files.
inline void write_file_atomic(const std::string& path, const std::string& data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os.good()) throw RuntimeFailure("cannot open for writing: " + tmp);
    os.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!os.good()) throw RuntimeFailure("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw RuntimeFailure("cannot move " + tmp + " into place");
}

// --- PPM (P6, maxval 255) ---

inline std::int64_t ppm_token(const std::string& d, std::size_t& pos,
                              const std::string& path) {
  // Skip whitespace and '#' comments between header fields.
  while (pos < d.size()) {
    if (std::isspace(static_cast<unsigned char>(d[pos]))) {
      ++pos;
    } else if (d[pos] == '#') {
      while (pos < d.size() && d[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  std::int64_t v = 0;
  bool any = false;
  while (pos < d.size() && std::isdigit(static_cast<unsigned char>(d[pos]))) {
    v = v * 10 + (d[pos] - '0');
    any = true;
    ++pos;
  }
  if (!any) throw RuntimeFailure("truncated PPM header: " + path);
  return v;
}

inline Tensor read_ppm(const std::string& data, const std::string& path) {
  if (data.size() < 2 || data[0] != 'P' || data[1] != '6')
    throw RuntimeFailure("unsupported PPM variant (want P6): " + path);
  std::size_t pos = 2;
  const std::int64_t w = ppm_token(data, pos, path);
  const std::int64_t h = ppm_token(data, pos, path);
  const std::int64_t maxval = ppm_token(data, pos, path);
  if (maxval != 255)
    throw RuntimeFailure("unsupported PPM maxval (want 255): " + path);
  ++pos;  // single whitespace byte after maxval
  const std::size_t need = static_cast<std::size_t>(w * h * 3);
  if (w <= 0 || h <= 0 || pos + need > data.size())
    throw RuntimeFailure("truncated PPM payload: " + path);
  std::vector<std::uint8_t> rgb(need);
  std::memcpy(rgb.data(), data.data() + pos, need);
  return bytes_to_tensor(rgb, h, w);
}

inline std::string encode_ppm(const Tensor& img) {
  const auto rgb = tensor_to_bytes(img);
  std::string out = "P6\n" + std::to_string(img.dim(2)) + " " +
                    std::to_string(img.dim(1)) + "\n255\n";
  out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
  return out;
}

// --- PNG (8-bit RGB, color type 2, no interlace) ---

inline constexpr unsigned char kPngSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

inline std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void put_be32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

inline void png_chunk(std::string& out, const char type[4],
                      const std::string& payload) {
  put_be32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.append(type, 4);
  out += payload;
  const auto crc = crc32(
      crc32(0L, nullptr, 0),
      reinterpret_cast<const Bytef*>(out.data() + crc_start),
      static_cast<uInt>(out.size() - crc_start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

inline Tensor read_png(const std::string& data, const std::string& path) {
  if (data.size() < 8 || std::memcmp(data.data(), kPngSignature, 8) != 0)
    throw RuntimeFailure("not a PNG file: " + path);
  std::size_t pos = 8;
  std::int64_t w = 0, h = 0;
  bool seen_ihdr = false, seen_iend = false;
  std::string idat;
  while (pos + 8 <= data.size()) {
    const auto len = be32(reinterpret_cast<const unsigned char*>(data.data() + pos));
    const std::string type = data.substr(pos + 4, 4);
    pos += 8;
    if (pos + len + 4 > data.size())
      throw RuntimeFailure("truncated PNG chunk: " + path);
    const char* payload = data.data() + pos;
    if (type == "IHDR") {
      if (len != 13) throw RuntimeFailure("bad IHDR length: " + path);
      const auto* p = reinterpret_cast<const unsigned char*>(payload);
      w = be32(p);
      h = be32(p + 4);
      const int bit_depth = p[8], color_type = p[9], interlace = p[12];
      if (bit_depth != 8 || color_type != 2)
        throw RuntimeFailure("unsupported PNG format (want 8-bit RGB): " + path);
      if (interlace != 0)
        throw RuntimeFailure("unsupported PNG interlacing: " + path);
      seen_ihdr = true;
    } else if (type == "IDAT") {
      idat.append(payload, len);
    } else if (type == "IEND") {
      seen_iend = true;
      break;
    }
    pos += len + 4;  // skip payload + CRC
  }
  if (!seen_ihdr || !seen_iend || w <= 0 || h <= 0)
    throw RuntimeFailure("truncated PNG stream: " + path);

  const std::int64_t stride = w * 3;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h * (stride + 1)));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  const int rc = uncompress(raw.data(), &raw_len,
                            reinterpret_cast<const Bytef*>(idat.data()),
                            static_cast<uLong>(idat.size()));
  if (rc != Z_OK || raw_len != raw.size())
    throw RuntimeFailure("corrupt PNG pixel data: " + path);

  // Undo per-row filtering (types 0-4) in place into the output buffer.
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h * stride));
  for (std::int64_t y = 0; y < h; ++y) {
    const std::uint8_t filter = raw[static_cast<std::size_t>(y * (stride + 1))];
    const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
    std::uint8_t* cur = rgb.data() + y * stride;
    const std::uint8_t* up = y > 0 ? rgb.data() + (y - 1) * stride : nullptr;
    for (std::int64_t i = 0; i < stride; ++i) {
      const int a = i >= 3 ? cur[i - 3] : 0;
      const int b = up ? up[i] : 0;
      const int c = (up && i >= 3) ? up[i - 3] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw RuntimeFailure("bad PNG filter type: " + path);
      }
      cur[i] = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  return bytes_to_tensor(rgb, h, w);
}

inline std::string encode_png(const Tensor& img) {
  const auto rgb = tensor_to_bytes(img);
  const std::int64_t h = img.dim(1), w = img.dim(2), stride = w * 3;

  std::string raw;
  raw.reserve(static_cast<std::size_t>(h * (stride + 1)));
  for (std::int64_t y = 0; y < h; ++y) {
    raw.push_back('\0');  // filter type 0 (none)
    raw.append(reinterpret_cast<const char*>(rgb.data() + y * stride),
               static_cast<std::size_t>(stride));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(bound, '\0');
  require(compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                    reinterpret_cast<const Bytef*>(raw.data()),
                    static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION) == Z_OK,
          "PNG compression failed");
  compressed.resize(bound);

  std::string ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(w));
  put_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace

  std::string out(reinterpret_cast<const char*>(kPngSignature), 8);
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", compressed);
  png_chunk(out, "IEND", "");
  return out;
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

// Format is sniffed from the file contents, so extension mismatches don't
// matter on the read side.
inline Tensor read_image(const std::string& path) {
  const std::string data = detail::read_file(path);
  if (data.size() >= 8 &&
      std::memcmp(data.data(), detail::kPngSignature, 8) == 0)
    return detail::read_png(data, path);
  if (data.size() >= 2 && data[0] == 'P' && data[1] == '6')
    return detail::read_ppm(data, path);
  throw RuntimeFailure("unsupported image format: " + path);
}

// Format picked by extension: .png or .ppm.
inline void write_image(const Tensor& img, const std::string& path) {
  if (detail::has_suffix(path, ".png"))
    detail::write_file_atomic(path, detail::encode_png(img));
  else if (detail::has_suffix(path, ".ppm"))
    detail::write_file_atomic(path, detail::encode_ppm(img));
  else
    throw InvalidArgument("write_image: unsupported extension (want .png or .ppm): " +
                          path);
}

}  // namespace afdet::data
