#pragma once

// File formats: 8-bit PGM (P5) and grayscale PNG images, marker polygons as
// JSON point lists, and atomic write-temp-then-rename output.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "selseg/error.hpp"
#include "selseg/image.hpp"

namespace selseg {

namespace fs = std::filesystem;

struct RawGray {
  int height = 0;
  int width = 0;
  int maxval = 255;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline RawGray parse_pgm(std::string_view bytes) {
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> int {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
      throw InputError("malformed PGM header");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1 << 20) throw InputError("PGM header value too large");
    }
    return static_cast<int>(v);
  };
  RawGray img;
  img.width = read_int();
  img.height = read_int();
  img.maxval = read_int();
  if (img.maxval <= 0 || img.maxval > 255)
    throw InputError("unsupported PGM: only 8-bit maxval is accepted");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw InputError("malformed PGM header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (bytes.size() - pos < n) throw InputError("truncated PGM pixel data");
  img.pixels.assign(bytes.begin() + pos, bytes.begin() + pos + n);
  return img;
}

inline RawGray parse_png(std::string_view bytes) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw InputError(std::string("unreadable PNG: ") + png.message);
  if (png.format & PNG_FORMAT_FLAG_COLOR) {
    png_image_free(&png);
    throw InputError("unsupported PNG: only grayscale images are accepted");
  }
  png.format = PNG_FORMAT_GRAY;
  RawGray img;
  img.width = static_cast<int>(png.width);
  img.height = static_cast<int>(png.height);
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw InputError("unreadable PNG: " + msg);
  }
  return img;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read file: " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

/// Decodes PGM (P5) or grayscale PNG bytes without range-normalising.
inline RawGray decode_gray(std::string_view bytes) {
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return detail::parse_pgm(bytes);
  if (bytes.size() >= 8 && static_cast<unsigned char>(bytes[0]) == 0x89 && bytes.substr(1, 3) == "PNG")
    return detail::parse_png(bytes);
  throw InputError("unsupported image format (expected PGM P5 or PNG)");
}

inline Image to_image(const RawGray& raw) {
  std::vector<double> data(raw.pixels.size());
  std::transform(raw.pixels.begin(), raw.pixels.end(), data.begin(),
                 [&](std::uint8_t p) { return p / static_cast<double>(raw.maxval); });
  return Image(raw.height, raw.width, std::move(data));
}

inline Image decode_image(std::string_view bytes) { return to_image(decode_gray(bytes)); }

inline Image load_image(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("image file not found: " + path.string());
  try {
    return decode_image(detail::read_file(path));
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

/// Maps values in [0,1] linearly to 0..255 (clamping outside values).
inline std::string encode_pgm(const Grid& field) {
  std::ostringstream out;
  out << "P5\n" << field.width() << ' ' << field.height() << "\n255\n";
  std::string body(field.size(), '\0');
  for (std::size_t i = 0; i < field.size(); ++i)
    body[i] = static_cast<char>(
        static_cast<std::uint8_t>(std::lround(std::clamp(field[i], 0.0, 1.0) * 255.0)));
  out << body;
  return out.str();
}

/// Writes to a sibling temp file and renames it over the target.
inline void write_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write file: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw InputError("short write: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void save_pgm(const Grid& field, const fs::path& path) {
  write_atomic(path, encode_pgm(field));
}

/// Reads a PGM/PNG and returns it as a 0/1 mask (nonzero pixels are 1).
inline ScalarField load_mask(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("mask file not found: " + path.string());
  const RawGray raw = decode_gray(detail::read_file(path));
  std::vector<double> data(raw.pixels.size());
  std::transform(raw.pixels.begin(), raw.pixels.end(), data.begin(),
                 [](std::uint8_t p) { return p > 0 ? 1.0 : 0.0; });
  return ScalarField(raw.height, raw.width, std::move(data), FieldKind::mask);
}

// ---- markers ---------------------------------------------------------------

inline std::vector<Point> points_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw InputError("marker JSON must be an array of [row, col] pairs");
  std::vector<Point> pts;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() ||
        !p[1].is_number_integer())
      throw InputError("marker JSON entries must be [row, col] integer pairs");
    pts.push_back({p[0].get<int>(), p[1].get<int>()});
  }
  return pts;
}

inline nlohmann::json points_to_json(std::span<const Point> pts) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& p : pts) j.push_back({p.row, p.col});
  return j;
}

inline MarkerSet load_markers(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("markers file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(path.string() + ": invalid JSON: " + e.what());
  }
  return MarkerSet(points_from_json(j));
}

inline void save_markers(const MarkerSet& markers, const fs::path& path) {
  write_atomic(path, points_to_json(markers.points()).dump() + "\n");
}

}  // namespace selseg
