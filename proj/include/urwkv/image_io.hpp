#pragma once

// 8-bit image files: PNG through libpng's simplified API, PGM (P2/P5) by hand.

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "urwkv/error.hpp"

namespace urwkv {

/// Interleaved 8-bit pixels, row-major, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

namespace io_detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  for (std::size_t i = 0; i < suffix.size(); ++i)
    if (std::tolower(static_cast<unsigned char>(s[s.size() - suffix.size() + i])) != suffix[i]) return false;
  return true;
}

inline std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(static_cast<bool>(f), ErrorKind::not_found, "cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Image8 read_pgm(const std::string& path) {
  const auto buf = slurp(path);
  std::size_t pos = 0;
  auto token = [&]() {
    std::string t;
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    while (pos < buf.size() && !std::isspace(buf[pos])) t.push_back(static_cast<char>(buf[pos++]));
    return t;
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    check(!t.empty() && t.find_first_not_of("0123456789") == std::string::npos, ErrorKind::io,
          path + ": bad PGM " + what + " '" + t + "'");
    return static_cast<std::size_t>(std::stoul(t));
  };
  const std::string magic = token();
  check(magic == "P5" || magic == "P2", ErrorKind::io, path + ": not a PGM file (magic '" + magic + "')");
  Image8 img;
  img.width = number("width");
  img.height = number("height");
  img.channels = 1;
  const std::size_t maxval = number("maxval");
  check(maxval >= 1 && maxval <= 255, ErrorKind::io, path + ": only 8-bit PGM is supported");
  const std::size_t n = img.width * img.height;
  img.pixels.resize(n);
  if (magic == "P5") {
    ++pos;  // single whitespace after maxval
    check(pos + n <= buf.size(), ErrorKind::io, path + ": PGM payload truncated");
    std::memcpy(img.pixels.data(), buf.data() + pos, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<std::uint8_t>(number("pixel"));
  }
  if (maxval != 255)
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
  return img;
}

inline void write_pgm(const std::string& path, const Image8& img) {
  check(img.channels == 1, ErrorKind::invalid_argument, "PGM output needs a single-channel image");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(static_cast<bool>(f), ErrorKind::io, "cannot write " + path);
  f << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  check(static_cast<bool>(f), ErrorKind::io, "failed writing " + path);
}

inline Image8 read_png(const std::string& path, bool require_gray) {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str())) {
    const std::string msg = im.message;
    png_image_free(&im);
    std::ifstream probe(path);
    check(static_cast<bool>(probe), ErrorKind::not_found, "cannot open " + path);
    throw Error(ErrorKind::io, path + ": " + msg);
  }
  if (require_gray && (im.format & PNG_FORMAT_FLAG_COLOR)) {
    png_image_free(&im);
    throw Error(ErrorKind::io, path + ": mask must be a single-channel image");
  }
  Image8 img;
  img.channels = (im.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
  im.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  img.width = im.width;
  img.height = im.height;
  img.pixels.resize(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = im.message;
    png_image_free(&im);
    throw Error(ErrorKind::io, path + ": " + msg);
  }
  return img;
}

inline void write_png(const std::string& path, const Image8& img) {
  check(img.channels == 1 || img.channels == 3, ErrorKind::invalid_argument, "PNG output needs 1 or 3 channels");
  check(img.pixels.size() == img.width * img.height * img.channels, ErrorKind::shape, "image buffer size mismatch");
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&im, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    const std::string msg = im.message;
    png_image_free(&im);
    throw Error(ErrorKind::io, "cannot write " + path + ": " + msg);
  }
}

}  // namespace io_detail

/// Reads .png, .pgm; a mask read (single_channel) rejects colour PNGs.
inline Image8 read_image(const std::string& path, bool single_channel = false) {
  if (io_detail::ends_with(path, ".pgm")) return io_detail::read_pgm(path);
  return io_detail::read_png(path, single_channel);
}

inline void write_image(const std::string& path, const Image8& img) {
  if (io_detail::ends_with(path, ".pgm")) return io_detail::write_pgm(path, img);
  io_detail::write_png(path, img);
}

}  // namespace urwkv
