// Self-contained raster I/O: binary PGM (8/16-bit gray) and PPM (8-bit RGB).
// Other formats are handled by pluggable readers registered at the tool layer.

#pragma once

#include "fmosd/core.hpp"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fmosd {

namespace detail {

inline int pnm_next_token(std::istream& in) {
  // Skips whitespace and '#' comments, then parses one integer.
  for (;;) {
    int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  int value = 0;
  if (!(in >> value)) throw Error("parse-error", "malformed PNM header");
  return value;
}

}  // namespace detail

inline ImageGrid read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("file-not-found", "cannot open " + path.string());
  std::array<char, 2> magic{};
  in.read(magic.data(), 2);
  if (magic[0] != 'P' || magic[1] != '5')
    throw Error("parse-error", path.string() + " is not a binary PGM (P5)");
  int w = detail::pnm_next_token(in);
  int h = detail::pnm_next_token(in);
  int maxval = detail::pnm_next_token(in);
  in.get();  // single whitespace before payload
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
    throw Error("parse-error", "bad PGM dimensions in " + path.string());

  ImageGrid img = ImageGrid::zeros(h, w);
  if (maxval < 256) {
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw Error("parse-error", "truncated PGM payload in " + path.string());
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        img.pixels(r, c) = buf[static_cast<size_t>(r) * w + c] / double(maxval);
  } else {
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 2);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw Error("parse-error", "truncated PGM payload in " + path.string());
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        size_t i = (static_cast<size_t>(r) * w + c) * 2;
        int v = (buf[i] << 8) | buf[i + 1];  // big-endian per PNM spec
        img.pixels(r, c) = v / double(maxval);
      }
  }
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const ImageGrid& img,
                      int maxval = 255) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io-error", "cannot write " + path.string());
  out << "P5\n" << img.width << " " << img.height << "\n" << maxval << "\n";
  if (maxval < 256) {
    std::vector<unsigned char> buf(static_cast<size_t>(img.width) * img.height);
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c) {
        double v = img.pixels(r, c);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        buf[static_cast<size_t>(r) * img.width + c] =
            static_cast<unsigned char>(std::lround(v * maxval));
      }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
  } else {
    std::vector<unsigned char> buf(static_cast<size_t>(img.width) * img.height * 2);
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c) {
        double v = img.pixels(r, c);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        int q = static_cast<int>(std::lround(v * maxval));
        size_t i = (static_cast<size_t>(r) * img.width + c) * 2;
        buf[i] = static_cast<unsigned char>(q >> 8);
        buf[i + 1] = static_cast<unsigned char>(q & 0xff);
      }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
  }
}

/// 8-bit RGB raster used for overlay output.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<unsigned char> data;  // r,g,b interleaved, row-major

  static RgbImage from_gray(const ImageGrid& img) {
    RgbImage rgb;
    rgb.height = img.height;
    rgb.width = img.width;
    rgb.data.resize(static_cast<size_t>(img.height) * img.width * 3);
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c) {
        double v = img.pixels(r, c);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        auto g = static_cast<unsigned char>(std::lround(v * 255.0));
        size_t i = (static_cast<size_t>(r) * img.width + c) * 3;
        rgb.data[i] = rgb.data[i + 1] = rgb.data[i + 2] = g;
      }
    return rgb;
  }

  void set(int r, int c, unsigned char red, unsigned char green, unsigned char blue) {
    if (r < 0 || c < 0 || r >= height || c >= width) return;
    size_t i = (static_cast<size_t>(r) * width + c) * 3;
    data[i] = red;
    data[i + 1] = green;
    data[i + 2] = blue;
  }

  /// Small plus-shaped marker centered on a continuous point.
  void draw_cross(Point p, unsigned char red, unsigned char green, unsigned char blue,
                  int radius = 3) {
    int cx = snap_index(p.x);
    int cy = snap_index(p.y);
    for (int d = -radius; d <= radius; ++d) {
      set(cy, cx + d, red, green, blue);
      set(cy + d, cx, red, green, blue);
    }
  }
};

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io-error", "cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("file-not-found", "cannot open " + path.string());
  std::array<char, 2> magic{};
  in.read(magic.data(), 2);
  if (magic[0] != 'P' || magic[1] != '6')
    throw Error("parse-error", path.string() + " is not a binary PPM (P6)");
  int w = detail::pnm_next_token(in);
  int h = detail::pnm_next_token(in);
  int maxval = detail::pnm_next_token(in);
  in.get();
  if (maxval != 255) throw Error("parse-error", "only 8-bit PPM supported");
  RgbImage img;
  img.width = w;
  img.height = h;
  img.data.resize(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size()));
  if (!in) throw Error("parse-error", "truncated PPM payload in " + path.string());
  return img;
}

/// Grayscale loader keyed on extension; PPM collapses to luma.
inline ImageGrid read_image_auto(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".pgm") return read_pgm(path);
  if (ext == ".ppm") {
    RgbImage rgb = read_ppm(path);
    ImageGrid img = ImageGrid::zeros(rgb.height, rgb.width);
    for (int r = 0; r < rgb.height; ++r)
      for (int c = 0; c < rgb.width; ++c) {
        size_t i = (static_cast<size_t>(r) * rgb.width + c) * 3;
        img.pixels(r, c) = (0.299 * rgb.data[i] + 0.587 * rgb.data[i + 1] +
                            0.114 * rgb.data[i + 2]) /
                           255.0;
      }
    return img;
  }
  throw Error("parse-error", "unsupported image extension '" + ext + "' for " + path.string());
}

}  // namespace fmosd
