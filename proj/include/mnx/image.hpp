// Binary PPM (P6, maxval 255) images as [3,H,W] tensors in [0,1], letterbox
// resizing to a square network input and simple box drawing.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>

#include "mnx/box.hpp"
#include "mnx/tensor.hpp"

namespace mnx::inline MNX_ABI {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Header tokens are separated by whitespace; '#' starts a comment to end of line.
inline std::string ppm_token(const std::string& b, std::size_t& pos, const std::string& path) {
  for (;;) {
    while (pos < b.size() && std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < b.size() && !std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
  if (start == pos) throw ImageError(path + ": malformed PPM header (unexpected end)");
  return b.substr(start, pos - start);
}

inline long ppm_number(const std::string& tok, const std::string& path, const char* what) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    throw ImageError(path + ": malformed PPM header (" + what + " '" + tok + "')");
  }
  if (tok.size() > 9) throw ImageError(path + ": PPM " + std::string(what) + " too large");
  return std::stol(tok);
}

}  // namespace detail

inline Tensor decode_ppm(const std::string& bytes, const std::string& path = "image") {
  std::size_t pos = 0;
  if (detail::ppm_token(bytes, pos, path) != "P6") throw ImageError(path + ": not a binary PPM (P6) file");
  const long w = detail::ppm_number(detail::ppm_token(bytes, pos, path), path, "width");
  const long h = detail::ppm_number(detail::ppm_token(bytes, pos, path), path, "height");
  const long maxval = detail::ppm_number(detail::ppm_token(bytes, pos, path), path, "maxval");
  if (w < 1 || h < 1) throw ImageError(path + ": PPM dimensions must be positive");
  if (maxval != 255) throw ImageError(path + ": unsupported PPM maxval " + std::to_string(maxval) + " (only 255)");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ImageError(path + ": malformed PPM header (missing separator before pixel data)");
  }
  ++pos;
  const std::size_t plane = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - pos < 3 * plane) throw ImageError(path + ": truncated PPM pixel data");
  Tensor img({3, h, w});
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      img[static_cast<std::int64_t>(c * plane + p)] =
          static_cast<Real>(static_cast<unsigned char>(bytes[pos + 3 * p + c])) / Real(255);
    }
  }
  return img;
}

inline std::string encode_ppm(const Tensor& img) {
  if (img.ndim() != 3 || img.dim(0) != 3) throw ImageError("encode_ppm: expected [3,H,W], got " + to_string(img.shape()));
  const std::int64_t h = img.dim(1), w = img.dim(2), plane = h * w;
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::int64_t p = 0; p < plane; ++p) {
    for (std::int64_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(img[c * plane + p]), 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
  return out;
}

inline Tensor load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes, path);
}

inline void save_image(const Tensor& img, const std::string& path) {
  const std::string bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot write image '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Bilinear resize with half-pixel centres.
inline Tensor resize_bilinear(const Tensor& img, std::int64_t out_h, std::int64_t out_w) {
  const std::int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (out_h == H && out_w == W) return img.detach();
  Tensor out({C, out_h, out_w});
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  for (std::int64_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::int64_t>(fy);
    const std::int64_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::int64_t>(fx);
      const std::int64_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < C; ++c) {
        const Real* p = img.ptr() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - wx) + p[y0 * W + x1] * wx;
        const double bot = p[y1 * W + x0] * (1 - wx) + p[y1 * W + x1] * wx;
        out[(c * out_h + y) * out_w + x] = static_cast<Real>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

struct Letterbox {
  Tensor image;  // [3, size, size]
  double scale = 1.0;
  std::int64_t pad_x = 0, pad_y = 0;  // left / top padding in network pixels

  // Network coordinates back to source-image coordinates.
  Box to_source(const Box& b) const {
    auto fx = [&](float v) { return static_cast<float>((static_cast<double>(v) - static_cast<double>(pad_x)) / scale); };
    auto fy = [&](float v) { return static_cast<float>((static_cast<double>(v) - static_cast<double>(pad_y)) / scale); };
    return {fx(b.x1), fy(b.y1), fx(b.x2), fy(b.y2)};
  }
  Box to_network(const Box& b) const {
    auto fx = [&](float v) { return static_cast<float>(static_cast<double>(v) * scale + static_cast<double>(pad_x)); };
    auto fy = [&](float v) { return static_cast<float>(static_cast<double>(v) * scale + static_cast<double>(pad_y)); };
    return {fx(b.x1), fy(b.y1), fx(b.x2), fy(b.y2)};
  }
};

inline constexpr Real kLetterboxFill = Real(0.5);

// Aspect-preserving resize of a [3,H,W] image into a size x size canvas of
// 0.5 grey, centred; odd padding puts the extra pixel right/bottom.
inline Letterbox letterbox(const Tensor& img, std::int64_t size) {
  if (img.ndim() != 3 || img.dim(0) != 3) throw ImageError("letterbox: expected [3,H,W], got " + to_string(img.shape()));
  if (size < 1) throw ImageError("letterbox: size must be positive");
  const std::int64_t H = img.dim(1), W = img.dim(2);
  Letterbox lb;
  lb.scale = std::min(static_cast<double>(size) / static_cast<double>(W), static_cast<double>(size) / static_cast<double>(H));
  const std::int64_t nw = std::clamp<std::int64_t>(std::llround(static_cast<double>(W) * lb.scale), 1, size);
  const std::int64_t nh = std::clamp<std::int64_t>(std::llround(static_cast<double>(H) * lb.scale), 1, size);
  lb.pad_x = (size - nw) / 2;
  lb.pad_y = (size - nh) / 2;
  Tensor resized = resize_bilinear(img, nh, nw);
  lb.image = Tensor::full({3, size, size}, kLetterboxFill);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < nh; ++y) {
      const Real* src = resized.ptr() + (c * nh + y) * nw;
      std::copy(src, src + nw, lb.image.ptr() + (c * size + y + lb.pad_y) * size + lb.pad_x);
    }
  }
  return lb;
}

inline std::array<Real, 3> class_color(int class_id) {
  static constexpr std::array<std::array<Real, 3>, 8> kPalette = {{{1, 0, 0},
                                                                   {0, 0.8f, 0},
                                                                   {0, 0.3f, 1},
                                                                   {1, 0.8f, 0},
                                                                   {1, 0, 1},
                                                                   {0, 1, 1},
                                                                   {1, 0.5f, 0},
                                                                   {0.6f, 0.3f, 1}}};
  return kPalette[static_cast<std::size_t>(std::abs(class_id)) % kPalette.size()];
}

// Draws a rectangle outline `thickness` pixels wide, in place.
inline void draw_box(Tensor& img, const Box& b, std::array<Real, 3> color, int thickness = 2) {
  const std::int64_t H = img.dim(1), W = img.dim(2);
  const auto x1 = std::clamp<std::int64_t>(std::lround(b.x1), 0, W - 1), x2 = std::clamp<std::int64_t>(std::lround(b.x2) - 1, 0, W - 1);
  const auto y1 = std::clamp<std::int64_t>(std::lround(b.y1), 0, H - 1), y2 = std::clamp<std::int64_t>(std::lround(b.y2) - 1, 0, H - 1);
  auto put = [&](std::int64_t y, std::int64_t x) {
    for (std::int64_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = color[static_cast<std::size_t>(c)];
  };
  for (int t = 0; t < thickness; ++t) {
    for (std::int64_t x = x1; x <= x2; ++x) {
      put(std::min(y1 + t, y2), x);
      put(std::max(y2 - t, y1), x);
    }
    for (std::int64_t y = y1; y <= y2; ++y) {
      put(y, std::min(x1 + t, x2));
      put(y, std::max(x2 - t, x1));
    }
  }
}

}  // namespace mnx
