#include "zoomloc/common/image.hpp"

#include <algorithm>
#include <cmath>

#include "zoomloc/common/error.hpp"

namespace zoomloc {

Image pool2x2(const Image& src) {
  Image out(src.height / 2, src.width / 2, src.channels);
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      for (int ch = 0; ch < src.channels; ++ch) {
        const double sum = static_cast<double>(src.at(2 * r, 2 * c, ch)) +
                           src.at(2 * r, 2 * c + 1, ch) +
                           src.at(2 * r + 1, 2 * c, ch) +
                           src.at(2 * r + 1, 2 * c + 1, ch);
        out.at(r, c, ch) = static_cast<float>(sum * 0.25);
      }
    }
  }
  return out;
}

Image pool2x2_n(const Image& src, int n) {
  Image out = src;
  for (int i = 0; i < n; ++i) out = pool2x2(out);
  return out;
}

Image resize_bilinear(const Image& src, int out_h, int out_w) {
  if (out_h == src.height && out_w == src.width) return src;
  Image out(out_h, out_w, src.channels);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int r = 0; r < out_h; ++r) {
    double fy = (r + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int c = 0; c < out_w; ++c) {
      double fx = (c + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < src.channels; ++ch) {
        const double top = (1.0 - wx) * src.at(y0, x0, ch) + wx * src.at(y0, x1, ch);
        const double bot = (1.0 - wx) * src.at(y1, x0, ch) + wx * src.at(y1, x1, ch);
        out.at(r, c, ch) = static_cast<float>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

Image flip_horizontal(const Image& src) {
  Image out(src.height, src.width, src.channels);
  for (int r = 0; r < src.height; ++r)
    for (int c = 0; c < src.width; ++c)
      for (int ch = 0; ch < src.channels; ++ch)
        out.at(r, c, ch) = src.at(r, src.width - 1 - c, ch);
  return out;
}

Image flip_vertical(const Image& src) {
  Image out(src.height, src.width, src.channels);
  for (int r = 0; r < src.height; ++r)
    for (int c = 0; c < src.width; ++c)
      for (int ch = 0; ch < src.channels; ++ch)
        out.at(r, c, ch) = src.at(src.height - 1 - r, c, ch);
  return out;
}

Image rotate90(const Image& src, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return src;
  Image out = k == 2 ? Image(src.height, src.width, src.channels)
                     : Image(src.width, src.height, src.channels);
  for (int r = 0; r < src.height; ++r) {
    for (int c = 0; c < src.width; ++c) {
      for (int ch = 0; ch < src.channels; ++ch) {
        const float v = src.at(r, c, ch);
        switch (k) {
          case 1: out.at(src.width - 1 - c, r, ch) = v; break;
          case 2: out.at(src.height - 1 - r, src.width - 1 - c, ch) = v; break;
          default: out.at(c, src.height - 1 - r, ch) = v; break;
        }
      }
    }
  }
  return out;
}

Image adjust_contrast(const Image& src, double factor) {
  if (factor == 1.0) return src;
  double mean = 0;
  for (float v : src.data) mean += v;
  mean /= static_cast<double>(src.data.size());
  Image out(src.height, src.width, src.channels);
  for (std::size_t i = 0; i < src.data.size(); ++i) {
    const double v = mean + factor * (src.data[i] - mean);
    out.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

Image crop(const Image& src, int r0, int c0, int h, int w) {
  if (r0 < 0 || c0 < 0 || r0 + h > src.height || c0 + w > src.width)
    throw OutOfBounds("crop window outside image");
  Image out(h, w, src.channels);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < src.channels; ++ch)
        out.at(r, c, ch) = src.at(r0 + r, c0 + c, ch);
  return out;
}

double whiteness(const Image& patch, double lum_threshold, double sat_threshold) {
  if (patch.size() == 0) throw OutOfBounds("whiteness of empty patch");
  const int pixels = patch.height * patch.width;
  int background = 0;
  for (int p = 0; p < pixels; ++p) {
    float lo = patch.data[static_cast<std::size_t>(p) * patch.channels];
    float hi = lo;
    for (int ch = 1; ch < patch.channels; ++ch) {
      const float v = patch.data[static_cast<std::size_t>(p) * patch.channels + ch];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (lo > lum_threshold && (hi - lo) < sat_threshold) ++background;
  }
  return static_cast<double>(background) / pixels;
}

Image quantize_u8(const Image& src) {
  Image out(src.height, src.width, src.channels);
  for (std::size_t i = 0; i < src.data.size(); ++i) {
    const double v = std::clamp(static_cast<double>(src.data[i]), 0.0, 1.0);
    out.data[i] = static_cast<float>(std::lround(v * 255.0) / 255.0);
  }
  return out;
}

std::vector<std::uint8_t> to_u8(const Image& src) {
  std::vector<std::uint8_t> bytes(src.data.size());
  for (std::size_t i = 0; i < src.data.size(); ++i) {
    const double v = std::clamp(static_cast<double>(src.data[i]), 0.0, 1.0);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return bytes;
}

Image from_u8(const std::uint8_t* bytes, int h, int w, int c) {
  Image out(h, w, c);
  const std::size_t n = out.data.size();
  for (std::size_t i = 0; i < n; ++i)
    out.data[i] = static_cast<float>(bytes[i] / 255.0);
  return out;
}

}  // namespace zoomloc
