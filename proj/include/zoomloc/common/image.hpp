#pragma once

#include <cstdint>
#include <vector>

namespace zoomloc {

// Dense H x W x C pixel block, row-major, channel-interleaved, values in [0,1].
// Also serves as one pyramid level's raster.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, 0.0f) {}

  float& at(int r, int c, int ch) {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }
  float at(int r, int c, int ch) const {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

// Exact 2x2 average pool; odd trailing row/col would be dropped, callers keep
// dimensions even. Accumulates in double, stores float, so repeated pooling
// is bit-reproducible.
Image pool2x2(const Image& src);

// n successive 2x2 pools (factor 2^n per axis).
Image pool2x2_n(const Image& src, int n);

// Bilinear resize with half-pixel centers (corner alignment off). Identity
// when the target shape equals the source shape.
Image resize_bilinear(const Image& src, int out_h, int out_w);

Image flip_horizontal(const Image& src);
Image flip_vertical(const Image& src);

// Rotate by k*90 degrees counterclockwise, k in 0..3.
Image rotate90(const Image& src, int k);

// Scale contrast about the per-image mean: x' = mean + factor*(x - mean),
// clamped to [0,1]. The mean is taken over all pixels and channels.
Image adjust_contrast(const Image& src, double factor);

// Crop [r0, r0+h) x [c0, c0+w); caller guarantees bounds.
Image crop(const Image& src, int r0, int c0, int h, int w);

// Fraction of pixels classified as background. A pixel is background iff
// min(R,G,B) > lum_threshold and (max-min) < sat_threshold.
double whiteness(const Image& patch, double lum_threshold = 0.85,
                 double sat_threshold = 0.05);

// Quantize to the 8-bit grid: v -> round(v*255)/255.
Image quantize_u8(const Image& src);

std::vector<std::uint8_t> to_u8(const Image& src);
Image from_u8(const std::uint8_t* bytes, int h, int w, int c);

}  // namespace zoomloc
