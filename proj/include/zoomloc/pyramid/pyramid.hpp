#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "zoomloc/common/image.hpp"

namespace zoomloc::pyramid {

// Level indexing: 0 is the lowest-resolution base, max_level() the highest.
// Each level doubles the previous one's width and height.

struct PyramidMeta {
  int levels = 0;       // number of stored levels (max_level + 1)
  int base_width = 0;   // level 0 dimensions
  int base_height = 0;
  int channels = 3;
  std::string color_space = "rgb";
};

struct PyramidImage {
  std::vector<Image> levels;  // index 0 .. N
  PyramidMeta meta;

  int max_level() const { return static_cast<int>(levels.size()) - 1; }
  const Image& level(int t) const { return levels.at(t); }
};

// Level-addressed rectangular window. Origin and size are pixels at `level`.
struct PatchRef {
  int level = 0;
  int origin_row = 0;
  int origin_col = 0;
  int height = 0;
  int width = 0;

  bool operator==(const PatchRef&) const = default;
};

struct TissueMask {
  int level = 0;
  int tile_size = 0;
  int rows = 0;
  int cols = 0;
  std::vector<bool> grid;  // true = tissue, false = background

  bool tissue(int r, int c) const { return grid[static_cast<std::size_t>(r) * cols + c]; }
};

// Validates the x2 dimension chain, channel count and value range.
void validate(const PyramidImage& img);

// The window at level p.level + n covering the same physical area.
PatchRef child_region(const PatchRef& p, int n, int max_level);

// The 4^n windows at level p.level + n that tile child_region(p, n) in
// row-major order; each has p's pixel dimensions.
std::vector<PatchRef> children_set(const PatchRef& p, int n, int max_level);

// Copy of the referenced pixels. Throws OutOfBounds if the window leaves the
// raster or the level does not exist.
Image extract(const PyramidImage& img, const PatchRef& p);

// Per-tile background map of one level (tissue = whiteness <= reject_above).
TissueMask tissue_mask(const PyramidImage& img, int level, int tile_size,
                       double reject_above = 0.5, double lum_threshold = 0.85,
                       double sat_threshold = 0.05);

// Directory format: manifest.json + level_0.ppm .. level_N.ppm (binary P6,
// maxval 255). Pixels quantize to 8 bits on write; read-write-read is exact.
void write_pyramid(const PyramidImage& img, const std::filesystem::path& dir);
PyramidImage read_pyramid(const std::filesystem::path& dir);

}  // namespace zoomloc::pyramid
