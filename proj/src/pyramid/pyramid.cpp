#include "zoomloc/pyramid/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "zoomloc/common/error.hpp"

namespace zoomloc::pyramid {

namespace fs = std::filesystem;
using nlohmann::json;

void validate(const PyramidImage& img) {
  if (img.levels.size() < 3)
    throw FormatError("pyramid needs at least 3 levels, got " +
                      std::to_string(img.levels.size()));
  if (static_cast<int>(img.levels.size()) != img.meta.levels)
    throw FormatError("meta.levels disagrees with stored level count");
  for (std::size_t t = 0; t < img.levels.size(); ++t) {
    const Image& lv = img.levels[t];
    if (lv.channels != img.meta.channels)
      throw FormatError("channel count varies across levels");
    if (lv.data.size() !=
        static_cast<std::size_t>(lv.height) * lv.width * lv.channels)
      throw FormatError("raster buffer length mismatch at level " + std::to_string(t));
    if (t > 0) {
      const Image& prev = img.levels[t - 1];
      if (lv.width != 2 * prev.width || lv.height != 2 * prev.height)
        throw FormatError("level " + std::to_string(t) +
                          " does not double the previous level's dimensions");
    } else {
      if (lv.width != img.meta.base_width || lv.height != img.meta.base_height)
        throw FormatError("level 0 does not match declared base dimensions");
    }
  }
}

PatchRef child_region(const PatchRef& p, int n, int max_level) {
  if (n < 0) throw LevelOutOfRange("negative zoom difference");
  if (p.level + n > max_level)
    throw LevelOutOfRange("level " + std::to_string(p.level + n) +
                          " exceeds max level " + std::to_string(max_level));
  const int f = 1 << n;
  return PatchRef{p.level + n, p.origin_row * f, p.origin_col * f,
                  p.height * f, p.width * f};
}

std::vector<PatchRef> children_set(const PatchRef& p, int n, int max_level) {
  const PatchRef region = child_region(p, n, max_level);
  const int grid = 1 << n;
  std::vector<PatchRef> children;
  children.reserve(static_cast<std::size_t>(grid) * grid);
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j)
      children.push_back(PatchRef{region.level,
                                  region.origin_row + i * p.height,
                                  region.origin_col + j * p.width,
                                  p.height, p.width});
  return children;
}

Image extract(const PyramidImage& img, const PatchRef& p) {
  if (p.level < 0 || p.level > img.max_level())
    throw OutOfBounds("level " + std::to_string(p.level) + " not in pyramid");
  const Image& lv = img.levels[p.level];
  if (p.height <= 0 || p.width <= 0 || p.origin_row < 0 || p.origin_col < 0 ||
      p.origin_row + p.height > lv.height || p.origin_col + p.width > lv.width)
    throw OutOfBounds("patch window leaves the raster");
  Image out(p.height, p.width, lv.channels);
  for (int r = 0; r < p.height; ++r) {
    const float* src = &lv.data[(static_cast<std::size_t>(p.origin_row + r) * lv.width +
                                 p.origin_col) * lv.channels];
    std::copy(src, src + static_cast<std::size_t>(p.width) * lv.channels,
              &out.data[static_cast<std::size_t>(r) * p.width * lv.channels]);
  }
  return out;
}

TissueMask tissue_mask(const PyramidImage& img, int level, int tile_size,
                       double reject_above, double lum_threshold,
                       double sat_threshold) {
  if (level < 0 || level > img.max_level())
    throw OutOfBounds("level not in pyramid");
  const Image& lv = img.levels[level];
  TissueMask mask;
  mask.level = level;
  mask.tile_size = tile_size;
  mask.rows = (lv.height + tile_size - 1) / tile_size;
  mask.cols = (lv.width + tile_size - 1) / tile_size;
  mask.grid.resize(static_cast<std::size_t>(mask.rows) * mask.cols);
  for (int i = 0; i < mask.rows; ++i) {
    for (int j = 0; j < mask.cols; ++j) {
      const int h = std::min(tile_size, lv.height - i * tile_size);
      const int w = std::min(tile_size, lv.width - j * tile_size);
      const Image tile = extract(img, PatchRef{level, i * tile_size, j * tile_size, h, w});
      mask.grid[static_cast<std::size_t>(i) * mask.cols + j] =
          whiteness(tile, lum_threshold, sat_threshold) <= reject_above;
    }
  }
  return mask;
}

namespace {

void write_ppm(const Image& img, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  const auto bytes = to_u8(img);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw FormatError("not a binary PPM: " + path.string());
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0) throw FormatError("bad PPM header: " + path.string());
  if (maxval != 255) throw FormatError("PPM maxval must be 255: " + path.string());
  in.get();  // single whitespace after maxval
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw FormatError("truncated PPM payload: " + path.string());
  return from_u8(bytes.data(), h, w, 3);
}

}  // namespace

void write_pyramid(const PyramidImage& img, const fs::path& dir) {
  validate(img);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json manifest{{"levels", img.meta.levels},
                {"base_width", img.meta.base_width},
                {"base_height", img.meta.base_height},
                {"channels", img.meta.channels},
                {"format", "ppm"}};
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw IoError("cannot write manifest in " + dir.string());
  mf << manifest.dump(2) << "\n";
  for (std::size_t t = 0; t < img.levels.size(); ++t)
    write_ppm(img.levels[t], dir / ("level_" + std::to_string(t) + ".ppm"));
}

PyramidImage read_pyramid(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw IoError("missing manifest: " + mpath.string());
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw FormatError("unparseable manifest: " + std::string(e.what()));
  }
  PyramidImage img;
  try {
    img.meta.levels = manifest.at("levels").get<int>();
    img.meta.base_width = manifest.at("base_width").get<int>();
    img.meta.base_height = manifest.at("base_height").get<int>();
    img.meta.channels = manifest.at("channels").get<int>();
    if (manifest.at("format").get<std::string>() != "ppm")
      throw FormatError("unsupported pyramid format");
  } catch (const json::exception& e) {
    throw FormatError("manifest missing fields: " + std::string(e.what()));
  }
  if (img.meta.levels < 3) throw FormatError("manifest declares fewer than 3 levels");
  if (img.meta.channels != 3) throw FormatError("only 3-channel pyramids supported");
  img.levels.reserve(img.meta.levels);
  for (int t = 0; t < img.meta.levels; ++t) {
    const fs::path lpath = dir / ("level_" + std::to_string(t) + ".ppm");
    if (!fs::exists(lpath)) throw IoError("missing level file: " + lpath.string());
    Image lv = read_ppm(lpath);
    const int expect_w = img.meta.base_width << t;
    const int expect_h = img.meta.base_height << t;
    if (lv.width != expect_w || lv.height != expect_h)
      throw FormatError("level " + std::to_string(t) +
                        " dimensions disagree with manifest");
    img.levels.push_back(std::move(lv));
  }
  validate(img);
  return img;
}

}  // namespace zoomloc::pyramid
