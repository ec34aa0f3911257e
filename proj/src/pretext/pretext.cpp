#include "zoomloc/pretext/pretext.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "zoomloc/common/error.hpp"
#include "zoomloc/common/parallel.hpp"

namespace zoomloc::pretext {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_sampler(const SamplerConfig& cfg) {
  if (cfg.n < 1) throw ConfigError("zoom difference n must be >= 1");
  if (cfg.patch_size < (1 << cfg.n) || cfg.patch_size % (1 << cfg.n) != 0)
    throw ConfigError("patch_size must be a positive multiple of 2^n");
  if (cfg.input_size < 1) throw ConfigError("input_size must be >= 1");
  if (cfg.level_probs.empty()) throw ConfigError("level_probs is empty");
  double sum = 0;
  for (double p : cfg.level_probs) {
    if (p < 0) throw ConfigError("level_probs entries must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("level_probs must sum to 1");
  if (cfg.retry_budget < 1) throw ConfigError("retry_budget must be >= 1");
}

// The child level is drawn among the highest pyramid levels, skipping levels
// whose parent level would fall below the base or could not fit one window.
int draw_child_level(const pyramid::PyramidImage& img, const SamplerConfig& cfg,
                     Rng& rng) {
  const int top = img.max_level();
  std::vector<int> levels;
  std::vector<double> probs;
  for (std::size_t i = 0; i < cfg.level_probs.size(); ++i) {
    const int x = top - static_cast<int>(i);
    const int y = x - cfg.n;
    if (y < 0) continue;
    const Image& parent_level = img.level(y);
    if (parent_level.height < cfg.patch_size || parent_level.width < cfg.patch_size)
      continue;
    levels.push_back(x);
    probs.push_back(cfg.level_probs[i]);
  }
  if (levels.empty())
    throw ConfigError("no pyramid level can host a parent window");
  return levels[rng.weighted_index(probs)];
}

Image stored_form(const Image& patch, int input_size) {
  const Image resized = resize_bilinear(patch, input_size, input_size);
  return quantize_u8(resized);
}

}  // namespace

PretextSample sample_location(const pyramid::PyramidImage& img,
                              const SamplerConfig& cfg, Rng& rng,
                              const std::string& pyramid_id) {
  check_sampler(cfg);
  const int x = draw_child_level(img, cfg, rng);
  const int y = x - cfg.n;
  const Image& parent_level = img.level(y);

  pyramid::PatchRef parent_ref;
  Image parent_stored;
  bool found = false;
  for (int attempt = 0; attempt < cfg.retry_budget; ++attempt) {
    const int r0 =
        static_cast<int>(rng.uniform_int(parent_level.height - cfg.patch_size + 1));
    const int c0 =
        static_cast<int>(rng.uniform_int(parent_level.width - cfg.patch_size + 1));
    parent_ref = {y, r0, c0, cfg.patch_size, cfg.patch_size};
    const Image window = extract(img, parent_ref);
    parent_stored = stored_form(window, cfg.input_size);
    if (whiteness(parent_stored, cfg.lum_threshold, cfg.sat_threshold) <=
        cfg.white_reject) {
      found = true;
      break;
    }
  }
  if (!found)
    throw ExhaustedRetries("no window below the white threshold in " +
                           std::to_string(cfg.retry_budget) + " draws");

  const int classes = 1 << (2 * cfg.n);
  const int idx = static_cast<int>(rng.uniform_int(classes));
  const auto kids = children_set(parent_ref, cfg.n, img.max_level());
  const Image child = extract(img, kids[idx]);

  PretextSample s;
  s.parent = std::move(parent_stored);
  s.child = stored_form(child, cfg.input_size);
  s.label = idx;
  s.pyramid_id = pyramid_id;
  s.parent_ref = parent_ref;
  return s;
}

int locate_oracle(const Image& parent, const Image& child, int n) {
  if (n < 1) throw ConfigError("zoom difference n must be >= 1");
  if (!parent.same_shape(child))
    throw ShapeMismatch("parent and child dimensions differ");
  const int grid = 1 << n;
  if (parent.height % grid != 0 || parent.width % grid != 0)
    throw ShapeMismatch("patch dimensions not divisible by 2^n");

  const Image pooled = pool2x2_n(child, n);
  const int bh = parent.height / grid;
  const int bw = parent.width / grid;

  double best = std::numeric_limits<double>::infinity();
  double second = best;
  int best_idx = -1;
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      double dist = 0;
      for (int r = 0; r < bh; ++r) {
        for (int c = 0; c < bw; ++c) {
          for (int ch = 0; ch < parent.channels; ++ch) {
            const double d = static_cast<double>(pooled.at(r, c, ch)) -
                             parent.at(i * bh + r, j * bw + c, ch);
            dist += d * d;
          }
        }
      }
      if (dist < best) {
        second = best;
        best = dist;
        best_idx = i * grid + j;
      } else if (dist < second) {
        second = dist;
      }
    }
  }
  if (second - best <= 1e-12)
    throw AmbiguousMatch("two parent blocks are equally close to the child");
  return best_idx;
}

std::pair<PairSample, PairSample> sample_pair(const pyramid::PyramidImage& img,
                                              const SamplerConfig& cfg, Rng& rng) {
  PretextSample a = sample_location(img, cfg, rng);
  PretextSample b = sample_location(img, cfg, rng);
  const bool switched = rng.bernoulli(0.5);
  PairSample pa{std::move(a.parent), Image{}, switched ? 0 : 1};
  PairSample pb{std::move(b.parent), Image{}, switched ? 0 : 1};
  if (switched) {
    pa.child = std::move(b.child);
    pb.child = std::move(a.child);
  } else {
    pa.child = std::move(a.child);
    pb.child = std::move(b.child);
  }
  return {std::move(pa), std::move(pb)};
}

AugmentDraws draw_augment(Rng& rng) {
  AugmentDraws d;
  d.flip_h = rng.bernoulli(0.5);
  d.flip_v = rng.bernoulli(0.5);
  d.rot_k = static_cast<int>(rng.uniform_int(4));
  d.child_contrast = rng.uniform(0.8, 1.25);
  d.crop_area = rng.uniform(0.8, 1.0);
  d.crop_u = rng.uniform();
  d.crop_v = rng.uniform();
  d.parent_contrast = rng.uniform(0.8, 1.25);
  return d;
}

PretextSample augment_with(const PretextSample& sample, const AugmentDraws& d) {
  PretextSample out = sample;
  Image child = sample.child;
  if (d.flip_h) child = flip_horizontal(child);
  if (d.flip_v) child = flip_vertical(child);
  if (d.rot_k % 4 != 0) child = rotate90(child, d.rot_k);
  if (d.child_contrast != 1.0) child = adjust_contrast(child, d.child_contrast);
  const int h = child.height;
  const int w = child.width;
  const double side = std::sqrt(std::clamp(d.crop_area, 0.0, 1.0));
  const int ch = std::max(1, static_cast<int>(std::lround(side * h)));
  const int cw = std::max(1, static_cast<int>(std::lround(side * w)));
  if (ch < h || cw < w) {
    const int r0 = static_cast<int>(std::lround(d.crop_v * (h - ch)));
    const int c0 = static_cast<int>(std::lround(d.crop_u * (w - cw)));
    child = resize_bilinear(crop(child, r0, c0, ch, cw), h, w);
  }
  out.child = std::move(child);
  if (d.parent_contrast != 1.0)
    out.parent = adjust_contrast(sample.parent, d.parent_contrast);
  return out;
}

PretextSample augment(const PretextSample& sample, Rng& rng) {
  return augment_with(sample, draw_augment(rng));
}

// ---------------------------------------------------------------------------
// Shard I/O

namespace {

constexpr char kMagic[4] = {'P', 'S', 'S', 'L'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
               static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& in) {
  const std::uint64_t lo = get_u32(in);
  const std::uint64_t hi = get_u32(in);
  return lo | (hi << 32);
}

constexpr std::uint64_t kHeaderBytes = 4 + 4 + 4 + 4 + 8;

}  // namespace

struct ShardWriter::Impl {
  std::ofstream out;
  fs::path path;
  std::uint64_t pixel_bytes = 0;
  std::uint64_t promised = 0;
  std::uint64_t written = 0;
  bool finished = false;
};

ShardWriter::ShardWriter(const fs::path& path, int n, int input_size,
                         std::uint64_t count)
    : impl_(new Impl) {
  impl_->path = path;
  impl_->pixel_bytes = static_cast<std::uint64_t>(input_size) * input_size * 3;
  impl_->promised = count;
  impl_->out.open(path, std::ios::binary | std::ios::trunc);
  if (!impl_->out) throw IoError("cannot open shard for writing: " + path.string());
  impl_->out.write(kMagic, 4);
  put_u32(impl_->out, kVersion);
  put_u32(impl_->out, static_cast<std::uint32_t>(n));
  put_u32(impl_->out, static_cast<std::uint32_t>(input_size));
  put_u64(impl_->out, count);
}

ShardWriter::~ShardWriter() { delete impl_; }

void ShardWriter::append(int label, const std::vector<std::uint8_t>& parent,
                         const std::vector<std::uint8_t>& child) {
  if (parent.size() != impl_->pixel_bytes || child.size() != impl_->pixel_bytes)
    throw ShapeMismatch("record pixel block has the wrong size");
  if (impl_->written >= impl_->promised)
    throw IoError("shard already holds the promised record count");
  put_u32(impl_->out, static_cast<std::uint32_t>(label));
  impl_->out.write(reinterpret_cast<const char*>(parent.data()),
                   static_cast<std::streamsize>(parent.size()));
  impl_->out.write(reinterpret_cast<const char*>(child.data()),
                   static_cast<std::streamsize>(child.size()));
  ++impl_->written;
}

void ShardWriter::finish() {
  if (impl_->finished) return;
  if (impl_->written != impl_->promised)
    throw IoError("shard record count mismatch: promised " +
                  std::to_string(impl_->promised) + ", wrote " +
                  std::to_string(impl_->written));
  impl_->out.flush();
  if (!impl_->out) throw IoError("short write to " + impl_->path.string());
  impl_->out.close();
  impl_->finished = true;
}

ShardReader::ShardReader(const fs::path& path) : path_(path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open shard: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw DataFormatError("bad shard magic in " + path.string());
  const std::uint32_t version = get_u32(in);
  if (version != kVersion)
    throw DataFormatError("unsupported shard version " + std::to_string(version));
  n_ = static_cast<int>(get_u32(in));
  input_size_ = static_cast<int>(get_u32(in));
  count_ = get_u64(in);
  if (!in || n_ < 1 || input_size_ < 1)
    throw DataFormatError("corrupt shard header in " + path.string());
  record_bytes_ = 4 + 2 * static_cast<std::uint64_t>(input_size_) * input_size_ * 3;
  header_bytes_ = kHeaderBytes;
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec || size != header_bytes_ + count_ * record_bytes_)
    throw DataFormatError("shard size disagrees with its header: " + path.string());
}

std::vector<std::uint8_t> ShardReader::read_raw(std::uint64_t i) const {
  if (i >= count_) throw OutOfRange("record index past shard end");
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw IoError("cannot open shard: " + path_.string());
  in.seekg(static_cast<std::streamoff>(header_bytes_ + i * record_bytes_));
  std::vector<std::uint8_t> bytes(record_bytes_);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!in) throw DataFormatError("truncated record in " + path_.string());
  return bytes;
}

PretextSample ShardReader::read(std::uint64_t i) const {
  const std::vector<std::uint8_t> bytes = read_raw(i);
  PretextSample s;
  s.label = static_cast<int>(static_cast<std::uint32_t>(bytes[0]) |
                             (static_cast<std::uint32_t>(bytes[1]) << 8) |
                             (static_cast<std::uint32_t>(bytes[2]) << 16) |
                             (static_cast<std::uint32_t>(bytes[3]) << 24));
  const std::uint64_t block = static_cast<std::uint64_t>(input_size_) * input_size_ * 3;
  s.parent = from_u8(bytes.data() + 4, input_size_, input_size_, 3);
  s.child = from_u8(bytes.data() + 4 + block, input_size_, input_size_, 3);
  return s;
}

DatasetPaths build_dataset(const synth::SynthCohort& cohort,
                           const BuildConfig& cfg, const fs::path& out_dir) {
  check_sampler(cfg.sampler);
  if (cfg.count < 1) throw ConfigError("dataset count must be >= 1");
  if (cfg.train_fraction <= 0.0 || cfg.train_fraction >= 1.0)
    throw ConfigError("train_fraction must lie strictly between 0 and 1");

  std::vector<std::string> slide_ids;
  std::vector<pyramid::PyramidImage> slides;
  for (const synth::PatientEntry& e : cohort.patients) {
    if (e.split != "train") continue;
    for (const std::string& rel : e.pyramid_paths) {
      slide_ids.push_back(rel);
      slides.push_back(pyramid::read_pyramid(cohort.root / rel));
    }
  }
  if (slides.empty()) throw ConfigError("cohort has no train-split slides");

  const std::uint64_t train_count =
      static_cast<std::uint64_t>(std::llround(
          static_cast<double>(cfg.count) * cfg.train_fraction));
  const std::uint64_t val_count = cfg.count - train_count;
  if (train_count == 0 || val_count == 0)
    throw ConfigError("split leaves an empty shard; adjust count or fraction");

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetPaths paths{out_dir / "train.bin", out_dir / "val.bin",
                     out_dir / "dataset.json"};
  ShardWriter train(paths.train, cfg.sampler.n, cfg.sampler.input_size, train_count);
  ShardWriter val(paths.val, cfg.sampler.n, cfg.sampler.input_size, val_count);

  struct Record {
    int label;
    std::vector<std::uint8_t> parent, child;
  };
  const auto write_record = [&](std::uint64_t i, const Record& r) {
    (i < train_count ? train : val).append(r.label, r.parent, r.child);
  };
  const std::uint64_t chunk = 1024;
  std::vector<Record> buffer;
  if (cfg.task == PretextTask::Location) {
    for (std::uint64_t start = 0; start < cfg.count; start += chunk) {
      const std::uint64_t batch = std::min(chunk, cfg.count - start);
      buffer.assign(batch, Record{});
      parallel_for(batch, cfg.threads, [&](std::size_t k) {
        const std::uint64_t i = start + k;
        Rng rng(mix_seed(cfg.sampler.seed, 0xda7a, i));
        const std::size_t slide = rng.uniform_int(slides.size());
        const PretextSample s =
            sample_location(slides[slide], cfg.sampler, rng, slide_ids[slide]);
        buffer[k] = Record{s.label, to_u8(s.parent), to_u8(s.child)};
      });
      for (std::uint64_t k = 0; k < batch; ++k) write_record(start + k, buffer[k]);
    }
  } else {
    // Each draw yields two records (the matched or switched halves); an odd
    // count drops the final half-pair.
    const std::uint64_t pairs = (cfg.count + 1) / 2;
    for (std::uint64_t start = 0; start < pairs; start += chunk) {
      const std::uint64_t batch = std::min(chunk, pairs - start);
      buffer.assign(2 * batch, Record{});
      parallel_for(batch, cfg.threads, [&](std::size_t k) {
        const std::uint64_t p = start + k;
        Rng rng(mix_seed(cfg.sampler.seed, 0xda7a, p));
        const std::size_t slide = rng.uniform_int(slides.size());
        const auto [a, b] = sample_pair(slides[slide], cfg.sampler, rng);
        buffer[2 * k] = Record{a.label, to_u8(a.parent), to_u8(a.child)};
        buffer[2 * k + 1] = Record{b.label, to_u8(b.parent), to_u8(b.child)};
      });
      for (std::uint64_t k = 0; k < batch; ++k) {
        const std::uint64_t i = 2 * (start + k);
        write_record(i, buffer[2 * k]);
        if (i + 1 < cfg.count) write_record(i + 1, buffer[2 * k + 1]);
      }
    }
  }
  train.finish();
  val.finish();

  json meta;
  meta["task"] = cfg.task == PretextTask::Location ? "location" : "pair";
  meta["n"] = cfg.sampler.n;
  meta["patch_size"] = cfg.sampler.patch_size;
  meta["input_size"] = cfg.sampler.input_size;
  meta["level_probs"] = cfg.sampler.level_probs;
  meta["white_reject"] = cfg.sampler.white_reject;
  meta["lum_threshold"] = cfg.sampler.lum_threshold;
  meta["sat_threshold"] = cfg.sampler.sat_threshold;
  meta["retry_budget"] = cfg.sampler.retry_budget;
  meta["seed"] = cfg.sampler.seed;
  meta["count"] = cfg.count;
  meta["train_fraction"] = cfg.train_fraction;
  meta["train_count"] = train_count;
  meta["val_count"] = val_count;
  meta["cohort_root"] = cohort.root.string();
  meta["train_slides"] = slide_ids;
  std::ofstream out(paths.meta);
  if (!out) throw IoError("cannot write dataset sidecar");
  out << meta.dump(2) << "\n";
  return paths;
}

}  // namespace zoomloc::pretext
