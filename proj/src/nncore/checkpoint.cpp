#include "zoomloc/nncore/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "zoomloc/common/error.hpp"

namespace zoomloc::nncore {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'W', 'G', 'T', 'S'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
                     static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

}  // namespace

const NamedTensor& Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors)
    if (t.name == name) return t;
  throw MissingTensor("checkpoint has no tensor named " + name);
}

void save_checkpoint(const fs::path& dir, const std::vector<NamedTensor>& tensors,
                     const json& extra) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::ofstream out(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "weights.bin").string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    std::size_t numel = 1;
    for (int d : t.shape) {
      put_u32(out, static_cast<std::uint32_t>(d));
      numel *= static_cast<std::size_t>(d);
    }
    if (numel != t.data.size())
      throw ShapeMismatch("tensor " + t.name + " data does not match its shape");
    for (float v : t.data) put_f32(out, v);
  }
  out.flush();
  if (!out) throw IoError("short write to " + (dir / "weights.bin").string());

  json manifest = extra;
  json listing = json::array();
  for (const NamedTensor& t : tensors)
    listing.push_back({{"name", t.name}, {"shape", t.shape}});
  manifest["tensors"] = listing;
  std::ofstream jout(dir / "weights.json");
  if (!jout) throw IoError("cannot write " + (dir / "weights.json").string());
  jout << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "weights.bin", std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / "weights.bin").string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad checkpoint magic in " + dir.string());
  const std::uint32_t version = get_u32(in);
  if (version != kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = get_u32(in);

  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint32_t name_len = get_u32(in);
    if (!in || name_len > 4096) throw FormatError("corrupt tensor name length");
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    const std::uint32_t rank = get_u32(in);
    if (!in || rank > 8) throw FormatError("corrupt tensor rank");
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = get_u32(in);
      if (dim == 0) throw FormatError("zero tensor dimension");
      t.shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    t.data.resize(numel);
    for (float& v : t.data) v = get_f32(in);
    if (!in) throw FormatError("truncated checkpoint " + dir.string());
    ckpt.tensors.push_back(std::move(t));
  }

  std::ifstream jin(dir / "weights.json");
  if (!jin) throw IoError("cannot open " + (dir / "weights.json").string());
  try {
    jin >> ckpt.manifest;
  } catch (const json::exception& e) {
    throw FormatError("unparseable weights.json: " + std::string(e.what()));
  }
  return ckpt;
}

}  // namespace zoomloc::nncore
