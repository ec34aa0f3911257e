#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "zoomloc/common/error.hpp"
#include "zoomloc/common/rng.hpp"
#include "zoomloc/nncore/checkpoint.hpp"
#include "zoomloc/nncore/graph.hpp"

namespace zoomloc::model {

// Convolutional trunk: blocks of 3x3 same-padded conv+relu stacks, a 2x2 max
// pool between blocks, and a global average pool after the last block. The
// latent width therefore equals the last block's filter count.
struct ConvBlock {
  int filters = 0;
  int repeats = 1;
};

struct EncoderSpec {
  std::vector<ConvBlock> blocks;
  int latent_dim = 0;
};

// Desk-sized trunk small enough to train on a laptop CPU in minutes.
EncoderSpec desk_encoder();
// The classic 16-layer trunk layout with the last max pool swapped for a
// global average pool.
EncoderSpec vgg16_encoder();

void validate(const EncoderSpec& spec, int input_size);

void to_json(nlohmann::json& j, const EncoderSpec& spec);
void from_json(const nlohmann::json& j, EncoderSpec& spec);

enum class Task { Location, Pair };

struct SiameseConfig {
  EncoderSpec encoder;
  Task task = Task::Location;
  int grid_n = 2;  // location task predicts one of 4^grid_n cells
  int input_size = 112;
  int batch = 32;
  int fusion_hidden = 256;
  std::uint64_t seed = 0;
};

struct ClassifierConfig {
  EncoderSpec encoder;
  int classes = 4;
  int input_size = 112;
  int batch = 2;
  std::uint64_t seed = 0;
};

template <typename T>
struct Siamese {
  nncore::Graph<T> g;
  typename nncore::Graph<T>::Id child = 0, parent = 0, target = 0;
  typename nncore::Graph<T>::Id child_latent = 0, parent_latent = 0;
  typename nncore::Graph<T>::Id logits = 0, loss = 0;
  Task task = Task::Location;
  int classes = 0;  // logit columns (1 for the pair task)
};

template <typename T>
struct Classifier {
  nncore::Graph<T> g;
  typename nncore::Graph<T>::Id image = 0, target = 0;
  typename nncore::Graph<T>::Id latent = 0, logits = 0, loss = 0;
  int classes = 0;
};

namespace detail {

// Fetches a parameter by name, creating it with He-uniform init on first use.
// A second fetch returns the same node id, which is what ties the two
// encoder branches to one set of weights.
template <typename T>
typename nncore::Graph<T>::Id fetch_param(
    nncore::Graph<T>& g, std::map<std::string, typename nncore::Graph<T>::Id>& cache,
    const std::string& name, const std::vector<int>& shape, std::size_t fan_in,
    Rng& rng) {
  const auto it = cache.find(name);
  if (it != cache.end()) return it->second;
  std::size_t count = 1;
  for (int d : shape) count *= static_cast<std::size_t>(d);
  const auto id = g.param(name, shape, nncore::he_uniform<T>(count, fan_in, rng));
  cache.emplace(name, id);
  return id;
}

template <typename T>
typename nncore::Graph<T>::Id encode(
    nncore::Graph<T>& g, typename nncore::Graph<T>::Id x, const EncoderSpec& spec,
    std::map<std::string, typename nncore::Graph<T>::Id>& cache, Rng& rng) {
  using nncore::Pad;
  int cin = g.value(x).shape[3];
  auto h = x;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const ConvBlock& block = spec.blocks[b];
    for (int r = 0; r < block.repeats; ++r) {
      const std::string stem =
          "enc.b" + std::to_string(b) + ".c" + std::to_string(r);
      const auto w = fetch_param(g, cache, stem + ".w",
                                 {3, 3, cin, block.filters},
                                 9ull * static_cast<std::size_t>(cin), rng);
      const auto bias = fetch_param(g, cache, stem + ".b", {block.filters},
                                    9ull * static_cast<std::size_t>(cin), rng);
      h = g.relu(g.conv2d(h, w, bias, Pad::Same));
      cin = block.filters;
    }
    if (b + 1 < spec.blocks.size()) h = g.maxpool2d(h);
  }
  return g.global_avgpool(h);
}

}  // namespace detail

// Two weight-tied encoder branches feeding a fusion head: the child patch
// and its parent context are encoded separately, concatenated, and mapped
// through one hidden layer to the task logits.
template <typename T>
Siamese<T> build_siamese(const SiameseConfig& cfg) {
  if (cfg.grid_n < 1) throw ConfigError("grid_n must be >= 1");
  if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
  if (cfg.fusion_hidden < 1) throw ConfigError("fusion_hidden must be >= 1");
  validate(cfg.encoder, cfg.input_size);

  int classes = 1;
  if (cfg.task == Task::Location) {
    for (int i = 0; i < cfg.grid_n; ++i) classes *= 4;
  }

  Siamese<T> m;
  m.task = cfg.task;
  m.classes = classes;
  Rng rng(mix_seed(cfg.seed, 0x90de1));
  const int s = cfg.input_size;
  m.child = m.g.input("child", {cfg.batch, s, s, 3});
  m.parent = m.g.input("parent", {cfg.batch, s, s, 3});

  std::map<std::string, typename nncore::Graph<T>::Id> cache;
  m.child_latent = detail::encode(m.g, m.child, cfg.encoder, cache, rng);
  m.parent_latent = detail::encode(m.g, m.parent, cfg.encoder, cache, rng);

  const auto cat = m.g.concat(m.child_latent, m.parent_latent);
  const int fused = 2 * cfg.encoder.latent_dim;
  const auto w1 = detail::fetch_param(m.g, cache, "head.fc.w",
                                      {fused, cfg.fusion_hidden},
                                      static_cast<std::size_t>(fused), rng);
  const auto b1 = detail::fetch_param(m.g, cache, "head.fc.b",
                                      {cfg.fusion_hidden},
                                      static_cast<std::size_t>(fused), rng);
  const auto hid = m.g.relu(m.g.dense(cat, w1, b1));
  const auto w2 = detail::fetch_param(
      m.g, cache, "head.out.w", {cfg.fusion_hidden, classes},
      static_cast<std::size_t>(cfg.fusion_hidden), rng);
  const auto b2 = detail::fetch_param(
      m.g, cache, "head.out.b", {classes},
      static_cast<std::size_t>(cfg.fusion_hidden), rng);
  m.logits = m.g.dense(hid, w2, b2);

  m.target = m.g.input("target", {cfg.batch, classes});
  m.loss = cfg.task == Task::Location ? m.g.softmax_xent(m.logits, m.target)
                                      : m.g.sigmoid_bce(m.logits, m.target);
  return m;
}

// Single encoder branch with a linear classifier on the latent vector.
template <typename T>
Classifier<T> build_classifier(const ClassifierConfig& cfg) {
  if (cfg.classes < 2) throw ConfigError("classifier needs >= 2 classes");
  if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
  validate(cfg.encoder, cfg.input_size);

  Classifier<T> m;
  m.classes = cfg.classes;
  Rng rng(mix_seed(cfg.seed, 0x90de1));
  const int s = cfg.input_size;
  m.image = m.g.input("image", {cfg.batch, s, s, 3});

  std::map<std::string, typename nncore::Graph<T>::Id> cache;
  m.latent = detail::encode(m.g, m.image, cfg.encoder, cache, rng);
  const auto w = detail::fetch_param(
      m.g, cache, "cls.w", {cfg.encoder.latent_dim, cfg.classes},
      static_cast<std::size_t>(cfg.encoder.latent_dim), rng);
  const auto b = detail::fetch_param(
      m.g, cache, "cls.b", {cfg.classes},
      static_cast<std::size_t>(cfg.encoder.latent_dim), rng);
  m.logits = m.g.dense(m.latent, w, b);
  m.target = m.g.input("target", {cfg.batch, cfg.classes});
  m.loss = m.g.softmax_xent(m.logits, m.target);
  return m;
}

// Snapshot of every parameter, in creation order, as float tensors.
template <typename T>
std::vector<nncore::NamedTensor> snapshot_params(const nncore::Graph<T>& g) {
  std::vector<nncore::NamedTensor> out;
  for (const auto id : g.params()) {
    nncore::NamedTensor t;
    t.name = g.name(id);
    t.shape = g.value(id).shape;
    t.data.reserve(g.value(id).data.size());
    for (const T v : g.value(id).data) t.data.push_back(static_cast<float>(v));
    out.push_back(std::move(t));
  }
  return out;
}

// Copies encoder weights ("enc." prefix) from a checkpoint into the graph.
// Head and classifier parameters are left as initialized.
template <typename T>
void load_encoder(nncore::Graph<T>& g, const nncore::Checkpoint& ckpt) {
  for (const auto id : g.params()) {
    const std::string& name = g.name(id);
    if (name.rfind("enc.", 0) != 0) continue;
    const nncore::NamedTensor& src = ckpt.find(name);
    auto& dst = g.tensor(id);
    if (src.shape != dst.shape)
      throw ShapeMismatch("checkpoint tensor " + name + " has shape " +
                          nncore::shape_str(src.shape) + ", graph expects " +
                          nncore::shape_str(dst.shape));
    for (std::size_t i = 0; i < src.data.size(); ++i)
      dst.data[i] = static_cast<T>(src.data[i]);
  }
}

// Restores every parameter by name, encoder and head alike.
template <typename T>
void load_params(nncore::Graph<T>& g, const nncore::Checkpoint& ckpt) {
  for (const auto id : g.params()) {
    const std::string& name = g.name(id);
    const nncore::NamedTensor& src = ckpt.find(name);
    auto& dst = g.tensor(id);
    if (src.shape != dst.shape)
      throw ShapeMismatch("checkpoint tensor " + name + " has shape " +
                          nncore::shape_str(src.shape) + ", graph expects " +
                          nncore::shape_str(dst.shape));
    for (std::size_t i = 0; i < src.data.size(); ++i)
      dst.data[i] = static_cast<T>(src.data[i]);
  }
}

template <typename T>
void set_encoder_trainable(nncore::Graph<T>& g, bool trainable) {
  for (const auto id : g.params())
    if (g.name(id).rfind("enc.", 0) == 0) g.set_trainable(id, trainable);
}

}  // namespace zoomloc::model
