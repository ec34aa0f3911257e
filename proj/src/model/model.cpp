#include "zoomloc/model/model.hpp"

namespace zoomloc::model {

EncoderSpec desk_encoder() {
  return {{{16, 1}, {32, 1}, {64, 1}}, 64};
}

EncoderSpec vgg16_encoder() {
  return {{{64, 2}, {128, 2}, {256, 3}, {512, 3}, {512, 3}}, 512};
}

void validate(const EncoderSpec& spec, int input_size) {
  if (spec.blocks.empty()) throw ConfigError("encoder needs at least one block");
  for (const ConvBlock& b : spec.blocks) {
    if (b.filters < 1) throw ConfigError("block filters must be >= 1");
    if (b.repeats < 1) throw ConfigError("block repeats must be >= 1");
  }
  if (spec.latent_dim != spec.blocks.back().filters)
    throw ShapeMismatch("latent_dim " + std::to_string(spec.latent_dim) +
                        " does not match last block width " +
                        std::to_string(spec.blocks.back().filters));
  int s = input_size;
  for (std::size_t b = 0; b + 1 < spec.blocks.size(); ++b) {
    if (s < 2 || s % 2 != 0)
      throw ConfigError("input size " + std::to_string(input_size) +
                        " does not survive " +
                        std::to_string(spec.blocks.size() - 1) + " poolings");
    s /= 2;
  }
  if (s < 1) throw ConfigError("input size too small for this encoder");
}

void to_json(nlohmann::json& j, const EncoderSpec& spec) {
  j = nlohmann::json::object();
  j["blocks"] = nlohmann::json::array();
  for (const ConvBlock& b : spec.blocks)
    j["blocks"].push_back({{"filters", b.filters}, {"repeats", b.repeats}});
  j["latent_dim"] = spec.latent_dim;
}

void from_json(const nlohmann::json& j, EncoderSpec& spec) {
  spec.blocks.clear();
  for (const auto& jb : j.at("blocks"))
    spec.blocks.push_back({jb.at("filters").get<int>(), jb.at("repeats").get<int>()});
  spec.latent_dim = j.at("latent_dim").get<int>();
}

}  // namespace zoomloc::model
