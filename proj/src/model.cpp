#include "cdua/model.hpp"

#include <json.hpp>

namespace cdua::model {

namespace {
const std::pair<Variant, const char*> kVariants[] = {{Variant::full, "full"},
                                                     {Variant::no_self_attn, "no_self_attn"},
                                                     {Variant::no_cross_attn, "no_cross_attn"},
                                                     {Variant::backbone, "backbone"}};
}

const char* to_string(Variant v) {
  for (const auto& [k, name] : kVariants)
    if (k == v) return name;
  return "?";
}

Variant parse_variant(const std::string& text) {
  for (const auto& [k, name] : kVariants)
    if (text == name) return k;
  fail(ErrorKind::validation, "unknown variant '" + text + "' (full|no_self_attn|no_cross_attn|backbone)");
}

const char* to_string(Upsample u) { return u == Upsample::transposed ? "transposed" : "linear"; }

Upsample parse_upsample(const std::string& text) {
  if (text == "transposed") return Upsample::transposed;
  if (text == "linear") return Upsample::linear;
  fail(ErrorKind::validation, "unknown upsample mode '" + text + "' (transposed|linear)");
}

void CduaConfig::validate() const {
  const auto bad = [](const std::string& m) { fail(ErrorKind::validation, "model config: " + m); };
  if (history_len < 1) bad("history_len must be positive");
  if (horizon < 1) bad("horizon must be positive");
  if (input_channels() < 1) bad("no input channels");
  if (channels.size() < 2) bad("need at least two channel widths (one down-sampling stage)");
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] <= 0 || channels[i] % groups != 0) {
      bad("channel width " + std::to_string(channels[i]) + " not divisible by " + std::to_string(groups) + " groups");
    }
    if (i && channels[i] <= channels[i - 1]) bad("channel widths must increase down the encoder");
  }
  if (heads < 1 || channels.front() % heads != 0) bad("model width not divisible by the head count");
  if (self_attention())
    for (std::size_t i = 1; i < channels.size(); ++i)
      if (channels[i] % heads != 0) bad("stage width not divisible by the head count");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) bad("time_embed_dim must be even");
}

std::string config_to_json(const CduaConfig& c) {
  nlohmann::ordered_json j;
  j["history_len"] = c.history_len;
  j["horizon"] = c.horizon;
  j["feature_dim"] = c.feature_dim;
  j["condition_on_capacity"] = c.condition_on_capacity;
  j["channels"] = c.channels;
  j["heads"] = c.heads;
  j["time_embed_dim"] = c.time_embed_dim;
  j["groups"] = c.groups;
  j["variant"] = to_string(c.variant);
  j["upsample"] = to_string(c.upsample);
  return j.dump(2);
}

CduaConfig config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    CduaConfig c;
    c.history_len = j.at("history_len").get<Index>();
    c.horizon = j.at("horizon").get<Index>();
    c.feature_dim = j.at("feature_dim").get<Index>();
    c.condition_on_capacity = j.at("condition_on_capacity").get<bool>();
    c.channels = j.at("channels").get<std::vector<Index>>();
    c.heads = j.at("heads").get<Index>();
    c.time_embed_dim = j.at("time_embed_dim").get<Index>();
    c.groups = j.at("groups").get<Index>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.upsample = parse_upsample(j.at("upsample").get<std::string>());
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("model config: ") + e.what());
  }
}

}  // namespace cdua::model
