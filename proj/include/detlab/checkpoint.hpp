#pragma once

// Checkpoint format: one JSON header line (format tag, model config, and a
// name/shape/offset table), then a newline, then every parameter's values as
// raw little-endian float64 in table order. Offsets count values, not bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "detlab/decoder.hpp"

namespace detlab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr const char* kCheckpointFormat = "detlab-checkpoint-v1";

inline nlohmann::json decoder_config_to_json(const DecoderConfig& cfg) {
  return {{"num_layers", cfg.num_layers},
          {"d_model", cfg.d_model},
          {"heads", cfg.heads},
          {"relation_heads", cfg.relation_heads},
          {"d_ffn", cfg.d_ffn},
          {"num_queries", cfg.num_queries},
          {"num_classes", cfg.num_classes},
          {"d_gate_hidden", cfg.d_gate_hidden},
          {"progressive", cfg.progressive}};
}

inline DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{
      "num_layers", "d_model",     "heads",         "relation_heads", "d_ffn",
      "num_queries", "num_classes", "d_gate_hidden", "progressive"};
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end())
      throw std::invalid_argument("model config: unknown key \"" + item.key() + "\"");
  }
  DecoderConfig cfg;
  cfg.num_layers = j.value("num_layers", cfg.num_layers);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.relation_heads = j.value("relation_heads", cfg.relation_heads);
  cfg.d_ffn = j.value("d_ffn", cfg.d_ffn);
  cfg.num_queries = j.value("num_queries", cfg.num_queries);
  cfg.num_classes = j.value("num_classes", cfg.num_classes);
  cfg.d_gate_hidden = j.value("d_gate_hidden", cfg.d_gate_hidden);
  cfg.progressive = j.value("progressive", cfg.progressive);
  return cfg;
}

inline void save_checkpoint(const std::string& path, DecoderParams& params) {
  auto ptrs = params.all();
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const Param* p : ptrs) {
    table.push_back({{"name", p->name},
                     {"shape", p->value.shape},
                     {"offset", offset}});
    offset += p->value.data.size();
  }
  nlohmann::json header{{"format", kCheckpointFormat},
                        {"config", decoder_config_to_json(params.cfg)},
                        {"params", table},
                        {"total_values", offset}};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << header.dump() << "\n";
  for (const Param* p : ptrs)
    out.write(reinterpret_cast<const char*>(p->value.data.data()),
              static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline DecoderParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string header_line;
  if (!std::getline(in, header_line))
    throw std::runtime_error("load_checkpoint: missing header in " + path);
  nlohmann::json header = nlohmann::json::parse(header_line);
  if (header.at("format").get<std::string>() != kCheckpointFormat)
    throw std::runtime_error("load_checkpoint: unknown format tag in " + path);

  DecoderParams params;
  params.init(decoder_config_from_json(header.at("config")), 0);
  auto ptrs = params.all();
  const auto& table = header.at("params");
  if (table.size() != ptrs.size())
    throw std::runtime_error("load_checkpoint: parameter table size mismatch in " + path);

  const std::size_t total = header.at("total_values").get<std::size_t>();
  std::vector<double> blob(total);
  in.read(reinterpret_cast<char*>(blob.data()),
          static_cast<std::streamsize>(total * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != total * sizeof(double))
    throw std::runtime_error("load_checkpoint: truncated value blob in " + path);

  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    const auto& entry = table[i];
    if (entry.at("name").get<std::string>() != ptrs[i]->name)
      throw std::runtime_error("load_checkpoint: parameter order mismatch at \"" +
                               ptrs[i]->name + "\" in " + path);
    const auto shape = entry.at("shape").get<std::vector<int>>();
    if (shape != ptrs[i]->value.shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for \"" + ptrs[i]->name +
                               "\" in " + path);
    const std::size_t off = entry.at("offset").get<std::size_t>();
    if (off + ptrs[i]->value.data.size() > total)
      throw std::runtime_error("load_checkpoint: offset out of range for \"" +
                               ptrs[i]->name + "\" in " + path);
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(off),
              blob.begin() + static_cast<std::ptrdiff_t>(off + ptrs[i]->value.data.size()),
              ptrs[i]->value.data.begin());
  }
  return params;
}

}  // namespace detlab
