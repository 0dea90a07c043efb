#pragma once

#include <string>
#include <utility>

#include <json.hpp>

#include "soda/model.hpp"

namespace soda {

// Checkpoint layout, bit-exact across save→load→save:
//   bytes 0..7    magic "SODAMDL1"
//   bytes 8..15   u64 little-endian header length
//   header        UTF-8 JSON {config, tensors:[{name,dtype,shape,byte_offset,byte_len}]}
//   payload       raw little-endian tensor data; offsets are relative to the
//                 payload start and 64-byte aligned
// All header validation happens before any payload byte is read.

nlohmann::ordered_json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

template <typename R>
void save_checkpoint(const ModelConfig& cfg, ModelWeights<R>& w, const std::string& path);

Dtype peek_checkpoint_dtype(const std::string& path);

// Rejects on dtype mismatch unless allow_cast, in which case stored values
// are converted to R (useful for running a 32-bit checkpoint in the 64-bit
// verification mode).
template <typename R>
std::pair<ModelConfig, ModelWeights<R>> load_checkpoint(const std::string& path,
                                                        bool allow_cast = true);

}  // namespace soda
