#pragma once

// Binary parameter snapshots. Layout: 8-byte magic, format version, a JSON
// echo of the producing model config, a directory of (name, dtype, shape,
// offset) entries, raw little-endian float payloads, and a trailing payload
// checksum. Round trips are byte-exact.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "salt/common.hpp"
#include "salt/models.hpp"
#include "salt/tensor.hpp"

namespace salt {

inline constexpr std::string_view kCheckpointMagic = "SALTCKPT";
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const std::vector<std::pair<std::string, Tensor>>& tensors);
Checkpoint read_checkpoint(const std::string& path);

// Order-insensitive digest of a named tensor collection (bit-level equality).
uint64_t named_checksum(const std::vector<std::pair<std::string, Tensor>>& tensors);

// Several parameter collections share one checkpoint file via name prefixes
// ("encoder.", "predictor.", ...). The returned pairs alias the same storage.
std::vector<std::pair<std::string, Tensor>> prefixed(
    const std::string& prefix, const std::vector<std::pair<std::string, Tensor>>& named);

// The sub-collection under `prefix`, with the prefix stripped; an empty
// selection is a corruption error (wrong checkpoint kind).
Checkpoint select_prefix(const Checkpoint& ckpt, const std::string& prefix);

// Copies stored values into an instantiated parameter collection. The name
// sets must match exactly and every shape must agree.
template <typename P>
void load_into(const Checkpoint& ckpt, P& params) {
  auto dst = params.named();
  check(dst.size() == ckpt.tensors.size(), ErrorKind::Dimension, "checkpoint holds ",
        ckpt.tensors.size(), " tensors but the model declares ", dst.size());
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name.emplace(name, &t);
  for (auto& [name, t] : dst) {
    auto it = by_name.find(name);
    check(it != by_name.end(), ErrorKind::Dimension, "checkpoint lacks tensor '", name, "'");
    const Tensor& src = *it->second;
    check(src.shape() == t.shape(), ErrorKind::Dimension, "checkpoint tensor '", name,
          "' has shape ", shape_str(src.shape()), ", model expects ", shape_str(t.shape()));
    std::copy(src.data(), src.data() + src.numel(), t.data());
  }
}

}  // namespace salt
