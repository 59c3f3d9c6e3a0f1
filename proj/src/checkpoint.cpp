#include "salt/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace salt {
namespace {

// Little-endian scalar I/O (the host is static-asserted little-endian).
template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

struct Reader {
  const std::string& bytes;
  size_t pos = 0;

  void need(size_t n) const {
    check(pos + n <= bytes.size(), ErrorKind::Corruption,
          "checkpoint truncated: wanted ", n, " bytes at offset ", pos, " of ", bytes.size());
  }
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
  }
  std::string get_str(size_t n) {
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

constexpr uint8_t kDtypeF32 = 0;

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const std::vector<std::pair<std::string, Tensor>>& tensors) {
  const std::string config_json = config.to_json();

  std::string payload;
  std::string directory;
  put<uint32_t>(directory, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<uint32_t>(directory, static_cast<uint32_t>(name.size()));
    directory.append(name);
    put<uint8_t>(directory, kDtypeF32);
    put<uint32_t>(directory, static_cast<uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) put<int64_t>(directory, t.dim(i));
    put<uint64_t>(directory, payload.size());  // offset within the payload section
    payload.append(reinterpret_cast<const char*>(t.data()),
                   static_cast<size_t>(t.numel()) * sizeof(float));
  }

  std::string out;
  out.append(kCheckpointMagic);
  put<uint32_t>(out, kCheckpointVersion);
  put<uint32_t>(out, static_cast<uint32_t>(config_json.size()));
  out.append(config_json);
  out.append(directory);
  put<uint64_t>(out, payload.size());
  out.append(payload);
  put<uint64_t>(out, fnv1a64(payload.data(), payload.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(f.good(), ErrorKind::Io, "cannot open '", path, "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  f.flush();
  check(f.good(), ErrorKind::Io, "write failed for '", path, "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorKind::Io, "cannot open checkpoint '", path, "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  check(!f.bad(), ErrorKind::Io, "read failed for '", path, "'");

  Reader r{bytes};
  check(r.get_str(kCheckpointMagic.size()) == kCheckpointMagic, ErrorKind::Corruption,
        "'", path, "' is not a checkpoint (bad magic)");
  Checkpoint ckpt;
  ckpt.version = r.get<uint32_t>();
  check(ckpt.version == kCheckpointVersion, ErrorKind::Corruption, "unsupported checkpoint version ",
        ckpt.version, " (expected ", kCheckpointVersion, ")");
  const auto config_len = r.get<uint32_t>();
  ckpt.config = ModelConfig::from_json(r.get_str(config_len));

  struct Entry {
    std::string name;
    Shape shape;
    uint64_t offset;
  };
  std::vector<Entry> entries;
  const auto count = r.get<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.get_str(r.get<uint32_t>());
    const auto dtype = r.get<uint8_t>();
    check(dtype == kDtypeF32, ErrorKind::Corruption, "tensor '", e.name,
          "' has unknown dtype tag ", static_cast<int>(dtype));
    const auto ndim = r.get<uint32_t>();
    check(ndim <= 4, ErrorKind::Corruption, "tensor '", e.name, "' has implausible rank ", ndim);
    for (uint32_t d = 0; d < ndim; ++d) {
      const int64_t dim = r.get<int64_t>();
      check(dim > 0, ErrorKind::Corruption, "tensor '", e.name, "' has nonpositive dimension");
      e.shape.push_back(dim);
    }
    e.offset = r.get<uint64_t>();
    entries.push_back(std::move(e));
  }

  const auto payload_size = r.get<uint64_t>();
  const size_t payload_pos = r.pos;
  const std::string payload = r.get_str(payload_size);
  const auto stored_sum = r.get<uint64_t>();
  check(r.pos == bytes.size(), ErrorKind::Corruption, "checkpoint '", path,
        "' has trailing bytes");
  check(stored_sum == fnv1a64(payload.data(), payload.size()), ErrorKind::Corruption,
        "checkpoint '", path, "' payload checksum mismatch");
  (void)payload_pos;

  for (const Entry& e : entries) {
    int64_t numel = 1;
    for (int64_t d : e.shape) numel *= d;
    const uint64_t bytes_needed = static_cast<uint64_t>(numel) * sizeof(float);
    check(e.offset + bytes_needed <= payload.size(), ErrorKind::Corruption, "tensor '", e.name,
          "' overruns the payload section");
    std::vector<float> values(static_cast<size_t>(numel));
    std::memcpy(values.data(), payload.data() + e.offset, bytes_needed);
    ckpt.tensors.emplace_back(e.name, Tensor::from_values(e.shape, std::move(values)));
  }
  return ckpt;
}

std::vector<std::pair<std::string, Tensor>> prefixed(
    const std::string& prefix, const std::vector<std::pair<std::string, Tensor>>& named) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.emplace_back(prefix + name, t);
  return out;
}

Checkpoint select_prefix(const Checkpoint& ckpt, const std::string& prefix) {
  Checkpoint out;
  out.version = ckpt.version;
  out.config = ckpt.config;
  for (const auto& [name, t] : ckpt.tensors)
    if (name.rfind(prefix, 0) == 0) out.tensors.emplace_back(name.substr(prefix.size()), t);
  check(!out.tensors.empty(), ErrorKind::Corruption, "checkpoint holds no tensors under '",
        prefix, "'");
  return out;
}

uint64_t named_checksum(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::vector<std::pair<std::string, Tensor>> sorted = tensors;
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  uint64_t h = fnv1a64("named-tensors");
  for (const auto& [name, t] : sorted) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.data(), static_cast<size_t>(t.numel()) * sizeof(float), h);
  }
  return h;
}

}  // namespace salt
