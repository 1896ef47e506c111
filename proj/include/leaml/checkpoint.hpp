#pragma once

// Binary container shared by model checkpoints and selection artifacts:
//
//   "LEML" | u32 format version | u32 artifact kind | u64 run-config hash
//   | 8 x u32 model config | u32 record count
//   | records: u32 name length, name, u32 rank, u32 extents[rank], f32 data
//   | u64 FNV-1a checksum of every preceding byte
//
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "leaml/model.hpp"

namespace leaml {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr std::array<char, 4> kContainerMagic = {'L', 'E', 'M', 'L'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class ArtifactKind : std::uint32_t { kParameters = 0, kScores = 1, kMask = 2 };

enum class CheckpointErrorCode { kIo, kBadMagic, kUnsupportedVersion, kTruncated, kChecksumMismatch, kMalformed };

inline const char* to_string(CheckpointErrorCode c) {
  switch (c) {
    case CheckpointErrorCode::kIo: return "io";
    case CheckpointErrorCode::kBadMagic: return "bad-magic";
    case CheckpointErrorCode::kUnsupportedVersion: return "unsupported-version";
    case CheckpointErrorCode::kTruncated: return "truncated";
    case CheckpointErrorCode::kChecksumMismatch: return "checksum-mismatch";
    case CheckpointErrorCode::kMalformed: return "malformed";
  }
  return "?";
}

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorCode code, const std::string& what)
      : Error(std::string("checkpoint ") + to_string(code) + ": " + what), code_(code) {}
  CheckpointErrorCode code() const { return code_; }

 private:
  CheckpointErrorCode code_;
};

struct ContainerRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Container {
  ArtifactKind kind = ArtifactKind::kParameters;
  std::uint64_t config_hash = 0;
  ModelConfig model;
  std::vector<ContainerRecord> records;
};

inline std::uint64_t fnv1a64(const std::uint8_t* p, std::size_t n,
                             std::uint64_t h = 1469598103934665603ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, p_ + off_, sizeof(U));
    off_ += sizeof(U);
    return v;
  }
  void get_bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, p_ + off_, n);
    off_ += n;
  }
  std::size_t remaining() const { return n_ - off_; }

 private:
  void need(std::size_t k) const {
    if (n_ - off_ < k) throw CheckpointError(CheckpointErrorCode::kTruncated, "unexpected end of data");
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t off_ = 0;
};

inline constexpr std::uint32_t kMaxNameLen = 4096;
inline constexpr std::uint32_t kMaxRank = 8;

}  // namespace detail

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  detail::ByteWriter w;
  w.put_bytes(kContainerMagic.data(), kContainerMagic.size());
  w.put<std::uint32_t>(kContainerVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.kind));
  w.put<std::uint64_t>(c.config_hash);
  for (std::uint32_t v : {c.model.vocab_size, c.model.d_model, c.model.n_layers, c.model.n_heads,
                          c.model.d_ff, c.model.max_seq_len, c.model.visual_dim,
                          c.model.visual_prefix_len})
    w.put<std::uint32_t>(v);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.records.size()));
  for (const auto& r : c.records) {
    if (r.data.size() != shape_size(r.shape)) {
      throw InvalidInput("record '" + r.name + "' data does not match its shape");
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.put_bytes(r.name.data(), r.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    w.put_bytes(r.data.data(), r.data.size() * sizeof(float));
  }
  const std::uint64_t sum = fnv1a64(w.bytes().data(), w.bytes().size());
  w.put<std::uint64_t>(sum);
  return std::move(w.bytes());
}

inline Container decode_container(const std::vector<std::uint8_t>& bytes) {
  using E = CheckpointErrorCode;
  if (bytes.size() < kContainerMagic.size()) throw CheckpointError(E::kTruncated, "file shorter than header");
  if (std::memcmp(bytes.data(), kContainerMagic.data(), kContainerMagic.size()) != 0) {
    throw CheckpointError(E::kBadMagic, "not a LEML container");
  }
  detail::ByteReader r(bytes.data() + 4, bytes.size() - 4);
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) {
    throw CheckpointError(E::kUnsupportedVersion, "format version " + std::to_string(version) +
                                                      ", expected " + std::to_string(kContainerVersion));
  }
  if (bytes.size() < 4 + 4 + 8) throw CheckpointError(E::kTruncated, "file shorter than header");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  Container c;
  const auto kind = r.get<std::uint32_t>();
  if (kind > 2) throw CheckpointError(E::kMalformed, "unknown artifact kind " + std::to_string(kind));
  c.kind = static_cast<ArtifactKind>(kind);
  c.config_hash = r.get<std::uint64_t>();
  c.model.vocab_size = r.get<std::uint32_t>();
  c.model.d_model = r.get<std::uint32_t>();
  c.model.n_layers = r.get<std::uint32_t>();
  c.model.n_heads = r.get<std::uint32_t>();
  c.model.d_ff = r.get<std::uint32_t>();
  c.model.max_seq_len = r.get<std::uint32_t>();
  c.model.visual_dim = r.get<std::uint32_t>();
  c.model.visual_prefix_len = r.get<std::uint32_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    ContainerRecord rec;
    const auto len = r.get<std::uint32_t>();
    if (len == 0 || len > detail::kMaxNameLen) {
      if (len > r.remaining()) throw CheckpointError(E::kTruncated, "record name runs past end of file");
      throw CheckpointError(E::kMalformed, "record name length " + std::to_string(len));
    }
    rec.name.resize(len);
    r.get_bytes(rec.name.data(), len);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > detail::kMaxRank) {
      throw CheckpointError(E::kMalformed, "record '" + rec.name + "' has rank " + std::to_string(rank));
    }
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto e = r.get<std::uint32_t>();
      if (e == 0) throw CheckpointError(E::kMalformed, "record '" + rec.name + "' has a zero extent");
      rec.shape.push_back(e);
      n *= e;
      if (n * sizeof(float) > bytes.size()) {
        throw CheckpointError(E::kTruncated, "record '" + rec.name + "' runs past end of file");
      }
    }
    rec.data.resize(static_cast<std::size_t>(n));
    r.get_bytes(rec.data.data(), rec.data.size() * sizeof(float));
    c.records.push_back(std::move(rec));
  }
  if (r.remaining() < 8) throw CheckpointError(E::kTruncated, "missing checksum");
  if (r.remaining() > 8) throw CheckpointError(E::kMalformed, "trailing bytes after last record");
  if (fnv1a64(bytes.data(), body) != stored) {
    throw CheckpointError(E::kChecksumMismatch, "stored checksum does not match contents");
  }
  return c;
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrorCode::kIo, "cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrorCode::kIo, "write failed for " + path.string());
}

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

struct Checkpoint {
  ModelConfig config;
  ParameterStore<float> params;
  std::uint64_t config_hash = 0;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ParameterStore<T>& params, std::uint64_t config_hash = 0) {
  Container c;
  c.kind = ArtifactKind::kParameters;
  c.config_hash = config_hash;
  c.model = config;
  for (const auto& p : params.parameters()) {
    c.records.push_back({p.name, p.tensor->shape,
                         std::vector<float>(p.tensor->data.begin(), p.tensor->data.end())});
  }
  write_container(path, c);
}

/// Loads a model checkpoint and verifies its tensors against the layout the
/// stored config implies.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto c = read_container(path);
  if (c.kind != ArtifactKind::kParameters) {
    throw CheckpointError(CheckpointErrorCode::kMalformed, path.string() + " is not a model checkpoint");
  }
  try {
    c.model.validate();
  } catch (const InvalidInput& e) {
    throw CheckpointError(CheckpointErrorCode::kMalformed, e.what());
  }
  const auto layout = parameter_layout(c.model);
  if (layout.size() != c.records.size()) {
    throw CheckpointError(CheckpointErrorCode::kMalformed,
                          "expected " + std::to_string(layout.size()) + " tensors, found " +
                              std::to_string(c.records.size()));
  }
  Checkpoint out{c.model, {}, c.config_hash};
  for (std::size_t i = 0; i < layout.size(); ++i) {
    auto& rec = c.records[i];
    if (rec.name != layout[i].name || rec.shape != layout[i].shape) {
      throw CheckpointError(CheckpointErrorCode::kMalformed,
                            "tensor " + std::to_string(i) + " is '" + rec.name + "' " +
                                shape_string(rec.shape) + ", expected '" + layout[i].name + "' " +
                                shape_string(layout[i].shape));
    }
    out.params.add(rec.name, layout[i].kind, rec.shape, std::move(rec.data));
  }
  return out;
}

}  // namespace leaml
