#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "crowdnav/config.hpp"
#include "crowdnav/policy_net.hpp"

namespace crowdnav {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class CheckpointErrorKind { Io, Format, Version, Digest, Truncated, Checksum };

inline std::string_view to_string(CheckpointErrorKind k) {
  switch (k) {
    case CheckpointErrorKind::Io: return "io";
    case CheckpointErrorKind::Format: return "format";
    case CheckpointErrorKind::Version: return "version";
    case CheckpointErrorKind::Digest: return "digest";
    case CheckpointErrorKind::Truncated: return "truncated";
    case CheckpointErrorKind::Checksum: return "checksum";
  }
  return "?";
}

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : std::runtime_error("checkpoint " + std::string(to_string(kind)) + " error: " + what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

/// One tensor record: raw 32-bit float payload in row-major order.
struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  friend bool operator==(const NamedTensor& a, const NamedTensor& b) {
    return a.name == b.name && a.dims == b.dims && a.data.size() == b.data.size() &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
  }
};

/// Layout, all integers u32 little-endian:
///   "CM3M" | version | config digest (32 B) | tensor count |
///   per tensor: name length | UTF-8 name | rank | dims... | f32 data... |
///   SHA-256 of every preceding byte (32 B)
struct CheckpointFile {
  Digest config_digest{};
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const NamedTensor& at(std::string_view name) const {
    if (const auto* t = find(name)) return *t;
    throw CheckpointError(CheckpointErrorKind::Format, "missing tensor '" + std::string(name) + "'");
  }
};

inline constexpr std::array<char, 4> kCheckpointMagic{'C', 'M', '3', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class Cursor {
 public:
  explicit Cursor(std::string_view bytes) : bytes_(bytes) {}
  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw CheckpointError(CheckpointErrorKind::Truncated, "unexpected end of file");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4).data(), 4);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointFile& file) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  out.append(reinterpret_cast<const char*>(file.config_digest.data()), file.config_digest.size());
  detail::put_u32(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    std::size_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.data.size()) throw ContractViolation("tensor '" + t.name + "': dims do not match data size");
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_u32(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  const Digest checksum = sha256(out);
  out.append(reinterpret_cast<const char*>(checksum.data()), checksum.size());
  return out;
}

inline CheckpointFile decode_checkpoint(std::string_view bytes, const std::optional<Digest>& expected_digest = {}) {
  using K = CheckpointErrorKind;
  if (bytes.size() < 4) throw CheckpointError(K::Truncated, "file shorter than the magic bytes");
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0) throw CheckpointError(K::Format, "bad magic bytes");
  detail::Cursor cur(bytes);
  cur.take(4);
  const std::uint32_t version = cur.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(K::Version, "format version " + std::to_string(version) + ", expected " +
                                          std::to_string(kCheckpointVersion));
  CheckpointFile file;
  std::memcpy(file.config_digest.data(), cur.take(32).data(), 32);
  const std::uint32_t count = cur.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint32_t name_len = cur.u32();
    t.name = std::string(cur.take(name_len));
    const std::uint32_t rank = cur.u32();
    std::uint64_t elems = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(cur.u32());
      elems *= t.dims.back();
    }
    if (elems > bytes.size()) throw CheckpointError(K::Truncated, "tensor '" + t.name + "' runs past end of file");
    const auto raw = cur.take(static_cast<std::size_t>(elems) * sizeof(float));
    t.data.resize(static_cast<std::size_t>(elems));
    std::memcpy(t.data.data(), raw.data(), raw.size());
    file.tensors.push_back(std::move(t));
  }
  const std::size_t body = cur.pos();
  const auto stored = cur.take(32);
  if (cur.pos() != bytes.size()) throw CheckpointError(K::Format, "trailing bytes after checksum");
  const Digest actual = sha256(bytes.substr(0, body));
  if (std::memcmp(actual.data(), stored.data(), 32) != 0) throw CheckpointError(K::Checksum, "whole-file checksum mismatch");
  if (expected_digest && *expected_digest != file.config_digest)
    throw CheckpointError(K::Digest, "config digest " + to_hex(file.config_digest) + " does not match expected " +
                                         to_hex(*expected_digest));
  return file;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
  const std::string bytes = encode_checkpoint(file);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrorKind::Io, "cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointErrorKind::Io, "write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& path,
                                           const std::optional<Digest>& expected_digest = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::Io, "cannot open '" + path.string() + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes, expected_digest);
}

// ---------------------------------------------------------------------------
// Tensor conversions

template <typename T>
NamedTensor to_named_tensor(std::string name, const Matrix<T>& m) {
  NamedTensor t{std::move(name), {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, {}};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return t;
}

inline void from_named_tensor(const NamedTensor& t, Matrix<float>& m) {
  if (t.dims.size() != 2 || t.dims[0] != m.rows() || t.dims[1] != m.cols())
    throw CheckpointError(CheckpointErrorKind::Format, "tensor '" + t.name + "' has an unexpected shape");
  std::memcpy(m.data(), t.data.data(), t.data.size() * sizeof(float));
}

template <typename P>
void append_params(CheckpointFile& file, const std::string& prefix, const P& params) {
  const auto ts = params.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) file.tensors.push_back(to_named_tensor(prefix + P::name(i), *ts[i]));
}

/// `params` must already have the right shapes.
template <typename P>
void read_params(const CheckpointFile& file, const std::string& prefix, P& params) {
  auto ts = params.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) from_named_tensor(file.at(prefix + P::name(i)), *ts[i]);
}

/// Opaque bytes carried bit-for-bit in a rank-1 tensor: word 0 is the byte
/// length, the rest is the zero-padded payload.
inline NamedTensor blob_tensor(std::string name, std::string_view bytes) {
  const std::size_t words = 1 + (bytes.size() + 3) / 4;
  NamedTensor t{std::move(name), {static_cast<std::uint32_t>(words)}, std::vector<float>(words, 0.0f)};
  const auto len = static_cast<std::uint32_t>(bytes.size());
  std::memcpy(t.data.data(), &len, 4);
  if (!bytes.empty()) std::memcpy(reinterpret_cast<char*>(t.data.data()) + 4, bytes.data(), bytes.size());
  return t;
}

inline std::string blob_bytes(const NamedTensor& t) {
  if (t.dims.size() != 1 || t.data.empty()) throw CheckpointError(CheckpointErrorKind::Format, "'" + t.name + "' is not a blob");
  std::uint32_t len;
  std::memcpy(&len, t.data.data(), 4);
  if (len > (t.data.size() - 1) * 4) throw CheckpointError(CheckpointErrorKind::Format, "'" + t.name + "' blob length overflow");
  return std::string(reinterpret_cast<const char*>(t.data.data()) + 4, len);
}

/// Little-endian byte stream for blob payloads.
class ByteWriter {
 public:
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void put(const T& v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    bytes_.append(b, sizeof(T));
  }
  template <typename T>
  void put_vector(const std::vector<T>& v) {
    put<std::uint64_t>(v.size());
    for (const auto& x : v) put(x);
  }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    bytes_ += s;
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)), cur_(bytes_) {}
  ByteReader(const ByteReader&) = delete;
  ByteReader& operator=(const ByteReader&) = delete;
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  T get() {
    T v;
    std::memcpy(&v, cur_.take(sizeof(T)).data(), sizeof(T));
    return v;
  }
  template <typename T>
  std::vector<T> get_vector() {
    const auto n = get<std::uint64_t>();
    std::vector<T> v;
    for (std::uint64_t i = 0; i < n; ++i) v.push_back(get<T>());
    return v;
  }
  std::string get_string() { return std::string(cur_.take(static_cast<std::size_t>(get<std::uint64_t>()))); }

 private:
  std::string bytes_;
  detail::Cursor cur_;
};

}  // namespace crowdnav
