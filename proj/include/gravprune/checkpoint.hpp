#pragma once

// Checkpoint file layout (all integers unsigned 32-bit little-endian):
//
//   "GPRN" | version | record count | records... | crc32
//   record: name length | UTF-8 name | rank | dims[rank] | float32 payload
//
// The CRC32 (IEEE) covers every byte from the record count through the last
// record. Metadata travels as ordinary float records named meta.*; 64-bit
// values are split into four 16-bit limbs so they stay exact in float32.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <zlib.h>

#include "gravprune/descriptor.hpp"
#include "gravprune/error.hpp"
#include "gravprune/model.hpp"
#include "gravprune/tensor.hpp"

namespace gravprune {

inline constexpr char kCheckpointMagic[4] = {'G', 'P', 'R', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Tensor tensor;
  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

struct CheckpointMeta {
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  std::uint64_t gravity_hash = 0;
  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const uInt n = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, n);
    data += n;
    size -= n;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class ByteReader {
public:
  ByteReader(const std::vector<unsigned char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  const unsigned char* take(std::size_t n, const char* what) {
    need(n, what);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

private:
  void need(std::size_t n, const char* what) const {
    if (n > end_ - pos_)
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(pos_) + " while reading " + what +
                        " (" + std::to_string(n) + " bytes needed, " + std::to_string(end_ - pos_) + " available)");
  }
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline Tensor limbs_from_u64(std::uint64_t v) {
  std::vector<float> limbs(4);
  for (int i = 0; i < 4; ++i) limbs[i] = static_cast<float>((v >> (16 * i)) & 0xffffu);
  return Tensor({4}, std::move(limbs));
}

inline std::uint64_t u64_from_limbs(const Tensor& t) {
  if (t.size() != 4) throw FormatError("metadata record must hold 4 limbs");
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const float f = t[i];
    if (!(f >= 0.0f && f <= 65535.0f) || f != static_cast<float>(static_cast<std::uint32_t>(f)))
      throw FormatError("corrupt metadata limb");
    v |= static_cast<std::uint64_t>(f) << (16 * i);
  }
  return v;
}

inline Tensor text_to_tensor(const std::string& text) {
  std::vector<float> v(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) v[i] = static_cast<float>(static_cast<unsigned char>(text[i]));
  return Tensor({text.size()}, std::move(v));
}

inline std::string tensor_to_text(const Tensor& t) {
  std::string s(t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float f = t[i];
    if (!(f >= 0.0f && f <= 255.0f)) throw FormatError("corrupt text record");
    s[i] = static_cast<char>(static_cast<unsigned char>(f));
  }
  return s;
}

}  // namespace detail

inline std::vector<unsigned char> encode_records(const std::vector<TensorRecord>& records) {
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::size_t body = out.size();
  detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(r.tensor.rank()));
    for (auto d : r.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : r.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  detail::put_u32(out, crc32_of(out.data() + body, out.size() - body));
  return out;
}

inline std::vector<TensorRecord> decode_records(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint: bad magic bytes");
  detail::ByteReader rd(bytes, bytes.size());
  rd.seek(4);
  const std::uint32_t version = rd.u32("format version");
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (reader expects " +
                       std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < 12) throw FormatError("checkpoint truncated at byte offset " + std::to_string(bytes.size()));
  const std::size_t body = rd.pos();
  detail::ByteReader in(bytes, bytes.size() - 4);
  in.seek(body);
  const std::uint32_t count = in.u32("record count");
  std::vector<TensorRecord> records;
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint32_t name_len = in.u32("name length");
    const unsigned char* name = in.take(name_len, "record name");
    const std::uint32_t rank = in.u32("rank");
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank) + " at byte offset " +
                                    std::to_string(in.pos() - 4));
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(in.u32("dimension"));
      if (shape.back() == 0) throw FormatError("zero dimension at byte offset " + std::to_string(in.pos() - 4));
      n *= shape.back();
    }
    if (n > (bytes.size() - in.pos()) / 4)
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(in.pos()) + " while reading payload");
    const unsigned char* payload = in.take(n * 4, "payload");
    std::vector<float> values(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(payload[4 * k + b]) << (8 * b);
      values[k] = std::bit_cast<float>(u);
    }
    records.push_back({std::string(reinterpret_cast<const char*>(name), name_len), Tensor(shape, std::move(values))});
  }
  if (in.pos() != bytes.size() - 4)
    throw FormatError("unexpected trailing bytes at offset " + std::to_string(in.pos()));
  detail::ByteReader tail(bytes, bytes.size());
  tail.seek(bytes.size() - 4);
  const std::uint32_t stored = tail.u32("crc");
  const std::uint32_t actual = crc32_of(bytes.data() + body, bytes.size() - 4 - body);
  if (stored != actual) throw FormatError("checkpoint checksum mismatch");
  return records;
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::vector<TensorRecord> model_records(const Model& model, const CheckpointMeta& meta) {
  std::vector<TensorRecord> records;
  records.push_back({"meta.arch", detail::text_to_tensor(format_descriptor(model.arch))});
  records.push_back({"meta.epoch", detail::limbs_from_u64(meta.epoch)});
  records.push_back({"meta.seed", detail::limbs_from_u64(meta.seed)});
  records.push_back({"meta.gravity_hash", detail::limbs_from_u64(meta.gravity_hash)});
  for (std::size_t i = 0; i < model.num_layers(); ++i)
    for (const auto& p : model.params[i]) records.push_back({model.arch.layers[i].name + "." + p.name, p.value});
  return records;
}

inline std::vector<unsigned char> encode_checkpoint(const Model& model, const CheckpointMeta& meta = {}) {
  return encode_records(model_records(model, meta));
}

inline Model decode_checkpoint(const std::vector<unsigned char>& bytes, CheckpointMeta* meta = nullptr) {
  auto records = decode_records(bytes);
  const auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& r : records)
      if (r.name == name) return r.tensor;
    throw FormatError("checkpoint lacks record '" + name + "'");
  };
  Model model = build_model(detail::tensor_to_text(find("meta.arch")), 0);
  if (meta) {
    meta->epoch = detail::u64_from_limbs(find("meta.epoch"));
    meta->seed = detail::u64_from_limbs(find("meta.seed"));
    meta->gravity_hash = detail::u64_from_limbs(find("meta.gravity_hash"));
  }
  std::size_t used = 4;
  for (std::size_t i = 0; i < model.num_layers(); ++i)
    for (auto& p : model.params[i]) {
      const Tensor& t = find(model.arch.layers[i].name + "." + p.name);
      if (t.shape() != p.value.shape())
        throw FormatError("record '" + model.arch.layers[i].name + "." + p.name + "' has shape " +
                          shape_str(t.shape()) + ", architecture expects " + shape_str(p.value.shape()));
      p.value = t;
      ++used;
    }
  if (used != records.size()) throw FormatError("checkpoint holds records not described by its architecture");
  return model;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path, const CheckpointMeta& meta = {}) {
  write_file(path, encode_checkpoint(model, meta));
}

inline Model load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr) {
  return decode_checkpoint(read_file(path), meta);
}

}  // namespace gravprune
