#pragma once

// Named parameter storage and the binary checkpoint container.
//
// Layout (all integers little-endian):
//   magic    8 bytes  "SYNFUSE\0"
//   version  u32      = 1
//   u32 section count, then per section: u32 name length, name bytes,
//                                         u64 byte length, bytes
//   u32 tensor count,  then per tensor:  u32 name length, name bytes,
//                                         u32 rank, u64 dims[rank],
//                                         f64 values[prod(dims)] (IEEE-754)
// Sections hold text: the hyperparameter manifest, merges, vocab, tagset.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "synfuse/error.hpp"
#include "synfuse/rng.hpp"
#include "synfuse/tensor.hpp"

namespace synfuse {

/// Ordered collection of named trainable tensors.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw UsageError("duplicate parameter " + name);
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter " + name);
    return tensors_[it->second];
  }
  const Tensor& get(const std::string& name) const { return const_cast<ParameterStore*>(this)->get(name); }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointBlob {
  std::map<std::string, std::string> sections;
  std::vector<NamedTensor> tensors;
};

namespace detail {

inline constexpr std::array<char, 8> kMagic = {'S', 'Y', 'N', 'F', 'U', 'S', 'E', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename U>
void write_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw DataFormatError("truncated checkpoint");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_bytes(std::istream& in, std::uint64_t n) {
  if (n > (1ULL << 34)) throw DataFormatError("checkpoint field too large");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DataFormatError("truncated checkpoint");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const CheckpointBlob& blob) {
  out.write(detail::kMagic.data(), detail::kMagic.size());
  detail::write_le<std::uint32_t>(out, detail::kCheckpointVersion);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(blob.sections.size()));
  for (const auto& [name, body] : blob.sections) {
    detail::write_string(out, name);
    detail::write_le<std::uint64_t>(out, body.size());
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
  }
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(blob.tensors.size()));
  for (const auto& t : blob.tensors) {
    if (t.values.size() != numel_of(t.shape)) throw ShapeError("checkpoint tensor " + t.name + " has wrong size");
    detail::write_string(out, t.name);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::write_le<std::uint64_t>(out, d);
    for (double v : t.values) detail::write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw UsageError("failed writing checkpoint");
}

inline CheckpointBlob read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != detail::kMagic) throw DataFormatError("not a synfuse checkpoint (bad magic)");
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != detail::kCheckpointVersion) {
    throw DataFormatError("unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointBlob blob;
  const auto nsec = detail::read_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < nsec; ++i) {
    std::string name = detail::read_bytes(in, detail::read_le<std::uint32_t>(in));
    std::string body = detail::read_bytes(in, detail::read_le<std::uint64_t>(in));
    blob.sections.emplace(std::move(name), std::move(body));
  }
  const auto ntens = detail::read_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < ntens; ++i) {
    NamedTensor t;
    t.name = detail::read_bytes(in, detail::read_le<std::uint32_t>(in));
    const auto rank = detail::read_le<std::uint32_t>(in);
    if (rank > 8) throw DataFormatError("checkpoint tensor rank too large");
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(detail::read_le<std::uint64_t>(in));
    const std::size_t n = numel_of(t.shape);
    if (n > (1ULL << 31)) throw DataFormatError("checkpoint tensor too large");
    t.values.resize(n);
    for (auto& v : t.values) v = std::bit_cast<double>(detail::read_le<std::uint64_t>(in));
    blob.tensors.push_back(std::move(t));
  }
  return blob;
}

inline void save_blob(const std::string& path, const CheckpointBlob& blob) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write checkpoint " + path);
  write_checkpoint(out, blob);
}

inline CheckpointBlob load_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

inline std::vector<NamedTensor> export_parameters(const ParameterStore& store) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& t = store.tensors()[i];
    out.push_back({store.names()[i], t.shape(), t.to_vector()});
  }
  return out;
}

/// Copy values from a blob into an existing store; every parameter must be
/// present with the same shape.
inline void import_parameters(ParameterStore& store, const std::vector<NamedTensor>& tensors) {
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name.emplace(t.name, &t);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& name = store.names()[i];
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataFormatError("checkpoint is missing parameter " + name);
    Tensor& dst = store.tensors()[i];
    if (it->second->shape != dst.shape()) {
      throw DataFormatError("checkpoint parameter " + name + " has shape " + shape_str(it->second->shape) +
                            ", expected " + shape_str(dst.shape()));
    }
    std::copy(it->second->values.begin(), it->second->values.end(), dst.mutable_data().begin());
  }
}

}  // namespace synfuse
