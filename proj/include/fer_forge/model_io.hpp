#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "fer_forge/models.hpp"

// ModelFile layout (all integers little-endian):
//
//   "FEMO"                          4 bytes magic
//   u32 version                     currently 1
//   u32 input_rank, u32 dims[...]   network input shape
//   u32 layer_count
//   per layer:
//     u32 kind, u32 filters, u32 kernel, u32 stride, u32 padding, u32 units,
//     f64 dropout_rate, f64 l2_penalty
//   u32 tensor_count
//   per parameter tensor, in layer order (weights before bias):
//     u32 rank, u32 dims[rank], binary32 payload[product(dims)]

namespace fer {

inline constexpr std::array<char, 4> kModelMagic{'F', 'E', 'M', 'O'};
inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr std::uint32_t kMaxTensorRank = 8;
inline constexpr std::uint64_t kMaxTensorElements = std::uint64_t{1} << 32;

class ModelFormatError : public std::runtime_error {
 public:
  enum class Code { kIo, kBadMagic, kVersionMismatch, kTruncated, kDimOverflow, kArchitectureMismatch };

  ModelFormatError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw ModelFormatError(ModelFormatError::Code::kTruncated,
                             std::string("model file truncated while reading ") + what +
                                 " at byte " + std::to_string(pos_));
  }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t checked_u32(std::size_t v) {
  if (v > 0xFFFFFFFFu)
    throw ModelFormatError(ModelFormatError::Code::kDimOverflow,
                           "value " + std::to_string(v) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

template <typename T>
std::vector<char> serialize_model(const Network<T>& net) {
  detail::ByteWriter w;
  w.raw(kModelMagic.data(), kModelMagic.size());
  w.u32(kModelVersion);
  w.u32(detail::checked_u32(net.input_shape().size()));
  for (std::size_t d : net.input_shape()) w.u32(detail::checked_u32(d));
  w.u32(detail::checked_u32(net.layers().size()));
  for (const auto& l : net.layers()) {
    const LayerSpec& s = l.spec;
    w.u32(static_cast<std::uint32_t>(s.kind));
    w.u32(detail::checked_u32(s.filters));
    w.u32(detail::checked_u32(s.kernel));
    w.u32(detail::checked_u32(s.stride));
    w.u32(detail::checked_u32(s.padding));
    w.u32(detail::checked_u32(s.units));
    w.f64(s.rate);
    w.f64(s.l2);
  }
  const auto params = net.parameters();
  w.u32(detail::checked_u32(params.size()));
  for (const auto* p : params) {
    w.u32(detail::checked_u32(p->rank()));
    for (std::size_t d : p->shape()) w.u32(detail::checked_u32(d));
    for (T v : p->data()) w.f32(static_cast<float>(v));
  }
  return w.bytes();
}

inline Network<float> deserialize_model(const std::vector<char>& bytes) {
  using Code = ModelFormatError::Code;
  detail::ByteReader r(bytes);
  r.need(4, "magic");
  if (!std::equal(kModelMagic.begin(), kModelMagic.end(), bytes.begin()))
    throw ModelFormatError(Code::kBadMagic, "bad magic: not a FEMO model file");
  (void)r.u32("magic");
  const std::uint32_t version = r.u32("version");
  if (version != kModelVersion)
    throw ModelFormatError(Code::kVersionMismatch,
                           "model format version " + std::to_string(version) + ", expected " +
                               std::to_string(kModelVersion));

  auto read_shape = [&](const char* what) {
    const std::uint32_t rank = r.u32(what);
    if (rank == 0 || rank > kMaxTensorRank)
      throw ModelFormatError(Code::kDimOverflow, std::string(what) + " rank " +
                                                     std::to_string(rank) + " out of range");
    Shape shape;
    std::uint64_t elements = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32(what);
      if (d == 0) throw ModelFormatError(Code::kDimOverflow, std::string(what) + " has a zero dimension");
      elements *= d;
      if (elements > kMaxTensorElements)
        throw ModelFormatError(Code::kDimOverflow, std::string(what) + " element count overflows");
      shape.push_back(d);
    }
    return shape;
  };

  Shape input_shape = read_shape("input shape");
  const std::uint32_t layer_count = r.u32("layer count");
  // Each layer record is 40 bytes; reject absurd counts before allocating.
  r.need(static_cast<std::size_t>(layer_count) * 40, "layer descriptors");
  std::vector<LayerSpec> specs;
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    LayerSpec s;
    const std::uint32_t kind = r.u32("layer kind");
    if (kind > static_cast<std::uint32_t>(LayerKind::kFlatten))
      throw ModelFormatError(Code::kArchitectureMismatch, "unknown layer kind " + std::to_string(kind));
    s.kind = static_cast<LayerKind>(kind);
    s.filters = r.u32("filters");
    s.kernel = r.u32("kernel");
    s.stride = r.u32("stride");
    s.padding = r.u32("padding");
    s.units = r.u32("units");
    s.rate = r.f64("dropout rate");
    s.l2 = r.f64("l2 penalty");
    specs.push_back(s);
  }

  Network<float> net;
  try {
    net = Network<float>(specs, input_shape);
  } catch (const ShapeError& e) {
    throw ModelFormatError(Code::kArchitectureMismatch, std::string("invalid architecture: ") + e.what());
  }

  auto params = net.parameters();
  const std::uint32_t tensor_count = r.u32("tensor count");
  if (tensor_count != params.size())
    throw ModelFormatError(Code::kArchitectureMismatch,
                           "file holds " + std::to_string(tensor_count) + " tensors, architecture needs " +
                               std::to_string(params.size()));
  for (std::uint32_t t = 0; t < tensor_count; ++t) {
    Shape shape = read_shape("tensor dims");
    if (shape != params[t]->shape())
      throw ModelFormatError(Code::kArchitectureMismatch,
                             "tensor " + std::to_string(t) + " has shape " + shape_str(shape) +
                                 ", architecture needs " + shape_str(params[t]->shape()));
    r.need(params[t]->size() * 4, "tensor payload");
    for (float& v : params[t]->data()) v = r.f32("tensor payload");
  }
  return net;
}

template <typename T>
void save_model(const Network<T>& net, const std::filesystem::path& path) {
  const auto bytes = serialize_model(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ModelFormatError(ModelFormatError::Code::kIo, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ModelFormatError(ModelFormatError::Code::kIo, "write failed: " + path.string());
}

inline Network<float> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFormatError(ModelFormatError::Code::kIo, "cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace fer
