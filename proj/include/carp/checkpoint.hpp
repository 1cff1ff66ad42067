#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "carp/eval.hpp"
#include "carp/model.hpp"

// Binary layout, all integers little-endian:
//   "CARP" | u16 version | u32 tensor count | tensors...
//   tensor: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] |
//           u8 dtype (0 = f32, 1 = f64) | payload (prod(dims) values)

namespace carp {

inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::F64;
  std::vector<double> values;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct Checkpoint {
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Malformed checkpoint; field() names the piece that failed to parse.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                                                     std::uint8_t>>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const std::string& field) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2,
                                                                       std::uint16_t, std::uint8_t>>>;
    need(sizeof(T), field);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(U{bytes_[pos_ + i]} << (8 * i));
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  std::string get_string(std::size_t length, const std::string& field) {
    need(length, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), length);
    pos_ += length;
    return s;
  }

  void need(std::size_t n, const std::string& field) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(field, "unexpected end of file");
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> out{'C', 'A', 'R', 'P'};
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    require(t.values.size() == t.element_count(), "checkpoint: tensor '" + t.name +
                                                      "' payload does not match its dims");
    detail::put_le(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_le(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_le(out, d);
    detail::put_le(out, static_cast<std::uint8_t>(t.dtype));
    for (double v : t.values) {
      if (t.dtype == DType::F64)
        detail::put_le(out, v);
      else
        detail::put_le(out, static_cast<float>(v));
    }
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes);
  if (in.get_string(4, "magic") != "CARP") throw CheckpointError("magic", "not a CARP checkpoint");
  const auto version = in.get<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("version", "unsupported version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>("tensor_count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor[" + std::to_string(i) + "]";
    Tensor t;
    const auto name_len = in.get<std::uint32_t>(where + ".name_length");
    t.name = in.get_string(name_len, where + ".name");
    const auto rank = in.get<std::uint32_t>(where + ".rank");
    in.need(static_cast<std::size_t>(rank) * 8, where + ".dims");
    for (std::uint32_t r = 0; r < rank; ++r) t.dims.push_back(in.get<std::uint64_t>(where + ".dims"));
    const auto code = in.get<std::uint8_t>(where + ".dtype");
    if (code > 1) throw CheckpointError(where + ".dtype", "unknown dtype code " + std::to_string(code));
    t.dtype = static_cast<DType>(code);
    const std::uint64_t n = t.element_count();
    const std::size_t width = t.dtype == DType::F64 ? 8 : 4;
    if (n > bytes.size() / width) throw CheckpointError(where + ".payload", "payload larger than file");
    in.need(static_cast<std::size_t>(n) * width, where + ".payload");
    t.values.resize(static_cast<std::size_t>(n));
    for (auto& v : t.values)
      v = t.dtype == DType::F64 ? in.get<double>(where + ".payload")
                                : static_cast<double>(in.get<float>(where + ".payload"));
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw CheckpointError("trailer", "unexpected bytes after last tensor");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("file", "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("file", "cannot open " + path);
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                         std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Model and embedding-bank mappings.

inline Checkpoint to_checkpoint(const ModelParams& params, DType dtype = DType::F64) {
  Checkpoint ckpt;
  for (const auto& leaf : leaves(params)) {
    Tensor t;
    t.name = leaf.name;
    t.dims = leaf.name.ends_with(".bias") ? std::vector<std::uint64_t>{leaf.cols}
                                          : std::vector<std::uint64_t>{leaf.rows, leaf.cols};
    t.dtype = dtype;
    t.values.assign(leaf.values.begin(), leaf.values.end());
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

inline ModelParams model_from_checkpoint(const Checkpoint& ckpt) {
  auto get = [&ckpt](const std::string& name) -> const Tensor* { return ckpt.find(name); };
  auto read_stack = [&](const std::string& prefix) {
    std::vector<Dense> stack;
    for (std::size_t i = 0;; ++i) {
      const std::string base = prefix + "." + std::to_string(i);
      const Tensor* w = get(base + ".weight");
      const Tensor* b = get(base + ".bias");
      if (!w && !b) break;
      if (!w) throw CheckpointError(base + ".weight", "missing tensor");
      if (!b) throw CheckpointError(base + ".bias", "missing tensor");
      if (w->dims.size() != 2) throw CheckpointError(base + ".weight", "expected rank 2");
      if (b->dims.size() != 1 || b->dims[0] != w->dims[1])
        throw CheckpointError(base + ".bias", "shape does not match weight");
      stack.push_back({Matrix(w->dims[0], w->dims[1], w->values), b->values});
    }
    if (stack.empty()) throw CheckpointError(prefix + ".0.weight", "missing tensor");
    return stack;
  };
  ModelParams p;
  p.encoder = read_stack("encoder");
  p.projector = read_stack("projector");
  const Tensor* c = get("prototypes");
  if (!c) throw CheckpointError("prototypes", "missing tensor");
  if (c->dims.size() != 2) throw CheckpointError("prototypes", "expected rank 2");
  p.prototypes = Matrix(c->dims[0], c->dims[1], c->values);
  for (std::size_t i = 0; i + 1 < p.num_layers(); ++i)
    if (p.layer(i).out_dim() != p.layer(i + 1).in_dim())
      throw CheckpointError("layer_chain", "layer widths do not chain at layer " + std::to_string(i));
  if (p.prototypes.cols() != p.projector.back().out_dim())
    throw CheckpointError("prototypes", "width does not match projector output");
  return p;
}

inline Checkpoint to_checkpoint(const EmbeddingBank& bank) {
  Checkpoint ckpt;
  ckpt.tensors.push_back({"features", {bank.features.rows(), bank.features.cols()}, DType::F64,
                          bank.features.data()});
  Tensor labels{"labels", {bank.labels.size()}, DType::F64, {}};
  for (int l : bank.labels) labels.values.push_back(l);
  ckpt.tensors.push_back(std::move(labels));
  ckpt.tensors.push_back({"num_classes", {1}, DType::F64, {double(bank.num_classes)}});
  return ckpt;
}

inline EmbeddingBank bank_from_checkpoint(const Checkpoint& ckpt) {
  const Tensor* f = ckpt.find("features");
  const Tensor* l = ckpt.find("labels");
  const Tensor* k = ckpt.find("num_classes");
  if (!f || f->dims.size() != 2) throw CheckpointError("features", "missing or not rank 2");
  if (!l || l->dims.size() != 1 || l->dims[0] != f->dims[0])
    throw CheckpointError("labels", "missing or count differs from features");
  if (!k || k->values.size() != 1) throw CheckpointError("num_classes", "missing");
  EmbeddingBank bank;
  bank.features = Matrix(f->dims[0], f->dims[1], f->values);
  for (double v : l->values) bank.labels.push_back(static_cast<int>(v));
  bank.num_classes = static_cast<int>(k->values[0]);
  return bank;
}

}  // namespace carp
