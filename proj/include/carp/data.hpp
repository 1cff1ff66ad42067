#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "carp/numerics.hpp"

namespace carp {

/// Samples plus labels. Labels exist for evaluation only; training takes
/// the sample matrix alone.
struct Dataset {
  Matrix samples;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return samples.rows(); }
  std::size_t in_dim() const { return samples.cols(); }
};

struct ViewConfig {
  double noise_sigma = 0.5;
  double mask_fraction = 0.25;

  void validate() const {
    require(noise_sigma >= 0.0, "ViewConfig: noise_sigma must be >= 0");
    require(mask_fraction >= 0.0 && mask_fraction < 1.0,
            "ViewConfig: mask_fraction must be in [0, 1)");
  }
};

/// Gaussian blobs around class centers placed on a radius-4 hypersphere.
inline Dataset make_blobs(Rng& rng, std::size_t num_classes, std::size_t per_class,
                          std::size_t in_dim, double spread) {
  require(num_classes >= 1 && per_class >= 1 && in_dim >= 1, "make_blobs: counts must be >= 1");
  require(spread >= 0.0, "make_blobs: spread must be >= 0");
  constexpr double kRadius = 4.0;
  Matrix centers(num_classes, in_dim);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto row = centers.row(c);
    double n = 0.0;
    while (n == 0.0) {
      for (double& v : row) v = rng.gaussian();
      n = norm2(row);
    }
    for (double& v : row) v *= kRadius / n;
  }
  Dataset d;
  d.num_classes = static_cast<int>(num_classes);
  d.samples = Matrix(num_classes * per_class, in_dim);
  d.labels.reserve(num_classes * per_class);
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t s = 0; s < per_class; ++s) {
      auto row = d.samples.row(d.labels.size());
      for (std::size_t f = 0; f < in_dim; ++f) row[f] = centers(c, f) + spread * rng.gaussian();
      d.labels.push_back(static_cast<int>(c));
    }
  return d;
}

/// One stochastic view: additive Gaussian noise, then floor(mask_fraction * dim)
/// coordinates zeroed.
inline std::vector<double> make_view(Rng& rng, std::span<const double> x, const ViewConfig& v) {
  std::vector<double> out(x.begin(), x.end());
  if (v.noise_sigma > 0.0)
    for (double& e : out) e += v.noise_sigma * rng.gaussian();
  const auto masked = static_cast<std::size_t>(
      std::floor(v.mask_fraction * static_cast<double>(out.size())));
  if (masked > 0)
    for (std::size_t idx : sample_without_replacement(rng, out.size(), masked)) out[idx] = 0.0;
  return out;
}

inline std::pair<std::vector<double>, std::vector<double>> make_views(
    Rng& rng, std::span<const double> x, const ViewConfig& v) {
  v.validate();
  auto first = make_view(rng, x, v);
  auto second = make_view(rng, x, v);
  return {std::move(first), std::move(second)};
}

/// Two views of every row of a batch.
inline std::pair<Matrix, Matrix> make_batch_views(Rng& rng, const Matrix& batch,
                                                  const ViewConfig& v) {
  v.validate();
  Matrix a(batch.rows(), batch.cols()), b(batch.rows(), batch.cols());
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    auto [va, vb] = make_views(rng, batch.row(i), v);
    std::copy(va.begin(), va.end(), a.row(i).begin());
    std::copy(vb.begin(), vb.end(), b.row(i).begin());
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// IDX files: big-endian u32 magic, big-endian u32 dimension sizes, u8 payload.

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

class IdxError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Truncated, CountMismatch };

  IdxError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                               const std::string& path) {
  if (bytes.size() < offset + 4)
    throw IdxError(IdxError::Kind::Truncated, path + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void append_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxError::Kind::Io, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

/// Reads an image/label IDX pair. Pixels are scaled by 1/255 and flattened.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto images = detail::read_file_bytes(images_path);
  const auto labels = detail::read_file_bytes(labels_path);

  const std::uint32_t image_magic = detail::read_be32(images, 0, images_path);
  if (image_magic != kIdxImagesMagic)
    throw IdxError(IdxError::Kind::BadMagic, images_path + ": bad image magic");
  const std::uint32_t label_magic = detail::read_be32(labels, 0, labels_path);
  if (label_magic != kIdxLabelsMagic)
    throw IdxError(IdxError::Kind::BadMagic, labels_path + ": bad label magic");

  const std::size_t count = detail::read_be32(images, 4, images_path);
  const std::size_t rows = detail::read_be32(images, 8, images_path);
  const std::size_t cols = detail::read_be32(images, 12, images_path);
  const std::size_t label_count = detail::read_be32(labels, 4, labels_path);

  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + count * pixels)
    throw IdxError(IdxError::Kind::Truncated, images_path + ": truncated pixel data");
  if (labels.size() < 8 + label_count)
    throw IdxError(IdxError::Kind::Truncated, labels_path + ": truncated label data");
  if (count != label_count)
    throw IdxError(IdxError::Kind::CountMismatch,
                   "image count " + std::to_string(count) + " != label count " +
                       std::to_string(label_count));

  Dataset d;
  d.samples = Matrix(count, pixels);
  for (std::size_t i = 0; i < count * pixels; ++i)
    d.samples.data()[i] = static_cast<double>(images[16 + i]) / 255.0;
  d.labels.resize(count);
  int max_label = -1;
  for (std::size_t i = 0; i < count; ++i) {
    d.labels[i] = labels[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.num_classes = max_label + 1;
  return d;
}

/// Writes an image/label IDX pair (used for fixtures and dataset export).
inline void save_idx(const std::string& images_path, const std::string& labels_path,
                     std::size_t rows, std::size_t cols,
                     const std::vector<std::vector<unsigned char>>& images,
                     const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> img;
  detail::append_be32(img, kIdxImagesMagic);
  detail::append_be32(img, static_cast<std::uint32_t>(images.size()));
  detail::append_be32(img, static_cast<std::uint32_t>(rows));
  detail::append_be32(img, static_cast<std::uint32_t>(cols));
  for (const auto& image : images) {
    require(image.size() == rows * cols, "save_idx: image size != rows*cols");
    img.insert(img.end(), image.begin(), image.end());
  }
  std::vector<unsigned char> lab;
  detail::append_be32(lab, kIdxLabelsMagic);
  detail::append_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.insert(lab.end(), labels.begin(), labels.end());
  detail::write_file_bytes(images_path, img);
  detail::write_file_bytes(labels_path, lab);
}

}  // namespace carp
