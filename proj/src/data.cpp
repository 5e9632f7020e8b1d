#include "cbnn/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "cbnn/errors.hpp"
#include "cbnn/rng.hpp"

namespace cbnn {

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::size_t kCifarPixels = 3 * 32 * 32;

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::uint8_t> read_plain(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::uint8_t> read_gzip(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw DataError("cannot open " + path);
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> buf(1 << 16);
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      gzclose(f);
      throw DataError("gzip decode failed for " + path);
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  return ends_with(path, ".gz") ? read_gzip(path) : read_plain(path);
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::string& path) {
  if (b.size() < at + 4) throw DimensionMismatch(path + ": header truncated");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t stride = shape.size();
  Tensor out({indices.size(), shape.channels, shape.height, shape.width});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw IndexOutOfRange("dataset index " + std::to_string(indices[i]));
    std::copy_n(images.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * stride), stride,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw IndexOutOfRange("dataset index " + std::to_string(indices[i]));
    out[i] = labels[indices[i]];
  }
  return out;
}

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (be32(img, 0, images_path) != kIdxImages) throw BadMagic(images_path + ": not an IDX image file");
  if (be32(lab, 0, labels_path) != kIdxLabels) throw BadMagic(labels_path + ": not an IDX label file");
  const std::uint32_t count = be32(img, 4, images_path);
  const std::uint32_t rows = be32(img, 8, images_path);
  const std::uint32_t cols = be32(img, 12, images_path);
  const std::uint32_t label_count = be32(lab, 4, labels_path);
  if (rows == 0 || cols == 0) throw DimensionMismatch(images_path + ": zero image dimension");
  const std::size_t pixels = std::size_t{count} * rows * cols;
  if (img.size() != 16 + pixels) {
    throw DimensionMismatch(images_path + ": payload is " + std::to_string(img.size() - 16) + " bytes, header says " +
                            std::to_string(pixels));
  }
  if (lab.size() != 8 + std::size_t{label_count}) throw DimensionMismatch(labels_path + ": payload size mismatch");
  if (label_count != count) {
    throw CountMismatch(std::to_string(count) + " images but " + std::to_string(label_count) + " labels");
  }

  Dataset d;
  d.shape = {1, rows, cols};
  d.class_count = 10;
  d.images = Tensor({count, 1, rows, cols});
  for (std::size_t i = 0; i < pixels; ++i) d.images.data[i] = img[16 + i] / 255.0;
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int y = lab[8 + i];
    if (y >= 10) throw DataError(labels_path + ": label " + std::to_string(y) + " out of range");
    d.labels[i] = y;
  }
  return d;
}

Dataset load_cifar10_bin(const std::vector<std::string>& batch_paths) {
  constexpr std::size_t record = 1 + kCifarPixels;
  std::vector<std::vector<std::uint8_t>> files;
  std::size_t count = 0;
  for (const auto& p : batch_paths) {
    files.push_back(read_file(p));
    if (files.back().size() % record != 0) {
      throw TruncatedRecord(p + ": " + std::to_string(files.back().size()) + " bytes is not a whole number of records");
    }
    count += files.back().size() / record;
  }
  Dataset d;
  d.shape = {3, 32, 32};
  d.class_count = 10;
  d.images = Tensor({count, 3, 32, 32});
  d.labels.reserve(count);
  std::size_t at = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const auto& bytes = files[f];
    for (std::size_t r = 0; r < bytes.size(); r += record) {
      const int y = bytes[r];
      if (y >= 10) throw DataError(batch_paths[f] + ": label " + std::to_string(y) + " out of range");
      d.labels.push_back(y);
      for (std::size_t i = 0; i < kCifarPixels; ++i) d.images.data[at * kCifarPixels + i] = bytes[r + 1 + i] / 255.0;
      ++at;
    }
  }
  return d;
}

Dataset synthetic_blobs(std::size_t classes, std::size_t per_class, std::size_t dims, double separation,
                        std::uint64_t seed) {
  if (classes == 0 || per_class == 0 || dims == 0) throw DataError("synthetic_blobs: counts must be positive");
  if (classes > dims) throw DataError("synthetic_blobs: need at least as many dimensions as classes");
  // Class c sits on axis c; neighbouring centres are `separation` apart at unit noise.
  const double offset = separation / std::sqrt(2.0);
  const std::size_t count = classes * per_class;
  Dataset d;
  d.shape = {dims, 1, 1};
  d.class_count = classes;
  d.images = Tensor({count, dims, 1, 1});
  d.labels.resize(count);
  KeyedRng rng(seed, 0, Stream::synthetic, 0);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % classes;
    d.labels[i] = static_cast<int>(c);
    for (std::size_t k = 0; k < dims; ++k) {
      d.images.data[i * dims + k] = rng.normal() + (k == c ? offset : 0.0);
    }
  }
  return d;
}

std::vector<std::vector<std::size_t>> minibatches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                  std::uint64_t epoch) {
  if (batch_size == 0) throw Error("minibatches: batch size must be positive");
  std::vector<std::size_t> perm(count);
  for (std::size_t i = 0; i < count; ++i) perm[i] = i;
  KeyedRng rng(seed, 0, Stream::shuffle, epoch);
  for (std::size_t i = count; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < count; b += batch_size) {
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(count, b + batch_size)));
  }
  return out;
}

namespace {

Dataset take(const Dataset& data, const std::vector<std::size_t>& idx) {
  Dataset d;
  d.shape = data.shape;
  d.class_count = data.class_count;
  d.images = data.gather(idx);
  d.labels = data.gather_labels(idx);
  return d;
}

}  // namespace

Dataset first_k_per_class(const Dataset& data, std::size_t k) {
  std::vector<std::size_t> taken(data.class_count, 0);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& t = taken[static_cast<std::size_t>(data.labels[i])];
    if (t < k) {
      ++t;
      idx.push_back(i);
    }
  }
  return take(data, idx);
}

Dataset slice(const Dataset& data, std::size_t begin, std::size_t end) {
  end = std::min(end, data.size());
  if (begin > end) throw IndexOutOfRange("slice: begin past end");
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return take(data, idx);
}

std::vector<std::uint8_t> encode_idx_images(std::span<const std::uint8_t> pixels, std::uint32_t count,
                                            std::uint32_t rows, std::uint32_t cols) {
  if (pixels.size() != std::size_t{count} * rows * cols) throw DimensionMismatch("encode_idx_images: size mismatch");
  std::vector<std::uint8_t> out;
  out.reserve(16 + pixels.size());
  put_be32(out, kIdxImages);
  put_be32(out, count);
  put_be32(out, rows);
  put_be32(out, cols);
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  put_be32(out, kIdxLabels);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

}  // namespace cbnn
