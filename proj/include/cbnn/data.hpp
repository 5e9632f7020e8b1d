#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cbnn/tensor.hpp"

namespace cbnn {

// Images normalized to [0, 1], stored as (count, channels, height, width).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t class_count = 0;
  Shape3 shape;

  std::size_t size() const { return labels.size(); }
  // Copies the listed examples into a batch tensor and label vector.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
};

// Big-endian IDX files (magic 0x00000803 for images, 0x00000801 for labels).
// Paths ending in ".gz" are decompressed on the fly.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes (R, G, B planes).
Dataset load_cifar10_bin(const std::vector<std::string>& batch_paths);

Dataset synthetic_blobs(std::size_t classes, std::size_t per_class, std::size_t dims, double separation,
                        std::uint64_t seed);

// Shuffled partition of [0, count) into batches; the final short batch is kept.
std::vector<std::vector<std::size_t>> minibatches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                  std::uint64_t epoch);

// First k examples of each class, in original order.
Dataset first_k_per_class(const Dataset& data, std::size_t k);
// Examples [begin, end).
Dataset slice(const Dataset& data, std::size_t begin, std::size_t end);

// Writers for building fixtures and desk-scale subsets.
std::vector<std::uint8_t> encode_idx_images(std::span<const std::uint8_t> pixels, std::uint32_t count,
                                            std::uint32_t rows, std::uint32_t cols);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);

}  // namespace cbnn
