#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dkd/tensor.hpp"

namespace dkd {

/// An in-memory labeled image set. Pixels are doubles in [0,1], laid out
/// [n, channels, height, width]; labels are class ids in [0, 10).
struct Dataset {
  std::string name;
  int channels = 0, height = 0, width = 0;
  std::vector<double> images;
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  std::int64_t pixels_per_image() const {
    return static_cast<std::int64_t>(channels) * height * width;
  }
  /// Gather rows into a [B,C,H,W] tensor (indices validated).
  Tensor batch(const std::vector<int>& indices) const;
  /// One sample as [1,C,H,W].
  Tensor sample(int index) const;
  /// Internal consistency: sizes match, pixels in [0,1], labels in range.
  void validate() const;
};

/// IDX (big-endian) loaders/writer. The image file must carry magic 0x803
/// with 28x28 dimensions; the label file magic 0x801 with a matching count.
/// Short or oversized files, bad magics, and count mismatches all throw.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);
/// Standard file names under `dir`: {train,t10k}-{images-idx3,labels-idx1}-ubyte.
Dataset load_mnist_dir(const std::string& dir, const std::string& split);
/// Writes the standard IDX pair (pixels quantized to uint8 by round(v*255)).
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

/// CIFAR-10 binary batches: 3073-byte records (label + RGB planes). File
/// sizes must be exact multiples of the record stride; labels <= 9.
Dataset load_cifar10_binary(const std::vector<std::string>& batch_paths);

/// Deterministic Gaussian class blobs, clipped to [0,1], one blob center per
/// class, rendered as [1, side, side] images. Bigger `spread` separates the
/// class centers more; `sigma` is per-pixel noise around the center. Rows
/// interleave the classes round-robin, so slices stay balanced.
Dataset make_synthetic_blobs(int classes, int side, int per_class, std::uint64_t seed,
                             double spread = 0.5, double sigma = 0.08);

/// Deterministic 28x28 handwritten-digit surrogate: per-class stroke
/// skeletons rendered with random affine pose, stroke thickness, intensity,
/// blur, and pixel noise. Balanced labels. Same (n, seed) => same bytes.
Dataset make_digits28(int n, std::uint64_t seed);

/// First `n` entries of a deterministic seed-keyed shuffle of `ds`.
Dataset subset(const Dataset& ds, int n, std::uint64_t seed);

/// Data-directory resolution for named datasets ("mnist", "cifar10",
/// "digits28", "blobs"). MNIST/CIFAR read from `data_dir` (or $DKD_DATA_DIR
/// when empty); the synthetic sets generate in memory. split is "train" or
/// "test".
Dataset load_dataset(const std::string& name, const std::string& split,
                     const std::string& data_dir = "");

}  // namespace dkd
