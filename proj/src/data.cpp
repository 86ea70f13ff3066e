#include "dkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "dkd/rng.hpp"

namespace dkd {

// ---------------------------------------------------------------------------
// Dataset basics
// ---------------------------------------------------------------------------

Tensor Dataset::batch(const std::vector<int>& indices) const {
  if (indices.empty()) throw std::invalid_argument("Dataset::batch: empty index list");
  const std::int64_t ppi = pixels_per_image();
  std::vector<double> v(indices.size() * ppi);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || idx >= size())
      throw std::invalid_argument("Dataset::batch: index " + std::to_string(idx) +
                                  " out of range");
    std::copy_n(images.data() + idx * ppi, ppi, v.data() + i * ppi);
  }
  return Tensor::from(std::move(v), {static_cast<int>(indices.size()), channels, height, width});
}

Tensor Dataset::sample(int index) const { return batch({index}); }

void Dataset::validate() const {
  if (channels <= 0 || height <= 0 || width <= 0)
    throw std::invalid_argument("dataset '" + name + "': non-positive dimensions");
  if (images.size() != static_cast<std::size_t>(size()) * pixels_per_image())
    throw std::invalid_argument("dataset '" + name + "': image/label count mismatch");
  for (double p : images)
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("dataset '" + name + "': pixel outside [0,1]");
  for (int l : labels)
    if (l < 0 || l >= 10)
      throw std::invalid_argument("dataset '" + name + "': label outside [0,10)");
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void put_be32(std::ofstream& f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_file(images_path);
  if (img.size() < 16) throw std::runtime_error("'" + images_path + "': truncated IDX header");
  if (be32(img.data()) != 0x00000803u)
    throw std::runtime_error("'" + images_path + "': bad image magic");
  const std::uint32_t n = be32(img.data() + 4);
  const std::uint32_t rows = be32(img.data() + 8);
  const std::uint32_t cols = be32(img.data() + 12);
  if (rows != 28 || cols != 28)
    throw std::runtime_error("'" + images_path + "': expected 28x28 images, got " +
                             std::to_string(rows) + "x" + std::to_string(cols));
  if (img.size() != 16 + static_cast<std::size_t>(n) * rows * cols)
    throw std::runtime_error("'" + images_path + "': size does not match header count");

  const auto lab = read_file(labels_path);
  if (lab.size() < 8) throw std::runtime_error("'" + labels_path + "': truncated IDX header");
  if (be32(lab.data()) != 0x00000801u)
    throw std::runtime_error("'" + labels_path + "': bad label magic");
  if (be32(lab.data() + 4) != n)
    throw std::runtime_error("'" + labels_path + "': label count differs from image count");
  if (lab.size() != 8 + static_cast<std::size_t>(n))
    throw std::runtime_error("'" + labels_path + "': size does not match header count");

  Dataset ds;
  ds.name = "mnist";
  ds.channels = 1;
  ds.height = 28;
  ds.width = 28;
  ds.images.resize(static_cast<std::size_t>(n) * 784);
  for (std::size_t i = 0; i < ds.images.size(); ++i)
    ds.images[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const int l = lab[8 + i];
    if (l > 9) throw std::runtime_error("'" + labels_path + "': label > 9");
    ds.labels[i] = l;
  }
  return ds;
}

Dataset load_mnist_dir(const std::string& dir, const std::string& split) {
  if (split != "train" && split != "test")
    throw std::invalid_argument("load_mnist_dir: split must be 'train' or 'test'");
  const std::string stem = split == "train" ? "train" : "t10k";
  return load_mnist_idx(dir + "/" + stem + "-images-idx3-ubyte",
                        dir + "/" + stem + "-labels-idx1-ubyte");
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  if (ds.channels != 1 || ds.height != 28 || ds.width != 28)
    throw std::invalid_argument("save_idx: only single-channel 28x28 sets are representable");
  ds.validate();
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error("cannot write '" + images_path + "'");
  put_be32(fi, 0x00000803u);
  put_be32(fi, static_cast<std::uint32_t>(ds.size()));
  put_be32(fi, 28);
  put_be32(fi, 28);
  for (double p : ds.images) {
    const unsigned char b = static_cast<unsigned char>(std::lround(p * 255.0));
    fi.write(reinterpret_cast<const char*>(&b), 1);
  }
  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error("cannot write '" + labels_path + "'");
  put_be32(fl, 0x00000801u);
  put_be32(fl, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) {
    const unsigned char b = static_cast<unsigned char>(l);
    fl.write(reinterpret_cast<const char*>(&b), 1);
  }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

Dataset load_cifar10_binary(const std::vector<std::string>& batch_paths) {
  if (batch_paths.empty()) throw std::invalid_argument("load_cifar10_binary: no batch files");
  constexpr std::size_t kRecord = 3073;  // label byte + 3*1024 pixels
  Dataset ds;
  ds.name = "cifar10";
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  for (const auto& path : batch_paths) {
    const auto buf = read_file(path);
    if (buf.empty() || buf.size() % kRecord != 0)
      throw std::runtime_error("'" + path + "': size is not a multiple of the 3073-byte record");
    const std::size_t n = buf.size() / kRecord;
    for (std::size_t r = 0; r < n; ++r) {
      const unsigned char* rec = buf.data() + r * kRecord;
      if (rec[0] > 9) throw std::runtime_error("'" + path + "': label > 9");
      ds.labels.push_back(rec[0]);
      for (std::size_t p = 0; p < 3072; ++p)
        ds.images.push_back(static_cast<double>(rec[1 + p]) / 255.0);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

Dataset make_synthetic_blobs(int classes, int side, int per_class, std::uint64_t seed,
                             double spread, double sigma) {
  if (classes < 2 || classes > 10)
    throw std::invalid_argument("make_synthetic_blobs: classes must be in [2,10]");
  if (side <= 0 || per_class <= 0)
    throw std::invalid_argument("make_synthetic_blobs: non-positive size");
  Rng rng(seed);
  const int dim = side * side;
  // One center per class, spread around mid-gray.
  std::vector<std::vector<double>> centers(classes, std::vector<double>(dim));
  for (auto& c : centers)
    for (auto& v : c) v = 0.5 + spread * (rng.uniform() - 0.5);
  Dataset ds;
  ds.name = "blobs";
  ds.channels = 1;
  ds.height = side;
  ds.width = side;
  // Rows interleave the classes round-robin, so any prefix or tail slice of
  // the set stays class-balanced.
  for (int i = 0; i < per_class; ++i) {
    for (int cls = 0; cls < classes; ++cls) {
      for (int p = 0; p < dim; ++p)
        ds.images.push_back(std::clamp(centers[cls][p] + sigma * rng.normal(), 0.0, 1.0));
      ds.labels.push_back(cls);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Surrogate digits
// ---------------------------------------------------------------------------

namespace {

struct P {
  double x, y;
};
using Stroke = std::vector<P>;

// Sampled circular arc; angles in degrees, 0 = +x, positive = up (y grows
// downward on the canvas, hence the minus).
Stroke arc(double cx, double cy, double r, double a0, double a1, int n = 14) {
  Stroke s;
  for (int i = 0; i <= n; ++i) {
    const double t = (a0 + (a1 - a0) * i / n) * 3.14159265358979323846 / 180.0;
    s.push_back({cx + r * std::cos(t), cy - r * std::sin(t)});
  }
  return s;
}

Stroke line(P a, P b) { return {a, b}; }

/// Per-class stroke skeletons in a [0,1]^2 glyph box (y down).
const std::vector<std::vector<Stroke>>& digit_skeletons() {
  static const std::vector<std::vector<Stroke>> sk = [] {
    std::vector<std::vector<Stroke>> d(10);
    d[0] = {arc(0.50, 0.50, 0.34, 90, 450, 24)};
    d[1] = {line({0.50, 0.08}, {0.50, 0.92}), line({0.50, 0.08}, {0.33, 0.28})};
    d[2] = {arc(0.50, 0.32, 0.24, 165, -15), line({0.73, 0.38}, {0.26, 0.90}),
            line({0.26, 0.90}, {0.78, 0.90})};
    d[3] = {arc(0.47, 0.30, 0.21, 150, -80), arc(0.47, 0.70, 0.24, 80, -150)};
    d[4] = {line({0.60, 0.08}, {0.20, 0.62}), line({0.20, 0.62}, {0.82, 0.62}),
            line({0.64, 0.34}, {0.64, 0.92})};
    d[5] = {line({0.74, 0.10}, {0.30, 0.10}), line({0.30, 0.10}, {0.27, 0.46}),
            arc(0.47, 0.66, 0.24, 135, -125)};
    d[6] = {arc(0.58, 0.30, 0.29, 60, 175), line({0.30, 0.35}, {0.29, 0.66}),
            arc(0.50, 0.68, 0.22, 90, 450, 20)};
    d[7] = {line({0.22, 0.10}, {0.78, 0.10}), line({0.78, 0.10}, {0.38, 0.92})};
    d[8] = {arc(0.50, 0.30, 0.19, 90, 450, 18), arc(0.50, 0.70, 0.23, 90, 450, 20)};
    d[9] = {arc(0.50, 0.32, 0.22, 90, 450, 18), line({0.71, 0.38}, {0.62, 0.92})};
    return d;
  }();
  return sk;
}

double dist_to_segment(double px, double py, P a, P b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((px - a.x) * vx + (py - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Dataset make_digits28(int n, std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("make_digits28: n must be positive");
  Rng rng(seed);
  Dataset ds;
  ds.name = "digits28";
  ds.channels = 1;
  ds.height = 28;
  ds.width = 28;
  ds.images.reserve(static_cast<std::size_t>(n) * 784);
  ds.labels.reserve(n);

  for (int i = 0; i < n; ++i) {
    const int cls = i % 10;
    // Pose and style draws (fixed count per sample keeps the stream aligned).
    const double rot = rng.uniform(-0.20, 0.20);
    const double sx = rng.uniform(0.80, 1.06), sy = rng.uniform(0.80, 1.06);
    const double shear = rng.uniform(-0.14, 0.14);
    const double tx = rng.uniform(-1.8, 1.8), ty = rng.uniform(-1.8, 1.8);
    // Stroke texture mirrors MNIST scans: wide near-saturated ink, a sharp
    // anti-aliasing ramp, and a quiet background. Soft thin strokes would put
    // the class evidence into small pixel differences and make the set far
    // more perturbation-brittle than the handwriting it stands in for.
    const double thick = rng.uniform(1.7, 2.8);
    const double ink = rng.uniform(0.88, 1.0);
    const double noise = rng.uniform(0.003, 0.015);
    const bool blur = rng.uniform() < 0.5;

    const double cr = std::cos(rot), sr = std::sin(rot);
    auto map = [&](P p) {
      double gx = (p.x - 0.5) * sx, gy = (p.y - 0.5) * sy;
      gx += shear * gy;
      const double rxp = cr * gx - sr * gy, ryp = sr * gx + cr * gy;
      return P{rxp * 21.0 + 13.5 + tx, ryp * 21.0 + 13.5 + ty};
    };
    std::vector<std::pair<P, P>> segs;
    for (const auto& stroke : digit_skeletons()[cls])
      for (std::size_t k = 0; k + 1 < stroke.size(); ++k)
        segs.emplace_back(map(stroke[k]), map(stroke[k + 1]));

    double img[784];
    for (int py = 0; py < 28; ++py)
      for (int px = 0; px < 28; ++px) {
        double dmin = 1e9;
        for (const auto& [a, b] : segs)
          dmin = std::min(dmin, dist_to_segment(px + 0.5, py + 0.5, a, b));
        // saturated core with a half-pixel anti-aliasing ramp
        img[py * 28 + px] = ink * std::clamp((thick * 0.5 + 0.25 - dmin) / 0.5, 0.0, 1.0);
      }
    if (blur) {
      double tmp[784];
      for (int py = 0; py < 28; ++py)
        for (int px = 0; px < 28; ++px) {
          double acc = 0.0, wsum = 0.0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int qy = py + dy, qx = px + dx;
              if (qy < 0 || qy >= 28 || qx < 0 || qx >= 28) continue;
              const double w = (dx == 0 ? 2.0 : 1.0) * (dy == 0 ? 2.0 : 1.0);
              acc += w * img[qy * 28 + qx];
              wsum += w;
            }
          tmp[py * 28 + px] = acc / wsum;
        }
      std::copy(tmp, tmp + 784, img);
    }
    for (int p = 0; p < 784; ++p)
      ds.images.push_back(std::clamp(img[p] + noise * rng.normal(), 0.0, 1.0));
    ds.labels.push_back(cls);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Subsetting and named resolution
// ---------------------------------------------------------------------------

Dataset subset(const Dataset& ds, int n, std::uint64_t seed) {
  if (n <= 0 || n > ds.size())
    throw std::invalid_argument("subset: n=" + std::to_string(n) + " outside [1," +
                                std::to_string(ds.size()) + "]");
  std::vector<int> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  Dataset out;
  out.name = ds.name;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  const std::int64_t ppi = ds.pixels_per_image();
  for (int i = 0; i < n; ++i) {
    out.labels.push_back(ds.labels[idx[i]]);
    out.images.insert(out.images.end(), ds.images.begin() + idx[i] * ppi,
                      ds.images.begin() + (idx[i] + 1) * ppi);
  }
  return out;
}

Dataset load_dataset(const std::string& name, const std::string& split,
                     const std::string& data_dir) {
  if (split != "train" && split != "test")
    throw std::invalid_argument("load_dataset: split must be 'train' or 'test'");
  std::string dir = data_dir;
  if (dir.empty()) {
    const char* env = std::getenv("DKD_DATA_DIR");
    if (env) dir = env;
  }
  if (name == "mnist") {
    if (dir.empty())
      throw std::runtime_error("mnist: set DKD_DATA_DIR (or --data-dir) to the IDX directory");
    return load_mnist_dir(dir + "/mnist", split);
  }
  if (name == "cifar10") {
    if (dir.empty())
      throw std::runtime_error("cifar10: set DKD_DATA_DIR (or --data-dir) to the batches directory");
    const std::string base = dir + "/cifar-10-batches-bin/";
    if (split == "train") {
      std::vector<std::string> files;
      for (int b = 1; b <= 5; ++b) files.push_back(base + "data_batch_" + std::to_string(b) + ".bin");
      return load_cifar10_binary(files);
    }
    return load_cifar10_binary({base + "test_batch.bin"});
  }
  if (name == "digits28") {
    // Fixed generator seeds per split; sizes match the usual subset scale.
    return split == "train" ? make_digits28(12000, 77) : make_digits28(2000, 78);
  }
  if (name == "blobs") {
    // Both splits slice one pool so they share the class centers; rows
    // interleave classes, so the slices stay balanced.
    const Dataset pool = make_synthetic_blobs(10, 8, 80, 31);
    const int cut = 600;
    const std::int64_t px = pool.pixels_per_image();
    const int lo = split == "train" ? 0 : cut;
    const int hi = split == "train" ? cut : pool.size();
    Dataset out;
    out.name = pool.name;
    out.channels = pool.channels;
    out.height = pool.height;
    out.width = pool.width;
    out.images.assign(pool.images.begin() + lo * px, pool.images.begin() + hi * px);
    out.labels.assign(pool.labels.begin() + lo, pool.labels.begin() + hi);
    return out;
  }
  throw std::invalid_argument("unknown dataset '" + name + "'");
}

}  // namespace dkd
