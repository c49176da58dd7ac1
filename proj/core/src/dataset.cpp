#include "fedbap/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>

#include "fedbap/error.hpp"

namespace fedbap {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string(), path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size()) throw Error(ErrorKind::kFormat, what + ": truncated header", what);
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace

Dataset::Dataset(Tensor images, std::vector<int> labels, int num_classes)
    : images_(std::move(images)), labels_(std::move(labels)), num_classes_(num_classes) {
  if (images_.rank() != 4) {
    throw Error(ErrorKind::kShapeMismatch, "dataset: images must be [N,H,W,C], got " + shape_string(images_.shape()),
                "dataset");
  }
  if (images_.dim(0) != labels_.size()) {
    throw Error(ErrorKind::kShapeMismatch,
                "dataset: " + std::to_string(images_.dim(0)) + " images but " + std::to_string(labels_.size()) +
                    " labels",
                "dataset");
  }
  if (num_classes_ <= 0) throw Error(ErrorKind::kInvalidArgument, "dataset: num_classes must be positive", "dataset");
  for (int y : labels_) {
    if (y < 0 || y >= num_classes_) {
      throw Error(ErrorKind::kOutOfRange, "dataset: label " + std::to_string(y) + " outside class range", "dataset");
    }
  }
  for (double v : images_.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorKind::kOutOfRange, "dataset: pixel outside [0,1]", "dataset");
  }
  shape_ = {images_.dim(1), images_.dim(2), images_.dim(3)};
}

void Dataset::set_label(std::size_t i, int label) {
  if (label < 0 || label >= num_classes_) {
    throw Error(ErrorKind::kOutOfRange, "dataset: label " + std::to_string(label) + " outside class range", "label");
  }
  labels_.at(i) = label;
}

std::span<const double> Dataset::image(std::size_t i) const {
  return images_.data().subspan(i * sample_dim(), sample_dim());
}

std::span<double> Dataset::mutable_image(std::size_t i) {
  return images_.data().subspan(i * sample_dim(), sample_dim());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  const std::size_t d = sample_dim();
  std::vector<double> data(indices.size() * d);
  std::vector<int> labels(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto img = image(indices[k]);
    std::copy(img.begin(), img.end(), data.begin() + k * d);
    labels[k] = labels_.at(indices[k]);
  }
  return Dataset(Tensor({indices.size(), shape_.height, shape_.width, shape_.channels}, std::move(data)),
                 std::move(labels), num_classes_);
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t d = sample_dim();
  Tensor batch({indices.size(), d}, 0.0);
  auto out = batch.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto img = image(indices[k]);
    std::copy(img.begin(), img.end(), out.begin() + k * d);
  }
  return batch;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) out[k] = labels_.at(indices[k]);
  return out;
}

// -------------------------------------------------------------------------

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 int num_classes) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  if (const auto magic = read_be32(img, 0, "idx_images"); magic != kIdxImagesMagic) {
    throw Error(ErrorKind::kFormat, "idx_images: bad magic " + std::to_string(magic), "idx_images");
  }
  if (const auto magic = read_be32(lab, 0, "idx_labels"); magic != kIdxLabelsMagic) {
    throw Error(ErrorKind::kFormat, "idx_labels: bad magic " + std::to_string(magic), "idx_labels");
  }
  const std::size_t n = read_be32(img, 4, "idx_images");
  const std::size_t rows = read_be32(img, 8, "idx_images");
  const std::size_t cols = read_be32(img, 12, "idx_images");
  const std::size_t n_labels = read_be32(lab, 4, "idx_labels");
  if (n != n_labels) {
    throw Error(ErrorKind::kFormat,
                "idx: " + std::to_string(n) + " images but " + std::to_string(n_labels) + " labels", "idx");
  }
  const std::size_t pixels = n * rows * cols;
  if (img.size() != 16 + pixels) {
    throw Error(ErrorKind::kFormat, "idx_images: payload size does not match dimensions", "idx_images");
  }
  if (lab.size() != 8 + n) {
    throw Error(ErrorKind::kFormat, "idx_labels: payload size does not match count", "idx_labels");
  }

  std::vector<double> data(pixels);
  for (std::size_t i = 0; i < pixels; ++i) data[i] = static_cast<double>(img[16 + i]) / 255.0;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = lab[8 + i];
  return Dataset(Tensor({n, rows, cols, 1}, std::move(data)), std::move(labels), num_classes);
}

// -------------------------------------------------------------------------

BlobCenters make_blob_centers(int num_classes, ImageShape shape, double contrast, Rng& rng, int margin) {
  if (margin < 0) throw Error(ErrorKind::kInvalidArgument, "synth_blobs: margin must be >= 0", "margin");
  BlobCenters out{{}, shape};
  out.centers.reserve(static_cast<std::size_t>(num_classes));
  const auto m = static_cast<std::size_t>(margin);
  for (int c = 0; c < num_classes; ++c) {
    Tensor center({shape.height, shape.width, shape.channels}, 0.0);
    auto v = center.data();
    for (std::size_t r = 0; r < shape.height; ++r) {
      for (std::size_t col = 0; col < shape.width; ++col) {
        const bool frame = r < m || col < m || r + m >= shape.height || col + m >= shape.width;
        for (std::size_t ch = 0; ch < shape.channels; ++ch) {
          const double u = uniform01(rng);  // drawn even in the frame so margin 0 keeps the same stream
          v[(r * shape.width + col) * shape.channels + ch] =
              frame ? 0.0 : std::clamp(0.5 + contrast * (u - 0.5), 0.0, 1.0);
        }
      }
    }
    out.centers.push_back(std::move(center));
  }
  return out;
}

Dataset sample_blobs(const BlobCenters& centers, std::size_t n_per_class, double spread, Rng& rng) {
  if (!(spread >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "synth_blobs: spread must be >= 0", "spread");
  const std::size_t classes = centers.centers.size();
  const std::size_t d = centers.shape.size();
  const std::size_t n = n_per_class * classes;
  std::vector<double> data(n * d);
  std::vector<int> labels(n);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t row = 0;
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t c = 0; c < classes; ++c, ++row) {
      const auto center = centers.centers[c].data();
      for (std::size_t j = 0; j < d; ++j) {
        const double v = spread > 0.0 ? center[j] + spread * noise(rng) : center[j];
        data[row * d + j] = std::clamp(v, 0.0, 1.0);
      }
      labels[row] = static_cast<int>(c);
    }
  }
  return Dataset(Tensor({n, centers.shape.height, centers.shape.width, centers.shape.channels}, std::move(data)),
                 std::move(labels), static_cast<int>(classes));
}

Dataset synth_blobs(std::size_t n_per_class, int num_classes, ImageShape shape, double spread, Rng& rng,
                    double contrast, int margin) {
  const BlobCenters centers = make_blob_centers(num_classes, shape, contrast, rng, margin);
  return sample_blobs(centers, n_per_class, spread, rng);
}

// -------------------------------------------------------------------------

std::size_t uniform_index(std::size_t bound, Rng& rng) {
  // Rejection sampling keeps the draw unbiased and library-independent.
  const std::uint64_t b = bound;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % b;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return static_cast<std::size_t>(r % b);
}

void shuffle_indices(std::vector<std::size_t>& indices, Rng& rng) {
  for (std::size_t i = indices.size(); i > 1; --i) {
    std::swap(indices[i - 1], indices[uniform_index(i, rng)]);
  }
}

Partition dirichlet_partition(const Dataset& dataset, std::size_t n_clients, double concentration, Rng& rng,
                              int max_retries) {
  if (n_clients == 0) throw Error(ErrorKind::kInvalidArgument, "dirichlet_partition: n_clients must be >= 1", "n_clients");
  if (!(concentration > 0.0)) {
    throw Error(ErrorKind::kInvalidArgument, "dirichlet_partition: concentration must be positive", "dirichlet_h");
  }

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(dataset.num_classes()));
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class[static_cast<std::size_t>(dataset.label(i))].push_back(i);

  std::gamma_distribution<double> gamma(concentration, 1.0);
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    Partition part{std::vector<std::vector<std::size_t>>(n_clients)};
    for (const auto& members : by_class) {
      if (members.empty()) continue;
      std::vector<std::size_t> order = members;
      shuffle_indices(order, rng);

      std::vector<double> weights(n_clients);
      double total = 0.0;
      for (double& w : weights) total += (w = gamma(rng));
      if (!(total > 0.0)) {
        // All draws underflowed; fall back to a single uniformly chosen owner.
        weights.assign(n_clients, 0.0);
        weights[uniform_index(n_clients, rng)] = 1.0;
        total = 1.0;
      }

      // Cumulative proportions -> split points.
      double cumulative = 0.0;
      std::size_t start = 0;
      for (std::size_t k = 0; k < n_clients; ++k) {
        cumulative += weights[k] / total;
        std::size_t stop = k + 1 == n_clients
                               ? order.size()
                               : std::min(order.size(), static_cast<std::size_t>(std::llround(
                                                            cumulative * static_cast<double>(order.size()))));
        stop = std::max(stop, start);
        part.client_indices[k].insert(part.client_indices[k].end(), order.begin() + static_cast<std::ptrdiff_t>(start),
                                      order.begin() + static_cast<std::ptrdiff_t>(stop));
        start = stop;
      }
    }
    const bool all_nonempty = std::all_of(part.client_indices.begin(), part.client_indices.end(),
                                          [](const auto& v) { return !v.empty(); });
    if (all_nonempty) {
      for (auto& v : part.client_indices) std::sort(v.begin(), v.end());
      return part;
    }
  }
  throw Error(ErrorKind::kRetryExhausted,
              "dirichlet_partition: could not give every client a sample after " + std::to_string(max_retries) +
                  " draws",
              "dirichlet_h");
}

std::vector<std::size_t> label_histogram(const Dataset& dataset, std::span<const std::size_t> indices) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(dataset.num_classes()), 0);
  for (std::size_t i : indices) ++counts[static_cast<std::size_t>(dataset.label(i))];
  return counts;
}

double label_entropy(const Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) return 0.0;
  const auto counts = label_histogram(dataset, indices);
  double h = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(indices.size());
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace fedbap
