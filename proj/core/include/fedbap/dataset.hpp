#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "fedbap/rng.hpp"
#include "fedbap/tensor.hpp"

namespace fedbap {

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t size() const noexcept { return height * width * channels; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Labelled images stored channels-last as [N, H, W, C] with pixels in [0,1].
class Dataset {
 public:
  Dataset() = default;
  Dataset(Tensor images, std::vector<int> labels, int num_classes);

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  int num_classes() const noexcept { return num_classes_; }
  ImageShape image_shape() const noexcept { return shape_; }
  std::size_t sample_dim() const noexcept { return shape_.size(); }

  const Tensor& images() const noexcept { return images_; }
  const std::vector<int>& labels() const noexcept { return labels_; }
  int label(std::size_t i) const { return labels_.at(i); }
  void set_label(std::size_t i, int label);

  std::span<const double> image(std::size_t i) const;
  std::span<double> mutable_image(std::size_t i);

  Dataset subset(std::span<const std::size_t> indices) const;
  /// Flattened [B, H*W*C] batch of the given samples.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;

 private:
  Tensor images_;
  std::vector<int> labels_;
  int num_classes_ = 0;
  ImageShape shape_;
};

/// client_indices[k] lists the sample indices owned by client k.
struct Partition {
  std::vector<std::vector<std::size_t>> client_indices;

  std::size_t num_clients() const noexcept { return client_indices.size(); }
};

/// Reads an IDX image file (magic 0x00000803, dims N x rows x cols) and an
/// IDX label file (magic 0x00000801). Pixels are scaled to [0,1]; images
/// get one channel.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 int num_classes = 10);

/// Per-class cluster centers, one image each.
struct BlobCenters {
  std::vector<Tensor> centers;  // each [H, W, C]
  ImageShape shape;
};

/// Centers uniform in [0.5 - contrast/2, 0.5 + contrast/2] per pixel, except
/// a dark frame `margin` pixels wide where the center is 0.
BlobCenters make_blob_centers(int num_classes, ImageShape shape, double contrast, Rng& rng, int margin = 0);
/// Gaussian samples around the centers, clipped to [0,1]; samples are
/// interleaved by class.
Dataset sample_blobs(const BlobCenters& centers, std::size_t n_per_class, double spread, Rng& rng);
Dataset synth_blobs(std::size_t n_per_class, int num_classes, ImageShape shape, double spread, Rng& rng,
                    double contrast = 1.0, int margin = 0);

/// Class-wise Dirichlet(h) allocation of samples to clients. Redraws the
/// whole partition until every client owns at least one sample, failing
/// with kRetryExhausted after `max_retries` attempts.
Partition dirichlet_partition(const Dataset& dataset, std::size_t n_clients, double concentration, Rng& rng,
                              int max_retries = 100);

/// counts[c] = number of samples in `indices` with label c.
std::vector<std::size_t> label_histogram(const Dataset& dataset, std::span<const std::size_t> indices);

/// Shannon entropy (nats) of the label distribution of `indices`.
double label_entropy(const Dataset& dataset, std::span<const std::size_t> indices);

/// Fisher-Yates shuffle driven directly by the 64-bit engine.
void shuffle_indices(std::vector<std::size_t>& indices, Rng& rng);
std::size_t uniform_index(std::size_t bound, Rng& rng);

}  // namespace fedbap
