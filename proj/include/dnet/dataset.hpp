#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dnet/rng.hpp"
#include "dnet/tensor.hpp"

namespace dnet::data {

/// 16-byte little-endian PPAK header:
///   0  magic "PPAK"      4 bytes
///   4  version = 1       u16
///   6  count             u32
///   10 height            u16
///   12 width             u16
///   14 channels          u16
/// followed by `count` records of (label byte, height*width*channels pixel
/// bytes in H -> W -> C order).
struct PpakHeader {
  static constexpr std::size_t kSize = 16;
  static constexpr std::uint16_t kVersion = 1;

  std::uint16_t version = kVersion;
  std::uint32_t count = 0;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint16_t channels = 0;

  std::array<std::uint8_t, kSize> encode() const;
  static PpakHeader decode(std::span<const std::uint8_t> bytes);
  std::size_t record_bytes() const {
    return 1 + std::size_t{height} * width * channels;
  }
};

/// Total file size of a PPAK archive with the given geometry.
std::uint64_t ppak_file_size(std::uint64_t count, std::uint64_t height, std::uint64_t width,
                             std::uint64_t channels);

/// Read-only view of labeled patches.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual std::size_t height() const = 0;
  virtual std::size_t width() const = 0;
  virtual std::size_t channels() const = 0;
  /// H x W x C bytes of sample i.
  virtual std::span<const std::uint8_t> pixels(std::size_t i) const = 0;
  virtual std::uint8_t label(std::size_t i) const = 0;
};

/// In-memory patches kept as the raw bytes of their PPAK records; values
/// become byte / 255 when converted to tensors.
class Dataset final : public SampleSource {
 public:
  Dataset() = default;
  Dataset(std::size_t height, std::size_t width, std::size_t channels);

  void add(std::span<const std::uint8_t> pixels_hwc, std::uint8_t label);
  void reserve(std::size_t count);

  std::size_t size() const override { return labels_.size(); }
  std::size_t height() const override { return height_; }
  std::size_t width() const override { return width_; }
  std::size_t channels() const override { return channels_; }
  std::size_t image_bytes() const { return height_ * width_ * channels_; }
  std::span<const std::uint8_t> pixels(std::size_t i) const override;
  std::uint8_t label(std::size_t i) const override { return labels_.at(i); }
  const std::vector<std::uint8_t>& labels() const { return labels_; }

  Dataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.channels_ == b.channels_ &&
           a.pixels_ == b.pixels_ && a.labels_ == b.labels_;
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<std::uint8_t> pixels_;
  std::vector<std::uint8_t> labels_;
};

/// Sample i as a C x H x W tensor scaled to [0, 1].
template <typename T>
Tensor<T> image_tensor(const SampleSource& ds, std::size_t i);

std::vector<std::uint8_t> encode_ppak(const SampleSource& ds);
Dataset decode_ppak(std::span<const std::uint8_t> bytes);
void write_ppak(const SampleSource& ds, std::ostream& out);
void write_ppak(const SampleSource& ds, const std::string& path);
Dataset read_ppak(std::istream& in);
Dataset read_ppak(const std::string& path);

/// Fisher-Yates shuffle of 0..n-1 driven by `rng` (i from n-1 down to 1,
/// j uniform in [0, i]).
std::vector<std::size_t> permutation(std::size_t n, Rng& rng);

struct SplitIndices {
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
};

/// Seeded permutation; the first floor(fraction * n) indices go to `first`.
SplitIndices split_indices(std::size_t n, double fraction, std::uint64_t seed);

std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed);

struct SynthParams {
  /// Peak brightness of the blob as a fraction of full scale.
  double amplitude = 0.5;
  /// Gaussian sigma as a fraction of min(height, width).
  double sigma_frac = 0.15;
  /// Maximum center offset from the middle, as a fraction of each extent.
  double jitter_frac = 0.125;
};

/// Negatives are uniform byte noise; positives are the same kind of noise plus
/// a bright Gaussian blob near the center. Exactly round(n * pos_fraction)
/// samples are positive.
Dataset synth_generate(std::size_t n, std::size_t height, std::size_t width, std::size_t channels,
                       double pos_fraction, std::uint64_t seed, const SynthParams& params = {});

template <typename T>
struct Batch {
  Tensor<T> images;  ///< N x C x H x W
  std::vector<std::uint8_t> labels;
  std::vector<std::size_t> indices;
};

/// Seeded shuffle cut into consecutive batches; the last one may be short.
std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch_size,
                                                  std::uint64_t epoch_seed);

template <typename T>
Batch<T> make_batch(const SampleSource& ds, std::span<const std::size_t> indices);

template <typename T>
std::vector<Batch<T>> batch_iter(const SampleSource& ds, std::size_t batch_size,
                                 std::uint64_t epoch_seed);

/// `index,label` header line followed by one row per sample.
void write_labels_csv(const SampleSource& ds, std::ostream& out);

}  // namespace dnet::data
