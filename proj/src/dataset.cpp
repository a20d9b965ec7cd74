#include "dnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <ostream>

#include <fmt/format.h>

#include "dnet/error.hpp"

namespace dnet::data {

namespace {

void put_u16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v & 0xff);
  p[1] = static_cast<std::uint8_t>(v >> 8);
}

void put_u32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xff);
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

constexpr std::uint8_t kMagic[4] = {'P', 'P', 'A', 'K'};

PpakHeader header_for(const SampleSource& ds) {
  constexpr auto u16max = std::numeric_limits<std::uint16_t>::max();
  if (ds.height() > u16max || ds.width() > u16max || ds.channels() > u16max)
    throw FormatError("ppak: image extents exceed 16 bits");
  if (ds.size() > std::numeric_limits<std::uint32_t>::max())
    throw FormatError("ppak: more than 2^32-1 records");
  PpakHeader h;
  h.count = static_cast<std::uint32_t>(ds.size());
  h.height = static_cast<std::uint16_t>(ds.height());
  h.width = static_cast<std::uint16_t>(ds.width());
  h.channels = static_cast<std::uint16_t>(ds.channels());
  return h;
}

}  // namespace

std::array<std::uint8_t, PpakHeader::kSize> PpakHeader::encode() const {
  std::array<std::uint8_t, kSize> out{};
  std::copy(std::begin(kMagic), std::end(kMagic), out.begin());
  put_u16(out.data() + 4, version);
  put_u32(out.data() + 6, count);
  put_u16(out.data() + 10, height);
  put_u16(out.data() + 12, width);
  put_u16(out.data() + 14, channels);
  return out;
}

PpakHeader PpakHeader::decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kSize) throw FormatError("ppak: truncated header");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw FormatError("ppak: bad magic (expected \"PPAK\")");
  PpakHeader h;
  h.version = get_u16(bytes.data() + 4);
  if (h.version != kVersion)
    throw FormatError(fmt::format("ppak: unsupported version {}", h.version));
  h.count = get_u32(bytes.data() + 6);
  h.height = get_u16(bytes.data() + 10);
  h.width = get_u16(bytes.data() + 12);
  h.channels = get_u16(bytes.data() + 14);
  return h;
}

std::uint64_t ppak_file_size(std::uint64_t count, std::uint64_t height, std::uint64_t width,
                             std::uint64_t channels) {
  return PpakHeader::kSize + count * (1 + height * width * channels);
}

Dataset::Dataset(std::size_t height, std::size_t width, std::size_t channels)
    : height_(height), width_(width), channels_(channels) {}

void Dataset::add(std::span<const std::uint8_t> pixels_hwc, std::uint8_t label) {
  if (pixels_hwc.size() != image_bytes())
    throw ShapeError(fmt::format("dataset: sample has {} bytes, expected {}", pixels_hwc.size(),
                                 image_bytes()));
  if (label > 1) throw ShapeError("dataset: labels must be 0 or 1");
  pixels_.insert(pixels_.end(), pixels_hwc.begin(), pixels_hwc.end());
  labels_.push_back(label);
}

void Dataset::reserve(std::size_t count) {
  pixels_.reserve(count * image_bytes());
  labels_.reserve(count);
}

std::span<const std::uint8_t> Dataset::pixels(std::size_t i) const {
  if (i >= size()) throw ShapeError("dataset: sample index out of range");
  return std::span<const std::uint8_t>(pixels_).subspan(i * image_bytes(), image_bytes());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out(height_, width_, channels_);
  out.reserve(indices.size());
  for (std::size_t i : indices) out.add(pixels(i), labels_.at(i));
  return out;
}

template <typename T>
Tensor<T> image_tensor(const SampleSource& ds, std::size_t i) {
  const std::size_t h = ds.height(), w = ds.width(), c = ds.channels();
  const auto px = ds.pixels(i);
  Tensor<T> out({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[(ch * h + y) * w + x] = static_cast<T>(px[(y * w + x) * c + ch]) / T(255);
  return out;
}

std::vector<std::uint8_t> encode_ppak(const SampleSource& ds) {
  const PpakHeader h = header_for(ds);
  std::vector<std::uint8_t> out;
  out.reserve(ppak_file_size(h.count, h.height, h.width, h.channels));
  const auto head = h.encode();
  out.insert(out.end(), head.begin(), head.end());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::uint8_t label = ds.label(i);
    if (label > 1) throw FormatError("ppak: label must be 0 or 1");
    out.push_back(label);
    const auto px = ds.pixels(i);
    out.insert(out.end(), px.begin(), px.end());
  }
  return out;
}

Dataset decode_ppak(std::span<const std::uint8_t> bytes) {
  const PpakHeader h = PpakHeader::decode(bytes);
  const std::uint64_t expected = ppak_file_size(h.count, h.height, h.width, h.channels);
  if (bytes.size() < expected)
    throw FormatError(fmt::format("ppak: truncated file ({} bytes, header implies {})",
                                  bytes.size(), expected));
  if (bytes.size() > expected)
    throw FormatError(fmt::format("ppak: {} trailing bytes after the last record",
                                  bytes.size() - expected));
  Dataset ds(h.height, h.width, h.channels);
  ds.reserve(h.count);
  const std::size_t rec = h.record_bytes();
  for (std::size_t i = 0; i < h.count; ++i) {
    const auto record = bytes.subspan(PpakHeader::kSize + i * rec, rec);
    if (record[0] > 1)
      throw FormatError(fmt::format("ppak: record {} has label byte {}", i, record[0]));
    ds.add(record.subspan(1), record[0]);
  }
  return ds;
}

void write_ppak(const SampleSource& ds, std::ostream& out) {
  const auto bytes = encode_ppak(ds);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("ppak: write failed");
}

void write_ppak(const SampleSource& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("ppak: cannot open '" + path + "' for writing");
  write_ppak(ds, out);
}

Dataset read_ppak(std::istream& in) {
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_ppak(bytes);
}

Dataset read_ppak(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("ppak: cannot open '" + path + "'");
  return read_ppak(in);
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i-- > 1;) std::swap(idx[i], idx[rng.below(i + 1)]);
  return idx;
}

SplitIndices split_indices(std::size_t n, double fraction, std::uint64_t seed) {
  if (n == 0) throw ShapeError("split: empty dataset");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ShapeError("split: fraction must lie in (0, 1]");
  Rng rng(seed);
  std::vector<std::size_t> idx = permutation(n, rng);
  const auto cut = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  SplitIndices out;
  out.first.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
  out.second.assign(idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed) {
  const SplitIndices s = split_indices(ds.size(), fraction, seed);
  return {ds.subset(s.first), ds.subset(s.second)};
}

Dataset synth_generate(std::size_t n, std::size_t height, std::size_t width, std::size_t channels,
                       double pos_fraction, std::uint64_t seed, const SynthParams& params) {
  if (n < 2) throw ShapeError("synth: need at least 2 samples");
  if (height < 8 || width < 8) throw ShapeError("synth: height and width must be at least 8");
  if (channels == 0) throw ShapeError("synth: channels must be positive");
  if (!(pos_fraction >= 0.0 && pos_fraction <= 1.0))
    throw ShapeError("synth: pos_fraction must lie in [0, 1]");
  if (!(params.sigma_frac > 0.0) || params.jitter_frac < 0.0 || params.amplitude < 0.0)
    throw ShapeError("synth: invalid blob parameters");

  Rng rng(seed);
  const auto positives = static_cast<std::size_t>(std::llround(static_cast<double>(n) * pos_fraction));
  std::vector<std::uint8_t> labels(n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(positives), 1);
  const std::vector<std::size_t> order = permutation(n, rng);

  const double sigma = params.sigma_frac * static_cast<double>(std::min(height, width));
  Dataset ds(height, width, channels);
  ds.reserve(n);
  std::vector<std::uint8_t> px(height * width * channels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t label = labels[order[i]];
    for (auto& p : px) p = static_cast<std::uint8_t>(rng.below(256));
    if (label) {
      const double cy = 0.5 * static_cast<double>(height - 1) +
                        rng.uniform(-1.0, 1.0) * params.jitter_frac * static_cast<double>(height);
      const double cx = 0.5 * static_cast<double>(width - 1) +
                        rng.uniform(-1.0, 1.0) * params.jitter_frac * static_cast<double>(width);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double blob =
              255.0 * params.amplitude * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
          for (std::size_t c = 0; c < channels; ++c) {
            std::uint8_t& p = px[(y * width + x) * channels + c];
            p = static_cast<std::uint8_t>(std::min(255.0, std::round(p + blob)));
          }
        }
    }
    ds.add(px, label);
  }
  return ds;
}

std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch_size,
                                                  std::uint64_t epoch_seed) {
  if (n == 0) throw ShapeError("batch_iter: empty dataset");
  if (batch_size == 0) throw ShapeError("batch_iter: batch_size must be positive");
  Rng rng(epoch_seed);
  const std::vector<std::size_t> idx = permutation(n, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < n; b += batch_size)
    batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b),
                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  return batches;
}

template <typename T>
Batch<T> make_batch(const SampleSource& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("make_batch: no indices");
  const std::size_t per = ds.channels() * ds.height() * ds.width();
  Batch<T> b;
  b.images = Tensor<T>({indices.size(), ds.channels(), ds.height(), ds.width()});
  b.indices.assign(indices.begin(), indices.end());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Tensor<T> img = image_tensor<T>(ds, indices[k]);
    std::copy(img.raw(), img.raw() + per, b.images.raw() + k * per);
    b.labels.push_back(ds.label(indices[k]));
  }
  return b;
}

template <typename T>
std::vector<Batch<T>> batch_iter(const SampleSource& ds, std::size_t batch_size,
                                 std::uint64_t epoch_seed) {
  std::vector<Batch<T>> out;
  for (const auto& idx : batch_order(ds.size(), batch_size, epoch_seed))
    out.push_back(make_batch<T>(ds, idx));
  return out;
}

void write_labels_csv(const SampleSource& ds, std::ostream& out) {
  out << "index,label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) out << i << ',' << int(ds.label(i)) << '\n';
}

template Tensor<float> image_tensor<float>(const SampleSource&, std::size_t);
template Tensor<double> image_tensor<double>(const SampleSource&, std::size_t);
template Batch<float> make_batch<float>(const SampleSource&, std::span<const std::size_t>);
template Batch<double> make_batch<double>(const SampleSource&, std::span<const std::size_t>);
template std::vector<Batch<float>> batch_iter<float>(const SampleSource&, std::size_t, std::uint64_t);
template std::vector<Batch<double>> batch_iter<double>(const SampleSource&, std::size_t,
                                                       std::uint64_t);

}  // namespace dnet::data
