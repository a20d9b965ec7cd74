#include "dnet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "dnet/error.hpp"

namespace dnet::io {

namespace {

template <typename T>
constexpr std::uint8_t dtype_tag();
template <>
constexpr std::uint8_t dtype_tag<float>() { return 1; }
template <>
constexpr std::uint8_t dtype_tag<double>() { return 2; }

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void uint(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
  void u16(std::uint64_t v) { uint(v, 2); }
  void u32(std::uint64_t v) { uint(v, 4); }
  void u64(std::uint64_t v) { uint(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  template <typename T>
  void value(T v) {
    if constexpr (sizeof(T) == 4)
      u32(std::bit_cast<std::uint32_t>(v));
    else
      u64(std::bit_cast<std::uint64_t>(v));
  }
  template <typename T>
  void tensor(const std::string& name, const Tensor<T>& t, bool trainable) {
    if (name.size() > 0xffff) throw FormatError("checkpoint: tensor name too long");
    if (t.rank() > 0xff) throw FormatError("checkpoint: tensor rank too large");
    u16(name.size());
    bytes(name);
    u8(dtype_tag<T>());
    u8(trainable ? 1 : 0);
    u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    for (T v : t.data()) value(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (in_.size() - pos_ < n) throw FormatError("checkpoint: truncated file");
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(int bytes) {
    auto s = take(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t{s[i]} << (8 * i);
    return v;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    auto s = take(n);
    return std::string(s.begin(), s.end());
  }
  template <typename T>
  T value() {
    if constexpr (sizeof(T) == 4)
      return std::bit_cast<T>(u32());
    else
      return std::bit_cast<T>(u64());
  }

  template <typename T>
  std::pair<std::string, Tensor<T>> tensor(bool& trainable) {
    std::string name = str(u16());
    const std::uint8_t dtype = u8();
    if (dtype != dtype_tag<T>())
      throw FormatError(fmt::format("checkpoint: tensor '{}' has dtype tag {}, expected {}", name,
                                    dtype, dtype_tag<T>()));
    const std::uint8_t flag = u8();
    if (flag > 1) throw FormatError("checkpoint: bad trainable flag");
    trainable = flag == 1;
    Shape shape(u8());
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(u64());
      if (d != 0 && numel > (in_.size() / sizeof(T)) / d)
        throw FormatError("checkpoint: tensor shape exceeds file size");
      numel *= d;
    }
    if (numel * sizeof(T) > in_.size() - pos_) throw FormatError("checkpoint: truncated file");
    std::vector<T> values(numel);
    for (auto& v : values) v = value<T>();
    return {std::move(name), Tensor<T>(std::move(shape), std::move(values))};
  }

  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

template <typename T>
void write_moments(Writer& w, const std::map<std::string, Tensor<T>>& moments) {
  w.u32(moments.size());
  for (const auto& [name, t] : moments) w.tensor(name, t, true);
}

template <typename T>
std::map<std::string, Tensor<T>> read_moments(Reader& r, const nn::ParamStore<T>& params) {
  std::map<std::string, Tensor<T>> out;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    bool trainable = true;
    auto [name, t] = r.tensor<T>(trainable);
    if (!params.contains(name))
      throw FormatError(fmt::format("checkpoint: optimizer moment for unknown tensor '{}'", name));
    if (params.at(name).shape() != t.shape())
      throw FormatError(fmt::format("checkpoint: optimizer moment '{}' has the wrong shape", name));
    if (!out.emplace(name, std::move(t)).second)
      throw FormatError(fmt::format("checkpoint: duplicate optimizer moment '{}'", name));
  }
  return out;
}

constexpr char kMagic[4] = {'P', 'C', 'K', 'P'};

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

template <typename T>
std::vector<std::uint8_t> Checkpoint<T>::encode() const {
  Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.u16(kVersion);
  const std::string cfg = model.to_text();
  w.u32(cfg.size());
  w.bytes(cfg);
  w.u64(fnv1a64(cfg));
  w.u64(curve_offset);
  w.u32(params.size());
  for (const auto& e : params.entries()) w.tensor(e.name, e.value, e.trainable);
  const optim::Hyper& h = optimizer.hyper;
  w.u8(static_cast<std::uint8_t>(h.kind));
  w.f64(h.lr);
  w.f64(h.beta1);
  w.f64(h.beta2);
  w.f64(h.epsilon);
  w.f64(h.weight_decay);
  w.f64(h.momentum);
  w.u64(optimizer.step);
  write_moments(w, optimizer.first);
  write_moments(w, optimizer.second);
  return w.take();
}

template <typename T>
Checkpoint<T> Checkpoint<T>::decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic)))
    throw FormatError("checkpoint: bad magic (expected \"PCKP\")");
  const std::uint16_t version = r.u16();
  if (version != kVersion)
    throw FormatError(fmt::format("checkpoint: unsupported version {}", version));

  Checkpoint ck;
  const std::string cfg = r.str(r.u32());
  const std::uint64_t hash = r.u64();
  if (hash != fnv1a64(cfg)) throw FormatError("checkpoint: config hash mismatch");
  try {
    ck.model = nn::ModelConfig::from_text(cfg);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: bad config block: ") + e.what());
  }
  ck.curve_offset = r.u64();

  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    bool trainable = true;
    auto [name, t] = r.tensor<T>(trainable);
    try {
      ck.params.add(std::move(name), std::move(t), trainable);
    } catch (const Error& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
  }
  try {
    // Rejects any table that is not the one the config implies.
    nn::Classifier<T> check(ck.model, ck.params);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: tensor table does not match config: ") + e.what());
  }

  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(optim::Kind::RAdam))
    throw FormatError(fmt::format("checkpoint: unknown optimizer kind {}", kind));
  optim::Hyper& h = ck.optimizer.hyper;
  h.kind = static_cast<optim::Kind>(kind);
  h.lr = r.f64();
  h.beta1 = r.f64();
  h.beta2 = r.f64();
  h.epsilon = r.f64();
  h.weight_decay = r.f64();
  h.momentum = r.f64();
  ck.optimizer.step = r.u64();
  ck.optimizer.first = read_moments(r, ck.params);
  ck.optimizer.second = read_moments(r, ck.params);
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after optimizer block");
  return ck;
}

template <typename T>
void Checkpoint<T>::save(const std::string& path) const {
  const auto bytes = encode();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("checkpoint: write to '" + path + "' failed");
}

template <typename T>
Checkpoint<T> Checkpoint<T>::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode(bytes);
}

template struct Checkpoint<float>;
template struct Checkpoint<double>;

}  // namespace dnet::io
