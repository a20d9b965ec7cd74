#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dnet/architectures.hpp"
#include "dnet/optimizers.hpp"

namespace dnet::io {

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::uint64_t fnv1a64(std::string_view text);

/// Model, optimizer state and curve position, serialized little-endian:
///
///   "PCKP"  u16 version
///   u32 config length, config text (ModelConfig::to_text), u64 FNV-1a of it
///   u64 curve offset
///   u32 tensor count, then per tensor:
///     u16 name length, name, u8 dtype (1 = f32, 2 = f64), u8 trainable,
///     u8 rank, u64 dims[rank], raw values
///   optimizer: u8 kind, f64 lr, beta1, beta2, epsilon, weight_decay,
///     momentum, u64 step, u32 count + first-moment tensors,
///     u32 count + second-moment tensors (same tensor layout, trainable = 1)
template <typename T>
struct Checkpoint {
  static constexpr std::uint16_t kVersion = 1;

  nn::ModelConfig model;
  nn::ParamStore<T> params;
  optim::OptimState<T> optimizer;
  /// Number of CurveLog rows already written when the checkpoint was taken.
  std::uint64_t curve_offset = 0;

  std::vector<std::uint8_t> encode() const;
  /// Verifies magic, version, config hash, dtype and that the tensor table
  /// is exactly the one the config implies.
  static Checkpoint decode(std::span<const std::uint8_t> bytes);

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

}  // namespace dnet::io
