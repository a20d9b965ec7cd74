// Small random generators for property tests.
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dnet/dataset.hpp"
#include "dnet/rng.hpp"
#include "dnet/tensor.hpp"

namespace support {

template <typename T = double>
dnet::Tensor<T> random_tensor(dnet::Rng& rng, dnet::Shape shape, double lo = -1.0,
                              double hi = 1.0) {
  dnet::Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

inline std::size_t between(dnet::Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline dnet::data::Dataset random_dataset(dnet::Rng& rng, std::size_t n, std::size_t h,
                                          std::size_t w, std::size_t c) {
  dnet::data::Dataset ds(h, w, c);
  std::vector<std::uint8_t> px(h * w * c);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& p : px) p = static_cast<std::uint8_t>(rng.below(256));
    ds.add(px, static_cast<std::uint8_t>(rng.below(2)));
  }
  return ds;
}

}  // namespace support
