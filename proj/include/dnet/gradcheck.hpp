#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dnet/autodiff.hpp"

namespace dnet::gradcheck {

/// A check passes when max_rel_err is strictly below this.
inline constexpr double kTolerance = 1e-4;

/// Individual layers first, then blocks, then "dense-small": the full dense
/// classifier (k0 = 4, k = 3, blocks 2,2, 12 x 12 x 1 input, batch 2) under
/// the BCE loss in train mode.
const std::vector<std::string>& preset_names();

/// Runs one preset in double precision. Throws ConfigError for unknown names.
ad::GradCheckResult run_preset(std::string_view name, std::uint64_t seed = 42,
                               double eps = 1e-4);

}  // namespace dnet::gradcheck
