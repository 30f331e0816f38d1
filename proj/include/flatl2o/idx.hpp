// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "flatl2o/optimizees.hpp"

namespace flatl2o {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Read an IDX image/label pair into a Dataset (train side only; the test
/// side is left empty). Pixels are scaled to [0,1] by dividing by 255.
/// `limit` keeps the first `limit` examples; negative means all.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 long limit = -1);

}  // namespace flatl2o
