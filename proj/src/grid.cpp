// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/grid.hpp"

namespace mhaseg {

std::string Extent3::str() const {
  return "(" + std::to_string(depth) + "," + std::to_string(height) + "," + std::to_string(width) + ")";
}

}  // namespace mhaseg
