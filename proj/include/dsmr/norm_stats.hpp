#pragma once

namespace dsmr {

/// Height scaling shared by training and inference. Patches are centred
/// per patch, then divided by global_std (metres), measured on training data.
struct NormStats {
  double global_std = 1.0;

  bool operator==(const NormStats&) const = default;
};

}  // namespace dsmr
