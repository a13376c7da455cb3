#pragma once

#include <cstdint>
#include <span>

namespace rat {

// Mean binary cross-entropy with predictions clamped to [clip_eps, 1 - clip_eps].
double logloss(std::span<const double> preds, std::span<const std::uint8_t> labels, double clip_eps = 1e-7);

// Mann-Whitney AUC: probability that a random positive outranks a random negative,
// ties counting one half. Throws UsageError unless both classes are present.
double auc(std::span<const double> preds, std::span<const std::uint8_t> labels);

}  // namespace rat
