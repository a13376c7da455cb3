#include "rat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "rat/error.hpp"

namespace rat {

double logloss(std::span<const double> preds, std::span<const std::uint8_t> labels, double clip_eps) {
    if (preds.size() != labels.size()) {
        throw UsageError("logloss: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
    }
    if (preds.empty()) {
        throw UsageError("logloss of an empty set");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double p = std::clamp(preds[i], clip_eps, 1.0 - clip_eps);
        total -= labels[i] ? std::log(p) : std::log1p(-p);
    }
    return total / static_cast<double>(preds.size());
}

double auc(std::span<const double> preds, std::span<const std::uint8_t> labels) {
    if (preds.size() != labels.size()) {
        throw UsageError("auc: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(labels.size()) +
                         " labels");
    }
    std::vector<std::size_t> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return preds[a] < preds[b]; });

    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled to stay integral.
    std::uint64_t positives = 0;
    std::uint64_t doubled_rank_sum = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::uint64_t group_pos = 0;
        while (j < order.size() && preds[order[j]] == preds[order[i]]) {
            group_pos += labels[order[j]] ? 1 : 0;
            ++j;
        }
        // Ranks i+1 .. j share the average (i + 1 + j) / 2.
        doubled_rank_sum += group_pos * (i + 1 + j);
        positives += group_pos;
        i = j;
    }
    const std::uint64_t negatives = preds.size() - positives;
    if (positives == 0 || negatives == 0) {
        throw UsageError("auc needs at least one positive and one negative label");
    }
    const std::uint64_t doubled_u = doubled_rank_sum - positives * (positives + 1);
    return static_cast<double>(doubled_u) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

}  // namespace rat
