#include "rat/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "rat/error.hpp"

namespace rat {

namespace {

// Label sequence for one key. The last session starts at the end of the first 22 of 28
// training positions and runs through validation and test; the two earlier sessions
// fill 0..21 so that the training prefix is exactly half positive.
std::vector<int> key_labels(std::size_t n, std::size_t train_n, std::mt19937_64& rng) {
    const int last = static_cast<int>(rng() & 1U);
    // Positives in training = len(session labeled 1) + (last == 1 ? tail : 0) = train_n / 2.
    const std::size_t tail = train_n - train_n * 11 / 14;  // 6 of 28
    const std::size_t head = train_n - tail;
    const std::size_t ones_before = last == 1 ? train_n / 2 - tail : train_n / 2;
    std::vector<std::pair<int, std::size_t>> sessions{{1, ones_before}, {0, head - ones_before}};
    if (rng() & 1U) {
        std::swap(sessions[0], sessions[1]);
    }
    std::vector<int> labels;
    labels.reserve(n);
    for (const auto& [label, len] : sessions) {
        labels.insert(labels.end(), len, label);
    }
    labels.resize(n, last);
    return labels;
}

}  // namespace

SchemaSpec synthetic_schema(const SyntheticConfig& cfg) {
    SchemaSpec spec;
    spec.label_column = "label";
    spec.timestamp_column = "ts";
    spec.feature_columns.push_back("user");
    for (std::size_t a = 1; a <= cfg.num_attributes; ++a) {
        spec.feature_columns.push_back("attr" + std::to_string(a));
    }
    return spec;
}

std::string synthetic_csv(const SyntheticConfig& cfg) {
    if (cfg.num_keys < 2 || cfg.records_per_key < 20) {
        throw UsageError("synthetic task needs at least 2 keys and 20 records per key");
    }
    std::mt19937_64 rng(cfg.seed);
    const auto train_n = static_cast<std::size_t>(
        std::llround(static_cast<double>(cfg.records_per_key) * SplitRatios{}.train));
    std::vector<std::vector<int>> labels;
    for (std::size_t v = 0; v < cfg.num_keys; ++v) {
        labels.push_back(key_labels(cfg.records_per_key, train_n, rng));
    }
    std::ostringstream out;
    out << "ts,label,user";
    for (std::size_t a = 1; a <= cfg.num_attributes; ++a) {
        out << ",attr" << a;
    }
    out << '\n';
    // Record m of key v gets timestamp m * num_keys + v, so keys interleave round by round.
    for (std::size_t m = 0; m < cfg.records_per_key; ++m) {
        for (std::size_t v = 0; v < cfg.num_keys; ++v) {
            out << m * cfg.num_keys + v << ',' << labels[v][m] << ",u" << v;
            for (std::size_t a = 1; a <= cfg.num_attributes; ++a) {
                const std::size_t card = 3 + (a - 1) % 5;
                out << ",a" << a << '_' << (v * (2 * a + 1) + a) % card;
            }
            out << '\n';
        }
    }
    return out.str();
}

Dataset synthetic_dataset(const SyntheticConfig& cfg) {
    std::istringstream in(synthetic_csv(cfg));
    return parse_csv(in, synthetic_schema(cfg), "<synthetic>");
}

}  // namespace rat
