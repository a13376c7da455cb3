#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rat/data.hpp"
#include "rat/model.hpp"
#include "rat/retrieval.hpp"

namespace rat {

struct TrainConfig {
    ModelConfig model;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 10;
    std::size_t early_stop_patience = 2;  // epochs without a validation AUC gain
    std::uint64_t seed = 42;
    double logloss_clip_eps = 1e-7;
    // When off, wall_ms is logged as 0 so training logs are byte-reproducible.
    bool record_wall_time = false;  // wall_ms stays 0 so identical runs give identical logs

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct SegmentReport {
    std::optional<double> auc;  // absent when the segment holds a single class
    double logloss = 0.0;
    std::size_t n = 0;
};

struct EvalReport {
    double auc = 0.0;
    double logloss = 0.0;
    std::size_t n = 0;
    std::map<std::string, SegmentReport> segments;
};

nlohmann::json to_json(const EvalReport& report);

// Named subset of an evaluated slice; member[i] refers to slice position i.
struct Segment {
    std::string name;
    std::vector<std::uint8_t> member;
};

// "tail<q>" segments: records of the q% least frequent users, where users are ranked
// by their number of training records (ties by user id) and drawn from the slice.
std::vector<Segment> tail_user_segments(const Dataset& ds, std::span<const Record> slice, std::size_t user_field,
                                        std::span<const double> percents);

// Parses "tail10,tail20" into {10, 20}. Throws UsageError on anything else.
std::vector<double> parse_tail_segments(const std::string& spec);

class Adam {
  public:
    Adam(std::vector<Tensor> params, double learning_rate, double beta1, double beta2, double eps);

    // Applies one update from the accumulated gradients, then clears them.
    void step();
    std::size_t steps() const { return t_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

// Leakage-safe neighbors for every record of a dataset: train records look strictly
// earlier in the train pool, validation and test records see the whole train pool.
class NeighborCache {
  public:
    NeighborCache(const Dataset& ds, const RetrievalIndex& index, std::size_t k);
    const RetrievalResult& operator[](std::size_t record_index) const { return results_.at(record_index); }
    std::span<const RetrievalResult> all() const { return results_; }

  private:
    std::vector<RetrievalResult> results_;
};

Eligibility eligibility_for(const Dataset& ds, const Record& record);

// Click probabilities for the given records in order, without recording a graph.
std::vector<double> predict_records(const RatModel& model, const Dataset& ds, std::span<const Record> records,
                                    const NeighborCache& neighbors, std::size_t batch_size);

EvalReport evaluate(const RatModel& model, const Dataset& ds, std::span<const Record> slice,
                    const NeighborCache& neighbors, const TrainConfig& cfg, const std::vector<Segment>& segments = {});
EvalReport evaluate(const RatModel& model, const Dataset& ds, std::span<const Record> slice,
                    const RetrievalIndex& index, const TrainConfig& cfg, const std::vector<Segment>& segments = {});

struct TrainResult {
    RatModel model;  // parameters of the best validation epoch
    std::vector<nlohmann::json> log;
    std::size_t best_epoch = 0;
    double best_valid_auc = 0.0;
    EvalReport test;
};

using LogSink = std::function<void(const nlohmann::json&)>;

TrainResult train(const Dataset& ds, const RetrievalIndex& index, const TrainConfig& cfg, const LogSink& sink = {});

// Mean per-example forward time in microseconds over the given records (best of `repeats`).
double measure_forward_us(const RatModel& model, const Dataset& ds, std::span<const Record> records,
                          const NeighborCache& neighbors, std::size_t batch_size, std::size_t repeats = 3);

struct AblationRow {
    Variant variant = Variant::Cascade;
    double auc = 0.0;
    double logloss = 0.0;
    std::size_t params = 0;
    double runtime_us = 0.0;
};

// Trains JM, CE, PA and CASCADE with identical data and seed; rows in that order.
std::vector<AblationRow> ablate(const Dataset& ds, const RetrievalIndex& index, const TrainConfig& cfg,
                                const LogSink& sink = {});
std::string ablation_csv(std::span<const AblationRow> rows);

}  // namespace rat
