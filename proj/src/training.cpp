#include "rat/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "rat/error.hpp"
#include "rat/metrics.hpp"

namespace rat {

void TrainConfig::validate() const {
    model.validate();
    if (!(learning_rate > 0.0) || !(adam_eps > 0.0) || !(logloss_clip_eps > 0.0 && logloss_clip_eps < 0.5)) {
        throw UsageError("learning_rate, adam_eps and logloss_clip_eps must be positive");
    }
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
        throw UsageError("adam betas must lie in (0, 1)");
    }
    if (batch_size == 0 || max_epochs == 0 || early_stop_patience == 0) {
        throw UsageError("batch_size, max_epochs and early_stop_patience must be positive");
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"learning_rate", c.learning_rate},
                       {"adam_beta1", c.adam_beta1},
                       {"adam_beta2", c.adam_beta2},
                       {"adam_eps", c.adam_eps},
                       {"batch_size", c.batch_size},
                       {"max_epochs", c.max_epochs},
                       {"early_stop_patience", c.early_stop_patience},
                       {"seed", c.seed},
                       {"logloss_clip_eps", c.logloss_clip_eps},
                       {"record_wall_time", c.record_wall_time}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.model = j.at("model").get<ModelConfig>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.adam_beta1 = j.at("adam_beta1").get<double>();
    c.adam_beta2 = j.at("adam_beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.max_epochs = j.at("max_epochs").get<std::size_t>();
    c.early_stop_patience = j.at("early_stop_patience").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.logloss_clip_eps = j.at("logloss_clip_eps").get<double>();
    c.record_wall_time = j.at("record_wall_time").get<bool>();
}

nlohmann::json to_json(const EvalReport& report) {
    nlohmann::json j{{"auc", report.auc}, {"logloss", report.logloss}, {"n", report.n}};
    if (!report.segments.empty()) {
        auto& segs = j["segments"];
        segs = nlohmann::json::object();
        for (const auto& [name, s] : report.segments) {
            nlohmann::json sj{{"logloss", s.logloss}, {"n", s.n}};
            sj["auc"] = s.auc ? nlohmann::json(*s.auc) : nlohmann::json(nullptr);
            segs[name] = sj;
        }
    }
    return j;
}

std::vector<double> parse_tail_segments(const std::string& spec) {
    std::vector<double> percents;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) {
            continue;
        }
        if (item.rfind("tail", 0) != 0 || item.size() == 4) {
            throw UsageError("segment '" + item + "' is not of the form tail<percent>");
        }
        double q = 0.0;
        try {
            std::size_t used = 0;
            q = std::stod(item.substr(4), &used);
            if (used != item.size() - 4) {
                throw std::invalid_argument(item);
            }
        } catch (const std::exception&) {
            throw UsageError("segment '" + item + "' has no numeric percentage");
        }
        if (!(q > 0.0 && q <= 100.0)) {
            throw UsageError("segment '" + item + "' percentage must lie in (0, 100]");
        }
        percents.push_back(q);
    }
    if (percents.empty()) {
        throw UsageError("no segments given");
    }
    return percents;
}

std::vector<Segment> tail_user_segments(const Dataset& ds, std::span<const Record> slice, std::size_t user_field,
                                        std::span<const double> percents) {
    if (user_field >= ds.num_fields()) {
        throw UsageError("user field " + std::to_string(user_field) + " out of range");
    }
    std::unordered_map<std::uint32_t, std::size_t> train_count;
    for (const auto& r : ds.train()) {
        ++train_count[r.field_ids[user_field]];
    }
    std::vector<std::uint32_t> users;
    for (const auto& r : slice) {
        users.push_back(r.field_ids[user_field]);
    }
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
    auto count_of = [&](std::uint32_t u) {
        auto it = train_count.find(u);
        return it == train_count.end() ? std::size_t{0} : it->second;
    };
    std::stable_sort(users.begin(), users.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return count_of(a) < count_of(b); });

    std::vector<Segment> segments;
    for (double q : percents) {
        const auto take = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(users.size()) - 1e-9));
        std::unordered_map<std::uint32_t, bool> chosen;
        for (std::size_t i = 0; i < take && i < users.size(); ++i) {
            chosen[users[i]] = true;
        }
        Segment seg;
        std::ostringstream name;
        name << "tail" << q;
        seg.name = name.str();
        seg.member.reserve(slice.size());
        for (const auto& r : slice) {
            seg.member.push_back(chosen.count(r.field_ids[user_field]) ? 1 : 0);
        }
        segments.push_back(std::move(seg));
    }
    return segments;
}

Adam::Adam(std::vector<Tensor> params, double learning_rate, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto value = params_[i].mutable_data();
        auto grad = params_[i].mutable_grad();
        if (grad.empty()) {
            params_[i].zero_grad();
            grad = params_[i].mutable_grad();
        }
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            const double g = grad[j];
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
            value[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
            grad[j] = 0.0;
        }
    }
}

Eligibility eligibility_for(const Dataset& ds, const Record& record) {
    return record.index < ds.split.train_end ? Eligibility::StrictlyEarlier : Eligibility::WholePool;
}

NeighborCache::NeighborCache(const Dataset& ds, const RetrievalIndex& index, std::size_t k) {
    const auto train = ds.train();
    auto earlier = index.retrieve_batch(train, k, Eligibility::StrictlyEarlier);
    auto rest = index.retrieve_batch(std::span(ds.records).subspan(ds.split.train_end), k, Eligibility::WholePool);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto& r = earlier[i];
        for (std::size_t j = 0; j < r.mask.size(); ++j) {
            if (r.mask[j] && !earlier_than(ds.records[r.neighbor_indices[j]], train[i])) {
                throw std::logic_error("retrieval returned a neighbor that is not strictly earlier than record " +
                                       std::to_string(train[i].index));
            }
        }
    }
    results_ = std::move(earlier);
    results_.insert(results_.end(), std::make_move_iterator(rest.begin()), std::make_move_iterator(rest.end()));
}

namespace {

ModelInput input_for(const RatModel& model, const Dataset& ds, std::span<const Record> records,
                     const NeighborCache& neighbors) {
    std::vector<RetrievalResult> nbrs;
    nbrs.reserve(records.size());
    for (const auto& r : records) {
        nbrs.push_back(neighbors[r.index]);
    }
    return model.build_input(records, nbrs, ds.records);
}

SegmentReport metrics_of(std::span<const double> preds, std::span<const std::uint8_t> labels, double clip_eps) {
    SegmentReport s;
    s.n = preds.size();
    s.logloss = logloss(preds, labels, clip_eps);
    const auto pos = std::count(labels.begin(), labels.end(), std::uint8_t{1});
    if (pos > 0 && static_cast<std::size_t>(pos) < labels.size()) {
        s.auc = auc(preds, labels);
    }
    return s;
}

std::vector<std::vector<double>> snapshot(const RatModel& model) {
    std::vector<std::vector<double>> values;
    for (const auto& p : model.parameters()) {
        values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    }
    return values;
}

void restore(const RatModel& model, const std::vector<std::vector<double>>& values) {
    const auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::copy(values[i].begin(), values[i].end(), params[i].tensor.mutable_data().begin());
    }
}

std::vector<std::size_t> vocab_sizes_of(const Dataset& ds) {
    std::vector<std::size_t> sizes;
    for (const auto& f : ds.schema) {
        sizes.push_back(f.vocab_size());
    }
    return sizes;
}

}  // namespace

std::vector<double> predict_records(const RatModel& model, const Dataset& ds, std::span<const Record> records,
                                    const NeighborCache& neighbors, std::size_t batch_size) {
    NoGradGuard no_grad;
    std::vector<double> preds;
    preds.reserve(records.size());
    for (std::size_t begin = 0; begin < records.size(); begin += batch_size) {
        const auto chunk = records.subspan(begin, std::min(batch_size, records.size() - begin));
        const auto p = model.predict(input_for(model, ds, chunk, neighbors));
        preds.insert(preds.end(), p.begin(), p.end());
    }
    return preds;
}

EvalReport evaluate(const RatModel& model, const Dataset& ds, std::span<const Record> slice,
                    const NeighborCache& neighbors, const TrainConfig& cfg, const std::vector<Segment>& segments) {
    if (slice.empty()) {
        throw UsageError("cannot evaluate an empty slice");
    }
    const auto preds = predict_records(model, ds, slice, neighbors, std::max<std::size_t>(cfg.batch_size, 256));
    std::vector<std::uint8_t> labels;
    labels.reserve(slice.size());
    for (const auto& r : slice) {
        labels.push_back(r.label);
    }
    EvalReport report;
    report.n = slice.size();
    report.auc = auc(preds, labels);
    report.logloss = logloss(preds, labels, cfg.logloss_clip_eps);
    for (const auto& seg : segments) {
        if (seg.member.size() != slice.size()) {
            throw UsageError("segment '" + seg.name + "' does not match the slice length");
        }
        std::vector<double> sp;
        std::vector<std::uint8_t> sl;
        for (std::size_t i = 0; i < slice.size(); ++i) {
            if (seg.member[i]) {
                sp.push_back(preds[i]);
                sl.push_back(labels[i]);
            }
        }
        report.segments[seg.name] = sp.empty() ? SegmentReport{} : metrics_of(sp, sl, cfg.logloss_clip_eps);
    }
    return report;
}

EvalReport evaluate(const RatModel& model, const Dataset& ds, std::span<const Record> slice,
                    const RetrievalIndex& index, const TrainConfig& cfg, const std::vector<Segment>& segments) {
    NeighborCache neighbors(ds, index, model.config().k);
    return evaluate(model, ds, slice, neighbors, cfg, segments);
}

TrainResult train(const Dataset& ds, const RetrievalIndex& index, const TrainConfig& cfg, const LogSink& sink) {
    cfg.validate();
    if (index.pool_size() != ds.split.train_end) {
        throw UsageError("the retrieval index must be built over the training slice");
    }
    using Clock = std::chrono::steady_clock;
    const auto start = Clock::now();
    auto elapsed_ms = [&] {
        return cfg.record_wall_time ? std::chrono::duration<double, std::milli>(Clock::now() - start).count() : 0.0;
    };

    const NeighborCache neighbors(ds, index, cfg.model.k);
    RatModel model(cfg.model, vocab_sizes_of(ds), cfg.seed);
    std::vector<Tensor> params;
    for (const auto& p : model.parameters()) {
        params.push_back(p.tensor);
    }
    Adam optimizer(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    std::mt19937_64 rng(cfg.seed);

    const auto train_records = ds.train();
    std::vector<std::size_t> order(train_records.size());
    std::iota(order.begin(), order.end(), 0);

    TrainResult result{model, {}, 0, -1.0, {}};
    std::vector<std::vector<double>> best = snapshot(model);
    std::size_t stale = 0;
    std::size_t step = 0;
    auto emit = [&](nlohmann::json rec) {
        if (sink) {
            sink(rec);
        }
        result.log.push_back(std::move(rec));
    };

    std::vector<Record> batch;
    std::vector<RetrievalResult> batch_neighbors;
    std::vector<double> batch_labels;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const auto end = std::min(order.size(), begin + cfg.batch_size);
            batch.clear();
            batch_neighbors.clear();
            batch_labels.clear();
            for (std::size_t i = begin; i < end; ++i) {
                const auto& r = train_records[order[i]];
                batch.push_back(r);
                batch_neighbors.push_back(neighbors[r.index]);
                batch_labels.push_back(static_cast<double>(r.label));
            }
            const auto input = model.build_input(batch, batch_neighbors, ds.records);
            const auto loss = bce_with_logits(model.logits(input), batch_labels);
            loss.backward();
            optimizer.step();
            loss_sum += loss.item() * static_cast<double>(end - begin);
            ++step;
        }
        const auto valid = evaluate(model, ds, ds.valid(), neighbors, cfg);
        emit(nlohmann::json{{"epoch", epoch},
                            {"step", step},
                            {"train_logloss", loss_sum / static_cast<double>(order.size())},
                            {"valid_auc", valid.auc},
                            {"valid_logloss", valid.logloss},
                            {"wall_ms", elapsed_ms()}});
        if (valid.auc > result.best_valid_auc) {
            result.best_valid_auc = valid.auc;
            result.best_epoch = epoch;
            best = snapshot(model);
            stale = 0;
        } else if (++stale >= cfg.early_stop_patience) {
            break;
        }
    }
    restore(model, best);
    result.test = evaluate(model, ds, ds.test(), neighbors, cfg);
    emit(nlohmann::json{{"event", "final"},
                        {"seed", cfg.seed},
                        {"variant", std::string(to_string(cfg.model.variant))},
                        {"best_epoch", result.best_epoch},
                        {"best_valid_auc", result.best_valid_auc},
                        {"test_auc", result.test.auc},
                        {"test_logloss", result.test.logloss},
                        {"params", model.parameter_count()},
                        {"wall_ms", elapsed_ms()}});
    return result;
}

double measure_forward_us(const RatModel& model, const Dataset& ds, std::span<const Record> records,
                          const NeighborCache& neighbors, std::size_t batch_size, std::size_t repeats) {
    if (records.empty()) {
        throw UsageError("no records to time");
    }
    NoGradGuard no_grad;
    std::vector<ModelInput> inputs;
    for (std::size_t begin = 0; begin < records.size(); begin += batch_size) {
        inputs.push_back(input_for(model, ds, records.subspan(begin, std::min(batch_size, records.size() - begin)),
                                   neighbors));
    }
    using Clock = std::chrono::steady_clock;
    double best = std::numeric_limits<double>::infinity();
    double sink = 0.0;
    for (std::size_t rep = 0; rep < std::max<std::size_t>(repeats, 1); ++rep) {
        const auto t0 = Clock::now();
        for (const auto& in : inputs) {
            sink += model.logits(in).data()[0];
        }
        const auto us = std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
        best = std::min(best, us);
    }
    if (std::isnan(sink)) {
        throw std::runtime_error("forward pass produced NaN");
    }
    return best / static_cast<double>(records.size());
}

std::vector<AblationRow> ablate(const Dataset& ds, const RetrievalIndex& index, const TrainConfig& cfg,
                                const LogSink& sink) {
    std::vector<AblationRow> rows;
    std::vector<RatModel> models;
    const NeighborCache neighbors(ds, index, cfg.model.k);
    for (auto variant : {Variant::JM, Variant::CE, Variant::PA, Variant::Cascade}) {
        auto run_cfg = cfg;
        run_cfg.model.variant = variant;
        auto result = train(ds, index, run_cfg, sink);
        AblationRow row;
        row.variant = variant;
        row.auc = result.test.auc;
        row.logloss = result.test.logloss;
        row.params = result.model.parameter_count();
        row.runtime_us = std::numeric_limits<double>::infinity();
        rows.push_back(row);
        models.push_back(std::move(result.model));
    }
    // Timing rounds interleave the variants so drift in machine load hits all of them alike.
    constexpr int kTimingRounds = 5;
    for (int round = 0; round < kTimingRounds; ++round) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            rows[i].runtime_us = std::min(
                rows[i].runtime_us, measure_forward_us(models[i], ds, ds.test(), neighbors, cfg.batch_size, 1));
        }
    }
    return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
    std::ostringstream out;
    out.precision(17);
    out << "variant,auc,logloss,params,runtime_us\n";
    for (const auto& r : rows) {
        out << to_string(r.variant) << ',' << r.auc << ',' << r.logloss << ',' << r.params << ',' << r.runtime_us
            << '\n';
    }
    return out.str();
}

}  // namespace rat
