#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "oracles.hpp"
#include "rat/error.hpp"
#include "rat/metrics.hpp"
#include "rat/synthetic.hpp"
#include "rat/training.hpp"

using namespace rat;

namespace {

Dataset tiny_task(std::uint64_t seed = 1) {
    SyntheticConfig sc;
    sc.num_keys = 6;
    sc.records_per_key = 20;
    sc.num_attributes = 2;
    sc.seed = seed;
    return synthetic_dataset(sc);
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.model.k = 3;
    cfg.model.embed_dim = 8;
    cfg.model.num_blocks = 1;
    cfg.model.num_heads = 2;
    cfg.model.mlp_ratio = 2;
    cfg.batch_size = 16;
    cfg.max_epochs = 2;
    cfg.learning_rate = 3e-3;
    cfg.record_wall_time = false;
    return cfg;
}

std::vector<std::uint8_t> bits(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_SUITE("training") {
    TEST_CASE("logloss by hand") {
        CHECK(logloss(std::vector<double>{0.5}, bits({1})) == doctest::Approx(0.693147).epsilon(1e-6));
        CHECK(logloss(std::vector<double>{1.0}, bits({1}), 1e-7) == doctest::Approx(1.00000005e-7).epsilon(1e-6));
        CHECK(logloss(std::vector<double>{0.9, 0.1}, bits({1, 0})) == doctest::Approx(0.105361).epsilon(1e-5));
        CHECK(std::isfinite(logloss(std::vector<double>{0.0}, bits({1}))));
        CHECK_THROWS_AS(logloss(std::vector<double>{0.5}, bits({1, 0})), UsageError);
        CHECK_THROWS_AS(logloss(std::vector<double>{}, bits({})), UsageError);
    }

    TEST_CASE("auc by hand") {
        CHECK(auc(std::vector<double>{0.9, 0.1}, bits({1, 0})) == 1.0);
        CHECK(auc(std::vector<double>{0.5, 0.5}, bits({1, 0})) == 0.5);
        CHECK(auc(std::vector<double>{0.8, 0.6, 0.4}, bits({1, 0, 1})) == 0.5);
        CHECK_THROWS_AS(auc(std::vector<double>{0.1, 0.2}, bits({1, 1})), UsageError);
        CHECK_THROWS_AS(auc(std::vector<double>{0.1}, bits({1, 0})), UsageError);
    }

    TEST_CASE("auc matches pairwise enumeration on random cases") {
        std::mt19937_64 rng(17);
        for (int trial = 0; trial < 1000; ++trial) {
            const std::size_t n = 2 + rng() % 60;
            // Coarse prediction grid so that ties are common.
            const std::uint64_t levels = 1 + rng() % 10;
            std::vector<double> preds(n);
            std::vector<std::uint8_t> labels(n);
            for (std::size_t i = 0; i < n; ++i) {
                preds[i] = static_cast<double>(rng() % levels) / 10.0;
                labels[i] = static_cast<std::uint8_t>(rng() & 1U);
            }
            labels[0] = 1;
            labels[1] = 0;
            CHECK(std::abs(auc(preds, labels) - oracle::pairwise_auc(preds, labels)) <= 1e-12);
        }
    }

    TEST_CASE("adam moves each weight by the step size on its first update") {
        const auto w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
        Adam opt({w}, 0.1, 0.9, 0.999, 1e-8);
        sum(mul(w, Tensor::from({3}, {2.0, -3.0, 0.0}))).backward();
        opt.step();
        CHECK(w.data()[0] == doctest::Approx(0.9).epsilon(1e-7));
        CHECK(w.data()[1] == doctest::Approx(-1.9).epsilon(1e-7));
        CHECK(w.data()[2] == 0.5);
        CHECK(opt.steps() == 1);
        for (double g : w.grad()) {
            CHECK(g == 0.0);
        }
    }

    TEST_CASE("training lowers the loss on a small set") {
        auto ds = tiny_task();
        ds.records.resize(64);
        ds.split = {44, 54};
        const auto index = RetrievalIndex::build(ds.train());
        const NeighborCache neighbors(ds, index, 3);
        auto cfg = tiny_config();
        RatModel model(cfg.model, {ds.schema[0].vocab_size(), ds.schema[1].vocab_size(), ds.schema[2].vocab_size()},
                       5);
        std::vector<Tensor> params;
        for (const auto& p : model.parameters()) {
            params.push_back(p.tensor);
        }
        Adam opt(params, 3e-3, 0.9, 0.999, 1e-8);
        std::vector<RetrievalResult> nbrs;
        std::vector<double> labels;
        for (const auto& r : ds.records) {
            nbrs.push_back(neighbors[r.index]);
            labels.push_back(r.label);
        }
        const auto input = model.build_input(ds.records, nbrs, ds.records);
        double first = 0.0;
        double last = 0.0;
        for (int step = 0; step < 200; ++step) {
            const auto loss = bce_with_logits(model.logits(input), labels);
            if (step == 0) {
                first = loss.item();
            }
            last = loss.item();
            loss.backward();
            opt.step();
        }
        CHECK(last < first);
    }

    TEST_CASE("neighbors are leakage-safe for training records") {
        const auto ds = tiny_task(3);
        const auto index = RetrievalIndex::build(ds.train());
        const NeighborCache cache(ds, index, 4);
        for (const auto& r : ds.records) {
            const auto& n = cache[r.index];
            const bool is_train = r.index < ds.split.train_end;
            CHECK(eligibility_for(ds, r) == (is_train ? Eligibility::StrictlyEarlier : Eligibility::WholePool));
            CHECK(n == index.retrieve(r, 4, eligibility_for(ds, r)));
            for (std::size_t i = 0; i < 4; ++i) {
                if (n.mask[i] && is_train) {
                    CHECK(earlier_than(ds.records[n.neighbor_indices[i]], r));
                }
            }
        }
    }

    TEST_CASE("segments") {
        const auto ds = tiny_task(4);
        const auto index = RetrievalIndex::build(ds.train());
        const auto cfg = tiny_config();
        const RatModel model(cfg.model, {ds.schema[0].vocab_size(), ds.schema[1].vocab_size(),
                                         ds.schema[2].vocab_size()},
                             2);
        const auto test = ds.test();
        Segment all{"all", std::vector<std::uint8_t>(test.size(), 1)};
        Segment even{"even", {}};
        Segment odd{"odd", {}};
        for (std::size_t i = 0; i < test.size(); ++i) {
            even.member.push_back(i % 2 == 0);
            odd.member.push_back(i % 2 == 1);
        }
        const auto report = evaluate(model, ds, test, index, cfg, {all, even, odd});
        CHECK(report.segments.at("all").logloss == report.logloss);
        CHECK(report.segments.at("even").n + report.segments.at("odd").n == report.n);

        const std::vector<double> pct{50.0, 100.0};
        const auto tails = tail_user_segments(ds, test, 0, pct);
        REQUIRE(tails.size() == 2);
        CHECK(tails[0].name == "tail50");
        CHECK(std::count(tails[1].member.begin(), tails[1].member.end(), 1) == static_cast<long>(test.size()));
        const auto half = std::count(tails[0].member.begin(), tails[0].member.end(), 1);
        CHECK(half == static_cast<long>(test.size() / 2));

        CHECK(parse_tail_segments("tail10,tail20") == std::vector<double>{10.0, 20.0});
        CHECK_THROWS_AS(parse_tail_segments("head10"), UsageError);
        CHECK_THROWS_AS(parse_tail_segments("tail0"), UsageError);
        CHECK_THROWS_AS(parse_tail_segments("tailx"), UsageError);
        CHECK_THROWS_AS(parse_tail_segments(""), UsageError);
    }

    TEST_CASE("perfect predictions score an AUC of one") {
        std::vector<double> preds{0.9, 0.8, 0.2, 0.1};
        CHECK(auc(preds, bits({1, 1, 0, 0})) == 1.0);
    }

    TEST_CASE("training is deterministic and logs every epoch") {
        const auto ds = tiny_task(5);
        const auto index = RetrievalIndex::build(ds.train());
        const auto cfg = tiny_config();
        std::vector<nlohmann::json> streamed;
        const auto a = train(ds, index, cfg, [&](const nlohmann::json& j) { streamed.push_back(j); });
        const auto b = train(ds, index, cfg);
        CHECK(a.log == b.log);
        CHECK(streamed == a.log);
        REQUIRE(a.model.parameters().size() == b.model.parameters().size());
        for (std::size_t i = 0; i < a.model.parameters().size(); ++i) {
            const auto x = a.model.parameters()[i].tensor.data();
            const auto y = b.model.parameters()[i].tensor.data();
            CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
        }
        REQUIRE(a.log.size() >= 2);
        for (std::size_t i = 0; i + 1 < a.log.size(); ++i) {
            for (const auto* key : {"epoch", "step", "train_logloss", "valid_auc", "valid_logloss", "wall_ms"}) {
                CHECK(a.log[i].contains(key));
            }
            CHECK(a.log[i]["wall_ms"] == 0.0);
        }
        const auto& final = a.log.back();
        CHECK(final["event"] == "final");
        CHECK(final["seed"] == cfg.seed);
        CHECK(final["test_auc"] == a.test.auc);
        CHECK(final["best_epoch"] == a.best_epoch);

        // Reloading the best epoch reproduces the logged test metrics.
        const auto again = evaluate(a.model, ds, ds.test(), index, cfg);
        CHECK(again.auc == a.test.auc);
        CHECK(again.logloss == a.test.logloss);
    }

    TEST_CASE("ablation reports four variants in a fixed order") {
        const auto ds = tiny_task(6);
        const auto index = RetrievalIndex::build(ds.train());
        auto cfg = tiny_config();
        cfg.max_epochs = 1;
        const auto rows = ablate(ds, index, cfg);
        REQUIRE(rows.size() == 4);
        CHECK(rows[0].variant == Variant::JM);
        CHECK(rows[1].variant == Variant::CE);
        CHECK(rows[2].variant == Variant::PA);
        CHECK(rows[3].variant == Variant::Cascade);
        for (const auto& r : rows) {
            CHECK(r.params > 0);
            CHECK(r.runtime_us > 0.0);
        }
        const auto csv = ablation_csv(rows);
        CHECK(csv.rfind("variant,auc,logloss,params,runtime_us\nJM,", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
    }

    TEST_CASE("train config validation and serialization") {
        auto cfg = tiny_config();
        cfg.model.variant = Variant::PA;
        const nlohmann::json j = cfg;
        CHECK(j.get<TrainConfig>() == cfg);
        cfg.batch_size = 0;
        CHECK_THROWS_AS(cfg.validate(), UsageError);
        cfg = tiny_config();
        cfg.learning_rate = -1.0;
        CHECK_THROWS_AS(cfg.validate(), UsageError);
        cfg = tiny_config();
        cfg.adam_beta2 = 1.0;
        CHECK_THROWS_AS(cfg.validate(), UsageError);
    }

    TEST_CASE("the synthetic task has balanced per-key training labels") {
        SyntheticConfig sc;
        sc.num_keys = 12;
        sc.records_per_key = 20;
        const auto ds = synthetic_dataset(sc);
        CHECK(ds.split.train_end == 12 * 14);
        CHECK(ds.split.valid_end == 12 * 18);
        std::map<std::uint32_t, int> positives;
        for (const auto& r : ds.train()) {
            positives[r.field_ids[0]] += r.label;
        }
        CHECK(positives.size() == 12);
        for (const auto& [key, count] : positives) {
            CHECK(count == 7);
        }
        // Each key has at most three label runs, and a label disagrees with the majority of
        // its three predecessors only in the first two records of a run.
        std::map<std::uint32_t, std::vector<int>> history;
        std::map<std::uint32_t, int> runs;
        for (const auto& r : ds.records) {
            auto& h = history[r.field_ids[0]];
            const bool new_run = h.empty() || h.back() != r.label;
            runs[r.field_ids[0]] += new_run ? 1 : 0;
            if (h.size() >= 3) {
                const int votes = h[h.size() - 1] + h[h.size() - 2] + h[h.size() - 3];
                if ((votes >= 2) != (r.label == 1)) {
                    const bool second_of_run = h.size() >= 2 && h.back() == r.label && h[h.size() - 2] != r.label;
                    CHECK((new_run || second_of_run));
                }
            }
            h.push_back(r.label);
        }
        for (const auto& [key, count] : runs) {
            CHECK(count <= 3);
        }
    }
}
