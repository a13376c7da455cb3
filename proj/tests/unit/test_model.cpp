#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "rat/error.hpp"
#include "rat/model.hpp"

using namespace rat;

namespace {

ModelConfig small_config(Variant v, std::size_t k = 5) {
    ModelConfig c;
    c.k = k;
    c.embed_dim = 8;
    c.num_blocks = 1;
    c.num_heads = 2;
    c.mlp_ratio = 2;
    c.variant = v;
    return c;
}

Tensor random_values(std::mt19937_64& rng, Shape shape) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(numel(shape));
    for (auto& x : v) {
        x = dist(rng);
    }
    return Tensor::from(std::move(shape), std::move(v));
}

Mask random_mask(std::mt19937_64& rng, std::size_t batch, std::size_t samples) {
    Mask m{{batch, samples}, std::vector<std::uint8_t>(batch * samples)};
    for (std::size_t b = 0; b < batch; ++b) {
        m.data[b * samples] = 1;
        for (std::size_t s = 1; s < samples; ++s) {
            m.data[b * samples + s] = static_cast<std::uint8_t>(rng() % 3 != 0);
        }
    }
    return m;
}

void randomize(const RatModel& model, std::mt19937_64& rng, double sd = 0.3) {
    std::normal_distribution<double> dist(0.0, sd);
    for (const auto& p : model.parameters()) {
        for (auto& v : p.tensor.mutable_data()) {
            v += dist(rng);
        }
    }
}

std::vector<Record> toy_pool() {
    std::vector<Record> pool;
    for (std::uint64_t i = 0; i < 6; ++i) {
        Record r;
        r.index = i;
        r.timestamp = static_cast<std::int64_t>(i);
        r.label = static_cast<std::uint8_t>(i % 2);
        r.field_ids = {static_cast<std::uint32_t>(1 + i % 3), static_cast<std::uint32_t>(i % 4),
                       static_cast<std::uint32_t>(1 + i % 2)};
        pool.push_back(r);
    }
    return pool;
}

RetrievalResult neighbors_of(std::vector<std::uint64_t> idx, std::size_t k) {
    RetrievalResult r;
    for (std::size_t i = 0; i < k; ++i) {
        const bool real = i < idx.size();
        r.neighbor_indices.push_back(real ? idx[i] : kPadNeighbor);
        r.scores.push_back(real ? 1.0 : 0.0);
        r.mask.push_back(real ? 1 : 0);
    }
    return r;
}

bool same_values(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

void zero(const RatModel& model, const std::string& name) {
    for (auto& v : model.parameter(name).mutable_data()) {
        v = 0.0;
    }
}

}  // namespace

TEST_SUITE("model") {
    TEST_CASE("input stacking places label, feature and pad embeddings") {
        ModelConfig cfg;
        cfg.k = 5;
        cfg.embed_dim = 16;
        const RatModel model(cfg, {3, 3, 2}, 1);
        const auto pool = toy_pool();
        const auto input = model.build_input(pool[5], neighbors_of({1, 2}, 5), pool);
        CHECK(input.values.shape() == Shape{1, 6, 4, 16});
        CHECK(input.sample_mask.data == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0});
        const auto v = input.values.data();
        const auto row = [&](std::size_t s, std::size_t t) { return v.subspan((s * 4 + t) * 16, 16); };
        const auto table_row = [](const Tensor& t, std::size_t r) { return t.data().subspan(r * 16, 16); };
        auto eq = [](std::span<const double> a, std::span<const double> b) {
            return std::equal(a.begin(), a.end(), b.begin(), b.end());
        };
        CHECK(eq(row(0, 0), table_row(model.label_table(), 2)));
        CHECK(eq(row(1, 0), table_row(model.label_table(), 1)));  // pool[1].label == 1
        CHECK(eq(row(2, 0), table_row(model.label_table(), 0)));
        for (std::size_t f = 0; f < 3; ++f) {
            CHECK(eq(row(0, f + 1), table_row(model.feature_table(f), pool[5].field_ids[f])));
            CHECK(eq(row(2, f + 1), table_row(model.feature_table(f), pool[2].field_ids[f])));
        }
        for (std::size_t t = 0; t < 4; ++t) {
            CHECK(eq(row(4, t), model.pad_row().data()));
        }
    }

    TEST_CASE("bad neighbor references are rejected") {
        const RatModel model(small_config(Variant::Cascade, 2), {3, 3, 2}, 1);
        const auto pool = toy_pool();
        CHECK_THROWS_AS(model.build_input(pool[0], neighbors_of({9}, 2), pool), UsageError);
        CHECK_THROWS_AS(model.build_input(pool[0], neighbors_of({1}, 3), pool), UsageError);
        auto bad = pool[0];
        bad.field_ids[0] = 7;
        CHECK_THROWS_AS(model.build_input(bad, neighbors_of({1}, 2), pool), UsageError);
    }

    TEST_CASE("attention entry counts match the closed forms") {
        CHECK(cascade_entries_per_layer(5, 3) == 240);
        CHECK(joint_entries_per_layer(5, 3) == 576);
        std::mt19937_64 rng(1);
        const RatModel cascade(small_config(Variant::Cascade), {4, 4, 4}, 1);
        const auto x = random_values(rng, {2, 6, 4, 8});
        const auto mask = random_mask(rng, 2, 6);
        AttentionStats intra;
        cascade.intra_attention(0, x, &intra);
        CHECK(intra.total() == 96);
        AttentionStats cross;
        cascade.cross_attention(0, x, mask, &cross);
        CHECK(cross.total() == 144);
        AttentionStats both;
        cascade.block_forward(0, x, mask, &both);
        CHECK(both.total() == 240);
        const RatModel jm(small_config(Variant::JM), {4, 4, 4}, 1);
        AttentionStats joint;
        jm.block_forward(0, x, mask, &joint);
        CHECK(joint.total() == 576);
    }

    TEST_CASE("zero output projections make attention the identity") {
        std::mt19937_64 rng(2);
        const RatModel model(small_config(Variant::Cascade), {4, 4, 4}, 3);
        randomize(model, rng);
        zero(model, "block0.intra.output.weight");
        zero(model, "block0.intra.output.bias");
        zero(model, "block0.cross.output.weight");
        zero(model, "block0.cross.output.bias");
        const auto x = random_values(rng, {2, 6, 4, 8});
        const auto mask = random_mask(rng, 2, 6);
        CHECK(same_values(model.intra_attention(0, x), x));
        CHECK(same_values(model.cross_attention(0, x, mask), x));

        // The block is now a per-token MLP plus residual: other tokens cannot matter.
        const auto y = model.block_forward(0, x, mask);
        auto x2 = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
        for (std::size_t i = 8; i < x2.numel(); ++i) {
            x2.mutable_data()[i] += 1.0;
        }
        const auto y2 = model.block_forward(0, x2, mask);
        for (std::size_t i = 0; i < 8; ++i) {
            CHECK(y.data()[i] == y2.data()[i]);
        }
    }

    TEST_CASE("intra attention is sample-equivariant and cross attention field-equivariant") {
        std::mt19937_64 rng(3);
        const RatModel model(small_config(Variant::Cascade), {4, 4, 4}, 5);
        randomize(model, rng);
        const auto x = random_values(rng, {1, 6, 4, 8});
        const std::vector<std::size_t> sample_perm{3, 0, 5, 1, 4, 2};
        const std::vector<std::size_t> field_perm{2, 0, 3, 1};
        auto permuted = [&](const Tensor& t, bool samples) {
            std::vector<double> out(t.numel());
            for (std::size_t s = 0; s < 6; ++s) {
                for (std::size_t f = 0; f < 4; ++f) {
                    const auto src_s = samples ? sample_perm[s] : s;
                    const auto src_f = samples ? f : field_perm[f];
                    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>((src_s * 4 + src_f) * 8), 8,
                                out.begin() + static_cast<std::ptrdiff_t>((s * 4 + f) * 8));
                }
            }
            return Tensor::from(t.shape(), std::move(out));
        };
        const auto a = model.intra_attention(0, permuted(x, true));
        const auto b = permuted(model.intra_attention(0, x), true);
        for (std::size_t i = 0; i < a.numel(); ++i) {
            CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
        }
        const Mask all{{1, 6}, std::vector<std::uint8_t>(6, 1)};
        const auto c = model.cross_attention(0, permuted(x, false), all);
        const auto d = permuted(model.cross_attention(0, x, all), false);
        for (std::size_t i = 0; i < c.numel(); ++i) {
            CHECK(c.data()[i] == doctest::Approx(d.data()[i]).epsilon(1e-12));
        }
    }

    TEST_CASE("cross attention with every neighbor masked sees only the target") {
        std::mt19937_64 rng(4);
        const RatModel model(small_config(Variant::Cascade), {4, 4, 4}, 6);
        randomize(model, rng);
        const auto x = random_values(rng, {1, 6, 4, 8});
        const Mask only_target{{1, 6}, {1, 0, 0, 0, 0, 0}};
        const auto y = model.cross_attention(0, x, only_target);
        // With a single key the attention weight is 1: out = Wo (Wv LN(x) + bv) + bo + x.
        const auto ln = layer_norm(take_rows(x, std::vector<std::size_t>{0, 1, 2, 3}),
                                   model.parameter("block0.norm_cross.gamma"),
                                   model.parameter("block0.norm_cross.beta"));
        const auto v = linear(ln, model.parameter("block0.cross.value.weight"), model.parameter("block0.cross.value.bias"));
        const auto o = linear(v, model.parameter("block0.cross.output.weight"), model.parameter("block0.cross.output.bias"));
        for (std::size_t i = 0; i < 32; ++i) {
            CHECK(y.data()[i] == doctest::Approx(o.data()[i] + x.data()[i]).epsilon(1e-12));
        }
    }

    TEST_CASE("joint attention over the target alone equals intra attention") {
        std::mt19937_64 rng(5);
        const RatModel jm(small_config(Variant::JM), {4, 4, 4}, 7);
        randomize(jm, rng);
        auto cfg = small_config(Variant::Cascade);
        cfg.cross_attention = false;
        const RatModel intra_only(cfg, {4, 4, 4}, 8);
        for (const auto& p : intra_only.parameters()) {
            std::string name = p.name;
            for (const auto& [from, to] : {std::pair<std::string, std::string>{"norm_intra", "norm_joint"},
                                           {".intra.", ".joint."}}) {
                if (const auto at = name.find(from); at != std::string::npos) {
                    name.replace(at, from.size(), to);
                }
            }
            const auto src = jm.parameter(name).data();
            std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
        }
        const auto x = random_values(rng, {1, 6, 4, 8});
        const Mask only_target{{1, 6}, {1, 0, 0, 0, 0, 0}};
        const auto a = jm.block_forward(0, x, only_target);
        const auto b = intra_only.block_forward(0, x, only_target);
        for (std::size_t i = 0; i < 32; ++i) {
            CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
        }
    }

    TEST_CASE("every variant keeps the input shape") {
        std::mt19937_64 rng(6);
        for (auto v : {Variant::Cascade, Variant::JM, Variant::CE, Variant::PA}) {
            auto cfg = small_config(v);
            cfg.num_blocks = 2;
            const RatModel model(cfg, {4, 4, 4}, 9);
            const ModelInput in{random_values(rng, {3, 6, 4, 8}), random_mask(rng, 3, 6)};
            CHECK(model.encode(in).shape() == Shape{3, 6, 4, 8});
            CHECK(model.logits(in).shape() == Shape{3});
        }
        CHECK_THROWS_AS(parse_variant("transformer"), UsageError);
        CHECK(parse_variant("Cascade") == Variant::Cascade);
        CHECK(parse_variant("jm") == Variant::JM);
        CHECK(parse_variant("CE") == Variant::CE);
        CHECK(parse_variant("pa") == Variant::PA);
    }

    TEST_CASE("a zero head predicts one half, and predictions stay in (0, 1)") {
        std::mt19937_64 rng(7);
        const RatModel model(small_config(Variant::Cascade), {4, 4, 4}, 10);
        const ModelInput in{random_values(rng, {4, 6, 4, 8}), random_mask(rng, 4, 6)};
        for (double p : model.predict(in)) {
            CHECK(p == 0.5);
        }
        randomize(model, rng, 2.0);
        for (double p : model.predict(in)) {
            CHECK(p > 0.0);
            CHECK(p < 1.0);
        }
    }

    TEST_CASE("head gradients match finite differences") {
        std::mt19937_64 rng(8);
        const RatModel model(small_config(Variant::Cascade), {4, 4, 4}, 11);
        randomize(model, rng);
        const ModelInput in{random_values(rng, {3, 6, 4, 8}), random_mask(rng, 3, 6)};
        const std::vector<double> labels{1, 0, 1};
        for (const auto& p : model.parameters()) {
            p.tensor.zero_grad();
        }
        bce_with_logits(model.logits(in), labels).backward();
        for (const std::string name : {"head.weight", "head.bias"}) {
            const auto& t = model.parameter(name);
            const std::vector<double> analytic(t.grad().begin(), t.grad().end());
            for (std::size_t i = 0; i < analytic.size(); ++i) {
                const double numeric = oracle::central_difference(t.mutable_data(), i, 1e-5, [&] {
                    NoGradGuard guard;
                    return bce_with_logits(model.logits(in), labels).item();
                });
                CHECK(oracle::relative_error(analytic[i], numeric) <= 1e-4);
            }
        }
    }

    TEST_CASE("JM, PA and CASCADE have comparable size when embeddings dominate") {
        ModelConfig cfg;
        const std::vector<std::size_t> vocab{3000, 2000, 1500};
        std::vector<double> counts;
        for (auto v : {Variant::JM, Variant::PA, Variant::Cascade}) {
            cfg.variant = v;
            counts.push_back(static_cast<double>(RatModel(cfg, vocab, 1).parameter_count()));
        }
        const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
        CHECK(*hi / *lo <= 1.05);
    }

    TEST_CASE("initialization is deterministic per seed") {
        const RatModel a(small_config(Variant::PA), {4, 4, 4}, 3);
        const RatModel b(small_config(Variant::PA), {4, 4, 4}, 3);
        const RatModel c(small_config(Variant::PA), {4, 4, 4}, 4);
        bool differs = false;
        for (std::size_t i = 0; i < a.parameters().size(); ++i) {
            CHECK(same_values(a.parameters()[i].tensor, b.parameters()[i].tensor));
            differs = differs || !same_values(a.parameters()[i].tensor, c.parameters()[i].tensor);
        }
        CHECK(differs);
    }

    TEST_CASE("invalid configurations are rejected") {
        auto cfg = small_config(Variant::Cascade);
        cfg.num_heads = 3;
        CHECK_THROWS_AS(cfg.validate(), UsageError);
        cfg = small_config(Variant::PA);
        cfg.num_heads = 8;
        CHECK_THROWS_AS(cfg.validate(), UsageError);
        cfg = small_config(Variant::Cascade);
        cfg.k = 0;
        CHECK_THROWS_AS(RatModel(cfg, {2}, 1), UsageError);
    }

    TEST_CASE("checkpoints round-trip exactly") {
        std::mt19937_64 rng(9);
        const RatModel model(small_config(Variant::CE), {4, 5, 6}, 12);
        randomize(model, rng);
        const nlohmann::json config{{"model", model.config()}, {"note", "x"}};
        std::ostringstream out;
        save_checkpoint(model, config, out);
        std::istringstream in(out.str());
        const auto loaded = load_checkpoint(in);
        CHECK(loaded.config == config);
        CHECK(loaded.model.config() == model.config());
        REQUIRE(loaded.model.parameters().size() == model.parameters().size());
        for (std::size_t i = 0; i < model.parameters().size(); ++i) {
            CHECK(loaded.model.parameters()[i].name == model.parameters()[i].name);
            CHECK(same_values(loaded.model.parameters()[i].tensor, model.parameters()[i].tensor));
        }
        const auto bytes = out.str();
        std::istringstream truncated(bytes.substr(0, bytes.size() - 8));
        CHECK_THROWS_AS(load_checkpoint(truncated), DataError);
    }
}
