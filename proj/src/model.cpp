#include "rat/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "rat/binary_io.hpp"
#include "rat/error.hpp"

namespace rat {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

}  // namespace

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::Cascade: return "CASCADE";
        case Variant::JM: return "JM";
        case Variant::CE: return "CE";
        case Variant::PA: return "PA";
    }
    return "?";
}

Variant parse_variant(std::string_view name) {
    const auto n = lower(name);
    if (n == "cascade" || n == "rat") {
        return Variant::Cascade;
    }
    if (n == "jm") {
        return Variant::JM;
    }
    if (n == "ce") {
        return Variant::CE;
    }
    if (n == "pa") {
        return Variant::PA;
    }
    throw UsageError("unknown variant '" + std::string(name) + "' (expected CASCADE, JM, CE or PA)");
}

std::string_view to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

Activation parse_activation(std::string_view name) {
    const auto n = lower(name);
    if (n == "gelu") {
        return Activation::Gelu;
    }
    if (n == "relu") {
        return Activation::Relu;
    }
    throw UsageError("unknown activation '" + std::string(name) + "' (expected gelu or relu)");
}

void ModelConfig::validate() const {
    if (k == 0 || embed_dim == 0 || num_blocks == 0 || num_heads == 0 || mlp_ratio == 0) {
        throw UsageError("model dimensions must all be positive");
    }
    if (embed_dim % num_heads != 0) {
        throw UsageError("num_heads must divide embed_dim");
    }
    if (variant == Variant::PA && (embed_dim % 2 != 0 || (embed_dim / 2) % num_heads != 0)) {
        throw UsageError("PA needs num_heads to divide embed_dim / 2");
    }
    if (variant == Variant::CE && (mlp_ratio * embed_dim) % 2 != 0) {
        throw UsageError("CE needs an even MLP hidden width");
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"k", c.k},
                       {"embed_dim", c.embed_dim},
                       {"num_blocks", c.num_blocks},
                       {"num_heads", c.num_heads},
                       {"mlp_ratio", c.mlp_ratio},
                       {"variant", std::string(to_string(c.variant))},
                       {"activation", std::string(to_string(c.activation))},
                       {"cross_attention", c.cross_attention}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.k = j.at("k").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.num_blocks = j.at("num_blocks").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.activation = parse_activation(j.at("activation").get<std::string>());
    c.cross_attention = j.at("cross_attention").get<bool>();
}

std::size_t AttentionStats::total() const {
    std::size_t n = 0;
    for (auto e : entries_per_block) {
        n += e;
    }
    return n;
}

std::size_t cascade_entries_per_layer(std::size_t k, std::size_t f) {
    return (k + 1) * (f + 1) * (f + 1) + (f + 1) * (k + 1) * (k + 1);
}

std::size_t joint_entries_per_layer(std::size_t k, std::size_t f) {
    const auto tokens = (k + 1) * (f + 1);
    return tokens * tokens;
}

class RatModel::Initializer {
  public:
    Initializer(std::uint64_t seed, std::vector<NamedTensor>& params) : rng_(seed), params_(params) {}

    Tensor normal(std::string name, Shape shape, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<double> v(numel(shape));
        for (auto& x : v) {
            x = dist(rng_);
        }
        return add(std::move(name), std::move(shape), std::move(v));
    }

    Tensor constant(std::string name, Shape shape, double value) {
        return add(std::move(name), shape, std::vector<double>(numel(shape), value));
    }

    Linear linear(const std::string& name, std::size_t in, std::size_t out) {
        const double bound = std::sqrt(1.0 / static_cast<double>(in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<double> w(in * out);
        for (auto& x : w) {
            x = dist(rng_);
        }
        Linear l;
        l.weight = add(name + ".weight", {in, out}, std::move(w));
        l.bias = constant(name + ".bias", {out}, 0.0);
        return l;
    }

    Norm norm(const std::string& name, std::size_t d) {
        return Norm{constant(name + ".gamma", {d}, 1.0), constant(name + ".beta", {d}, 0.0)};
    }

    Attention attention(const std::string& name, std::size_t width, std::size_t heads) {
        Attention a;
        a.query = linear(name + ".query", width, width);
        a.key = linear(name + ".key", width, width);
        a.value = linear(name + ".value", width, width);
        a.output = linear(name + ".output", width, width);
        a.heads = heads;
        return a;
    }

    Mlp mlp(const std::string& name, std::size_t d, std::size_t hidden) {
        Mlp m;
        m.up = linear(name + ".up", d, hidden);
        m.down = linear(name + ".down", hidden, d);
        return m;
    }

  private:
    Tensor add(std::string name, Shape shape, std::vector<double> values) {
        auto t = Tensor::from(std::move(shape), std::move(values), true);
        params_.push_back({std::move(name), t});
        return t;
    }

    std::mt19937_64 rng_;
    std::vector<NamedTensor>& params_;
};

RatModel::RatModel(ModelConfig config, std::vector<std::size_t> vocab_sizes, std::uint64_t seed)
    : config_(config), vocab_sizes_(std::move(vocab_sizes)) {
    config_.validate();
    if (vocab_sizes_.empty()) {
        throw UsageError("model needs at least one feature field");
    }
    const auto d = config_.embed_dim;
    const auto hidden = config_.mlp_ratio * d;
    Initializer init(seed, params_);
    constexpr double kEmbeddingStd = 0.01;

    for (std::size_t f = 0; f < vocab_sizes_.size(); ++f) {
        feature_tables_.push_back(
            init.normal("embedding.field" + std::to_string(f), {vocab_sizes_[f] + 1, d}, kEmbeddingStd));
    }
    label_table_ = init.normal("embedding.label", {3, d}, kEmbeddingStd);
    pad_row_ = init.normal("embedding.pad", {1, d}, kEmbeddingStd);

    auto make_block = [&](BlockKind kind, const std::string& name) {
        Block b;
        b.kind = kind;
        switch (kind) {
            case BlockKind::Cascade:
                b.norm_intra = init.norm(name + ".norm_intra", d);
                b.intra = init.attention(name + ".intra", d, config_.num_heads);
                if (config_.cross_attention) {
                    b.norm_cross = init.norm(name + ".norm_cross", d);
                    b.cross = init.attention(name + ".cross", d, config_.num_heads);
                }
                b.norm_mlp = init.norm(name + ".norm_mlp", d);
                b.mlp = init.mlp(name + ".mlp", d, hidden);
                break;
            case BlockKind::Joint:
                b.norm_joint = init.norm(name + ".norm_joint", d);
                b.joint = init.attention(name + ".joint", d, config_.num_heads);
                b.norm_mlp = init.norm(name + ".norm_mlp", d);
                b.mlp = init.mlp(name + ".mlp", d, hidden);
                break;
            case BlockKind::IntraHalf:
                b.norm_intra = init.norm(name + ".norm_intra", d);
                b.intra = init.attention(name + ".intra", d, config_.num_heads);
                b.norm_mlp = init.norm(name + ".norm_mlp", d);
                b.mlp = init.mlp(name + ".mlp", d, hidden / 2);
                break;
            case BlockKind::CrossHalf:
                b.norm_cross = init.norm(name + ".norm_cross", d);
                b.cross = init.attention(name + ".cross", d, config_.num_heads);
                b.norm_mlp = init.norm(name + ".norm_mlp", d);
                b.mlp = init.mlp(name + ".mlp", d, hidden / 2);
                break;
            case BlockKind::Parallel:
                b.norm_parallel = init.norm(name + ".norm_parallel", d);
                b.proj_intra = init.linear(name + ".proj_intra", d, d / 2);
                b.intra = init.attention(name + ".intra", d / 2, config_.num_heads);
                b.proj_cross = init.linear(name + ".proj_cross", d, d / 2);
                b.cross = init.attention(name + ".cross", d / 2, config_.num_heads);
                b.norm_mlp = init.norm(name + ".norm_mlp", d);
                b.mlp = init.mlp(name + ".mlp", d, hidden);
                break;
        }
        blocks_.push_back(std::move(b));
    };

    for (std::size_t l = 0; l < config_.num_blocks; ++l) {
        const auto name = "block" + std::to_string(l);
        switch (config_.variant) {
            case Variant::Cascade: make_block(BlockKind::Cascade, name); break;
            case Variant::JM: make_block(BlockKind::Joint, name); break;
            case Variant::CE:
                make_block(BlockKind::IntraHalf, name + "a");
                make_block(BlockKind::CrossHalf, name + "b");
                break;
            case Variant::PA: make_block(BlockKind::Parallel, name); break;
        }
    }
    head_.weight = init.constant("head.weight", {d, 1}, 0.0);
    head_.bias = init.constant("head.bias", {1}, 0.0);
}

std::size_t RatModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        n += p.tensor.numel();
    }
    return n;
}

const Tensor& RatModel::parameter(std::string_view name) const {
    for (const auto& p : params_) {
        if (p.name == name) {
            return p.tensor;
        }
    }
    throw UsageError("no parameter named '" + std::string(name) + "'");
}

ModelInput RatModel::build_input(std::span<const Record> targets, std::span<const RetrievalResult> neighbors,
                                 std::span<const Record> pool) const {
    if (targets.size() != neighbors.size()) {
        throw UsageError("build_input: one neighbor set per target is required");
    }
    const auto k = config_.k;
    const auto fields = num_fields();
    const auto samples = k + 1;
    const auto tokens = fields + 1;
    const auto label_table = fields;
    const auto pad_table = fields + 1;
    constexpr std::size_t kUnknownLabel = 2;

    std::vector<RowRef> refs;
    refs.reserve(targets.size() * samples * tokens);
    Mask mask{{targets.size(), samples}, std::vector<std::uint8_t>(targets.size() * samples, 0)};

    auto push_record = [&](const Record& r, std::size_t label_row) {
        if (r.field_ids.size() != fields) {
            throw UsageError("record has " + std::to_string(r.field_ids.size()) + " fields, model expects " +
                             std::to_string(fields));
        }
        refs.push_back({label_table, label_row});
        for (std::size_t f = 0; f < fields; ++f) {
            if (r.field_ids[f] > vocab_sizes_[f]) {
                throw UsageError("field " + std::to_string(f) + " id " + std::to_string(r.field_ids[f]) +
                                 " exceeds the embedding vocabulary");
            }
            refs.push_back({f, r.field_ids[f]});
        }
    };

    for (std::size_t b = 0; b < targets.size(); ++b) {
        const auto& nb = neighbors[b];
        if (nb.neighbor_indices.size() != k || nb.mask.size() != k) {
            throw UsageError("build_input: expected exactly " + std::to_string(k) + " neighbor slots, got " +
                             std::to_string(nb.neighbor_indices.size()));
        }
        push_record(targets[b], kUnknownLabel);
        mask.data[b * samples] = 1;
        for (std::size_t j = 0; j < k; ++j) {
            if (!nb.mask[j]) {
                for (std::size_t t = 0; t < tokens; ++t) {
                    refs.push_back({pad_table, 0});
                }
                continue;
            }
            const auto idx = nb.neighbor_indices[j];
            if (idx >= pool.size() || pool[idx].index != idx) {
                throw UsageError("neighbor index " + std::to_string(idx) + " is not in the pool");
            }
            push_record(pool[idx], pool[idx].label);
            mask.data[b * samples + 1 + j] = 1;
        }
    }
    std::vector<Tensor> tables = feature_tables_;
    tables.push_back(label_table_);
    tables.push_back(pad_row_);
    auto values = gather_rows(tables, refs, {targets.size(), samples, tokens, config_.embed_dim});
    return ModelInput{std::move(values), std::move(mask)};
}

ModelInput RatModel::build_input(const Record& target, const RetrievalResult& neighbors,
                                 std::span<const Record> pool) const {
    return build_input(std::span(&target, 1), std::span(&neighbors, 1), pool);
}

Tensor RatModel::norm(const Norm& n, const Tensor& x) const { return layer_norm(x, n.gamma, n.beta); }

Tensor RatModel::mlp(const Mlp& m, const Tensor& x) const {
    auto h = linear(x, m.up.weight, m.up.bias);
    h = config_.activation == Activation::Gelu ? gelu(h) : relu(h);
    return linear(h, m.down.weight, m.down.bias);
}

// Multi-head self-attention over the second-to-last axis of x[..., L, E]; every leading
// axis indexes an independent sequence.
Tensor RatModel::attend(const Attention& attn, const Tensor& x, const Mask* key_mask, std::size_t batch,
                        std::size_t block, AttentionStats* stats) const {
    const auto& shape = x.shape();
    const auto rank = shape.size();
    const auto len = shape[rank - 2];
    const auto width = shape[rank - 1];
    const auto heads = attn.heads;
    const auto head_dim = width / heads;
    const Shape lead(shape.begin(), shape.end() - 2);

    std::vector<std::size_t> to_heads(rank + 1);
    for (std::size_t i = 0; i + 2 < rank; ++i) {
        to_heads[i] = i;
    }
    to_heads[rank - 2] = rank - 1;  // heads before sequence
    to_heads[rank - 1] = rank - 2;
    to_heads[rank] = rank;

    Shape split_shape = lead;
    split_shape.insert(split_shape.end(), {len, heads, head_dim});
    auto split = [&](const Linear& l) { return permute(reshape(linear(x, l.weight, l.bias), split_shape), to_heads); };

    const auto q = split(attn.query);
    const auto k = split(attn.key);
    const auto v = split(attn.value);
    const auto scores = scale(matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(head_dim)));
    const auto weights = softmax_lastdim(scores, key_mask);
    // to_heads swaps two adjacent axes, so it is its own inverse.
    auto merged = reshape(permute(matmul(weights, v), to_heads), shape);
    if (stats) {
        if (stats->entries_per_block.size() <= block) {
            stats->entries_per_block.resize(block + 1, 0);
        }
        stats->entries_per_block[block] += numel(lead) / batch * len * len;
    }
    return linear(merged, attn.output.weight, attn.output.bias);
}

Tensor RatModel::intra(const Attention& attn, const Tensor& x, std::size_t block, AttentionStats* stats) const {
    // Field tokens of each sample attend to each other; [B, S, T, E] already has T second to last.
    return attend(attn, x, nullptr, x.size(0), block, stats);
}

Tensor RatModel::cross(const Attention& attn, const Tensor& x, const Mask& sample_mask, std::size_t block,
                       AttentionStats* stats) const {
    const auto batch = x.size(0);
    const auto samples = x.size(1);
    // Scores are [B, T, H, S, S]; padded samples are masked as keys.
    Mask key_mask{{batch, 1, 1, 1, samples}, sample_mask.data};
    auto by_field = permute(x, {0, 2, 1, 3});
    return permute(attend(attn, by_field, &key_mask, batch, block, stats), {0, 2, 1, 3});
}

Tensor RatModel::joint(const Attention& attn, const Tensor& x, const Mask& sample_mask, std::size_t block,
                       AttentionStats* stats) const {
    const auto batch = x.size(0);
    const auto samples = x.size(1);
    const auto tokens = x.size(2);
    Mask key_mask{{batch, 1, 1, samples * tokens}, std::vector<std::uint8_t>(batch * samples * tokens)};
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < samples; ++s) {
            std::fill_n(key_mask.data.begin() + static_cast<std::ptrdiff_t>((b * samples + s) * tokens), tokens,
                        sample_mask.data[b * samples + s]);
        }
    }
    auto flat = reshape(x, {batch, samples * tokens, x.size(3)});
    return reshape(attend(attn, flat, &key_mask, batch, block, stats), x.shape());
}

void RatModel::check_input(const Tensor& x, const Mask& sample_mask) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != config_.k + 1 || s[2] != num_fields() + 1 || s[3] != config_.embed_dim) {
        throw UsageError("model input must be [B, " + std::to_string(config_.k + 1) + ", " +
                         std::to_string(num_fields() + 1) + ", " + std::to_string(config_.embed_dim) + "], got " +
                         shape_str(s));
    }
    if (sample_mask.shape != Shape{s[0], s[1]} || sample_mask.data.size() != s[0] * s[1]) {
        throw UsageError("sample mask must be [B, K+1]");
    }
    for (std::size_t b = 0; b < s[0]; ++b) {
        if (!sample_mask.data[b * s[1]]) {
            throw UsageError("the target sample must never be masked");
        }
    }
}

Tensor RatModel::intra_attention(std::size_t block, const Tensor& x, AttentionStats* stats) const {
    const auto& b = blocks_.at(block);
    if (!b.intra || !b.norm_intra) {
        throw UsageError("block " + std::to_string(block) + " has no standalone intra-sample attention");
    }
    return add(intra(*b.intra, norm(*b.norm_intra, x), block, stats), x);
}

Tensor RatModel::cross_attention(std::size_t block, const Tensor& x, const Mask& sample_mask,
                                 AttentionStats* stats) const {
    const auto& b = blocks_.at(block);
    if (!b.cross || !b.norm_cross) {
        throw UsageError("block " + std::to_string(block) + " has no standalone cross-sample attention");
    }
    check_input(x, sample_mask);
    return add(cross(*b.cross, norm(*b.norm_cross, x), sample_mask, block, stats), x);
}

Tensor RatModel::block_forward(std::size_t index, const Tensor& x, const Mask& sample_mask,
                               AttentionStats* stats) const {
    check_input(x, sample_mask);
    const auto& b = blocks_.at(index);
    Tensor h;
    switch (b.kind) {
        case BlockKind::Cascade:
            h = add(intra(*b.intra, norm(*b.norm_intra, x), index, stats), x);
            if (b.cross) {
                h = add(cross(*b.cross, norm(*b.norm_cross, h), sample_mask, index, stats), h);
            }
            break;
        case BlockKind::Joint:
            h = add(joint(*b.joint, norm(*b.norm_joint, x), sample_mask, index, stats), x);
            break;
        case BlockKind::IntraHalf:
            h = add(intra(*b.intra, norm(*b.norm_intra, x), index, stats), x);
            break;
        case BlockKind::CrossHalf:
            h = add(cross(*b.cross, norm(*b.norm_cross, x), sample_mask, index, stats), x);
            break;
        case BlockKind::Parallel: {
            const auto y = norm(*b.norm_parallel, x);
            auto a = intra(*b.intra, linear(y, b.proj_intra->weight, b.proj_intra->bias), index, stats);
            auto c = cross(*b.cross, linear(y, b.proj_cross->weight, b.proj_cross->bias), sample_mask, index, stats);
            h = add(concat_lastdim({a, c}), x);
            break;
        }
    }
    return add(mlp(b.mlp, norm(b.norm_mlp, h)), h);
}

Tensor RatModel::encode(const ModelInput& input, AttentionStats* stats) const {
    check_input(input.values, input.sample_mask);
    if (stats) {
        stats->entries_per_block.assign(blocks_.size(), 0);
    }
    Tensor x = input.values;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        x = block_forward(i, x, input.sample_mask, stats);
    }
    return x;
}

Tensor RatModel::logits(const ModelInput& input, AttentionStats* stats) const {
    const auto hidden = encode(input, stats);
    const auto batch = input.batch();
    const auto per_sample = (config_.k + 1) * (num_fields() + 1);
    std::vector<std::size_t> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        rows[b] = b * per_sample;  // sample 0, token 0: the target's unknown-label slot
    }
    const auto readout = take_rows(hidden, rows);
    return reshape(linear(readout, head_.weight, head_.bias), {batch});
}

std::vector<double> RatModel::predict(const ModelInput& input) const {
    NoGradGuard no_grad;
    const auto p = sigmoid(logits(input));
    // Saturated logits round to exactly 0 or 1 in double; keep probabilities inside (0, 1).
    constexpr double lo = std::numeric_limits<double>::denorm_min();
    const double hi = std::nextafter(1.0, 0.0);
    std::vector<double> out(p.data().begin(), p.data().end());
    for (auto& v : out) {
        v = std::clamp(v, lo, hi);
    }
    return out;
}

void save_checkpoint(const RatModel& model, const nlohmann::json& config, std::ostream& out) {
    io::write_magic(out, "RATM");
    io::write_u16(out, kCheckpointFormatVersion);
    io::write_string(out, config.dump());
    io::write_u32(out, static_cast<std::uint32_t>(model.num_fields()));
    for (auto v : model.vocab_sizes()) {
        io::write_u64(out, v);
    }
    io::write_u32(out, static_cast<std::uint32_t>(model.parameters().size()));
    for (const auto& p : model.parameters()) {
        io::write_string(out, p.name);
        const auto& shape = p.tensor.shape();
        io::write_u32(out, static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape) {
            io::write_u64(out, d);
        }
        for (double v : p.tensor.data()) {
            io::write_f64(out, v);
        }
    }
}

void save_checkpoint(const RatModel& model, const nlohmann::json& config, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write checkpoint '" + path.string() + "'");
    }
    save_checkpoint(model, config, out);
}

Checkpoint load_checkpoint(std::istream& in) {
    io::expect_magic(in, "RATM", "checkpoint");
    const auto version = io::read_u16(in);
    if (version != kCheckpointFormatVersion) {
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    }
    nlohmann::json config;
    try {
        config = nlohmann::json::parse(io::read_string(in));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: bad config echo: ") + e.what());
    }
    const auto fields = io::read_u32(in);
    std::vector<std::size_t> vocab(fields);
    for (auto& v : vocab) {
        v = io::read_u64(in);
    }
    ModelConfig mc;
    try {
        mc = config.at("model").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: bad model config: ") + e.what());
    }
    RatModel model(mc, vocab, 0);
    const auto count = io::read_u32(in);
    if (count != model.parameters().size()) {
        throw DataError("checkpoint: parameter count does not match the model config");
    }
    for (const auto& p : model.parameters()) {
        if (io::read_string(in) != p.name) {
            throw DataError("checkpoint: parameter order mismatch at '" + p.name + "'");
        }
        const auto rank = io::read_u32(in);
        Shape shape(rank);
        for (auto& d : shape) {
            d = io::read_u64(in);
        }
        if (shape != p.tensor.shape()) {
            throw DataError("checkpoint: shape mismatch for '" + p.name + "'");
        }
        auto data = p.tensor.mutable_data();
        for (auto& v : data) {
            v = io::read_f64(in);
        }
    }
    io::expect_eof(in, "checkpoint");
    return Checkpoint{std::move(model), std::move(config)};
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint '" + path.string() + "'");
    }
    return load_checkpoint(in);
}

}  // namespace rat
