#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rat/data.hpp"
#include "rat/retrieval.hpp"
#include "rat/tensor.hpp"

namespace rat {

// Block designs compared in the ablation.
enum class Variant {
    Cascade,  // intra-sample attention, then cross-sample attention, then MLP, in one block
    JM,       // joint attention over all (K+1)(F+1) tokens, then MLP
    CE,       // 2L half-blocks alternating intra-only and cross-only, each with its own MLP
    PA,       // intra and cross attention side by side at width D/2, concatenated, then MLP
};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);  // case-insensitive; throws UsageError

enum class Activation { Gelu, Relu };
std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

struct ModelConfig {
    std::size_t k = 5;
    std::size_t embed_dim = 16;
    std::size_t num_blocks = 2;
    std::size_t num_heads = 2;
    std::size_t mlp_ratio = 4;
    Variant variant = Variant::Cascade;
    Activation activation = Activation::Gelu;
    // Off = intra-only ablation: cascade blocks skip cross-sample attention entirely.
    bool cross_attention = true;

    // Throws UsageError when dimensions are inconsistent for the chosen variant.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Score-matrix entries per example, one counter per block, counted once per head group.
struct AttentionStats {
    std::vector<std::size_t> entries_per_block;
    std::size_t total() const;
};

// Stacked retrieval-augmented input for a batch: values [B, K+1, F+1, D] and a
// sample mask [B, K+1] (1 = target or real neighbor, 0 = padding).
struct ModelInput {
    Tensor values;
    Mask sample_mask;
    std::size_t batch() const { return values.size(0); }
};

// Closed-form attention entry counts for one layer at K neighbors and F fields.
std::size_t cascade_entries_per_layer(std::size_t k, std::size_t f);
std::size_t joint_entries_per_layer(std::size_t k, std::size_t f);

class RatModel {
  public:
    // vocab_sizes[f] counts real values of field f (the embedding table gets one extra
    // row for the missing id).
    RatModel(ModelConfig config, std::vector<std::size_t> vocab_sizes, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::size_t num_fields() const { return vocab_sizes_.size(); }
    const std::vector<std::size_t>& vocab_sizes() const { return vocab_sizes_; }
    const std::vector<NamedTensor>& parameters() const { return params_; }
    std::size_t parameter_count() const;
    const Tensor& parameter(std::string_view name) const;

    // Tables: feature_table(f) is [(vocab_f + 1), D]; label_table() is [3, D] with rows
    // unclick / click / unknown; pad_row() is [1, D].
    const Tensor& feature_table(std::size_t field) const { return feature_tables_.at(field); }
    const Tensor& label_table() const { return label_table_; }
    const Tensor& pad_row() const { return pad_row_; }

    // Neighbor ids in `neighbors` are looked up in `pool` by record index.
    ModelInput build_input(std::span<const Record> targets, std::span<const RetrievalResult> neighbors,
                           std::span<const Record> pool) const;
    ModelInput build_input(const Record& target, const RetrievalResult& neighbors, std::span<const Record> pool) const;

    // Hidden states after all blocks, same shape as input.values.
    Tensor encode(const ModelInput& input, AttentionStats* stats = nullptr) const;
    // Click logits [B] read from the target's label token.
    Tensor logits(const ModelInput& input, AttentionStats* stats = nullptr) const;
    // Click probabilities in (0, 1), computed without recording a graph.
    std::vector<double> predict(const ModelInput& input) const;

    // Exposed for testing the individual sub-layers on [B, K+1, F+1, D] inputs.
    Tensor intra_attention(std::size_t block, const Tensor& x, AttentionStats* stats = nullptr) const;
    Tensor cross_attention(std::size_t block, const Tensor& x, const Mask& sample_mask,
                           AttentionStats* stats = nullptr) const;
    Tensor block_forward(std::size_t block, const Tensor& x, const Mask& sample_mask,
                         AttentionStats* stats = nullptr) const;
    std::size_t num_block_modules() const { return blocks_.size(); }

  private:
    struct Linear {
        Tensor weight;  // [in, out]
        Tensor bias;    // [out]
    };
    struct Norm {
        Tensor gamma;
        Tensor beta;
    };
    struct Attention {
        Linear query, key, value, output;
        std::size_t heads = 1;
    };
    struct Mlp {
        Linear up, down;
    };
    enum class BlockKind { Cascade, Joint, IntraHalf, CrossHalf, Parallel };
    struct Block {
        BlockKind kind = BlockKind::Cascade;
        std::optional<Norm> norm_intra, norm_cross, norm_joint, norm_parallel;
        std::optional<Attention> intra, cross, joint;
        std::optional<Linear> proj_intra, proj_cross;
        Norm norm_mlp;
        Mlp mlp;
    };

    class Initializer;

    Tensor attend(const Attention& attn, const Tensor& x, const Mask* key_mask, std::size_t batch,
                  std::size_t block, AttentionStats* stats) const;
    Tensor intra(const Attention& attn, const Tensor& x, std::size_t block, AttentionStats* stats) const;
    Tensor cross(const Attention& attn, const Tensor& x, const Mask& sample_mask, std::size_t block,
                 AttentionStats* stats) const;
    Tensor joint(const Attention& attn, const Tensor& x, const Mask& sample_mask, std::size_t block,
                 AttentionStats* stats) const;
    Tensor mlp(const Mlp& m, const Tensor& x) const;
    Tensor norm(const Norm& n, const Tensor& x) const;
    void check_input(const Tensor& x, const Mask& sample_mask) const;

    ModelConfig config_;
    std::vector<std::size_t> vocab_sizes_;
    std::vector<Tensor> feature_tables_;
    Tensor label_table_;
    Tensor pad_row_;
    std::vector<Block> blocks_;
    Linear head_;
    std::vector<NamedTensor> params_;
};

// RATM checkpoint; see docs/formats.md. `config_json` must contain the model config under
// the key "model"; it is stored verbatim.
inline constexpr std::uint16_t kCheckpointFormatVersion = 1;

struct Checkpoint {
    RatModel model;
    nlohmann::json config;
};

void save_checkpoint(const RatModel& model, const nlohmann::json& config, std::ostream& out);
void save_checkpoint(const RatModel& model, const nlohmann::json& config, const std::filesystem::path& path);
Checkpoint load_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rat
