#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rat {

// Id shared by empty cells and values never seen in the training slice.
inline constexpr std::uint32_t kMissingId = 0;

// Vocabulary of one categorical column. Ids are dense and start at 1.
class FieldSchema {
  public:
    FieldSchema() = default;
    explicit FieldSchema(std::string name) : name_(std::move(name)) {}

    const std::string& name() const { return name_; }

    // Number of real values, not counting the missing sentinel.
    std::size_t vocab_size() const { return values_.size(); }

    // kMissingId for empty or unseen values.
    std::uint32_t id_of(std::string_view value) const;

    // Throws UsageError for kMissingId or an out-of-range id.
    const std::string& value_of(std::uint32_t id) const;

    // Returns the existing id, or assigns the next one.
    std::uint32_t intern(std::string_view value);

    bool operator==(const FieldSchema& other) const {
        return name_ == other.name_ && values_ == other.values_;
    }

  private:
    std::string name_;
    std::vector<std::string> values_;
    std::unordered_map<std::string, std::uint32_t> ids_;
};

struct Record {
    std::vector<std::uint32_t> field_ids;
    std::uint8_t label = 0;
    std::int64_t timestamp = 0;
    std::uint64_t index = 0;

    bool operator==(const Record&) const = default;
};

// Lexicographic (timestamp, index) order used for "strictly earlier".
inline bool earlier_than(const Record& a, const Record& b) {
    return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.index < b.index;
}

struct SplitRatios {
    double train = 0.7;
    double valid = 0.2;
    double test = 0.1;

    bool operator==(const SplitRatios&) const = default;
};

// Record positions: train = [0, train_end), valid = [train_end, valid_end), test = [valid_end, n).
struct SplitMarks {
    std::size_t train_end = 0;
    std::size_t valid_end = 0;

    bool operator==(const SplitMarks&) const = default;
};

struct SchemaSpec {
    std::string label_column;
    std::optional<std::string> timestamp_column;  // row order is chronological when absent
    std::vector<std::string> feature_columns;
    char delimiter = ',';
    SplitRatios ratios;
};

struct Dataset {
    std::vector<FieldSchema> schema;
    std::vector<Record> records;  // sorted by (timestamp, index)
    SplitMarks split;
    std::size_t missing_cells = 0;

    std::size_t num_fields() const { return schema.size(); }
    std::size_t size() const { return records.size(); }
    double missing_ratio() const;
    double positive_ratio() const;

    std::span<const Record> train() const;
    std::span<const Record> valid() const;
    std::span<const Record> test() const;

    // Maps raw cell strings to ids with this dataset's vocabularies.
    std::vector<std::uint32_t> encode(std::span<const std::string> cells) const;

    bool operator==(const Dataset& other) const {
        return schema == other.schema && records == other.records && split == other.split &&
               missing_cells == other.missing_cells;
    }
};

// Split counts for n records: train = round(n * r_train), valid end = round(n * (r_train + r_valid)).
// Throws UsageError on bad ratios and DataError if any split would be empty.
SplitMarks compute_split(std::size_t n, const SplitRatios& ratios);

// Re-places split marks on an already sorted dataset. Vocabularies are left untouched.
Dataset chronological_split(Dataset ds, const SplitRatios& ratios);

// Reads a header-first CSV, sorts chronologically, splits, and builds vocabularies from the
// train slice only. `source` names the input in error messages.
Dataset parse_csv(std::istream& in, const SchemaSpec& spec, std::string_view source = "<stream>");
Dataset load_csv(const std::filesystem::path& path, const SchemaSpec& spec);

// Splits one CSV line honoring double quotes. Throws DataError on an unterminated quote.
std::vector<std::string> split_csv_line(std::string_view line, char delimiter);

// RATD binary format; see docs/formats.md.
inline constexpr std::uint16_t kDatasetFormatVersion = 1;
void save_dataset(const Dataset& ds, std::ostream& out);
Dataset load_dataset(std::istream& in);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace rat
