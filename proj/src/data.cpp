#include "rat/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "rat/binary_io.hpp"
#include "rat/error.hpp"

namespace rat {

std::uint32_t FieldSchema::id_of(std::string_view value) const {
    if (value.empty()) {
        return kMissingId;
    }
    auto it = ids_.find(std::string(value));
    return it == ids_.end() ? kMissingId : it->second;
}

const std::string& FieldSchema::value_of(std::uint32_t id) const {
    if (id == kMissingId || id > values_.size()) {
        throw UsageError("field '" + name_ + "': no value for id " + std::to_string(id));
    }
    return values_[id - 1];
}

std::uint32_t FieldSchema::intern(std::string_view value) {
    if (value.empty()) {
        return kMissingId;
    }
    auto [it, inserted] = ids_.try_emplace(std::string(value), static_cast<std::uint32_t>(values_.size() + 1));
    if (inserted) {
        values_.emplace_back(value);
    }
    return it->second;
}

double Dataset::missing_ratio() const {
    const auto cells = records.size() * schema.size();
    return cells == 0 ? 0.0 : static_cast<double>(missing_cells) / static_cast<double>(cells);
}

double Dataset::positive_ratio() const {
    if (records.empty()) {
        return 0.0;
    }
    const auto pos = std::count_if(records.begin(), records.end(), [](const Record& r) { return r.label == 1; });
    return static_cast<double>(pos) / static_cast<double>(records.size());
}

std::span<const Record> Dataset::train() const { return std::span(records).subspan(0, split.train_end); }

std::span<const Record> Dataset::valid() const {
    return std::span(records).subspan(split.train_end, split.valid_end - split.train_end);
}

std::span<const Record> Dataset::test() const { return std::span(records).subspan(split.valid_end); }

std::vector<std::uint32_t> Dataset::encode(std::span<const std::string> cells) const {
    if (cells.size() != schema.size()) {
        throw DataError("expected " + std::to_string(schema.size()) + " feature values, got " +
                        std::to_string(cells.size()));
    }
    std::vector<std::uint32_t> ids(cells.size());
    for (std::size_t f = 0; f < cells.size(); ++f) {
        ids[f] = schema[f].id_of(cells[f]);
    }
    return ids;
}

SplitMarks compute_split(std::size_t n, const SplitRatios& ratios) {
    if (!(ratios.train > 0.0 && ratios.valid > 0.0 && ratios.test > 0.0)) {
        throw UsageError("split ratios must all be positive");
    }
    if (std::abs(ratios.train + ratios.valid + ratios.test - 1.0) > 1e-9) {
        throw UsageError("split ratios must sum to 1");
    }
    const auto nd = static_cast<double>(n);
    SplitMarks marks;
    marks.train_end = static_cast<std::size_t>(std::llround(nd * ratios.train));
    marks.valid_end = static_cast<std::size_t>(std::llround(nd * (ratios.train + ratios.valid)));
    marks.valid_end = std::min(marks.valid_end, n);
    if (marks.train_end == 0 || marks.valid_end <= marks.train_end || marks.valid_end >= n) {
        throw DataError("split of " + std::to_string(n) + " records leaves an empty train, validation or test set");
    }
    return marks;
}

Dataset chronological_split(Dataset ds, const SplitRatios& ratios) {
    ds.split = compute_split(ds.records.size(), ratios);
    return ds;
}

std::vector<std::string> split_csv_line(std::string_view line, char delimiter) {
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cell.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cell.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == delimiter) {
            cells.push_back(std::move(cell));
            cell.clear();
        } else {
            cell.push_back(c);
        }
    }
    if (quoted) {
        throw DataError("unterminated quoted field");
    }
    cells.push_back(std::move(cell));
    return cells;
}

namespace {

std::size_t column_of(const std::vector<std::string>& header, const std::string& name, std::string_view source) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
        throw DataError(std::string(source) + ": column '" + name + "' not found in header");
    }
    return static_cast<std::size_t>(it - header.begin());
}

struct RawRow {
    std::vector<std::string> cells;  // feature cells only
    std::uint8_t label = 0;
    std::int64_t timestamp = 0;
};

}  // namespace

Dataset parse_csv(std::istream& in, const SchemaSpec& spec, std::string_view source) {
    if (spec.feature_columns.empty()) {
        throw UsageError("schema names no feature columns");
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError(std::string(source) + ": empty file");
    }
    auto strip_cr = [](std::string& s) {
        if (!s.empty() && s.back() == '\r') {
            s.pop_back();
        }
    };
    strip_cr(line);
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) {
        line.erase(0, 3);
    }
    const auto header = split_csv_line(line, spec.delimiter);
    const auto label_col = column_of(header, spec.label_column, source);
    std::optional<std::size_t> ts_col;
    if (spec.timestamp_column) {
        ts_col = column_of(header, *spec.timestamp_column, source);
    }
    std::vector<std::size_t> feature_cols;
    for (const auto& name : spec.feature_columns) {
        feature_cols.push_back(column_of(header, name, source));
    }

    std::vector<RawRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        strip_cr(line);
        if (line.empty()) {
            continue;
        }
        auto where = [&] { return std::string(source) + ":" + std::to_string(line_no) + ": "; };
        std::vector<std::string> cells;
        try {
            cells = split_csv_line(line, spec.delimiter);
        } catch (const DataError& e) {
            throw DataError(where() + e.what());
        }
        if (cells.size() != header.size()) {
            throw DataError(where() + "expected " + std::to_string(header.size()) + " columns, found " +
                            std::to_string(cells.size()));
        }
        RawRow row;
        const auto& label = cells[label_col];
        if (label == "0") {
            row.label = 0;
        } else if (label == "1") {
            row.label = 1;
        } else {
            throw DataError(where() + "label '" + label + "' is not 0 or 1");
        }
        if (ts_col) {
            const auto& ts = cells[*ts_col];
            auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), row.timestamp);
            if (ec != std::errc{} || ptr != ts.data() + ts.size() || ts.empty()) {
                throw DataError(where() + "timestamp '" + ts + "' is not an integer");
            }
        } else {
            row.timestamp = static_cast<std::int64_t>(rows.size());
        }
        row.cells.reserve(feature_cols.size());
        for (auto c : feature_cols) {
            row.cells.push_back(std::move(cells[c]));
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) {
        throw DataError(std::string(source) + ": no data rows");
    }

    // Stable sort keeps original row order among equal timestamps.
    std::stable_sort(rows.begin(), rows.end(),
                     [](const RawRow& a, const RawRow& b) { return a.timestamp < b.timestamp; });

    Dataset ds;
    ds.split = compute_split(rows.size(), spec.ratios);
    for (const auto& name : spec.feature_columns) {
        ds.schema.emplace_back(name);
    }
    for (std::size_t i = 0; i < ds.split.train_end; ++i) {
        for (std::size_t f = 0; f < feature_cols.size(); ++f) {
            ds.schema[f].intern(rows[i].cells[f]);
        }
    }
    ds.records.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        Record r;
        r.label = rows[i].label;
        r.timestamp = rows[i].timestamp;
        r.index = i;
        r.field_ids.resize(feature_cols.size());
        for (std::size_t f = 0; f < feature_cols.size(); ++f) {
            const auto& cell = rows[i].cells[f];
            if (cell.empty()) {
                ++ds.missing_cells;
            }
            r.field_ids[f] = ds.schema[f].id_of(cell);
        }
        ds.records.push_back(std::move(r));
    }
    return ds;
}

Dataset load_csv(const std::filesystem::path& path, const SchemaSpec& spec) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open dataset file '" + path.string() + "'");
    }
    return parse_csv(in, spec, path.string());
}

void save_dataset(const Dataset& ds, std::ostream& out) {
    io::write_magic(out, "RATD");
    io::write_u16(out, kDatasetFormatVersion);
    io::write_u32(out, static_cast<std::uint32_t>(ds.schema.size()));
    for (const auto& field : ds.schema) {
        io::write_string(out, field.name());
        io::write_u32(out, static_cast<std::uint32_t>(field.vocab_size()));
        for (std::uint32_t id = 1; id <= field.vocab_size(); ++id) {
            io::write_string(out, field.value_of(id));
        }
    }
    io::write_u64(out, ds.records.size());
    io::write_u64(out, ds.split.train_end);
    io::write_u64(out, ds.split.valid_end);
    io::write_u64(out, ds.missing_cells);
    for (const auto& r : ds.records) {
        io::write_u64(out, r.index);
        io::write_i64(out, r.timestamp);
        io::write_u8(out, r.label);
        for (auto id : r.field_ids) {
            io::write_u32(out, id);
        }
    }
}

Dataset load_dataset(std::istream& in) {
    io::expect_magic(in, "RATD", "dataset file");
    const auto version = io::read_u16(in);
    if (version != kDatasetFormatVersion) {
        throw DataError("dataset file: unsupported format version " + std::to_string(version));
    }
    Dataset ds;
    const auto num_fields = io::read_u32(in);
    for (std::uint32_t f = 0; f < num_fields; ++f) {
        FieldSchema field(io::read_string(in));
        const auto vocab = io::read_u32(in);
        for (std::uint32_t v = 0; v < vocab; ++v) {
            if (field.intern(io::read_string(in)) != v + 1) {
                throw DataError("dataset file: duplicate or empty vocabulary entry");
            }
        }
        ds.schema.push_back(std::move(field));
    }
    const auto n = io::read_u64(in);
    ds.split.train_end = io::read_u64(in);
    ds.split.valid_end = io::read_u64(in);
    ds.missing_cells = io::read_u64(in);
    if (!(ds.split.train_end > 0 && ds.split.train_end <= ds.split.valid_end && ds.split.valid_end <= n)) {
        throw DataError("dataset file: inconsistent split marks");
    }
    ds.records.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        Record r;
        r.index = io::read_u64(in);
        r.timestamp = io::read_i64(in);
        r.label = io::read_u8(in);
        r.field_ids.resize(num_fields);
        for (auto& id : r.field_ids) {
            id = io::read_u32(in);
        }
        ds.records.push_back(std::move(r));
    }
    io::expect_eof(in, "dataset file");
    return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write dataset file '" + path.string() + "'");
    }
    save_dataset(ds, out);
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open dataset file '" + path.string() + "'");
    }
    return load_dataset(in);
}

}  // namespace rat
