#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include "rat/data.hpp"

namespace rat {

enum class Eligibility {
    StrictlyEarlier,  // candidate (timestamp, index) < query (timestamp, index)
    WholePool,
};

inline constexpr std::uint64_t kPadNeighbor = std::numeric_limits<std::uint64_t>::max();

// Exactly k slots. Real neighbors come first in rank order; padding slots carry
// kPadNeighbor, score 0 and mask 0.
struct RetrievalResult {
    std::vector<std::uint64_t> neighbor_indices;
    std::vector<double> scores;
    std::vector<std::uint8_t> mask;

    std::size_t num_real() const;
    bool operator==(const RetrievalResult&) const = default;
};

// Inverted index over a reference pool: (field, value id) -> ascending pool positions.
// Pool positions are assigned in (timestamp, index) order, so the candidates that are
// strictly earlier than a query always form a prefix of every posting list.
class RetrievalIndex {
  public:
    // Throws UsageError for an empty pool or records of differing width.
    static RetrievalIndex build(std::span<const Record> pool);

    std::size_t pool_size() const { return record_indices_.size(); }
    std::size_t num_fields() const { return postings_.size(); }
    std::size_t distinct_terms() const;

    std::size_t doc_freq(std::size_t field, std::uint32_t value) const;
    std::span<const std::uint32_t> postings(std::size_t field, std::uint32_t value) const;

    // log((N - df + 0.5) / (df + 0.5)); negative for values held by more than half the pool.
    double term_weight(std::size_t field, std::uint32_t value) const;

    std::uint64_t record_index(std::size_t position) const { return record_indices_[position]; }
    std::int64_t timestamp(std::size_t position) const { return timestamps_[position]; }

    // Number of pool positions strictly earlier than the query.
    std::size_t eligible_prefix(const Record& query, Eligibility eligibility) const;

    // Top-k eligible pool records by BM25 score. Records matching no field score 0 and still
    // compete; padding appears only when fewer than k records are eligible. Ties prefer the
    // more recent record.
    RetrievalResult retrieve(const Record& query, std::size_t k, Eligibility eligibility) const;

    // Element i equals retrieve(queries[i], ...). workers == 0 picks the hardware count.
    std::vector<RetrievalResult> retrieve_batch(std::span<const Record> queries, std::size_t k,
                                                Eligibility eligibility, std::size_t workers = 0) const;

    void save(std::ostream& out) const;
    void save(const std::filesystem::path& path) const;
    static RetrievalIndex load(std::istream& in);
    static RetrievalIndex load(const std::filesystem::path& path);

    bool operator==(const RetrievalIndex&) const = default;

  private:
    struct Scratch;
    RetrievalResult retrieve_with(const Record& query, std::size_t k, Eligibility eligibility, Scratch& scratch) const;
    void check_query(const Record& query) const;

    // postings_[field][value] for value in [0, max id]; slot 0 (missing) stays empty.
    std::vector<std::vector<std::vector<std::uint32_t>>> postings_;
    std::vector<std::uint64_t> record_indices_;
    std::vector<std::int64_t> timestamps_;
};

// Field-match BM25 relevance of a candidate for a query. Missing values never match.
double bm25_score(const RetrievalIndex& index, const Record& query, const Record& candidate);

inline constexpr std::uint16_t kIndexFormatVersion = 1;

}  // namespace rat
