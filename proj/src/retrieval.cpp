#include "rat/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "rat/binary_io.hpp"
#include "rat/error.hpp"

namespace rat {

std::size_t RetrievalResult::num_real() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

struct RetrievalIndex::Scratch {
    std::vector<double> acc;
    std::vector<std::uint8_t> touched;
    std::vector<std::uint32_t> hits;

    explicit Scratch(std::size_t n) : acc(n, 0.0), touched(n, 0) {}
};

RetrievalIndex RetrievalIndex::build(std::span<const Record> pool) {
    if (pool.empty()) {
        throw UsageError("cannot build a retrieval index over an empty pool");
    }
    const auto num_fields = pool.front().field_ids.size();
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return earlier_than(pool[a], pool[b]); });

    RetrievalIndex index;
    index.postings_.resize(num_fields);
    index.record_indices_.reserve(pool.size());
    index.timestamps_.reserve(pool.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        const auto& r = pool[order[pos]];
        if (r.field_ids.size() != num_fields) {
            throw UsageError("pool records do not share one schema");
        }
        if (pos > 0 && !earlier_than(pool[order[pos - 1]], r)) {
            throw UsageError("pool records must have distinct (timestamp, index) keys");
        }
        index.record_indices_.push_back(r.index);
        index.timestamps_.push_back(r.timestamp);
        for (std::size_t f = 0; f < num_fields; ++f) {
            const auto v = r.field_ids[f];
            if (v == kMissingId) {
                continue;
            }
            auto& lists = index.postings_[f];
            if (lists.size() <= v) {
                lists.resize(v + 1);
            }
            lists[v].push_back(static_cast<std::uint32_t>(pos));
        }
    }
    return index;
}

std::size_t RetrievalIndex::distinct_terms() const {
    std::size_t n = 0;
    for (const auto& field : postings_) {
        n += static_cast<std::size_t>(
            std::count_if(field.begin(), field.end(), [](const auto& list) { return !list.empty(); }));
    }
    return n;
}

std::size_t RetrievalIndex::doc_freq(std::size_t field, std::uint32_t value) const {
    return postings(field, value).size();
}

std::span<const std::uint32_t> RetrievalIndex::postings(std::size_t field, std::uint32_t value) const {
    if (field >= postings_.size()) {
        throw UsageError("field " + std::to_string(field) + " out of range");
    }
    const auto& lists = postings_[field];
    if (value == kMissingId || value >= lists.size()) {
        return {};
    }
    return lists[value];
}

double RetrievalIndex::term_weight(std::size_t field, std::uint32_t value) const {
    const auto n = static_cast<double>(pool_size());
    const auto df = static_cast<double>(doc_freq(field, value));
    return std::log((n - df + 0.5) / (df + 0.5));
}

std::size_t RetrievalIndex::eligible_prefix(const Record& query, Eligibility eligibility) const {
    if (eligibility == Eligibility::WholePool) {
        return pool_size();
    }
    // First position whose (timestamp, index) is not below the query's.
    std::size_t lo = 0;
    std::size_t hi = pool_size();
    while (lo < hi) {
        const auto mid = lo + (hi - lo) / 2;
        const bool below = timestamps_[mid] != query.timestamp ? timestamps_[mid] < query.timestamp
                                                               : record_indices_[mid] < query.index;
        if (below) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    return lo;
}

void RetrievalIndex::check_query(const Record& query) const {
    if (query.field_ids.size() != num_fields()) {
        throw UsageError("query has " + std::to_string(query.field_ids.size()) + " fields, index has " +
                         std::to_string(num_fields()));
    }
}

RetrievalResult RetrievalIndex::retrieve_with(const Record& query, std::size_t k, Eligibility eligibility,
                                              Scratch& scratch) const {
    const auto limit = eligible_prefix(query, eligibility);
    auto& hits = scratch.hits;
    hits.clear();
    for (std::size_t f = 0; f < postings_.size(); ++f) {
        const auto v = query.field_ids[f];
        const auto list = postings(f, v);
        if (list.empty()) {
            continue;
        }
        const double w = term_weight(f, v);
        for (const auto pos : list) {
            if (pos >= limit) {
                break;
            }
            if (!scratch.touched[pos]) {
                scratch.touched[pos] = 1;
                scratch.acc[pos] = 0.0;
                hits.push_back(pos);
            }
            scratch.acc[pos] += w;
        }
    }

    // Rank order: higher score first, and equal scores prefer the later pool position, i.e. the
    // more recent record. Untouched eligible positions score exactly 0, so the order is the
    // positive hits, then all zero-score positions by recency, then the negative hits.
    auto better = [&](std::uint32_t a, std::uint32_t b) {
        if (scratch.acc[a] != scratch.acc[b]) {
            return scratch.acc[a] > scratch.acc[b];
        }
        return a > b;
    };
    const auto positive_end =
        std::partition(hits.begin(), hits.end(), [&](std::uint32_t pos) { return scratch.acc[pos] > 0.0; });
    const auto negative_begin =
        std::partition(positive_end, hits.end(), [&](std::uint32_t pos) { return scratch.acc[pos] == 0.0; });

    RetrievalResult result;
    result.neighbor_indices.assign(k, kPadNeighbor);
    result.scores.assign(k, 0.0);
    result.mask.assign(k, 0);
    std::size_t filled = 0;
    auto emit = [&](std::uint32_t pos, double score) {
        result.neighbor_indices[filled] = record_indices_[pos];
        result.scores[filled] = score;
        result.mask[filled] = 1;
        ++filled;
    };
    auto emit_sorted = [&](auto begin, auto end) {
        const auto take = std::min(k - filled, static_cast<std::size_t>(end - begin));
        std::partial_sort(begin, begin + static_cast<std::ptrdiff_t>(take), end, better);
        for (auto it = begin; it != begin + static_cast<std::ptrdiff_t>(take); ++it) {
            emit(*it, scratch.acc[*it]);
        }
    };
    emit_sorted(hits.begin(), positive_end);
    for (std::size_t pos = limit; pos-- > 0 && filled < k;) {
        if (!scratch.touched[pos] || scratch.acc[pos] == 0.0) {
            emit(static_cast<std::uint32_t>(pos), 0.0);
        }
    }
    emit_sorted(negative_begin, hits.end());
    for (const auto pos : hits) {
        scratch.touched[pos] = 0;
    }
    return result;
}

RetrievalResult RetrievalIndex::retrieve(const Record& query, std::size_t k, Eligibility eligibility) const {
    if (k == 0) {
        throw UsageError("k must be at least 1");
    }
    check_query(query);
    Scratch scratch(pool_size());
    return retrieve_with(query, k, eligibility, scratch);
}

std::vector<RetrievalResult> RetrievalIndex::retrieve_batch(std::span<const Record> queries, std::size_t k,
                                                            Eligibility eligibility, std::size_t workers) const {
    if (k == 0) {
        throw UsageError("k must be at least 1");
    }
    for (const auto& q : queries) {
        check_query(q);
    }
    std::vector<RetrievalResult> results(queries.size());
    if (queries.empty()) {
        return results;
    }
    if (workers == 0) {
        workers = std::max(1u, std::thread::hardware_concurrency());
    }
    workers = std::min(workers, queries.size());

    auto run = [&](std::size_t begin, std::size_t end) {
        Scratch scratch(pool_size());
        for (std::size_t i = begin; i < end; ++i) {
            results[i] = retrieve_with(queries[i], k, eligibility, scratch);
        }
    };
    if (workers == 1) {
        run(0, queries.size());
        return results;
    }
    {
        std::vector<std::jthread> threads;
        const auto chunk = (queries.size() + workers - 1) / workers;
        for (std::size_t begin = 0; begin < queries.size(); begin += chunk) {
            threads.emplace_back(run, begin, std::min(queries.size(), begin + chunk));
        }
    }
    return results;
}

double bm25_score(const RetrievalIndex& index, const Record& query, const Record& candidate) {
    if (query.field_ids.size() != index.num_fields() || candidate.field_ids.size() != index.num_fields()) {
        throw UsageError("query and candidate must match the index schema");
    }
    double score = 0.0;
    for (std::size_t f = 0; f < index.num_fields(); ++f) {
        const auto v = query.field_ids[f];
        if (v != kMissingId && v == candidate.field_ids[f]) {
            score += index.term_weight(f, v);
        }
    }
    return score;
}

void RetrievalIndex::save(std::ostream& out) const {
    io::write_magic(out, "RATI");
    io::write_u16(out, kIndexFormatVersion);
    io::write_u64(out, pool_size());
    io::write_u32(out, static_cast<std::uint32_t>(num_fields()));
    for (std::size_t f = 0; f < postings_.size(); ++f) {
        const auto& lists = postings_[f];
        const auto terms = std::count_if(lists.begin(), lists.end(), [](const auto& l) { return !l.empty(); });
        io::write_u32(out, static_cast<std::uint32_t>(terms));
        for (std::uint32_t v = 0; v < lists.size(); ++v) {
            if (lists[v].empty()) {
                continue;
            }
            io::write_u32(out, v);
            io::write_u32(out, static_cast<std::uint32_t>(lists[v].size()));
            for (const auto pos : lists[v]) {
                io::write_u32(out, pos);
            }
        }
    }
    for (std::size_t pos = 0; pos < pool_size(); ++pos) {
        io::write_u64(out, record_indices_[pos]);
        io::write_i64(out, timestamps_[pos]);
    }
}

void RetrievalIndex::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write index file '" + path.string() + "'");
    }
    save(out);
}

RetrievalIndex RetrievalIndex::load(std::istream& in) {
    io::expect_magic(in, "RATI", "index file");
    const auto version = io::read_u16(in);
    if (version != kIndexFormatVersion) {
        throw DataError("index file: unsupported format version " + std::to_string(version));
    }
    const auto n = io::read_u64(in);
    const auto num_fields = io::read_u32(in);
    if (n == 0 || n > std::numeric_limits<std::uint32_t>::max()) {
        throw DataError("index file: invalid pool size");
    }
    RetrievalIndex index;
    index.postings_.resize(num_fields);
    for (auto& lists : index.postings_) {
        const auto terms = io::read_u32(in);
        std::uint32_t prev_value = 0;
        for (std::uint32_t t = 0; t < terms; ++t) {
            const auto v = io::read_u32(in);
            const auto df = io::read_u32(in);
            if (v == kMissingId || v <= prev_value || df == 0 || df > n) {
                throw DataError("index file: corrupt term table");
            }
            prev_value = v;
            lists.resize(v + 1);
            auto& list = lists[v];
            list.resize(df);
            for (std::uint32_t i = 0; i < df; ++i) {
                list[i] = io::read_u32(in);
                if (list[i] >= n || (i > 0 && list[i] <= list[i - 1])) {
                    throw DataError("index file: posting list not strictly ascending");
                }
            }
        }
    }
    index.record_indices_.resize(n);
    index.timestamps_.resize(n);
    for (std::uint64_t pos = 0; pos < n; ++pos) {
        index.record_indices_[pos] = io::read_u64(in);
        index.timestamps_[pos] = io::read_i64(in);
    }
    io::expect_eof(in, "index file");
    return index;
}

RetrievalIndex RetrievalIndex::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open index file '" + path.string() + "'");
    }
    return load(in);
}

}  // namespace rat
