#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "rat/data.hpp"

namespace rat {

// Neighbor-dependent click task. Every key (the "user" column) emits a sequence of
// labeled records in label sessions; inside a session each record carries the majority
// label of its three most recent same-key records. Attribute columns are functions of
// the key alone, and every key has exactly half positive training records, so a record's
// own features carry no label signal.
struct SyntheticConfig {
    std::size_t num_keys = 200;
    std::size_t records_per_key = 20;  // multiples of 10 put the 7:2:1 split on whole rounds
    std::size_t num_attributes = 11;   // key-derived columns, cardinality >= 3 each
    std::uint64_t seed = 42;
};

// Columns: ts,label,user,attr1..attrN. Rows are in timestamp order.
std::string synthetic_csv(const SyntheticConfig& cfg);
SchemaSpec synthetic_schema(const SyntheticConfig& cfg);
Dataset synthetic_dataset(const SyntheticConfig& cfg);

}  // namespace rat
