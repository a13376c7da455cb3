#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace rat::io {

// Little-endian primitive writers/readers shared by the RATD/RATI/RATM formats.
// Readers throw DataError on truncation.

void write_magic(std::ostream& out, std::string_view magic);
void expect_magic(std::istream& in, std::string_view magic, std::string_view what);

void write_u8(std::ostream& out, std::uint8_t v);
void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_i64(std::ostream& out, std::int64_t v);
void write_f64(std::ostream& out, double v);
void write_string(std::ostream& out, std::string_view s);

std::uint8_t read_u8(std::istream& in);
std::uint16_t read_u16(std::istream& in);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
std::int64_t read_i64(std::istream& in);
double read_f64(std::istream& in);
std::string read_string(std::istream& in);

// Checks the stream is exhausted; trailing bytes indicate a corrupt file.
void expect_eof(std::istream& in, std::string_view what);

}  // namespace rat::io
