#include "rat/binary_io.hpp"

#include <bit>
#include <cstring>

#include "rat/error.hpp"

namespace rat::io {
namespace {

template <typename U>
void put_le(std::ostream& out, U v) {
    std::array<char, sizeof(U)> buf{};
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    out.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& in) {
    std::array<unsigned char, sizeof(U)> buf{};
    in.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
        throw DataError("unexpected end of file (truncated binary data)");
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(buf[i]) << (8 * i);
    }
    return v;
}

}  // namespace

void write_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), magic.size()); }

void expect_magic(std::istream& in, std::string_view magic, std::string_view what) {
    std::string got(magic.size(), '\0');
    in.read(got.data(), got.size());
    if (in.gcount() != static_cast<std::streamsize>(magic.size()) || got != magic) {
        throw DataError(std::string(what) + ": bad magic bytes, expected \"" + std::string(magic) + "\"");
    }
}

void write_u8(std::ostream& out, std::uint8_t v) { put_le(out, v); }
void write_u16(std::ostream& out, std::uint16_t v) { put_le(out, v); }
void write_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
void write_i64(std::ostream& out, std::int64_t v) { put_le(out, static_cast<std::uint64_t>(v)); }
void write_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

void write_string(std::ostream& out, std::string_view s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), s.size());
}

std::uint8_t read_u8(std::istream& in) { return get_le<std::uint8_t>(in); }
std::uint16_t read_u16(std::istream& in) { return get_le<std::uint16_t>(in); }
std::uint32_t read_u32(std::istream& in) { return get_le<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return get_le<std::uint64_t>(in); }
std::int64_t read_i64(std::istream& in) { return static_cast<std::int64_t>(get_le<std::uint64_t>(in)); }
double read_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

std::string read_string(std::istream& in) {
    const auto n = read_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (in.gcount() != static_cast<std::streamsize>(n)) {
        throw DataError("unexpected end of file (truncated string)");
    }
    return s;
}

void expect_eof(std::istream& in, std::string_view what) {
    if (in.peek() != std::char_traits<char>::eof()) {
        throw DataError(std::string(what) + ": trailing bytes after end of data");
    }
}

}  // namespace rat::io
