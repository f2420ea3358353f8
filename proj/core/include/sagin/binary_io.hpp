#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace sagin::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <typename T>
    requires std::is_trivially_copyable_v<T>
void write_le(std::ostream& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.write(buf, sizeof(T));
}

template <typename T>
    requires std::is_trivially_copyable_v<T>
T read_le(std::istream& in) {
    char buf[sizeof(T)];
    if (!in.read(buf, sizeof(T))) {
        throw std::runtime_error("unexpected end of binary stream");
    }
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

inline void write_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
    char buf[4];
    if (!in.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
        throw std::runtime_error(std::string("bad magic, expected ") + magic);
    }
}

}  // namespace sagin::io
