#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace concordia::binio {

// Little-endian primitives for the binary artifact formats.

template <typename T>
void put(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::endian::native == std::endian::big) {
        auto* p = reinterpret_cast<unsigned char*>(&v);
        for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
    }
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("unexpected end of file");
    if constexpr (std::endian::native == std::endian::big) {
        auto* p = reinterpret_cast<unsigned char*>(&v);
        for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
    }
    return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
    if (s.size() > UINT16_MAX) throw std::invalid_argument("string too long");
    put<uint16_t>(os, static_cast<uint16_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
    const auto n = get<uint16_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("unexpected end of file");
    return s;
}

inline void put_doubles(std::ostream& os, const std::vector<double>& v) {
    for (const double x : v) put<double>(os, x);
}

inline void get_doubles(std::istream& is, std::vector<double>& v) {
    for (auto& x : v) x = get<double>(is);
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
    char buf[4];
    is.read(buf, 4);
    if (!is || std::memcmp(buf, magic, 4) != 0)
        throw std::runtime_error(std::string("bad magic, expected ") + magic);
}

} // namespace concordia::binio
