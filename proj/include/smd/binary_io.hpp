// Copyright 2026 The SMD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "smd/errors.hpp"

namespace smd::binio {

// All on-disk integers and floats are little-endian.

template <typename T>
T byteswap_if_big(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &value, sizeof(T));
        for (size_t i = 0; i < sizeof(T) / 2; ++i) {
            std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        }
        std::memcpy(&value, bytes, sizeof(T));
    }
    return value;
}

template <typename T>
void write_le(std::ostream &out, T value) {
    value = byteswap_if_big(value);
    out.write(reinterpret_cast<const char *>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream &in, const char *what) {
    T value;
    in.read(reinterpret_cast<char *>(&value), sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
        throw FormatError(std::string("unexpected end of file while reading ") + what);
    }
    return byteswap_if_big(value);
}

template <typename T>
void write_le_array(std::ostream &out, std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char *>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (const T &v : values) {
            write_le(out, v);
        }
    }
}

template <typename T>
void append_le(std::vector<unsigned char> &buf, T value) {
    value = byteswap_if_big(value);
    const auto *p = reinterpret_cast<const unsigned char *>(&value);
    buf.insert(buf.end(), p, p + sizeof(T));
}

template <typename T>
T load_le(const unsigned char *p) {
    T value;
    std::memcpy(&value, p, sizeof(T));
    return byteswap_if_big(value);
}

inline void write_magic(std::ostream &out, const char (&magic)[5]) {
    out.write(magic, 4);
}

inline void expect_magic(std::istream &in, const char (&magic)[5], const char *what) {
    char got[4] = {};
    in.read(got, 4);
    if (in.gcount() != 4 || std::memcmp(got, magic, 4) != 0) {
        throw FormatError(std::string("bad magic number: not a ") + what + " file");
    }
}

/// Packs bits LSB-first: bit j lives in byte j/8 at position j%8.
inline std::vector<uint8_t> pack_bits(std::span<const uint8_t> bits) {
    std::vector<uint8_t> out((bits.size() + 7) / 8, 0);
    for (size_t j = 0; j < bits.size(); ++j) {
        if (bits[j]) {
            out[j >> 3] |= static_cast<uint8_t>(1u << (j & 7));
        }
    }
    return out;
}

inline std::vector<uint8_t> unpack_bits(std::span<const uint8_t> packed, size_t count) {
    if (packed.size() * 8 < count) {
        throw FormatError("bit array shorter than declared length");
    }
    std::vector<uint8_t> out(count);
    for (size_t j = 0; j < count; ++j) {
        out[j] = (packed[j >> 3] >> (j & 7)) & 1u;
    }
    return out;
}

inline uint32_t crc32_of(std::span<const unsigned char> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    size_t offset = 0;
    while (offset < bytes.size()) {
        const size_t n = std::min<size_t>(bytes.size() - offset, 1u << 30);
        crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(n));
        offset += n;
    }
    return static_cast<uint32_t>(crc);
}

}  // namespace smd::binio
