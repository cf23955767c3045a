#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

// Little-endian integer packing shared by the binary file formats.
namespace flowssc::detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
    }
}

template <class U>
U get_le(std::span<const std::uint8_t> b, std::size_t off) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(static_cast<U>(b[off + i]) << (8 * i));
    }
    return v;
}

}  // namespace flowssc::detail
