#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace loopmem {

using TokenId = std::int32_t;

/// Row-major [rows x cols] grid of token ids (a batch of equal-length sequences).
struct TokenGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<TokenId> ids;

    TokenId at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
    std::size_t size() const noexcept { return ids.size(); }

    friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

}  // namespace loopmem
