#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stm {

/// Code indices on a T' x J' grid, row-major (frame, column).
struct TokenMap {
    std::size_t frames = 0;
    std::size_t cols = 0;
    std::vector<std::int32_t> ids;

    TokenMap() = default;
    TokenMap(std::size_t t, std::size_t j, std::int32_t fill = 0) : frames(t), cols(j), ids(t * j, fill) {}

    std::size_t size() const { return ids.size(); }
    std::int32_t& at(std::size_t t, std::size_t j) { return ids[t * cols + j]; }
    std::int32_t at(std::size_t t, std::size_t j) const { return ids[t * cols + j]; }

    friend bool operator==(const TokenMap&, const TokenMap&) = default;
};

/// One TokenMap per quantization layer; layer 0 is the base layer.
struct TokenStack {
    std::vector<TokenMap> layers;

    std::size_t depth() const { return layers.size(); }
    std::size_t frames() const { return layers.empty() ? 0 : layers[0].frames; }
    std::size_t cols() const { return layers.empty() ? 0 : layers[0].cols; }

    void validate(std::size_t joint_codes, std::size_t global_codes, bool last_col_global) const {
        for (const auto& m : layers) {
            if (m.frames != frames() || m.cols != cols() || m.ids.size() != m.frames * m.cols)
                throw std::invalid_argument("token stack layers disagree in shape");
            for (std::size_t t = 0; t < m.frames; ++t)
                for (std::size_t j = 0; j < m.cols; ++j) {
                    const bool global = last_col_global && j + 1 == m.cols;
                    const auto id = m.at(t, j);
                    if (id < 0 || std::size_t(id) >= (global ? global_codes : joint_codes))
                        throw std::invalid_argument("token index " + std::to_string(id) + " out of codebook range");
                }
        }
    }

    friend bool operator==(const TokenStack&, const TokenStack&) = default;
};

}  // namespace stm
