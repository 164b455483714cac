#pragma once

// Condition vectors fed to the transformers. Labels map to rows of a fixed
// random table; external vectors (e.g. precomputed text features) are
// accepted as-is after a dimension and finiteness check.

#include "stm/motion/motion_grid.hpp"
#include "stm/numerics/rng.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace stm {

inline constexpr std::size_t kLabelCapacity = 64;
inline constexpr std::size_t kDefaultTextDim = 512;
inline constexpr std::uint64_t kLabelTableSeed = 0x7ab1e5eedULL;

struct ConditionEmbedding {
    enum class Source { label_table, external };
    std::vector<float> vector;
    Source source = Source::external;

    std::size_t dim() const { return vector.size(); }

    void validate(std::size_t expected_dim) const {
        if (vector.size() != expected_dim)
            throw MotionError("condition has dimension " + std::to_string(vector.size()) + ", expected " +
                              std::to_string(expected_dim));
        for (float v : vector)
            if (!std::isfinite(v)) throw MotionError("non-finite condition entry");
    }

    static ConditionEmbedding external(std::vector<float> v) {
        ConditionEmbedding c{std::move(v), Source::external};
        c.validate(c.vector.size());
        return c;
    }
};

/// Unit-norm Gaussian rows, one per label, from a fixed seed.
class LabelTable {
public:
    explicit LabelTable(std::size_t dim = kDefaultTextDim, std::size_t capacity = kLabelCapacity)
        : dim_(dim), capacity_(capacity), rows_(dim * capacity) {
        if (dim == 0 || capacity == 0) throw MotionError("label table needs positive size");
        Rng rng(kLabelTableSeed, dim);
        for (std::size_t r = 0; r < capacity; ++r) {
            double sq = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double v = rng.normal();
                rows_[r * dim + k] = static_cast<float>(v);
                sq += v * v;
            }
            const float inv = static_cast<float>(1.0 / std::sqrt(sq));
            for (std::size_t k = 0; k < dim; ++k) rows_[r * dim + k] *= inv;
        }
    }

    std::size_t dim() const { return dim_; }
    std::size_t capacity() const { return capacity_; }

    ConditionEmbedding operator()(std::size_t label) const {
        if (label >= capacity_)
            throw MotionError("label " + std::to_string(label) + " exceeds table capacity " + std::to_string(capacity_));
        return {std::vector<float>(rows_.begin() + label * dim_, rows_.begin() + (label + 1) * dim_),
                ConditionEmbedding::Source::label_table};
    }

private:
    std::size_t dim_, capacity_;
    std::vector<float> rows_;
};

}  // namespace stm
