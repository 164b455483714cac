#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stm {

/// Named RNG streams derived from one global seed. Keeping every random
/// decision on an explicit stream makes runs reproducible.
enum class Stream : std::uint64_t {
    init = 1,
    data = 2,
    mask = 3,
    reset = 4,
    dropout = 5,
    cond_drop = 6,
    sample = 7,
    eval = 8,
    synth = 9,
    layer_pick = 10,
};

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }
    Rng(std::uint64_t seed, Stream stream) : Rng(seed, static_cast<std::uint64_t>(stream)) {}
    Rng(std::uint64_t seed, std::uint64_t stream) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x5eedu};
        engine_.seed(seq);
    }

    void reseed(std::uint64_t seed) { *this = Rng(seed, std::uint64_t{0}); }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        std::uniform_int_distribution<std::size_t> d(0, n - 1);
        return d(engine_);
    }

    /// Standard normal via Box-Muller; no cached second value so state is
    /// fully captured by the engine.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// k distinct indices drawn uniformly from `pool` (partial Fisher-Yates).
    template <class I>
    std::vector<I> choose(std::vector<I> pool, std::size_t k) {
        if (k > pool.size()) k = pool.size();
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + index(pool.size() - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }
    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (!is) throw std::invalid_argument("bad rng state");
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace stm
