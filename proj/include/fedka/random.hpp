#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace fedka {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Named stream families derived from a master seed.
enum class StreamTag : std::uint64_t {
    kReplicate = 1,
    kData = 2,
    kClient = 3,
    kServer = 4,
    kInit = 5,
};

/// Counter-based split: the seed of stream (tag, index) depends only on the
/// master seed and that pair, so adding streams never perturbs existing ones.
inline std::uint64_t derive_seed(std::uint64_t master, StreamTag tag, std::uint64_t index = 0) {
    std::uint64_t h = splitmix64(master);
    h = splitmix64(h ^ (static_cast<std::uint64_t>(tag) * 0xd1b54a32d192ed03ULL));
    return splitmix64(h ^ (index * 0x8cb92ba72f3d8dd7ULL + 0x632be59bd9b4e019ULL));
}

/// Seeded random stream. Distribution transforms are implemented here rather
/// than with <random> distributions so that outputs are identical across
/// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Requires n > 0.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    /// Fisher-Yates over [0, n); the first `take` entries of the result are a
    /// uniform draw without replacement in draw order.
    std::vector<std::size_t> permutation_prefix(std::size_t n, std::size_t take) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i < take && i + 1 < n; ++i) {
            const auto j = i + static_cast<std::size_t>(below(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(take);
        return idx;
    }

    bool operator==(const Rng& other) const {
        return engine_ == other.engine_ && has_spare_ == other.has_spare_ &&
               (!has_spare_ || spare_ == other.spare_);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace fedka
