#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace soda {

// Deterministic random streams. Every consumer derives its own stream from
// (root seed, domain label, index), so re-running any single job in isolation
// reproduces its draws regardless of scheduling. The mt19937_64 sequence is
// pinned by the standard; the uniform/normal transforms below are hand-rolled
// because the std::*_distribution outputs are implementation-defined.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    static std::uint64_t derive(std::uint64_t seed, std::string_view domain, std::uint64_t index = 0) {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the domain label
        for (char c : domain) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return splitmix(splitmix(seed ^ splitmix(h)) ^ splitmix(index + 0x9e3779b97f4a7c15ull));
    }

    static RandomStream from(std::uint64_t seed, std::string_view domain, std::uint64_t index = 0) {
        return RandomStream(derive(seed, domain, index));
    }

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased integer in [0, n) by masked rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        std::uint64_t mask = ~0ull >> __builtin_clzll(n - 1);
        std::uint64_t r;
        do {
            r = engine_() & mask;
        } while (r >= n);
        return r;
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double two_pi = 6.283185307179586476925286766559;
        double a = uniform();
        double u = 1.0 - uniform();  // (0, 1], keeps log finite
        double r = std::sqrt(-2.0 * std::log(u));
        spare_ = r * std::sin(two_pi * a);
        has_spare_ = true;
        return r * std::cos(two_pi * a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace soda
