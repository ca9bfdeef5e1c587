// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace ctrlora {

/// Deterministic xoshiro256++ generator seeded through splitmix64.
///
/// Every stochastic operation in the engine takes an Rng (or a seed it turns
/// into one), so runs are reproducible bit for bit. Independent streams are
/// derived with fork(), never by sharing one sequential stream across
/// unrelated consumers.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) {
            word = splitmix64(x);
        }
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller. Uses two uniforms per call and keeps
    /// no cached spare, so the draw count per call is fixed.
    double normal() {
        double u1 = uniform();
        if (u1 <= 0.0) {
            u1 = 0x1.0p-53;
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Rademacher +-1.
    double sign() { return (next_u64() & 1u) ? 1.0 : -1.0; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling keeps the distribution exact.
        const std::uint64_t threshold = (~n + 1) % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) {
                return r % n;
            }
        }
    }

    /// Derive an independent stream. The child is seeded from the parent's
    /// seed material and the stream id, not from the parent's position, so
    /// forks with distinct ids never overlap regardless of draw order.
    Rng fork(std::uint64_t stream_id) const {
        std::uint64_t x = state_[0] ^ (0x9e3779b97f4a7c15ULL * (stream_id + 1));
        return Rng(splitmix64(x));
    }

    std::array<std::uint64_t, 4> state() const { return state_; }

    void restore(const std::array<std::uint64_t, 4>& s) { state_ = s; }

private:
    static constexpr double kPi = 3.14159265358979323846;

    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::array<std::uint64_t, 4> state_{};
};

/// Stable stream ids for the pipeline's independent random consumers.
namespace stream {
constexpr std::uint64_t kWeights = 1;
constexpr std::uint64_t kData = 2;
constexpr std::uint64_t kAdapterInit = 3;
constexpr std::uint64_t kShuffle = 4;
constexpr std::uint64_t kSvd = 5;
constexpr std::uint64_t kHutchinson = 6;
constexpr std::uint64_t kSplit = 7;
constexpr std::uint64_t kTeacher = 8;
}  // namespace stream

}  // namespace ctrlora
