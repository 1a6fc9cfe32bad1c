#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace cortex {

/// SplitMix64 finalizer; a bijective 64-bit mixer.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// FNV-1a over the bytes of a purpose label.
std::uint64_t hash_label(std::string_view label) noexcept;

/**
 * Counter-based random stream.
 *
 * A stream is identified by (seed, purpose, index); the n-th draw is a pure
 * function of that key and n, so streams for different records can be
 * created in any order or on any thread and still produce identical values.
 */
class Stream {
  public:
    Stream(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0) noexcept;

    /// Child stream keyed on this stream's key (not its position).
    [[nodiscard]] Stream split(std::string_view purpose, std::uint64_t index = 0) const noexcept;

    std::uint64_t next_u64() noexcept;
    /// Uniform on [0, 1) with 53 bits of resolution.
    double uniform() noexcept;
    /// Uniform on the open interval (0, 1).
    double uniform_open() noexcept;
    /// Standard normal via Box-Muller.
    double normal() noexcept;
    /// Uniform integer in [0, bound); bound must be positive.
    std::uint64_t below(std::uint64_t bound) noexcept;

    /// Fisher-Yates shuffle driven by this stream.
    template <class T>
    void shuffle(std::span<T> items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    /// `count` distinct values from [0, population), in draw order.
    std::vector<std::uint32_t> sample_without_replacement(std::uint32_t population,
                                                          std::uint32_t count);

    [[nodiscard]] std::uint64_t key() const noexcept { return key_; }
    [[nodiscard]] std::uint64_t counter() const noexcept { return counter_; }

  private:
    explicit Stream(std::uint64_t key) noexcept : key_(key) {}

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cortex
