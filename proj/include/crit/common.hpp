#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace crit {

// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
    config,        // invalid configuration or arguments
    usage,         // API misuse, e.g. stepping a terminated state
    precondition,  // input violates an operation's precondition
    integrity,     // checksum / version / consistency failure
    budget,        // exact enumeration would exceed its budget
    divergence,    // training produced non-finite values
    prerequisite,  // a pipeline artifact is missing or mismatched
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

inline void require(bool ok, ErrorKind kind, const std::string& what) {
    if (!ok) fail(kind, what);
}

/// Deterministic random stream.
///
/// Wraps splitmix-seeded xoshiro256** so that every draw is a fixed function of
/// the seed on every platform (std distributions are implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer on [0, n).
    std::size_t below(std::size_t n);
    /// Standard normal via Box-Muller (no cached second value).
    double normal();
    /// Index drawn from a discrete distribution given by its cumulative sums.
    std::size_t categorical(std::span<const double> cumulative);

    /// Independent child stream; `stream` distinguishes siblings.
    Rng split(std::uint64_t stream) const;

private:
    std::uint64_t s_[4];
    std::uint64_t seed_;
};

/// splitmix64 finalizer; used for seed derivation.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// Lowercase hex SHA-256 of a byte range.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::string& path);

/// Fisher-Yates shuffle driven by `rng`.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = rng.below(i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace crit
