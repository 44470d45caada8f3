#include "crit/common.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <numbers>

namespace crit {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::usage: return "usage";
        case ErrorKind::precondition: return "precondition";
        case ErrorKind::integrity: return "integrity";
        case ErrorKind::budget: return "budget";
        case ErrorKind::divergence: return "divergence";
        case ErrorKind::prerequisite: return "prerequisite";
    }
    return "unknown";
}

void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, std::string(to_string(kind)) + " error: " + what);
}

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return mix64(mix64(base) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : s_) {
        x += 0x9e3779b97f4a7c15ULL;
        s = mix64(x);
    }
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::size_t Rng::below(std::size_t n) {
    if (n <= 1) return 0;
    // Lemire's rejection keeps the draw unbiased.
    const std::uint64_t range = n;
    const std::uint64_t threshold = (0 - range) % range;
    for (;;) {
        const std::uint64_t x = next_u64();
        const unsigned __int128 m = static_cast<unsigned __int128>(x) * range;
        if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::size_t>(m >> 64);
    }
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::categorical(std::span<const double> cumulative) {
    const double u = uniform() * cumulative.back();
    for (std::size_t i = 0; i < cumulative.size(); ++i)
        if (u < cumulative[i]) return i;
    return cumulative.size() - 1;
}

Rng Rng::split(std::uint64_t stream) const { return Rng(derive_seed(seed_, stream)); }

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::integrity, "cannot open " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

}  // namespace crit
