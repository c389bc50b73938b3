#pragma once

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "miro/error.hpp"

namespace miro {

/// Incremental SHA-256 used for checkpoint, calibration and config digests.
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw Error("sha256: digest initialisation failed");
        }
    }

    Sha256& update(std::span<const unsigned char> bytes) {
        EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size());
        return *this;
    }

    Sha256& update(std::string_view text) {
        return update(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
    }

    Sha256& update(std::uint64_t value) {
        std::array<unsigned char, 8> buf{};
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
        return update(std::span<const unsigned char>(buf));
    }

    Sha256& update(double value) { return update(std::bit_cast<std::uint64_t>(value)); }

    Sha256& update(std::span<const double> values) {
        update(static_cast<std::uint64_t>(values.size()));
        for (double v : values) update(v);
        return *this;
    }

    /// Lowercase hex digest. The hasher must not be reused afterwards.
    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), out.data(), &len);
        static constexpr char digits[] = "0123456789abcdef";
        std::string s;
        s.reserve(2 * len);
        for (unsigned int i = 0; i < len; ++i) {
            s.push_back(digits[out[i] >> 4]);
            s.push_back(digits[out[i] & 0xF]);
        }
        return s;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view text) { return Sha256().update(text).hex(); }

}  // namespace miro
