// SPDX-License-Identifier: Apache-2.0

#include "separeg/hashing.hpp"

#include <openssl/evp.h>

#include <array>
#include <stdexcept>

namespace separeg {

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xF]);
    }
    return out;
}

std::string config_hash(const nlohmann::json& config) {
    // nlohmann::json objects are std::map-backed, so dump() is already key-sorted.
    return sha256_hex(config.dump());
}

} // namespace separeg
