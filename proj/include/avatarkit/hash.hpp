#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace avk {

// Incremental SHA-256, hex-encoded digest.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, size_t n);
    std::string hex_digest();  // finalizes

private:
    void* ctx_;
};

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);

// cheap order-sensitive fingerprint for in-memory state comparisons in tests
uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace avk
