#pragma once

#include <filesystem>
#include <string>

#include "avatarkit/params.hpp"
#include "json.hpp"

namespace avk {

// Single-file archive: 8-byte magic, u64 header length, JSON header, then the
// concatenated little-endian float32 blobs. The header carries free-form
// metadata, the blob index, and a SHA-256 of the blob section.
struct BlobArchive {
    nlohmann::json meta;
    ParamDict<float> blobs;
    std::string content_hash;
};

void write_blob_archive(const std::filesystem::path& path, const nlohmann::json& meta,
                        const ParamDict<float>& blobs);

BlobArchive read_blob_archive(const std::filesystem::path& path);

}  // namespace avk
