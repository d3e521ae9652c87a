#include "avatarkit/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "avatarkit/errors.hpp"
#include "avatarkit/hash.hpp"

namespace avk {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'A', 'V', 'K', 'A', 'R', 'C', 'H', '1'};

static_assert(sizeof(float) == 4);

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void write_blob_archive(const std::filesystem::path& path, const json& meta,
                        const ParamDict<float>& blobs) {
    json index = json::array();
    uint64_t offset = 0;
    Sha256 hash;
    for (const auto& name : blobs.names()) {
        const auto& t = blobs.at(name);
        uint64_t nbytes = static_cast<uint64_t>(t.numel()) * 4;
        index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset},
                         {"nbytes", nbytes}});
        hash.update(t.data(), nbytes);
        offset += nbytes;
    }

    json header;
    header["meta"] = meta;
    header["blobs"] = index;
    header["blob_bytes"] = offset;
    header["content_hash"] = hash.hex_digest();

    std::string hdr = header.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(kMagic, 8);
    put_u64(f, hdr.size());
    f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    for (const auto& name : blobs.names()) {
        const auto& t = blobs.at(name);
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * 4));
    }
    if (!f) throw IoError("write failed for " + path.string());
}

BlobArchive read_blob_archive(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());

    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError("not a blob archive: " + path.string());
    uint64_t hdr_len = get_u64(f);
    if (!f || hdr_len > (1ULL << 30)) throw FormatError("bad archive header length");
    std::string hdr(hdr_len, '\0');
    f.read(hdr.data(), static_cast<std::streamsize>(hdr_len));
    if (!f) throw FormatError("truncated archive header in " + path.string());

    json header;
    try {
        header = json::parse(hdr);
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad archive header: ") + e.what());
    }

    BlobArchive out;
    try {
        out.meta = header.at("meta");
        out.content_hash = header.at("content_hash").get<std::string>();
        Sha256 hash;
        for (const auto& e : header.at("blobs")) {
            std::string name = e.at("name").get<std::string>();
            Shape shape = e.at("shape").get<Shape>();
            uint64_t nbytes = e.at("nbytes").get<uint64_t>();
            if (nbytes != static_cast<uint64_t>(numel_of(shape)) * 4)
                throw FormatError("blob size mismatch for " + name);
            Tensor<float> t(shape);
            f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(nbytes));
            if (!f) throw FormatError("truncated blob " + name + " in " + path.string());
            hash.update(t.data(), nbytes);
            out.blobs.put(name, std::move(t));
        }
        std::string actual = hash.hex_digest();
        if (actual != out.content_hash)
            throw CorruptionError("archive content hash mismatch in " + path.string());
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad archive header: ") + e.what());
    }
    return out;
}

}  // namespace avk
