#include "eyepurify/model_format.hpp"

#include <zlib.h>

#include <cstring>

#include "eyepurify/common.hpp"

namespace eyepurify {

namespace {

constexpr char kMagic[4] = {'E', 'P', 'N', 'N'};
constexpr uint32_t kVersion = 1;
constexpr uint32_t kDtypeF32 = 1;

// The container is defined little-endian; this codebase targets
// little-endian hosts only, so scalars are memcpy'd directly.
template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    Reader(const std::vector<uint8_t>& bytes, const std::string& path)
        : bytes_(bytes), path_(path) {}

    template <typename T>
    T get() {
        T v;
        need(sizeof(T));
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void get_f32(std::vector<float>& out, size_t count) {
        need(count * sizeof(float));
        out.resize(count);
        std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(float));
        pos_ += count * sizeof(float);
    }

    size_t pos() const { return pos_; }
    size_t remaining() const { return bytes_.size() - pos_; }

    void need(size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw IoError(strf("%s: truncated model file", path_.c_str()));
        }
    }

private:
    const std::vector<uint8_t>& bytes_;
    const std::string& path_;
    size_t pos_ = 0;
};

}  // namespace

const NamedTensor* ModelFile::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

void write_model(const ModelFile& model, const std::string& path) {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put<uint32_t>(out, model.version);
    put<uint32_t>(out, static_cast<uint32_t>(model.preset));
    put<uint32_t>(out, static_cast<uint32_t>(model.tensors.size()));
    for (const auto& t : model.tensors) {
        put<uint32_t>(out, static_cast<uint32_t>(t.name.size()));
        out.append(t.name);
        put<uint32_t>(out, kDtypeF32);
        put<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
        size_t numel = 1;
        for (long d : t.shape) {
            if (d <= 0) {
                throw std::invalid_argument(
                    strf("tensor %s: non-positive extent %ld", t.name.c_str(), d));
            }
            put<uint64_t>(out, static_cast<uint64_t>(d));
            numel *= static_cast<size_t>(d);
        }
        if (numel != t.data.size()) {
            throw std::invalid_argument(strf("tensor %s: %zu values for shape %s",
                                             t.name.c_str(), t.data.size(),
                                             shape_str(t.shape).c_str()));
        }
        out.append(reinterpret_cast<const char*>(t.data.data()),
                   t.data.size() * sizeof(float));
    }
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
    put<uint32_t>(out, crc);
    atomic_write_file(path, out);
}

ModelFile read_model(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < sizeof(kMagic) + 3 * sizeof(uint32_t) + sizeof(uint32_t)) {
        throw IoError(strf("%s: truncated model file", path.c_str()));
    }
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IoError(strf("%s: bad model magic", path.c_str()));
    }
    const size_t body = bytes.size() - sizeof(uint32_t);
    uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + body, sizeof(uint32_t));
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
    if (crc != stored_crc) {
        throw IoError(strf("%s: model crc mismatch (file corrupt)", path.c_str()));
    }

    Reader r(bytes, path);
    r.get_str(sizeof(kMagic));
    ModelFile model;
    model.version = r.get<uint32_t>();
    if (model.version != kVersion) {
        throw IoError(strf("%s: unsupported model format version %u", path.c_str(),
                           model.version));
    }
    model.preset = static_cast<ModelPreset>(r.get<uint32_t>());
    const uint32_t count = r.get<uint32_t>();
    model.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const uint32_t name_len = r.get<uint32_t>();
        if (name_len == 0 || name_len > 4096) {
            throw IoError(strf("%s: implausible tensor name length %u", path.c_str(), name_len));
        }
        t.name = r.get_str(name_len);
        const uint32_t dtype = r.get<uint32_t>();
        if (dtype != kDtypeF32) {
            throw IoError(strf("%s: tensor %s has unsupported dtype tag %u", path.c_str(),
                               t.name.c_str(), dtype));
        }
        const uint32_t rank = r.get<uint32_t>();
        if (rank > 8) {
            throw IoError(strf("%s: tensor %s has implausible rank %u", path.c_str(),
                               t.name.c_str(), rank));
        }
        size_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            const uint64_t e = r.get<uint64_t>();
            if (e == 0 || e > (1ull << 32)) {
                throw IoError(strf("%s: tensor %s has implausible extent", path.c_str(),
                                   t.name.c_str()));
            }
            t.shape.push_back(static_cast<long>(e));
            numel *= e;
            if (numel > (1ull << 31)) {
                throw IoError(strf("%s: tensor %s too large", path.c_str(), t.name.c_str()));
            }
        }
        r.get_f32(t.data, numel);
        model.tensors.push_back(std::move(t));
    }
    if (r.remaining() != sizeof(uint32_t)) {
        throw IoError(strf("%s: trailing bytes after model payload", path.c_str()));
    }
    return model;
}

}  // namespace eyepurify
