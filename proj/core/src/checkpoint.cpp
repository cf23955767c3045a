#include "flowssc/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <fstream>
#include <iterator>

#include "byte_io.hpp"
#include "flowssc/error.hpp"

namespace flowssc::ckpt {

namespace {

constexpr std::string_view kMagic = "FSSC";

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes 32-bit lengths; feed large buffers in chunks.
    constexpr std::size_t kChunk = std::size_t{1} << 30;
    for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
        const std::size_t n = std::min(kChunk, bytes.size() - off);
        crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    }
    return static_cast<std::uint32_t>(crc);
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

    template <class U>
    U get(const char* what) {
        need(sizeof(U), what);
        const U v = detail::get_le<U>(b_, off_);
        off_ += sizeof(U);
        return v;
    }
    std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
        need(n, what);
        const auto s = b_.subspan(off_, n);
        off_ += n;
        return s;
    }
    std::size_t offset() const { return off_; }

private:
    void need(std::size_t n, const char* what) const {
        if (b_.size() - off_ < n) {
            throw ParseError(std::string("checkpoint truncated in ") + what, off_);
        }
    }
    std::span<const std::uint8_t> b_;
    std::size_t off_ = 0;
};

}  // namespace

const Tensor* Checkpoint::find(std::string_view name) const {
    for (const auto& t : tensors) {
        if (t.name == name) {
            return &t.tensor;
        }
    }
    return nullptr;
}

const Tensor& Checkpoint::at(std::string_view name) const {
    if (const Tensor* t = find(name)) {
        return *t;
    }
    throw DataError("checkpoint has no tensor named " + std::string(name));
}

void Checkpoint::add(const nn::ParamList& params, std::string_view prefix) {
    for (const auto& p : params) {
        add(std::string(prefix) + p.name, p.tensor);
    }
}

void Checkpoint::add(std::string name, const Tensor& t) { tensors.push_back({std::move(name), t.detach().clone()}); }

std::vector<std::uint8_t> encode(const Checkpoint& ckpt) {
    std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
    detail::put_le<std::uint16_t>(out, kVersion);
    detail::put_le<std::uint64_t>(out, ckpt.digest);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.size() > 0xffff || t.rank() > 0xff) {
            throw DataError("tensor " + name + " cannot be stored in a checkpoint");
        }
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(t.dtype() == DType::f64 ? 1 : 0);
        out.push_back(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) {
            detail::put_le<std::uint64_t>(out, d);
        }
        if (t.dtype() == DType::f64) {
            for (double v : t.data<double>()) {
                detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
            }
        } else {
            for (float v : t.data<float>()) {
                detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
            }
        }
    }
    detail::put_le<std::uint32_t>(out, crc32_of(out));
    return out;
}

Checkpoint decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kMagic.size() + 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw ParseError("bad checkpoint magic", 0);
    }
    const std::size_t body = bytes.size() - 4;
    const std::uint32_t stored = detail::get_le<std::uint32_t>(bytes, body);
    if (crc32_of(bytes.first(body)) != stored) {
        throw ParseError("checkpoint CRC mismatch", body);
    }
    Reader r(bytes.first(body));
    r.bytes(kMagic.size(), "magic");
    const std::size_t version_at = r.offset();
    if (const auto v = r.get<std::uint16_t>("version"); v != kVersion) {
        throw ParseError("unsupported checkpoint version " + std::to_string(v), version_at);
    }
    Checkpoint ckpt;
    ckpt.digest = r.get<std::uint64_t>("digest");
    const std::uint32_t count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint16_t>("name length");
        const auto name_bytes = r.bytes(name_len, "name");
        const std::size_t tag_at = r.offset();
        const auto tag = r.get<std::uint8_t>("dtype");
        if (tag > 1) {
            throw ParseError("unknown dtype tag " + std::to_string(tag), tag_at);
        }
        const auto rank = r.get<std::uint8_t>("rank");
        Shape shape;
        std::size_t numel = 1;
        for (std::uint8_t k = 0; k < rank; ++k) {
            shape.push_back(r.get<std::uint64_t>("dims"));
            numel *= shape.back();
        }
        const DType dtype = tag == 1 ? DType::f64 : DType::f32;
        const std::size_t elem = tag == 1 ? 8 : 4;
        if (numel > (body - r.offset()) / elem) {
            throw ParseError("checkpoint truncated in tensor payload", r.offset());
        }
        const auto payload = r.bytes(numel * elem, "payload");
        Tensor t = Tensor::empty(shape, dtype);
        if (dtype == DType::f64) {
            auto d = t.mutable_data<double>();
            for (std::size_t j = 0; j < numel; ++j) {
                d[j] = std::bit_cast<double>(detail::get_le<std::uint64_t>(payload, j * 8));
            }
        } else {
            auto d = t.mutable_data<float>();
            for (std::size_t j = 0; j < numel; ++j) {
                d[j] = std::bit_cast<float>(detail::get_le<std::uint32_t>(payload, j * 4));
            }
        }
        ckpt.tensors.push_back({std::string(name_bytes.begin(), name_bytes.end()), t});
    }
    if (r.offset() != body) {
        throw ParseError("trailing bytes after the last tensor", r.offset());
    }
    return ckpt;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode(ckpt);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) {
            throw DataError("cannot write checkpoint " + tmp.string());
        }
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            throw DataError("failed writing checkpoint " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw DataError("cannot open checkpoint " + path.string());
    }
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return decode(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

void check_digest(const Checkpoint& ckpt, std::uint64_t expected, std::string_view what) {
    if (ckpt.digest != expected) {
        throw ConfigError(std::string(what) + " checkpoint was written for a different configuration");
    }
}

void restore(const Checkpoint& ckpt, const nn::ParamList& params, std::string_view prefix) {
    for (const auto& p : params) {
        const std::string name = std::string(prefix) + p.name;
        const Tensor* src = ckpt.find(name);
        if (!src) {
            throw ConfigError("checkpoint is missing tensor " + name);
        }
        if (src->shape() != p.tensor.shape()) {
            throw ConfigError("checkpoint tensor " + name + " has shape " + shape_string(src->shape()) +
                              ", expected " + shape_string(p.tensor.shape()));
        }
        Tensor dst = p.tensor;
        dst.assign(*src);
    }
}

std::uint64_t digest(std::string_view canonical) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace flowssc::ckpt
