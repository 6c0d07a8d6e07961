#include "seer/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "seer/errors.hpp"

namespace seer {

namespace {

constexpr char kMagic[4] = {'S', 'A', 'T', 'R'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kMaxElems = std::size_t(1) << 33;

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("tensor dump truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("tensor dump truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_tensor(const Tensor& t, std::ostream& out) {
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, std::uint32_t(t.rank()));
    for (std::size_t d : t.shape) put_u64(out, d);
    for (float v : t.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
    if (!out) throw DataError("tensor dump write failed");
}

void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    save_tensor(t, f);
}

Tensor load_tensor(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4)) throw DataError("tensor dump truncated");
    if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("bad magic in tensor dump");
    const std::uint32_t version = get_u32(in);
    if (version != kVersion)
        throw DataError("unsupported tensor dump version " + std::to_string(version));
    const std::uint32_t rank = get_u32(in);
    if (rank > 8) throw DataError("tensor dump rank too large");
    std::vector<std::size_t> dims(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint64_t d = get_u64(in);
        if (d == 0 || d > kMaxElems || n > kMaxElems / d)
            throw DataError("tensor dump dimensions invalid");
        dims[i] = std::size_t(d);
        n *= std::size_t(d);
    }
    Tensor t(dims);
    for (std::size_t i = 0; i < n; ++i) t.data[i] = std::bit_cast<float>(get_u32(in));
    return t;
}

Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open: " + path);
    return load_tensor(f);
}

}  // namespace seer
