#include "clner/num/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace clner::num {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'N', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        std::reverse(b, b + sizeof(T));
        std::memcpy(&v, b, sizeof(T));
        return v;
    }
}

template <class T>
void put(std::ostream& os, T v) {
    v = to_little(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
    T v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw std::runtime_error("checkpoint " + path.string() + ": truncated");
    }
    return to_little(v);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim()));
        for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
        for (double x : t.values()) put<double>(os, x);
    }
    if (!os) throw std::runtime_error("write failed for checkpoint " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
        throw std::runtime_error("checkpoint " + path.string() + ": bad magic");
    }
    const auto version = get<std::uint32_t>(is, path);
    if (version != kVersion) {
        throw std::runtime_error("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
    }
    const auto count = get<std::uint64_t>(is, path);
    NamedTensors out;
    for (std::uint64_t e = 0; e < count; ++e) {
        const auto name_len = get<std::uint32_t>(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint " + path.string() + ": truncated");
        const auto rank = get<std::uint32_t>(is, path);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is, path));
        std::vector<double> values(shape_size(shape));
        for (double& x : values) x = get<double>(is, path);
        out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
    }
    return out;
}

void restore_parameters(const NamedTensors& archive, const NamedTensors& params) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : archive) by_name[name] = &t;
    if (by_name.size() != params.size()) {
        throw std::runtime_error("checkpoint holds " + std::to_string(by_name.size()) + " tensors, model has " +
                                 std::to_string(params.size()));
    }
    for (const auto& [name, p] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint is missing parameter '" + name + "'");
        const Tensor& src = *it->second;
        if (src.shape() != p.shape()) {
            throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + shape_str(src.shape()) +
                                     ", model expects " + shape_str(p.shape()));
        }
        Tensor dst = p;
        std::copy(src.values().begin(), src.values().end(), dst.mutable_values().begin());
    }
}

}  // namespace clner::num
