#pragma once

// Parameter checkpoints.
//
//   s2r-checkpoint 1
//   tensor <name> <rank> <d0> ... <dk>
//   ...
//   data
//   <little-endian float64 payload of every tensor, in header order>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "s2r/autodiff.hpp"
#include "s2r/io.hpp"

namespace s2r::ad {

struct NamedTensor {
    std::string name;
    Tensor value;
    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
    std::string out = "s2r-checkpoint 1\n";
    for (const auto& t : tensors) {
        if (t.name.empty() || t.name.find_first_of(" \t\r\n") != std::string::npos)
            throw FormatError("checkpoint tensor name must be non-empty without whitespace: '" + t.name + "'");
        out += "tensor " + t.name + " " + std::to_string(t.value.rank());
        for (std::size_t d : t.value.shape) out += " " + std::to_string(d);
        out += "\n";
    }
    out += "data\n";
    for (const auto& t : tensors)
        for (double v : t.value.data) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
        }
    return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
    std::size_t pos = 0;
    auto next_line = [&]() {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw FormatError("checkpoint header truncated");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    if (next_line() != "s2r-checkpoint 1") throw FormatError("not a checkpoint (bad magic line)");
    std::vector<NamedTensor> tensors;
    for (std::string line = next_line(); line != "data"; line = next_line()) {
        std::istringstream ls(line);
        std::string tag;
        NamedTensor t;
        std::size_t rank = 0;
        if (!(ls >> tag >> t.name >> rank) || tag != "tensor") throw FormatError("bad checkpoint header line: " + line);
        Shape shape(rank);
        for (auto& d : shape)
            if (!(ls >> d)) throw FormatError("bad checkpoint shape: " + line);
        t.value = Tensor(shape, 0.0);
        tensors.push_back(std::move(t));
    }
    std::size_t total = 0;
    for (const auto& t : tensors) total += t.value.size();
    if (bytes.size() - pos != total * 8)
        throw FormatError("checkpoint payload has " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                          std::to_string(total * 8));
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    for (auto& t : tensors)
        for (double& v : t.value.data) {
            std::uint64_t bits = 0;
            for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(raw[i]) << (8 * i);
            v = std::bit_cast<double>(bits);
            raw += 8;
        }
    return tensors;
}

inline void save_checkpoint(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path) {
    io::detail::write_file(path, encode_checkpoint(tensors));
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("missing checkpoint: " + path.string());
    return decode_checkpoint(io::detail::read_file(path));
}

}  // namespace s2r::ad
