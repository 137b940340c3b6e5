#pragma once

// Binary checkpoints:
//   "MDRG" | u32 version (1) | u64 metadata length | metadata JSON | tensor data
// Metadata holds caller fields plus "tensors": [{name, shape, dtype, offset}]
// sorted by name. Tensor data is little-endian f32, row-major, and offsets
// are relative to the start of the data section.

#include "mdrg/tensor.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'R', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Mat<float>> tensors;

    /// Stores every tensor of `params` as "<prefix>/<name>".
    template <class Params>
    void put(const std::string& prefix, const Params& params) {
        for (const auto& ref : params.tensors()) {
            tensors[prefix + "/" + ref.name] = ref.tensor->template cast<float>();
        }
    }

    bool has(const std::string& prefix) const {
        const auto key = prefix + "/";
        auto it = tensors.lower_bound(key);
        return it != tensors.end() && it->first.compare(0, key.size(), key) == 0;
    }

    /// Fills `params` (already shaped) from "<prefix>/<name>" entries.
    template <class Params>
    void get(const std::string& prefix, Params& params) const {
        for (auto& ref : params.tensors()) {
            const auto key = prefix + "/" + ref.name;
            auto it = tensors.find(key);
            if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor " + key);
            auto& dst = *ref.tensor;
            if (it->second.rows() != dst.rows() || it->second.cols() != dst.cols()) {
                throw CheckpointError("checkpoint tensor " + key + " has shape " + std::to_string(it->second.rows()) +
                                      "x" + std::to_string(it->second.cols()) + ", model expects " +
                                      std::to_string(dst.rows()) + "x" + std::to_string(dst.cols()));
            }
            using S = typename std::remove_reference_t<decltype(dst)>::Scalar;
            dst = it->second.template cast<S>();
        }
    }

    std::vector<std::uint8_t> serialize() const {
        nlohmann::json m = meta;
        auto manifest = nlohmann::json::array();
        std::uint64_t offset = 0;
        for (const auto& [name, t] : tensors) {
            manifest.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}, {"dtype", "f32"}, {"offset", offset}});
            offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
        }
        m["tensors"] = manifest;
        const std::string text = m.dump();
        std::vector<std::uint8_t> out;
        out.reserve(16 + text.size() + offset);
        auto put_bytes = [&](const void* p, std::size_t n) {
            const auto* b = static_cast<const std::uint8_t*>(p);
            out.insert(out.end(), b, b + n);
        };
        put_bytes(kCheckpointMagic, 4);
        put_bytes(&kCheckpointVersion, 4);
        const std::uint64_t len = text.size();
        put_bytes(&len, 8);
        put_bytes(text.data(), text.size());
        for (const auto& [name, t] : tensors) put_bytes(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
        return out;
    }

    static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
        if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
            throw CheckpointError("not a checkpoint: bad magic");
        }
        std::uint32_t version = 0;
        std::memcpy(&version, bytes.data() + 4, 4);
        if (version != kCheckpointVersion) {
            throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
        }
        std::uint64_t len = 0;
        std::memcpy(&len, bytes.data() + 8, 8);
        if (len > bytes.size() - 16) throw CheckpointError("truncated checkpoint metadata");
        Checkpoint c;
        try {
            c.meta = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
        } catch (const nlohmann::json::parse_error& e) {
            throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
        }
        const std::size_t data = 16 + static_cast<std::size_t>(len);
        const auto manifest = c.meta.at("tensors");
        c.meta.erase("tensors");
        for (const auto& e : manifest) {
            const auto name = e.at("name").get<std::string>();
            if (e.at("dtype").get<std::string>() != "f32") throw CheckpointError("tensor " + name + ": dtype must be f32");
            const auto rows = e.at("shape").at(0).get<Eigen::Index>();
            const auto cols = e.at("shape").at(1).get<Eigen::Index>();
            const auto off = e.at("offset").get<std::uint64_t>();
            const std::size_t n = static_cast<std::size_t>(rows * cols) * sizeof(float);
            if (rows < 0 || cols < 0 || data + off + n > bytes.size()) {
                throw CheckpointError("tensor " + name + " extends past end of checkpoint");
            }
            Mat<float> t(rows, cols);
            std::memcpy(t.data(), bytes.data() + data + off, n);
            c.tensors.emplace(name, std::move(t));
        }
        return c;
    }

    void save(const std::string& path) const {
        const auto bytes = serialize();
        const std::string tmp = path + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary);
            if (!out) throw CheckpointError("cannot write " + tmp);
            out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
            if (!out) throw CheckpointError("write failed for " + tmp);
        }
        if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint to " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw CheckpointError("cannot open checkpoint " + path);
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return deserialize(bytes);
    }
};

/// Throws a descriptive error when `stored` and `expected` differ.
inline void require_same_config(const std::string& what, const nlohmann::json& stored, const nlohmann::json& expected) {
    if (stored == expected) return;
    std::string detail;
    if (stored.is_object() && expected.is_object()) {
        for (const auto& [k, v] : expected.items()) {
            if (!stored.contains(k)) detail += " " + k + " missing;";
            else if (stored.at(k) != v) detail += " " + k + ": checkpoint " + stored.at(k).dump() + " vs " + v.dump() + ";";
        }
        for (const auto& [k, v] : stored.items()) {
            if (!expected.contains(k)) detail += " unexpected " + k + ";";
        }
    } else {
        detail = " checkpoint " + stored.dump() + " vs " + expected.dump();
    }
    throw CheckpointError(what + " config mismatch:" + detail);
}

}  // namespace mdrg
