#pragma once

#include <map>
#include <string>
#include <vector>

#include "mdtk/tensor.hpp"

namespace mdtk {

// "MDTK" tensor container: magic (4 bytes), version u16, entry count u32,
// then per entry name (u16 length + UTF-8), dtype code u8 (1=f32, 2=f64,
// 3=u8), ndim u8, dims u32 each, little-endian payload. Round trips are
// bit-exact; all in-memory tensors are f64 and stored as dtype 2.
struct NamedTensors {
    std::vector<std::pair<std::string, Tensor>> entries;

    void add(const std::string& name, Tensor t);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;
};

// Writes atomically (temp + rename) and returns the SHA-256 hex digest of
// the file bytes.
std::string save_tensors(const std::string& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::string& path);
std::string serialize_tensors(const NamedTensors& tensors);

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_file(const std::string& path);

// Line-oriented UTF-8 "key: value" document used for manifests and
// reports. Preserves insertion order.
struct KvDoc {
    std::vector<std::pair<std::string, std::string>> items;

    void set(const std::string& key, const std::string& value);
    void set(const std::string& key, double value);
    void set(const std::string& key, long long value);
    const std::string* find(const std::string& key) const;
    std::string to_string() const;

    static KvDoc parse(const std::string& text);
    static KvDoc load(const std::string& path);
    void save(const std::string& path) const;  // atomic
};

void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace mdtk
