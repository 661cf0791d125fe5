#include "mdtk/io.hpp"

#include <openssl/sha.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mdtk {

namespace {

constexpr char kMagic[4] = {'M', 'D', 'T', 'K'};
constexpr std::uint16_t kVersion = 1;

void put_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}
template <typename T>
void put_le(std::string& out, T v) {
    unsigned char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
        b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    put_bytes(out, b, sizeof(T));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw std::runtime_error("tensor container: truncated file");
    }
    template <typename T>
    T get_le() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i]))
                 << (8 * i);
        pos += sizeof(T);
        return static_cast<T>(v);
    }
    std::string get_str(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void NamedTensors::add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : entries)
        if (n == name) throw std::invalid_argument("NamedTensors: duplicate name " + name);
    entries.emplace_back(name, std::move(t));
}

const Tensor& NamedTensors::get(const std::string& name) const {
    for (const auto& [n, t] : entries)
        if (n == name) return t;
    throw std::out_of_range("NamedTensors: no entry named " + name);
}

bool NamedTensors::has(const std::string& name) const {
    for (const auto& [n, _] : entries)
        if (n == name) return true;
    return false;
}

std::string serialize_tensors(const NamedTensors& tensors) {
    std::string out;
    put_bytes(out, kMagic, 4);
    put_le<std::uint16_t>(out, kVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.entries.size()));
    for (const auto& [name, t] : tensors.entries) {
        if (name.size() > 0xffff)
            throw std::invalid_argument("save_tensors: name too long");
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        put_bytes(out, name.data(), name.size());
        put_le<std::uint8_t>(out, 2);  // f64
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
        for (int d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            double v = t[i];
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_le<std::uint64_t>(out, bits);
        }
    }
    return out;
}

std::string save_tensors(const std::string& path, const NamedTensors& tensors) {
    std::string out = serialize_tensors(tensors);
    write_file_atomic(path, out);
    return sha256_hex(out.data(), out.size());
}

NamedTensors load_tensors(const std::string& path) {
    std::string buf = read_file(path);
    Reader r{buf};
    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error("tensor container: bad magic in " + path);
    r.pos = 4;
    std::uint16_t version = r.get_le<std::uint16_t>();
    if (version != kVersion)
        throw std::runtime_error("tensor container: unsupported version");
    std::uint32_t count = r.get_le<std::uint32_t>();
    NamedTensors out;
    for (std::uint32_t e = 0; e < count; ++e) {
        std::uint16_t name_len = r.get_le<std::uint16_t>();
        std::string name = r.get_str(name_len);
        std::uint8_t dtype = r.get_le<std::uint8_t>();
        std::uint8_t ndim = r.get_le<std::uint8_t>();
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(r.get_le<std::uint32_t>());
        Tensor t(shape);
        switch (dtype) {
            case 1:
                for (std::int64_t i = 0; i < t.numel(); ++i) {
                    std::uint32_t bits = r.get_le<std::uint32_t>();
                    float f;
                    std::memcpy(&f, &bits, 4);
                    t[i] = f;
                }
                break;
            case 2:
                for (std::int64_t i = 0; i < t.numel(); ++i) {
                    std::uint64_t bits = r.get_le<std::uint64_t>();
                    double d;
                    std::memcpy(&d, &bits, 8);
                    t[i] = d;
                }
                break;
            case 3:
                for (std::int64_t i = 0; i < t.numel(); ++i)
                    t[i] = static_cast<double>(r.get_le<std::uint8_t>());
                break;
            default:
                throw std::runtime_error("tensor container: unknown dtype code");
        }
        out.add(name, std::move(t));
    }
    if (r.pos != buf.size())
        throw std::runtime_error("tensor container: trailing bytes in " + path);
    return out;
}

std::string sha256_hex(const void* data, std::size_t len) {
    unsigned char md[SHA256_DIGEST_LENGTH];
    SHA256(static_cast<const unsigned char*>(data), len, md);
    static const char* hex = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (unsigned char b : md) {
        s += hex[b >> 4];
        s += hex[b & 0xf];
    }
    return s;
}

std::string sha256_file(const std::string& path) {
    std::string buf = read_file(path);
    return sha256_hex(buf.data(), buf.size());
}

void KvDoc::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : items)
        if (k == key) {
            v = value;
            return;
        }
    items.emplace_back(key, value);
}

void KvDoc::set(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(key, os.str());
}

void KvDoc::set(const std::string& key, long long value) {
    set(key, std::to_string(value));
}

const std::string* KvDoc::find(const std::string& key) const {
    for (const auto& [k, v] : items)
        if (k == key) return &v;
    return nullptr;
}

std::string KvDoc::to_string() const {
    std::string out;
    for (const auto& [k, v] : items) out += k + ": " + v + "\n";
    return out;
}

KvDoc KvDoc::parse(const std::string& text) {
    KvDoc doc;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto colon = line.find(':');
        if (colon == std::string::npos)
            throw std::runtime_error("KvDoc: malformed line: " + line);
        std::string key = line.substr(0, colon);
        std::string val = line.substr(colon + 1);
        while (!val.empty() && val.front() == ' ') val.erase(val.begin());
        doc.items.emplace_back(key, val);
    }
    return doc;
}

KvDoc KvDoc::load(const std::string& path) { return parse(read_file(path)); }

void KvDoc::save(const std::string& path) const { write_file_atomic(path, to_string()); }

void write_file_atomic(const std::string& path, const std::string& bytes) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for write: " + tmp);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("rename failed: " + path);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace mdtk
