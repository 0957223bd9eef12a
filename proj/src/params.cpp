#include "padapter/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "padapter/errors.hpp"
#include "padapter/hash.hpp"

namespace padapter {

void ParameterStore::set(const std::string& name, Tensor value, bool frozen) {
    entries_[name] = ParamEntry{std::move(value), frozen};
}

bool ParameterStore::has_prefix(const std::string& prefix) const {
    auto it = entries_.lower_bound(prefix);
    return it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0;
}

const Tensor& ParameterStore::get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("parameter '" + name + "' not found");
    return it->second.value;
}

Tensor& ParameterStore::mutable_value(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("parameter '" + name + "' not found");
    return it->second.value;
}

bool ParameterStore::frozen(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("parameter '" + name + "' not found");
    return it->second.frozen;
}

void ParameterStore::set_frozen(const std::string& name, bool frozen) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("parameter '" + name + "' not found");
    it->second.frozen = frozen;
}

void ParameterStore::freeze_all() {
    for (auto& [_, e] : entries_) e.frozen = true;
}

void ParameterStore::erase_prefix(const std::string& prefix) {
    for (auto it = entries_.lower_bound(prefix);
         it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0;)
        it = entries_.erase(it);
}

void ParameterStore::merge(const ParameterStore& other) {
    for (const auto& [name, e] : other.entries_) {
        if (contains(name)) throw ContractError("merge: duplicate parameter '" + name + "'");
        entries_.emplace(name, e);
    }
}

ParameterStore ParameterStore::subset(const std::string& prefix) const {
    ParameterStore out;
    for (auto it = entries_.lower_bound(prefix);
         it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0; ++it)
        out.entries_.emplace(it->first, it->second);
    return out;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
}

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

    void need(std::size_t n, const char* what) const {
        if (b_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated reading ") + what, pos_);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return b_[pos_++];
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s(b_.begin() + static_cast<long>(pos_), b_.begin() + static_cast<long>(pos_ + n));
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == b_.size(); }

private:
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

void serialize_entry(std::vector<std::uint8_t>& out, const std::string& name, const ParamEntry& e) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u8(out, e.frozen ? 1 : 0);
    put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) put_u64(out, d);
    for (double v : e.value.storage()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ParameterStore& store) {
    std::vector<std::uint8_t> out = {'P', 'A', 'D', 'K'};
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (const auto& [name, e] : store.entries()) serialize_entry(out, name, e);
    return out;
}

ParameterStore parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.bytes(4, "magic") != "PADK") throw FormatError("checkpoint: bad magic", 0);
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
    const std::uint32_t count = r.u32("tensor count");
    ParameterStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t entry_at = r.pos();
        const std::uint32_t name_len = r.u32("name length");
        std::string name = r.bytes(name_len, "name");
        const std::uint8_t frozen = r.u8("frozen flag");
        if (frozen > 1) throw FormatError("checkpoint: bad frozen flag for '" + name + "'", r.pos() - 1);
        const std::uint32_t rank = r.u32("rank");
        if (rank > 8) throw FormatError("checkpoint: implausible rank for '" + name + "'", r.pos() - 4);
        Shape shape(rank);
        std::uint64_t n = 1;
        for (auto& d : shape) {
            d = r.u64("dims");
            n *= d;
        }
        if (n > (bytes.size() - r.pos()) / 4) throw FormatError("checkpoint: truncated payload for '" + name + "'", r.pos());
        std::vector<double> data(n);
        for (auto& v : data) v = static_cast<double>(std::bit_cast<float>(r.u32("payload")));
        if (store.contains(name)) throw FormatError("checkpoint: duplicate tensor '" + name + "'", entry_at);
        store.set(name, Tensor(std::move(shape), std::move(data)), frozen == 1);
    }
    if (!r.done()) throw FormatError("checkpoint: trailing bytes", r.pos());
    return store;
}

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(store);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

ParameterStore load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes(std::istreambuf_iterator<char>(in), {});
    return parse_checkpoint(bytes);
}

std::string partition_hash(const ParameterStore& store, const std::string& prefix) {
    return sha256_hex(serialize_checkpoint(store.subset(prefix)));
}

}  // namespace padapter
