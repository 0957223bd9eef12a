#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "padapter/tensor.hpp"

namespace padapter {

struct ParamEntry {
    Tensor value;
    bool frozen = false;
};

// Named parameters split into a frozen set (the pretrained base and any
// earlier stage) and a trainable set. Names are namespaced base.*, dca.*,
// rpa.*, ctrl.*. Iteration order is lexicographic by name.
class ParameterStore {
public:
    void set(const std::string& name, Tensor value, bool frozen);
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    bool has_prefix(const std::string& prefix) const;
    const Tensor& get(const std::string& name) const;
    Tensor& mutable_value(const std::string& name);
    bool frozen(const std::string& name) const;
    void set_frozen(const std::string& name, bool frozen);
    void freeze_all();
    void erase_prefix(const std::string& prefix);

    // Copies every entry of `other`; duplicate names are a contract error.
    void merge(const ParameterStore& other);
    ParameterStore subset(const std::string& prefix) const;

    const std::map<std::string, ParamEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;

private:
    std::map<std::string, ParamEntry> entries_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Little-endian "PADK" container: u32 version, u32 count, then per tensor
// u32 name length, name bytes, u8 frozen flag, u32 rank, u64 dims, f32 data.
std::vector<std::uint8_t> serialize_checkpoint(const ParameterStore& store);
ParameterStore parse_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path);
ParameterStore load_checkpoint(const std::filesystem::path& path);

// SHA-256 (hex) of the serialized entries whose names start with `prefix`.
std::string partition_hash(const ParameterStore& store, const std::string& prefix);

}  // namespace padapter
