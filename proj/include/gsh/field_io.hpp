#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include <json.hpp>

#include "gsh/field.hpp"

namespace gsh {

enum class StorageType { f64, f32 };

StorageType parse_storage_type(const std::string& name);
std::string to_string(StorageType t);

/// GSHFLD01 container: 8-byte magic, one line of UTF-8 JSON header
/// (dims, channels, dtype, voxel_size, layout, optional "meta" object),
/// then raw little-endian samples in voxel-major / channels-innermost order.
struct FieldFile {
  Field field;
  nlohmann::json meta = nlohmann::json::object();
};

void write_field(std::ostream& os, const Field& field, const nlohmann::json& meta = {},
                 StorageType dtype = StorageType::f64);
FieldFile read_field(std::istream& is);

void save_field(const std::filesystem::path& path, const Field& field,
                const nlohmann::json& meta = {}, StorageType dtype = StorageType::f64);
FieldFile load_field(const std::filesystem::path& path);

inline constexpr char kFieldMagic[9] = "GSHFLD01";
inline constexpr const char* kFieldLayout = "voxel-major";

}  // namespace gsh
