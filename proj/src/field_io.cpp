#include "gsh/field_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "gsh/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "GSHFLD01 IO assumes a little-endian host");

namespace gsh {

using nlohmann::json;

StorageType parse_storage_type(const std::string& name) {
  if (name == "f64") return StorageType::f64;
  if (name == "f32") return StorageType::f32;
  throw ConfigError("unknown storage dtype '" + name + "' (expected f64 or f32)");
}

std::string to_string(StorageType t) { return t == StorageType::f64 ? "f64" : "f32"; }

void write_field(std::ostream& os, const Field& field, const json& meta, StorageType dtype) {
  const Lattice& lat = field.lattice();
  json header;
  header["dims"] = lat.extents();
  header["voxel_size"] = lat.spacing();
  header["channels"] = field.channels();
  header["dtype"] = to_string(dtype);
  header["layout"] = kFieldLayout;
  if (!meta.is_null() && !meta.empty()) header["meta"] = meta;

  os.write(kFieldMagic, 8);
  const std::string text = header.dump();
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.put('\n');
  if (dtype == StorageType::f64) {
    os.write(reinterpret_cast<const char*>(field.data()),
             static_cast<std::streamsize>(field.size() * sizeof(double)));
  } else {
    std::vector<float> tmp(field.values().begin(), field.values().end());
    os.write(reinterpret_cast<const char*>(tmp.data()),
             static_cast<std::streamsize>(tmp.size() * sizeof(float)));
  }
  if (!os) throw DataError("failed writing field data");
}

FieldFile read_field(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kFieldMagic, 8) != 0) {
    throw DataError("not a GSHFLD01 field file (bad magic)");
  }
  std::string line;
  if (!std::getline(is, line)) throw DataError("truncated GSHFLD01 header");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed GSHFLD01 header: ") + e.what());
  }
  try {
    if (header.value("layout", std::string(kFieldLayout)) != kFieldLayout) {
      throw DataError("unsupported field layout " + header["layout"].get<std::string>());
    }
    Lattice lat(header.at("dims").get<std::vector<int>>(),
                header.value("voxel_size", std::vector<double>{}));
    const int channels = header.at("channels").get<int>();
    const StorageType dtype = parse_storage_type(header.value("dtype", std::string("f64")));
    const std::size_t n = lat.size() * static_cast<std::size_t>(channels);
    std::vector<double> data(n);
    if (dtype == StorageType::f64) {
      is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    } else {
      std::vector<float> tmp(n);
      is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * sizeof(float)));
      std::copy(tmp.begin(), tmp.end(), data.begin());
    }
    if (!is) throw DataError("truncated GSHFLD01 payload");
    FieldFile out{Field(lat, channels, std::move(data)), header.value("meta", json::object())};
    return out;
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid GSHFLD01 header: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
}

void save_field(const std::filesystem::path& path, const Field& field, const json& meta,
                StorageType dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  write_field(os, field, meta, dtype);
}

FieldFile load_field(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return read_field(is);
}

}  // namespace gsh
