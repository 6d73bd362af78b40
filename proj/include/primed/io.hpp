#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "primed/tensor.hpp"

// On-disk array codec: raw little-endian row-major payload plus a JSON sidecar
// `<file>.json` holding {"dtype": "float32"|"uint8", "shape": [...]}.
namespace primed::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class DType { Float32, UInt8 };

std::string dtype_name(DType d);
DType dtype_from_name(const std::string& name);

fs::path sidecar_path(const fs::path& bin);

// UInt8 stores each element rounded to 0/1; values outside {0,1} are rejected.
void write_array(const fs::path& bin, const Tensor& t, DType dtype);
Tensor read_array(const fs::path& bin, DType* dtype_out = nullptr);

// Rounds every element to the nearest float32 value in place.
void round_to_float32(Tensor& t);

void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

}  // namespace primed::io
