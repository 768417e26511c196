#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

namespace moesim {

std::string read_file(const std::filesystem::path& path);
// Writes atomically enough for our purposes: truncate + write + check stream state.
void write_file(const std::filesystem::path& path, std::string_view contents);

// Parses JSON, rethrowing syntax errors as SchemaError with "source:line:column" context.
// `first_line` offsets the reported line for documents embedded in larger files.
nlohmann::json parse_json(std::string_view text, std::string_view source, int first_line = 1);

// Canonical serialization: sorted keys (nlohmann objects are ordered maps), 2-space indent,
// trailing newline. Doubles print with round-trip precision.
std::string dump_json(const nlohmann::json& j);

std::string sha256_hex(std::string_view data);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace moesim
