#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "illusion/synthdata.hpp"

namespace illusion {

using Json = nlohmann::ordered_json;

Json to_json(const DataConfig& cfg);

/// Strict: unknown keys raise ConfigError with the dotted key path.
DataConfig data_config_from_json(const Json& j, const std::string& where = "data");

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace illusion
