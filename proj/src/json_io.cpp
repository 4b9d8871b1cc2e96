#include "illusion/json_io.hpp"

#include <fstream>
#include <sstream>

#include "illusion/errors.hpp"

namespace illusion {

Json to_json(const DataConfig& cfg) {
  Json j;
  j["num_classes"] = cfg.num_classes;
  j["height"] = cfg.height;
  j["width"] = cfg.width;
  j["embed_dim"] = cfg.embed_dim;
  j["pixel_noise_std"] = cfg.pixel_noise_std;
  j["train_per_class"] = cfg.train_per_class;
  j["eval_per_class"] = cfg.eval_per_class;
  j["prototype_smoothing_std"] = cfg.prototype_smoothing_std;
  j["master_seed"] = cfg.master_seed;
  return j;
}

DataConfig data_config_from_json(const Json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  DataConfig cfg;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "num_classes") cfg.num_classes = value.get<int>();
      else if (key == "height") cfg.height = value.get<int>();
      else if (key == "width") cfg.width = value.get<int>();
      else if (key == "embed_dim") cfg.embed_dim = value.get<int>();
      else if (key == "pixel_noise_std") cfg.pixel_noise_std = value.get<double>();
      else if (key == "train_per_class") cfg.train_per_class = value.get<int>();
      else if (key == "eval_per_class") cfg.eval_per_class = value.get<int>();
      else if (key == "prototype_smoothing_std") cfg.prototype_smoothing_std = value.get<double>();
      else if (key == "master_seed") cfg.master_seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown key '" + where + "." + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where + "." + key + ": " + e.what());
    }
  }
  return cfg;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace illusion
