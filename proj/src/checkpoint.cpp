#include "amor/checkpoint.hpp"

#include <fstream>

namespace amor {

nlohmann::json checkpoint_to_json(const Model& model) {
  nlohmann::json params = nlohmann::json::array();
  const ParamStore& store = model.params();
  for (std::size_t i = 0; i < store.size(); ++i) {
    params.push_back({{"name", store.name(i)}, {"shape", store[i].shape()}, {"data", store[i].storage()}});
  }
  return {{"version", kCheckpointVersion}, {"config", to_json(model.config())}, {"params", params}};
}

Model checkpoint_from_json(const nlohmann::json& j) {
  const int version = j.at("version").get<int>();
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  ParamStore store;
  for (const auto& p : j.at("params")) {
    store.add(p.at("name").get<std::string>(),
              Tensor(p.at("shape").get<Shape>(), p.at("data").get<std::vector<double>>()));
  }
  return Model(model_config_from_json(j.at("config")), std::move(store));
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(model).dump();
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace amor
