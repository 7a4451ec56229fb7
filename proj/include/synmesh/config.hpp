#pragma once

// JSON configuration for scenes, pretraining and training. Readers reject
// unknown keys (ConfigError naming the key); absent keys keep defaults.

#include <string>

#include <nlohmann/json.hpp>

#include "synmesh/gen_pathway.hpp"
#include "synmesh/scene_synth.hpp"
#include "synmesh/training.hpp"

namespace synmesh::config {

using Json = nlohmann::json;

Json to_json(const scene::SceneConfig& c);
Json to_json(const gen::PretrainOptions& c);
Json to_json(const train::ModelConfig& c);
Json to_json(const train::TrainConfig& c);

// Apply the keys of `j` on top of `base`; `where` prefixes error messages.
scene::SceneConfig scene_from_json(const Json& j, scene::SceneConfig base = {}, const std::string& where = "scene");
gen::PretrainOptions pretrain_from_json(const Json& j, gen::PretrainOptions base = {},
                                        const std::string& where = "pretrain");
train::ModelConfig model_from_json(const Json& j, train::ModelConfig base = {}, const std::string& where = "model");
train::TrainConfig train_from_json(const Json& j, train::TrainConfig base = {}, const std::string& where = "train");

// Parse JSON text; syntax errors become ConfigError.
Json parse(const std::string& text, const std::string& what = "config");
Json load_file(const std::string& path);  // MissingInputError when absent

}  // namespace synmesh::config
