#pragma once

// Experiment configuration: one JSON document, strictly validated.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "refine/metrics.hpp"
#include "refine/nets.hpp"
#include "refine/synthdata.hpp"
#include "refine/trainer.hpp"

namespace refine {

struct ExperimentConfig {
  std::uint64_t seed = 0;  // dataset, backbone and teacher seed
  DataConfig data;
  ModelSpec model;
  BackboneTrainConfig backbone;
  TeacherTrainConfig teacher;
  TrainConfig train;  // ours budgets; variants derive from it
  EvalConfig eval;
};

nlohmann::json to_json(const ExperimentConfig& c);

/// Parses and validates a config document. Syntax errors report
/// "<source>:<line>:<column>"; schema errors name the dotted field path and
/// its line. Unknown fields are rejected. Throws ConfigError.
ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// The built-in defaults as a JSON document (what configs/default.json holds).
std::string default_config_text();

}  // namespace refine
