#pragma once

// Experiment configuration: one JSON file covering model, training, decoding
// and task sections, with dotted-path CLI overrides (`--model.d 512`).
// Unknown keys are rejected; serialization round-trips losslessly.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ef/config.hpp"
#include "ef/data.hpp"
#include "ef/decode.hpp"
#include "ef/train.hpp"

namespace ef {

struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    DecodeConfig decode;
    TaskSpec task;
    uint64_t seed = 1;
    std::string out_dir = "run";
};

std::string experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const std::string& text);
ExperimentConfig load_experiment(const std::string& path);
void save_experiment(const ExperimentConfig& cfg, const std::string& path);

// Sets one dotted key ("model.d", "train.max_steps", "seed", ...) from its
// string form; the result re-validates through the normal parse path.
void apply_override(ExperimentConfig& cfg, const std::string& dotted_key, const std::string& value);

uint64_t fnv1a(const void* data, size_t len);
uint64_t fnv1a_file(const std::string& path);

// Reproducibility manifest: command, config snapshot, seed, input hashes.
std::string manifest_json(const std::string& command, const ExperimentConfig& cfg,
                          const std::vector<std::pair<std::string, std::string>>& input_files);

// Checkpoint header carrying everything needed to rebuild the model.
std::string checkpoint_header(const ModelConfig& model, const Vocab* vocab, int64_t step);
ModelConfig model_from_header(const std::string& header, Vocab* vocab_out = nullptr);

}  // namespace ef
