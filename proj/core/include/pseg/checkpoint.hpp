#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "pseg/lora.hpp"
#include "pseg/model.hpp"
#include "pseg/optimizer.hpp"

namespace pseg {

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Checkpoint directory layout:
//   manifest.json   shapes, model config, epoch, extra blob
//   registry.txt    registry snapshot
//   params/<name>.f32, opt/<name>.f32 (little-endian float32)
//   loss_history.csv (optional)
// Reload followed by an immediate save reproduces every byte.
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Model<T>& model, const Sgd<T>* opt,
                     int epoch, const nlohmann::json& extra, const std::string& loss_history);

template <typename T>
struct LoadedCheckpoint {
    ModelConfig config;
    Registry registry;
    std::unique_ptr<Model<T>> model;
    std::map<std::string, Tensor<T>> opt_state;
    int epoch = 0;
    nlohmann::json extra;
    std::string loss_history;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir);

// Extended (delta) checkpoints store the base reference plus the adapter and
// residual-head arrays only; loading re-composes the extended model.
template <typename T>
void save_extension_checkpoint(const std::filesystem::path& dir, const LoraExtension<T>& ext,
                               const std::filesystem::path& base_dir, const Sgd<T>* opt, int epoch,
                               const nlohmann::json& extra, const std::string& loss_history);

template <typename T>
struct LoadedExtension {
    LoadedCheckpoint<T> base;
    std::unique_ptr<LoraExtension<T>> extension;
    std::map<std::string, Tensor<T>> opt_state;
    int epoch = 0;
    nlohmann::json extra;
    std::string loss_history;
};

template <typename T>
LoadedExtension<T> load_extension_checkpoint(const std::filesystem::path& dir);

}  // namespace pseg
