#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pseg/error.hpp"

namespace pseg {

enum class Dimensionality { k2d, k3d };

std::string to_string(Dimensionality d);
Dimensionality dimensionality_from_string(const std::string& s);

struct ModalityDescriptor {
    int modal_id = -1;
    std::string name;
    int channel_count = 1;  // in [1,4]
    Dimensionality dimensionality = Dimensionality::k3d;
};

struct TaskDescriptor {
    int task_id = -1;
    std::string name;
    int class_count = 2;  // including background
    int modal_id = -1;
};

// Canonical store of tasks and modalities. IDs are dense integers assigned in
// registration order; they index prompt banks and the FUSE output channels
// directly. Freeze before building a model; frozen registries are safe for
// any number of concurrent readers.
class Registry {
public:
    // Registers and returns the assigned dense ID. Descriptors may carry -1
    // (auto-assign) or the expected next ID; anything else is a duplicate /
    // gap error.
    int register_modality(ModalityDescriptor m);
    int register_task(TaskDescriptor t);

    const ModalityDescriptor& modality(int modal_id) const;
    const TaskDescriptor& task(int task_id) const;
    std::pair<const TaskDescriptor&, const ModalityDescriptor&> resolve(int task_id) const;

    int task_count() const { return static_cast<int>(tasks_.size()); }
    int modality_count() const { return static_cast<int>(modalities_.size()); }
    int max_class_count() const { return max_class_count_; }
    const std::vector<TaskDescriptor>& tasks() const { return tasks_; }
    const std::vector<ModalityDescriptor>& modalities() const { return modalities_; }

    void freeze() { frozen_ = true; }
    bool frozen() const { return frozen_; }

    // Canonical text serialization; load(save(r)) == r and re-saving a loaded
    // file reproduces it byte for byte.
    std::string serialize() const;
    static Registry deserialize(const std::string& text);
    void save(const std::filesystem::path& file) const;
    static Registry load(const std::filesystem::path& file);

private:
    std::vector<ModalityDescriptor> modalities_;
    std::vector<TaskDescriptor> tasks_;
    int max_class_count_ = 0;
    bool frozen_ = false;

    void check_mutable() const;
};

}  // namespace pseg
