#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pseg/registry.hpp"
#include "pseg/rng.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

enum class ShapeFamily { sphere, cuboid, disk, annulus };

std::string to_string(ShapeFamily f);
ShapeFamily shape_family_from_string(const std::string& s);

// Deterministic synthetic phantom generator. Labels come from noiseless
// geometry; Gaussian noise is added to the rendered intensities afterwards.
struct PhantomSpec {
    ShapeFamily family = ShapeFamily::sphere;
    std::array<int64_t, 3> dims{8, 64, 64};  // D,H,W; D==1 iff the modality is 2d
    int class_count = 2;                     // including background
    std::vector<double> channel_means;       // per channel base intensity
    std::vector<double> channel_stds;        // per channel per-sample base jitter
    std::vector<double> class_offsets;       // per foreground class intensity offset
    double noise_std = 0.05;
    // Fraction of samples rendered without the last foreground class; those
    // samples are tagged "normal" for weighted-Dice evaluation.
    double lesion_absent_fraction = 0.0;
    uint64_t seed = 0;
};

struct PhantomSample {
    Tensor<float> image;   // [C,D,H,W]
    Tensor<uint8_t> label;  // [D,H,W]
    bool lesion = true;
};

struct Dataset {
    std::string name;
    int task_id = -1;
    int modal_id = -1;
    int channels = 1;
    int class_count = 2;
    Dimensionality dim = Dimensionality::k3d;
    std::array<int64_t, 3> dims{1, 1, 1};
    PhantomSpec spec;
    std::vector<PhantomSample> train;
    std::vector<PhantomSample> test;
};

struct SampleBatch {
    Tensor<float> images;   // [B,C,D,H,W]
    Tensor<uint8_t> labels;  // [B,D,H,W]
    int task_id = -1;
    int modal_id = -1;
};

struct AugmentConfig {
    bool flips = false;
    double intensity_jitter = 0.0;
};

// Rasterization primitives: a voxel belongs to the solid iff its integer
// coordinate satisfies the normalized inequality. Exposed so tests can pit
// the generator against brute-force oracles.
void rasterize_ellipsoid(Tensor<uint8_t>& label, std::array<double, 3> center,
                         std::array<double, 3> radii, uint8_t value);
void rasterize_box(Tensor<uint8_t>& label, std::array<double, 3> lo, std::array<double, 3> hi,
                   uint8_t value);
void rasterize_shell(Tensor<uint8_t>& label, std::array<double, 3> center,
                     std::array<double, 3> outer, std::array<double, 3> inner, uint8_t value);

PhantomSample generate_sample(const PhantomSpec& spec, Rng rng, bool lesion_present);

Dataset generate_dataset(const PhantomSpec& spec, const TaskDescriptor& task,
                         const ModalityDescriptor& modality, int n_train, int n_test,
                         const std::string& name);

// Draws batch_size samples from the train split with replacement, optionally
// random-cropping to patch dims and applying augmentation. Advances rng.
SampleBatch sample_batch(const Dataset& ds, int batch_size, Rng& rng,
                         std::optional<std::array<int64_t, 3>> patch = std::nullopt,
                         const AugmentConfig* aug = nullptr);

// Per-class voxel fraction over the train split.
std::vector<double> class_fractions(const Dataset& ds);

void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace pseg
