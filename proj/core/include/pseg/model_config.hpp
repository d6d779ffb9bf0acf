#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace pseg {

// The seven selectable wirings. MedUniSeg injects the modal prior at encoder
// entry and the task prior at the bottleneck; the others move, share, fix or
// drop those priors.
enum class Variant {
    MedUniSeg,
    UniSeg,
    MultiplePrompts,
    UniversalPrompts,
    FixedPrompts,
    BottleneckPrompts,
    MedUniSegT,
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct PromptConfig {
    int64_t modal_prompt_length = 512;  // l
    int64_t task_prompt_channels = 100;  // K
    int fuse_blocks = 3;
    int fuse_reduction = 4;  // m: first FUSE block reduces channels to (K+C1)/m
};

struct ModelConfig {
    std::array<int64_t, 6> stage_widths{32, 64, 128, 256, 320, 320};
    // First conv of each stage; stage 1 keeps resolution, the trailing
    // (1,2,2) reproduces the /16 depth and /32 plane bottleneck factors.
    std::array<std::array<int, 3>, 6> stage_strides{
        {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {1, 2, 2}}};
    int kernel = 3;  // odd; depth collapses to 1 whenever the feature depth is 1
    std::array<int64_t, 3> patch3d{64, 192, 192};  // D,H,W
    std::array<int64_t, 2> patch2d{512, 512};      // H,W
    PromptConfig prompt;
    Variant variant = Variant::MedUniSeg;

    void validate() const;  // throws ConfigError with the failing rule

    // Elementwise product of strides of stages 1..upto (1-based, inclusive).
    std::array<int64_t, 3> cumulative_stride(int upto_stage) const;
    std::array<int64_t, 3> bottleneck3d() const;  // patch3d / cumulative strides
    std::array<int64_t, 2> bottleneck2d() const;
};

}  // namespace pseg
