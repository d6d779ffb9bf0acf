#include "pseg/model_config.hpp"

#include <sstream>

#include "pseg/error.hpp"

namespace pseg {

std::string to_string(Variant v) {
    switch (v) {
        case Variant::MedUniSeg: return "MedUniSeg";
        case Variant::UniSeg: return "UniSeg";
        case Variant::MultiplePrompts: return "MultiplePrompts";
        case Variant::UniversalPrompts: return "UniversalPrompts";
        case Variant::FixedPrompts: return "FixedPrompts";
        case Variant::BottleneckPrompts: return "BottleneckPrompts";
        case Variant::MedUniSegT: return "MedUniSeg-T";
    }
    throw ArgumentError("bad variant");
}

Variant variant_from_string(const std::string& s) {
    if (s == "MedUniSeg") return Variant::MedUniSeg;
    if (s == "UniSeg") return Variant::UniSeg;
    if (s == "MultiplePrompts") return Variant::MultiplePrompts;
    if (s == "UniversalPrompts") return Variant::UniversalPrompts;
    if (s == "FixedPrompts") return Variant::FixedPrompts;
    if (s == "BottleneckPrompts") return Variant::BottleneckPrompts;
    if (s == "MedUniSeg-T") return Variant::MedUniSegT;
    throw ConfigError("unknown variant '" + s +
                      "' (expected MedUniSeg, UniSeg, MultiplePrompts, UniversalPrompts, "
                      "FixedPrompts, BottleneckPrompts or MedUniSeg-T)");
}

std::array<int64_t, 3> ModelConfig::cumulative_stride(int upto_stage) const {
    std::array<int64_t, 3> p{1, 1, 1};
    for (int s = 0; s < upto_stage; ++s)
        for (int a = 0; a < 3; ++a) p[static_cast<size_t>(a)] *= stage_strides[static_cast<size_t>(s)][static_cast<size_t>(a)];
    return p;
}

std::array<int64_t, 3> ModelConfig::bottleneck3d() const {
    const auto p = cumulative_stride(6);
    return {patch3d[0] / p[0], patch3d[1] / p[1], patch3d[2] / p[2]};
}

std::array<int64_t, 2> ModelConfig::bottleneck2d() const {
    const auto p = cumulative_stride(6);
    return {patch2d[0] / p[1], patch2d[1] / p[2]};
}

void ModelConfig::validate() const {
    for (int64_t w : stage_widths)
        if (w < 1) throw ConfigError("stage widths must be positive");
    for (const auto& s : stage_strides)
        for (int a : s)
            if (a != 1 && a != 2) throw ConfigError("stage strides must be 1 or 2");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel must be odd and positive");
    if (prompt.modal_prompt_length < 1 || prompt.task_prompt_channels < 1 ||
        prompt.fuse_blocks < 1 || prompt.fuse_reduction < 1)
        throw ConfigError("prompt config values must be positive");

    const auto p = cumulative_stride(6);
    auto describe = [](std::array<int64_t, 3> d) {
        std::ostringstream os;
        os << d[0] << "x" << d[1] << "x" << d[2];
        return os.str();
    };
    // Floor-divided dims make the failure message concrete even when the
    // patch is not divisible at all.
    const std::array<int64_t, 3> floor3{patch3d[0] / p[0], patch3d[1] / p[1], patch3d[2] / p[2]};
    if (patch3d[0] % p[0] != 0 || patch3d[1] % p[1] != 0 || patch3d[2] % p[2] != 0)
        throw ConfigError("3d patch " + describe(patch3d) + " is not divisible by cumulative strides " +
                          describe(p) + "; bottleneck would degenerate to " + describe(floor3));
    if (floor3[1] < 2 || floor3[2] < 2)
        throw ConfigError("3d patch " + describe(patch3d) + " yields degenerate bottleneck " +
                          describe(floor3) + " (plane dims must be >= 2)");
    if (floor3[0] < 1) throw ConfigError("3d patch depth too small for stride schedule");

    if (patch2d[0] % p[1] != 0 || patch2d[1] % p[2] != 0)
        throw ConfigError("2d patch " + std::to_string(patch2d[0]) + "x" + std::to_string(patch2d[1]) +
                          " is not divisible by cumulative plane strides " + describe(p));
    if (patch2d[0] / p[1] < 2 || patch2d[1] / p[2] < 2)
        throw ConfigError("2d patch yields degenerate bottleneck");
}

}  // namespace pseg
