#pragma once

#include <filesystem>
#include <string>

#include "cortex/dataset.hpp"
#include "cortex/iem.hpp"

namespace testing {

// Small world that keeps unit tests fast.
inline cortex::WorldConfig tiny_world(std::uint64_t seed = 3) {
    cortex::WorldConfig c;
    c.codebook_size = 64;
    c.dim = 6;
    c.side = 8;
    c.concepts = 3;
    c.signature_size = 4;
    c.context_pool = 4;
    c.context_size = 3;
    c.signature_plants = 4;
    c.context_plants = 5;
    c.background_range = 40;
    c.seed = seed;
    return c;
}

inline cortex::iem::ArchSpec tiny_arch(cortex::iem::Architecture arch = cortex::iem::Architecture::pool_mlp) {
    cortex::iem::ArchSpec s;
    s.arch = arch;
    s.dim = 6;
    s.concepts = 3;
    s.width = 8;
    s.head_width = 5;
    return s;
}

// Small world with enough signal per position for a few epochs of training.
inline cortex::WorldConfig learnable_world(std::uint64_t seed = 11) {
    auto c = tiny_world(seed);
    c.dim = 16;
    c.signature_plants = 6;
    return c;
}

inline cortex::iem::ArchSpec learnable_arch() {
    auto s = tiny_arch();
    s.dim = 16;
    s.width = 16;
    s.head_width = 8;
    return s;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("cortex_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing
