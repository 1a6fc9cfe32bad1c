#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cortex/synthworld.hpp"

namespace cortex {

/// One split: grids with labels and per-position ground truth, index-aligned.
struct Dataset {
    std::uint32_t side = 0;
    std::vector<TokenGrid> grids;
    std::vector<std::uint32_t> labels;
    std::vector<GroundTruth> truth;

    [[nodiscard]] std::size_t size() const noexcept { return grids.size(); }
    [[nodiscard]] bool empty() const noexcept { return grids.empty(); }
    /// Record indices whose label is `concept_id`, ascending.
    [[nodiscard]] std::vector<std::size_t> indices_of(std::uint32_t concept_id) const;
    [[nodiscard]] Dataset subset(const std::vector<std::size_t>& indices) const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Records per concept in each split.
struct SplitCounts {
    std::uint32_t train = 300;
    std::uint32_t val = 50;
    std::uint32_t test = 50;
};

struct DatasetBundle {
    World world;
    SplitCounts per_concept;
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Record r of a split has label r mod n and is drawn from stream ("grid/<split>", r).
Dataset generate_split(const World& world, const std::string& split, std::uint32_t per_concept,
                       unsigned threads = 1);

DatasetBundle gen_dataset(const World& world, SplitCounts per_concept, unsigned threads = 1);

/// Writes manifest.json, codebook.bin and {train,val,test}_{grids,labels,truth}.bin into `dir`.
void write_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle);

/// Reads and validates a dataset directory; the world is rebuilt from the manifest
/// config and checked against the stored codebook.
DatasetBundle read_dataset(const std::filesystem::path& dir);

// Per-split binary payloads (no headers; record count implied by length).
std::vector<std::uint8_t> encode_grids(const Dataset& data);
std::vector<std::uint8_t> encode_labels(const Dataset& data);
std::vector<std::uint8_t> encode_truth(const Dataset& data);

}  // namespace cortex
