#pragma once

// Information extractor: a classifier from token embeddings to concept
// probabilities, with its training loop, metrics and checkpoint format.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cortex/autodiff.hpp"
#include "cortex/dataset.hpp"

namespace cortex::iem {

enum class Architecture {
    pool_mlp,    // per-position dense encoder (squared relu), spatial mean, two-layer head
    small_conv,  // two conv3x3+relu+maxpool blocks, spatial mean, dense head
};

std::string_view architecture_tag(Architecture arch) noexcept;
/// Accepts "pool-mlp" and "small-conv"; anything else is a DomainError.
Architecture parse_architecture(std::string_view tag);

struct ArchSpec {
    Architecture arch = Architecture::pool_mlp;
    std::uint32_t dim = 64;
    std::uint32_t concepts = 10;
    /// pool-mlp: encoder width. small-conv: first conv channels.
    std::uint32_t width = 64;
    /// pool-mlp: hidden head width. small-conv: second conv channels.
    std::uint32_t head_width = 32;

    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct NamedTensor {
    std::string name;
    ad::Tensor value;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

class IemModel {
  public:
    IemModel() = default;
    IemModel(ArchSpec spec, std::vector<NamedTensor> parameters);

    /// He-uniform weights, rounded to 32-bit floats. First-layer biases start at
    /// `encoder_bias` (negative = sparse encoder: few tokens activate each unit);
    /// all other biases start at zero.
    static IemModel initialize(const ArchSpec& spec, std::uint64_t seed, double encoder_bias = -1.0);

    [[nodiscard]] const ArchSpec& spec() const noexcept { return spec_; }
    [[nodiscard]] std::uint32_t concepts() const noexcept { return spec_.concepts; }
    [[nodiscard]] const std::vector<NamedTensor>& parameters() const noexcept { return params_; }
    [[nodiscard]] std::vector<NamedTensor>& parameters() noexcept { return params_; }
    [[nodiscard]] const ad::Tensor& parameter(std::string_view name) const;
    [[nodiscard]] ad::Tensor& parameter(std::string_view name);

    /// Throws ShapeError unless `shape` is [B, d, m, m] with m acceptable for the architecture.
    void check_input(const ad::Shape& shape) const;

    /// Records the forward pass: input [B,d,m,m] -> logits [B,n]. `params` align with parameters().
    ad::Var logits(ad::Tape& tape, ad::Var input, std::span<const ad::Var> params) const;
    /// Same, with the parameters entered as constants.
    ad::Var logits(ad::Tape& tape, ad::Var input) const;

    /// Rounds every parameter to the nearest 32-bit float.
    void round_to_storage();

    friend bool operator==(const IemModel&, const IemModel&) = default;

  private:
    ArchSpec spec_;
    std::vector<NamedTensor> params_;
};

/// Shape [1, d, m, m].
ad::Tensor to_tensor(const Embedding& e);
/// Embeds each grid of `indices` into one [B, d, m, m] tensor.
ad::Tensor embed_batch(const Codebook& codebook, std::span<const TokenGrid> grids,
                       std::span<const std::size_t> indices);
Embedding from_tensor(const ad::Tensor& t, std::size_t sample = 0);

/// Concept probabilities for one embedding.
std::vector<double> forward(const IemModel& model, const Embedding& e);
/// Row-wise probabilities [B, n] for a batch [B, d, m, m].
ad::Tensor forward_batch(const IemModel& model, const ad::Tensor& batch);
/// Probabilities for every grid of a dataset-like list, in order.
std::vector<std::vector<double>> predict(const IemModel& model, const Codebook& codebook,
                                         std::span<const TokenGrid> grids, unsigned threads = 1);

struct Metrics {
    double top1 = 0.0;
    double top3 = 0.0;
    double top5 = 0.0;
    double loss = 0.0;

    friend bool operator==(const Metrics&, const Metrics&) = default;
};

/// Rank of `label` among probs: classes with higher probability, or equal
/// probability and smaller index, come first.
std::size_t label_rank(std::span<const double> probs, std::uint32_t label);

/// Top-k hit rates and mean NLL. Throws UsageError on empty input.
Metrics metrics_from_probabilities(const std::vector<std::vector<double>>& probs,
                                   std::span<const std::uint32_t> labels);

Metrics evaluate(const IemModel& model, const Dataset& data, const Codebook& codebook, unsigned threads = 1);

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
    double learning_rate = 1e-2;
    double weight_decay = 1e-4;
    std::uint32_t epochs = 20;
    std::uint32_t batch_size = 32;
    OptimizerKind optimizer = OptimizerKind::adam;
    double decay_factor = 0.1;
    std::uint32_t decay_period = 20;
    std::uint64_t seed = 0;

    void validate(std::size_t dataset_size) const;
};

struct EpochRecord {
    std::uint32_t epoch = 0;
    double train_loss = 0.0;  // mean over the epoch's mini-batches, weighted by batch size
    Metrics val;
};

struct TrainResult {
    IemModel model;  // parameters from the best validation epoch
    std::vector<EpochRecord> history;
    std::uint32_t best_epoch = 0;
};

/**
 * Mini-batch cross-entropy training. Batch order is a seeded shuffle per
 * epoch; the checkpoint with the best validation top-1 (lower loss breaks
 * ties) is returned. A non-finite loss raises TrainingError with epoch and step.
 */
TrainResult train(IemModel model, const Dataset& train_set, const Dataset& val_set, const Codebook& codebook,
                  const TrainConfig& config, unsigned threads = 1);

// Checkpoint: "CTXM", u32 version, architecture tag, u32 n, named tensor table.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::vector<std::uint8_t> encode_checkpoint(const IemModel& model);
IemModel decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const IemModel& model, const std::filesystem::path& path);
IemModel load_checkpoint(const std::filesystem::path& path);

}  // namespace cortex::iem
