#include "cortex/iem.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "cortex/binio.hpp"
#include "cortex/error.hpp"
#include "cortex/parallel.hpp"

namespace cortex::iem {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

std::string_view architecture_tag(Architecture arch) noexcept {
    return arch == Architecture::pool_mlp ? "pool-mlp" : "small-conv";
}

Architecture parse_architecture(std::string_view tag) {
    if (tag == "pool-mlp") return Architecture::pool_mlp;
    if (tag == "small-conv") return Architecture::small_conv;
    throw DomainError("unknown architecture '" + std::string(tag) + "' (expected pool-mlp or small-conv)");
}

namespace {

std::vector<std::pair<std::string, Shape>> expected_layout(const ArchSpec& s) {
    if (s.arch == Architecture::pool_mlp) {
        return {{"enc.w", {s.dim, s.width}},         {"enc.b", {s.width}},
                {"head1.w", {s.width, s.head_width}}, {"head1.b", {s.head_width}},
                {"head2.w", {s.head_width, s.concepts}}, {"head2.b", {s.concepts}}};
    }
    return {{"conv1.w", {s.width, s.dim, 3, 3}},       {"conv1.b", {s.width}},
            {"conv2.w", {s.head_width, s.width, 3, 3}}, {"conv2.b", {s.head_width}},
            {"head.w", {s.head_width, s.concepts}},     {"head.b", {s.concepts}}};
}

std::size_t fan_in(const Shape& shape) {
    // Dense weights are [in, out]; conv weights are [out, in, 3, 3].
    return shape.size() == 2 ? shape[0] : shape[1] * shape[2] * shape[3];
}

}  // namespace

IemModel::IemModel(ArchSpec spec, std::vector<NamedTensor> parameters)
    : spec_(spec), params_(std::move(parameters)) {
    if (spec_.dim == 0 || spec_.concepts == 0 || spec_.width == 0 || spec_.head_width == 0) {
        throw ConfigError("iem: architecture dimensions must be positive");
    }
    auto layout = expected_layout(spec_);
    if (layout.size() != params_.size()) throw ShapeError("iem: wrong number of parameter tensors");
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (params_[i].name != layout[i].first || params_[i].value.shape() != layout[i].second) {
            throw ShapeError("iem: parameter " + std::to_string(i) + " expected " + layout[i].first + " " +
                             ad::shape_string(layout[i].second) + ", got " + params_[i].name + " " +
                             ad::shape_string(params_[i].value.shape()));
        }
    }
}

IemModel IemModel::initialize(const ArchSpec& spec, std::uint64_t seed, double encoder_bias) {
    std::vector<NamedTensor> params;
    Stream rng(seed, "iem/init");
    for (auto& [name, shape] : expected_layout(spec)) {
        Tensor t(shape);
        if (shape.size() > 1) {
            double bound = std::sqrt(6.0 / static_cast<double>(fan_in(shape)));
            for (double& v : t.data()) v = bound * (2.0 * rng.uniform() - 1.0);
        }
        if (name == "enc.b" || name == "conv1.b") std::fill(t.data().begin(), t.data().end(), encoder_bias);
        params.push_back({name, std::move(t)});
    }
    IemModel model(spec, std::move(params));
    model.round_to_storage();
    return model;
}

const Tensor& IemModel::parameter(std::string_view name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p.value;
    }
    throw UsageError("iem: no parameter named " + std::string(name));
}

Tensor& IemModel::parameter(std::string_view name) {
    return const_cast<Tensor&>(std::as_const(*this).parameter(name));
}

void IemModel::round_to_storage() {
    for (auto& p : params_) {
        for (double& v : p.value.data()) v = static_cast<double>(static_cast<float>(v));
    }
}

void IemModel::check_input(const Shape& shape) const {
    if (shape.size() != 4 || shape[1] != spec_.dim || shape[2] != shape[3] || shape[0] == 0 || shape[2] == 0) {
        throw ShapeError("iem: expected input [B, " + std::to_string(spec_.dim) + ", m, m], got " +
                         ad::shape_string(shape));
    }
    if (spec_.arch == Architecture::small_conv && shape[2] % 4 != 0) {
        throw ShapeError("iem: small-conv needs m divisible by 4, got " + ad::shape_string(shape));
    }
}

Var IemModel::logits(Tape& tape, Var input, std::span<const Var> params) const {
    check_input(input.shape());
    if (params.size() != params_.size()) throw UsageError("iem: parameter count mismatch");
    if (spec_.arch == Architecture::pool_mlp) {
        // squared relu: a weakly matched token passes a proportionally weak gradient
        Var a = ad::relu(ad::pointwise(input, params[0], params[1]));
        Var h = ad::mul(a, a);
        Var pooled = ad::spatial_mean(h);
        Var z = ad::relu(ad::add_bias(ad::matmul(pooled, params[2]), params[3]));
        return ad::add_bias(ad::matmul(z, params[4]), params[5]);
    }
    Var h1 = ad::maxpool2(ad::relu(ad::conv2d(input, params[0], params[1])));
    Var h2 = ad::maxpool2(ad::relu(ad::conv2d(h1, params[2], params[3])));
    Var pooled = ad::spatial_mean(h2);
    (void)tape;
    return ad::add_bias(ad::matmul(pooled, params[4]), params[5]);
}

Var IemModel::logits(Tape& tape, Var input) const {
    std::vector<Var> params;
    params.reserve(params_.size());
    for (const auto& p : params_) params.push_back(tape.constant(p.value));
    return logits(tape, input, params);
}

Tensor to_tensor(const Embedding& e) {
    return Tensor({1, e.dim, e.side, e.side}, e.data);
}

Embedding from_tensor(const Tensor& t, std::size_t sample) {
    if (t.rank() != 4 || t.extent(2) != t.extent(3) || sample >= t.extent(0)) {
        throw ShapeError("from_tensor: expected [B, d, m, m], got " + ad::shape_string(t.shape()));
    }
    const std::size_t stride = t.extent(1) * t.extent(2) * t.extent(3);
    auto begin = t.data().begin() + static_cast<std::ptrdiff_t>(sample * stride);
    return {static_cast<std::uint32_t>(t.extent(1)), static_cast<std::uint32_t>(t.extent(2)),
            std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(stride))};
}

Tensor embed_batch(const Codebook& codebook, std::span<const TokenGrid> grids, std::span<const std::size_t> indices) {
    if (indices.empty()) throw UsageError("embed_batch: empty batch");
    const std::uint32_t m = grids[indices[0]].side;
    const std::size_t d = codebook.dim(), P = std::size_t{m} * m;
    Tensor out({indices.size(), d, m, m});
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const TokenGrid& g = grids[indices[b]];
        if (g.side != m || g.tokens.size() != P) throw ShapeError("embed_batch: mixed grid sizes");
        double* dst = out.data().data() + b * d * P;
        for (std::size_t p = 0; p < P; ++p) {
            auto row = codebook.row(g.tokens[p]);
            for (std::size_t k = 0; k < d; ++k) dst[k * P + p] = row[k];
        }
    }
    return out;
}

Tensor forward_batch(const IemModel& model, const Tensor& batch) {
    Tape tape;
    Var probs = ad::softmax(model.logits(tape, tape.constant(batch)));
    return probs.value();
}

std::vector<double> forward(const IemModel& model, const Embedding& e) {
    Tensor p = forward_batch(model, to_tensor(e));
    return {p.data().begin(), p.data().end()};
}

std::vector<std::vector<double>> predict(const IemModel& model, const Codebook& codebook,
                                         std::span<const TokenGrid> grids, unsigned threads) {
    constexpr std::size_t kChunk = 64;
    const std::size_t n = model.concepts();
    std::vector<std::vector<double>> out(grids.size());
    const std::size_t chunks = (grids.size() + kChunk - 1) / kChunk;
    parallel_for(chunks, threads, [&](std::size_t c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = c * kChunk; i < std::min(grids.size(), (c + 1) * kChunk); ++i) idx.push_back(i);
        Tensor p = forward_batch(model, embed_batch(codebook, grids, idx));
        for (std::size_t b = 0; b < idx.size(); ++b) {
            out[idx[b]].assign(p.data().begin() + static_cast<std::ptrdiff_t>(b * n),
                               p.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * n));
        }
    });
    return out;
}

std::size_t label_rank(std::span<const double> probs, std::uint32_t label) {
    if (label >= probs.size()) throw DomainError("label " + std::to_string(label) + " out of range");
    const double target = probs[label];
    std::size_t rank = 0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
        if (probs[j] > target || (probs[j] == target && j < label)) ++rank;
    }
    return rank;
}

Metrics metrics_from_probabilities(const std::vector<std::vector<double>>& probs,
                                   std::span<const std::uint32_t> labels) {
    if (probs.empty()) throw UsageError("evaluate: empty dataset");
    if (probs.size() != labels.size()) throw ShapeError("evaluate: prediction/label count mismatch");
    std::size_t hit1 = 0, hit3 = 0, hit5 = 0;
    double loss = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        std::size_t rank = label_rank(probs[i], labels[i]);
        hit1 += rank < 1;
        hit3 += rank < 3;
        hit5 += rank < 5;
        loss -= std::log(std::max(probs[i][labels[i]], 1e-300));
    }
    const double N = static_cast<double>(probs.size());
    return {static_cast<double>(hit1) / N, static_cast<double>(hit3) / N, static_cast<double>(hit5) / N, loss / N};
}

Metrics evaluate(const IemModel& model, const Dataset& data, const Codebook& codebook, unsigned threads) {
    if (data.empty()) throw UsageError("evaluate: empty dataset");
    return metrics_from_probabilities(predict(model, codebook, data.grids, threads), data.labels);
}

void TrainConfig::validate(std::size_t dataset_size) const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight decay must be nonnegative");
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
    if (batch_size == 0) throw ConfigError("train: batch size must be positive");
    if (batch_size > dataset_size) throw ConfigError("train: batch size exceeds dataset size");
    if (!(decay_factor > 0.0)) throw ConfigError("train: decay factor must be positive");
    if (decay_period == 0) throw ConfigError("train: decay period must be positive");
}

namespace {

bool better(const Metrics& a, const Metrics& b) {
    return a.top1 > b.top1 || (a.top1 == b.top1 && a.loss < b.loss);
}

}  // namespace

TrainResult train(IemModel model, const Dataset& train_set, const Dataset& val_set, const Codebook& codebook,
                  const TrainConfig& config, unsigned threads) {
    config.validate(train_set.size());
    if (val_set.empty()) throw UsageError("train: empty validation set");
    for (auto l : train_set.labels) {
        if (l >= model.concepts()) throw DomainError("train: label " + std::to_string(l) + " >= n");
    }

    auto& params = model.parameters();
    std::vector<Tensor> m1, m2;
    for (const auto& p : params) {
        m1.emplace_back(p.value.shape());
        m2.emplace_back(p.value.shape());
    }
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t step = 0;

    TrainResult result;
    Metrics best_metrics{-1.0, -1.0, -1.0, 0.0};
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = config.learning_rate *
                          std::pow(config.decay_factor, static_cast<double>(epoch / config.decay_period));
        Stream shuffle_rng(config.seed, "iem/shuffle", epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle_rng.shuffle(std::span<std::size_t>(order));

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            std::span<const std::size_t> idx(order.data() + start,
                                             std::min<std::size_t>(config.batch_size, order.size() - start));
            std::vector<std::uint32_t> labels;
            for (std::size_t i : idx) labels.push_back(train_set.labels[i]);

            Tape tape;
            Var input = tape.constant(embed_batch(codebook, train_set.grids, idx));
            std::vector<Var> vars;
            for (const auto& p : params) vars.push_back(tape.leaf(p.value));
            Var loss;
            try {
                loss = ad::softmax_cross_entropy(model.logits(tape, input, vars), labels);
            } catch (const NumericError& e) {
                throw TrainingError("train: non-finite value at epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(step) + ": " + e.what());
            }
            double value = loss.value().item();
            if (!std::isfinite(value)) {
                throw TrainingError("train: loss diverged at epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(step));
            }
            loss_sum += value * static_cast<double>(idx.size());
            tape.backward(loss);
            ++step;

            for (std::size_t k = 0; k < params.size(); ++k) {
                auto w = params[k].value.data();
                const auto g = vars[k].grad().data();
                if (config.optimizer == OptimizerKind::sgd) {
                    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + config.weight_decay * w[i]);
                    continue;
                }
                auto a = m1[k].data();
                auto b = m2[k].data();
                const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
                const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
                for (std::size_t i = 0; i < w.size(); ++i) {
                    double gi = g[i] + config.weight_decay * w[i];
                    a[i] = beta1 * a[i] + (1.0 - beta1) * gi;
                    b[i] = beta2 * b[i] + (1.0 - beta2) * gi * gi;
                    w[i] -= lr * (a[i] / c1) / (std::sqrt(b[i] / c2) + eps);
                }
            }
            model.round_to_storage();
            for (const auto& p : params) {
                if (!p.value.all_finite()) {
                    throw TrainingError("train: parameter " + p.name + " diverged at epoch " + std::to_string(epoch) +
                                        ", step " + std::to_string(step));
                }
            }
        }

        EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(order.size()),
                        evaluate(model, val_set, codebook, threads)};
        result.history.push_back(rec);
        if (better(rec.val, best_metrics)) {
            best_metrics = rec.val;
            result.model = model;
            result.best_epoch = rec.epoch;
        }
    }
    return result;
}

std::vector<std::uint8_t> encode_checkpoint(const IemModel& model) {
    binio::Writer w;
    w.magic("CTXM");
    w.u32(kCheckpointVersion);
    w.str(architecture_tag(model.spec().arch));
    w.u32(model.concepts());
    w.u32(static_cast<std::uint32_t>(model.parameters().size()));
    for (const auto& p : model.parameters()) {
        w.str(p.name);
        w.u32(static_cast<std::uint32_t>(p.value.rank()));
        for (std::size_t e : p.value.shape()) w.u32(static_cast<std::uint32_t>(e));
        for (double v : p.value.data()) w.f32(static_cast<float>(v));
    }
    return w.buffer();
}

IemModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
    binio::Reader r(bytes, "checkpoint");
    r.expect_magic("CTXM");
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw VersionError("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    }
    ArchSpec spec;
    try {
        spec.arch = parse_architecture(r.str(64));
    } catch (const DomainError& e) {
        r.fail(e.what());
    }
    spec.concepts = r.u32();
    std::uint32_t count = r.u32();
    if (count > 64) r.fail("implausible tensor count");
    std::vector<NamedTensor> params;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.str(256);
        std::uint32_t rank = r.u32();
        if (rank > 8) r.fail("implausible tensor rank");
        Shape shape(rank);
        std::size_t total = 1;
        for (auto& e : shape) {
            e = r.u32();
            total *= e;
            if (total > (std::size_t{1} << 28)) r.fail("implausible tensor size");
        }
        if (total * 4 > r.remaining()) r.fail("truncated tensor " + t.name);
        std::vector<double> data(total);
        for (double& v : data) {
            v = r.f32();
            if (!std::isfinite(v)) r.fail("non-finite value in " + t.name);
        }
        t.value = Tensor(std::move(shape), std::move(data));
        params.push_back(std::move(t));
    }
    if (!r.at_end()) r.fail("trailing bytes");
    if (params.size() != 6) r.fail("expected 6 tensors");
    const Shape& first = params[0].value.shape();
    const Shape& third = params[2].value.shape();
    if (spec.arch == Architecture::pool_mlp) {
        if (first.size() != 2 || third.size() != 2) r.fail("malformed pool-mlp tensors");
        spec.dim = static_cast<std::uint32_t>(first[0]);
        spec.width = static_cast<std::uint32_t>(first[1]);
        spec.head_width = static_cast<std::uint32_t>(third[1]);
    } else {
        if (first.size() != 4 || third.size() != 4) r.fail("malformed small-conv tensors");
        spec.dim = static_cast<std::uint32_t>(first[1]);
        spec.width = static_cast<std::uint32_t>(first[0]);
        spec.head_width = static_cast<std::uint32_t>(third[0]);
    }
    try {
        return IemModel(spec, std::move(params));
    } catch (const Error& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
}

void save_checkpoint(const IemModel& model, const std::filesystem::path& path) {
    binio::write_file_atomic(path, encode_checkpoint(model));
}

IemModel load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(binio::read_file(path));
}

}  // namespace cortex::iem
