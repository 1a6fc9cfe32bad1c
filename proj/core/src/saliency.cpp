#include "cortex/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cortex/binio.hpp"
#include "cortex/error.hpp"
#include "cortex/parallel.hpp"

namespace cortex::saliency {

using ad::Tape;
using ad::Tensor;
using ad::Var;

void SaliencySpec::validate() const {
    if (samples == 0) throw ConfigError("saliency: sample count must be at least 1");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("saliency: noise scale must be a finite value >= 0");
}

namespace {

void check_embedding(const iem::IemModel& model, const Embedding& e) {
    if (e.data.size() != static_cast<std::size_t>(e.dim) * e.positions())
        throw ShapeError("saliency: embedding data does not match its shape");
    model.check_input({1, e.dim, e.side, e.side});
}

// Sum over the batch of p_concept; gradient w.r.t. the [B,d,m,m] input.
Tensor probability_gradient(const iem::IemModel& model, Tensor batch, std::uint32_t concept_id) {
    if (concept_id >= model.concepts())
        throw DomainError("saliency: concept " + std::to_string(concept_id) + " out of range");
    Tape tape;
    Var x = tape.leaf(std::move(batch));
    Var probs = ad::softmax(model.logits(tape, x));
    std::vector<std::uint32_t> idx(x.shape()[0], concept_id);
    tape.backward(ad::sum(ad::pick(probs, idx)));
    return x.grad();
}

Embedding with_values(const Embedding& like, std::vector<double> values) {
    Embedding out{like.dim, like.side, std::move(values)};
    return out;
}

}  // namespace

Embedding plain_gradient(const iem::IemModel& model, const Embedding& e, std::uint32_t concept_id) {
    check_embedding(model, e);
    Tensor g = probability_gradient(model, iem::to_tensor(e), concept_id);
    return with_values(e, std::move(g.storage()));
}

SaliencyMap smoothgrad(const iem::IemModel& model, const Embedding& e, std::uint32_t concept_id,
                       const SaliencySpec& spec, Stream& rng) {
    spec.validate();
    check_embedding(model, e);
    const auto [lo, hi] = std::minmax_element(e.data.begin(), e.data.end());
    const double sigma = spec.noise * (*hi - *lo);
    if (sigma == 0.0) return {concept_id, plain_gradient(model, e, concept_id)};

    const std::size_t n = e.data.size();
    const std::size_t N = spec.samples;
    Tensor batch({N, e.dim, e.side, e.side});
    for (std::size_t l = 0; l < N; ++l) {
        for (std::size_t i = 0; i < n; ++i) batch[l * n + i] = e.data[i] + sigma * rng.normal();
    }
    Tensor g = probability_gradient(model, std::move(batch), concept_id);
    std::vector<double> mean(n, 0.0);
    for (std::size_t l = 0; l < N; ++l) {
        for (std::size_t i = 0; i < n; ++i) mean[i] += g[l * n + i];
    }
    for (double& v : mean) v /= static_cast<double>(N);
    return {concept_id, with_values(e, std::move(mean))};
}

TISGrid tis(const SaliencyMap& map) {
    const Embedding& s = map.values;
    const std::size_t P = s.positions();
    TISGrid out{s.side, std::vector<double>(P, 0.0)};
    for (std::size_t k = 0; k < s.dim; ++k) {
        for (std::size_t p = 0; p < P; ++p) out.scores[p] = std::max(out.scores[p], std::abs(s.at(k, p)));
    }
    return out;
}

std::vector<std::uint32_t> rank_positions(const TISGrid& scores) {
    std::vector<std::uint32_t> order(scores.scores.size());
    std::iota(order.begin(), order.end(), 0U);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return scores.scores[a] > scores.scores[b]; });
    return order;
}

std::vector<ImageToken> top_image_tokens(const TokenGrid& grid, const TISGrid& scores, std::size_t n) {
    if (grid.tokens.size() != scores.scores.size()) throw ShapeError("top_image_tokens: grid and TIS sizes differ");
    auto order = rank_positions(scores);
    order.resize(std::min(n, order.size()));
    std::vector<ImageToken> out;
    out.reserve(order.size());
    for (auto p : order) out.push_back({p, grid.tokens[p], scores.scores[p]});
    return out;
}

std::vector<ConceptToken> top_by_count(std::span<const std::uint32_t> counts, std::size_t k) {
    std::vector<ConceptToken> all;
    for (std::size_t t = 0; t < counts.size(); ++t) {
        if (counts[t] > 0) all.push_back({static_cast<TokenId>(t), counts[t]});
    }
    // ids are already ascending, so a stable sort on count keeps the id tie-break
    std::stable_sort(all.begin(), all.end(),
                     [](const ConceptToken& a, const ConceptToken& b) { return a.frequency > b.frequency; });
    if (all.size() > k) all.resize(k);
    return all;
}

std::vector<ConceptToken> aggregate_concept(std::span<const std::vector<ImageToken>> image_sets, std::size_t k,
                                            std::size_t codebook_size, bool per_image) {
    std::vector<std::uint32_t> counts(codebook_size, 0);
    std::vector<std::uint8_t> seen(codebook_size, 0);
    for (const auto& set : image_sets) {
        if (per_image) std::fill(seen.begin(), seen.end(), 0);
        for (const auto& t : set) {
            if (t.token >= codebook_size) throw DomainError("aggregate_concept: token id out of range");
            if (per_image) {
                if (seen[t.token]) continue;
                seen[t.token] = 1;
            }
            ++counts[t.token];
        }
    }
    return top_by_count(counts, k);
}

std::vector<ConceptToken> frequency_baseline(const Dataset& data, std::uint32_t concept_id, std::size_t k,
                                             std::size_t codebook_size) {
    auto records = data.indices_of(concept_id);
    if (records.empty()) throw DomainError("frequency_baseline: concept " + std::to_string(concept_id) + " not in dataset");
    std::vector<std::uint32_t> counts(codebook_size, 0);
    for (auto r : records) {
        for (auto t : data.grids[r].tokens) {
            if (t >= codebook_size) throw DomainError("frequency_baseline: token id out of range");
            ++counts[t];
        }
    }
    return top_by_count(counts, k);
}

std::vector<TokenId> token_ids(std::span<const ConceptToken> tokens) {
    std::vector<TokenId> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(t.token);
    return out;
}

double precision(std::span<const TokenId> tokens, std::span<const TokenId> reference) {
    if (tokens.empty()) return 0.0;
    std::size_t hits = 0;
    for (auto t : tokens) hits += std::find(reference.begin(), reference.end(), t) != reference.end();
    return static_cast<double>(hits) / static_cast<double>(tokens.size());
}

std::vector<TISGrid> tis_for_records(const iem::IemModel& model, const Codebook& codebook,
                                     std::span<const TokenGrid> grids, std::span<const std::size_t> records,
                                     std::uint32_t concept_id, const SaliencySpec& spec, std::uint64_t seed,
                                     unsigned threads) {
    spec.validate();
    std::vector<TISGrid> out(records.size());
    parallel_for(records.size(), threads, [&](std::size_t i) {
        const std::size_t r = records[i];
        if (r >= grids.size()) throw DomainError("saliency: record index out of range");
        Stream rng(seed, "smoothgrad", r);
        out[i] = tis(smoothgrad(model, embed(codebook, grids[r]), concept_id, spec, rng));
    });
    return out;
}

ExplanationSet explain_concept(const iem::IemModel& model, const Codebook& codebook, std::span<const TokenGrid> grids,
                               std::span<const std::size_t> records, std::uint32_t concept_id,
                               const SaliencySpec& spec, std::uint32_t top_n, std::uint32_t top_k,
                               std::uint64_t seed, unsigned threads, bool per_image) {
    if (top_n == 0) throw UsageError("explain: n must be at least 1");
    if (records.empty()) throw UsageError("explain: no images for concept " + std::to_string(concept_id));
    auto scores = tis_for_records(model, codebook, grids, records, concept_id, spec, seed, threads);
    ExplanationSet set{concept_id, spec, top_n, top_k, seed, {}, {}};
    std::vector<std::vector<ImageToken>> image_sets;
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto tokens = top_image_tokens(grids[records[i]], scores[i], top_n);
        image_sets.push_back(tokens);
        set.images.push_back({records[i], std::move(tokens)});
    }
    set.concept_tokens = aggregate_concept(image_sets, top_k, codebook.size(), per_image);
    return set;
}

std::string format_explanation(const ExplanationSet& set) {
    using nlohmann::ordered_json;
    ordered_json j;
    j["concept"] = set.concept_id;
    j["parameters"] = {{"samples", set.spec.samples}, {"noise", set.spec.noise}, {"n", set.top_n},
                       {"k", set.top_k}, {"seed", set.seed}};
    j["concept_tokens"] = ordered_json::array();
    for (const auto& t : set.concept_tokens) j["concept_tokens"].push_back({{"token", t.token}, {"frequency", t.frequency}});
    j["images"] = ordered_json::array();
    for (const auto& img : set.images) {
        ordered_json tokens = ordered_json::array();
        for (const auto& t : img.tokens) tokens.push_back({{"position", t.position}, {"token", t.token}, {"score", t.score}});
        j["images"].push_back({{"record", img.record}, {"tokens", std::move(tokens)}});
    }
    return j.dump(2) + "\n";
}

void write_explanation(const std::filesystem::path& path, const ExplanationSet& set) {
    binio::write_text_atomic(path, format_explanation(set));
}

std::string_view mask_mode_name(MaskMode mode) noexcept {
    switch (mode) {
        case MaskMode::zero: return "zero";
        case MaskMode::codebook_mean: return "mean";
        case MaskMode::mask_token: return "mask-token";
    }
    return "?";
}

MaskMode parse_mask_mode(std::string_view name) {
    if (name == "zero") return MaskMode::zero;
    if (name == "mean") return MaskMode::codebook_mean;
    if (name == "mask-token") return MaskMode::mask_token;
    throw DomainError("unknown mask policy '" + std::string(name) + "' (expected zero, mean or mask-token)");
}

std::vector<double> replacement_vector(const MaskPolicy& policy, const Codebook& codebook) {
    switch (policy.mode) {
        case MaskMode::zero: return std::vector<double>(codebook.dim(), 0.0);
        case MaskMode::codebook_mean: return codebook.mean_vector();
        case MaskMode::mask_token: {
            if (!policy.token) throw UsageError("mask policy 'mask-token' needs a reserved mask token");
            auto row = codebook.row(*policy.token);
            return {row.begin(), row.end()};
        }
    }
    throw DomainError("invalid mask policy");
}

Embedding mask_positions(const Embedding& e, std::span<const std::uint32_t> positions,
                         std::span<const double> replacement) {
    if (replacement.size() != e.dim) throw ShapeError("mask: replacement length differs from embedding dim");
    Embedding out = e;
    for (auto p : positions) {
        if (p >= e.positions()) throw DomainError("mask: position " + std::to_string(p) + " out of range");
        out.set_column(p, replacement);
    }
    return out;
}

Embedding mask_token_ids(const Embedding& e, const TokenGrid& grid, std::span<const TokenId> tokens,
                         std::span<const double> replacement, std::size_t* masked) {
    if (grid.tokens.size() != e.positions()) throw ShapeError("mask: grid and embedding sizes differ");
    std::vector<std::uint32_t> positions;
    for (std::uint32_t p = 0; p < grid.tokens.size(); ++p) {
        if (std::find(tokens.begin(), tokens.end(), grid.tokens[p]) != tokens.end()) positions.push_back(p);
    }
    if (masked) *masked = positions.size();
    return mask_positions(e, positions, replacement);
}

std::string_view selector_name(Selector s) noexcept { return s == Selector::tis ? "tis" : "random"; }

double MaskingCurve::mean(std::size_t i) const {
    const auto& d = deltas.at(i);
    if (d.empty()) return 0.0;
    return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
}

double MaskingCurve::stderr_of_mean(std::size_t i) const {
    const auto& d = deltas.at(i);
    if (d.size() < 2) return 0.0;
    const double m = mean(i);
    double ss = 0.0;
    for (double v : d) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(d.size() - 1) / static_cast<double>(d.size()));
}

MaskingCurve masking_curve(const MaskingInputs& in, Selector selector, std::span<const std::uint32_t> n_values,
                           const MaskPolicy& policy, const SaliencySpec& spec, std::uint64_t seed,
                           unsigned threads) {
    if (!in.evaluator || !in.codebook || (selector == Selector::tis && !in.explainer))
        throw UsageError("masking_curve: missing model or codebook");
    if (in.grids.size() != in.labels.size()) throw ShapeError("masking_curve: grids and labels differ in length");
    spec.validate();
    const Codebook& cb = *in.codebook;
    const auto replacement = replacement_vector(policy, cb);
    const std::size_t images = in.grids.size();
    const std::size_t steps = n_values.size();

    MaskingCurve curve{selector, {n_values.begin(), n_values.end()}, std::vector<std::vector<double>>(steps)};
    for (auto& d : curve.deltas) d.assign(images, 0.0);

    parallel_for(images, threads, [&](std::size_t j) {
        const TokenGrid& grid = in.grids[j];
        const std::uint32_t label = in.labels[j];
        const Embedding e = embed(cb, grid);
        std::vector<std::uint32_t> order;
        if (selector == Selector::tis) {
            Stream rng(seed, "smoothgrad", j);
            order = rank_positions(tis(smoothgrad(*in.explainer, e, label, spec, rng)));
        } else {
            Stream rng(seed, "mask/random", j);
            order.resize(grid.tokens.size());
            std::iota(order.begin(), order.end(), 0U);
            rng.shuffle(std::span<std::uint32_t>(order));
        }
        // original first, then one masked copy per n
        const std::size_t n = e.data.size();
        Tensor batch({steps + 1, e.dim, e.side, e.side});
        std::copy(e.data.begin(), e.data.end(), batch.data().begin());
        for (std::size_t i = 0; i < steps; ++i) {
            const std::size_t count = std::min<std::size_t>(n_values[i], order.size());
            Embedding m = mask_positions(e, std::span(order).first(count), replacement);
            std::copy(m.data.begin(), m.data.end(), batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
        }
        Tensor p = iem::forward_batch(*in.evaluator, batch);
        const std::size_t c = in.evaluator->concepts();
        const double base = p[label];
        for (std::size_t i = 0; i < steps; ++i) {
            curve.deltas[i][j] = n_values[i] == 0 ? 0.0 : p[(i + 1) * c + label] - base;
        }
    });
    return curve;
}

std::string format_curves_csv(std::span<const MaskingCurve> curves) {
    std::ostringstream os;
    os.precision(17);
    os << "n,method,mean_delta_p,stderr\n";
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.n_values.size(); ++i) {
            os << c.n_values[i] << ',' << selector_name(c.selector) << ',' << c.mean(i) << ','
               << c.stderr_of_mean(i) << '\n';
        }
    }
    return os.str();
}

ConceptMaskResult concept_mask_eval(const iem::IemModel& evaluator, const Codebook& codebook, const Dataset& test,
                                    std::span<const std::vector<TokenId>> concept_sets, const MaskPolicy& policy,
                                    unsigned threads) {
    if (test.empty()) throw UsageError("concept_mask_eval: empty test set");
    if (concept_sets.size() < evaluator.concepts())
        throw UsageError("concept_mask_eval: need one token set per concept");
    const auto replacement = replacement_vector(policy, codebook);
    const std::size_t N = test.size();
    const std::size_t c = evaluator.concepts();
    std::vector<double> p0(N), p1(N), masked(N);
    std::vector<int> hit0(N), hit1(N);
    parallel_for(N, threads, [&](std::size_t j) {
        const std::uint32_t y = test.labels[j];
        if (y >= c) throw DomainError("concept_mask_eval: label out of range");
        Embedding e = embed(codebook, test.grids[j]);
        std::size_t count = 0;
        Embedding m = mask_token_ids(e, test.grids[j], concept_sets[y], replacement, &count);
        Tensor batch({2, e.dim, e.side, e.side});
        std::copy(e.data.begin(), e.data.end(), batch.data().begin());
        std::copy(m.data.begin(), m.data.end(), batch.data().begin() + static_cast<std::ptrdiff_t>(e.data.size()));
        Tensor p = iem::forward_batch(evaluator, batch);
        std::span<const double> row0 = p.data().subspan(0, c), row1 = p.data().subspan(c, c);
        p0[j] = row0[y];
        p1[j] = row1[y];
        hit0[j] = iem::label_rank(row0, y) == 0;
        hit1[j] = iem::label_rank(row1, y) == 0;
        masked[j] = static_cast<double>(count);
    });
    ConceptMaskResult r;
    double a0 = 0, a1 = 0, dp = 0, nm = 0;
    for (std::size_t j = 0; j < N; ++j) {
        a0 += hit0[j];
        a1 += hit1[j];
        dp += p1[j] - p0[j];
        nm += masked[j];
    }
    const double inv = 1.0 / static_cast<double>(N);
    r.accuracy_before = a0 * inv;
    r.delta_accuracy = (a1 - a0) * inv;
    r.delta_probability = dp * inv;
    r.mean_masked = nm * inv;
    return r;
}

}  // namespace cortex::saliency
