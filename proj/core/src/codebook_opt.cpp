#include "cortex/codebook_opt.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <sstream>

#include "cortex/error.hpp"
#include "cortex/parallel.hpp"

namespace cortex::codebook_opt {

using ad::Tape;
using ad::Tensor;
using ad::Var;

// ---- RegionMask ----------------------------------------------------------------

RegionMask RegionMask::full(std::uint32_t side) {
    return {side, std::vector<std::uint8_t>(static_cast<std::size_t>(side) * side, 1)};
}

RegionMask RegionMask::none(std::uint32_t side) {
    return {side, std::vector<std::uint8_t>(static_cast<std::size_t>(side) * side, 0)};
}

RegionMask RegionMask::rect(std::uint32_t side, std::uint32_t h, std::uint32_t w, std::uint32_t row,
                            std::uint32_t col) {
    if (h == 0 || w == 0 || row + h > side || col + w > side)
        throw DomainError("region " + std::to_string(h) + "x" + std::to_string(w) + "@" + std::to_string(row) + "," +
                          std::to_string(col) + " does not fit a " + std::to_string(side) + "x" +
                          std::to_string(side) + " grid");
    RegionMask m = none(side);
    for (std::uint32_t r = row; r < row + h; ++r) {
        for (std::uint32_t c = col; c < col + w; ++c) m.flags[static_cast<std::size_t>(r) * side + c] = 1;
    }
    return m;
}

RegionMask RegionMask::parse(std::string_view text, std::uint32_t side) {
    std::uint32_t v[4] = {};
    const char seps[3] = {'x', '@', ','};
    const char* p = text.data();
    const char* end = text.data() + text.size();
    for (int i = 0; i < 4; ++i) {
        auto [next, ec] = std::from_chars(p, end, v[i]);
        if (ec != std::errc{}) throw UsageError("bad region '" + std::string(text) + "' (expected HxW@ROW,COL)");
        p = next;
        if (i < 3) {
            if (p == end || *p != seps[i]) throw UsageError("bad region '" + std::string(text) + "' (expected HxW@ROW,COL)");
            ++p;
        }
    }
    if (p != end) throw UsageError("bad region '" + std::string(text) + "' (expected HxW@ROW,COL)");
    return rect(side, v[0], v[1], v[2], v[3]);
}

std::vector<std::size_t> RegionMask::positions() const {
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p < flags.size(); ++p) {
        if (flags[p]) out.push_back(p);
    }
    return out;
}

std::size_t RegionMask::count() const { return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1)); }

// ---- Config ----------------------------------------------------------------------

std::string_view init_mode_name(InitMode mode) noexcept { return mode == InitMode::uniform ? "uniform" : "from-grid"; }

InitMode parse_init_mode(std::string_view name) {
    if (name == "uniform") return InitMode::uniform;
    if (name == "from-grid") return InitMode::from_grid;
    throw DomainError("unknown init mode '" + std::string(name) + "' (expected uniform or from-grid)");
}

std::string_view objective_name(Objective o) noexcept {
    return o == Objective::probability ? "probability" : "log-probability";
}

Objective parse_objective(std::string_view name) {
    if (name == "probability") return Objective::probability;
    if (name == "log-probability") return Objective::log_probability;
    throw DomainError("unknown objective '" + std::string(name) + "' (expected probability or log-probability)");
}

void OptConfig::validate() const {
    if (!(temperature > 0.0) || !(final_temperature > 0.0)) throw ConfigError("optimize: temperature must be > 0");
    if (!(learning_rate > 0.0) || !(embedding_learning_rate > 0.0))
        throw ConfigError("optimize: learning rate must be > 0");
    if (!(regularization >= 0.0)) throw ConfigError("optimize: regularization must be >= 0");
    if (!(smoothing > 0.0 && smoothing < 1.0)) throw ConfigError("optimize: smoothing must lie in (0, 1)");
    if (snapshot_interval == 0) throw ConfigError("optimize: snapshot interval must be >= 1");
}

double OptConfig::temperature_at(std::uint32_t step) const {
    if (steps <= 1 || final_temperature == temperature) return temperature;
    const double t = static_cast<double>(step) / static_cast<double>(steps - 1);
    return temperature + (final_temperature - temperature) * t;
}

// ---- Selection ---------------------------------------------------------------------

Tensor init_selection(InitMode mode, const TokenGrid* grid, std::uint32_t side, std::size_t codebook_size,
                      double smoothing) {
    const std::size_t P = static_cast<std::size_t>(side) * side;
    const std::size_t K = codebook_size;
    if (mode == InitMode::uniform) return Tensor({P, K}, 0.0);
    if (!grid) throw UsageError("from-grid initialization needs a grid");
    if (grid->tokens.size() != P) throw ShapeError("init_selection: grid size does not match side");
    if (!(smoothing > 0.0 && smoothing < 1.0)) throw DomainError("init_selection: smoothing must lie in (0, 1)");
    const double off = std::log(smoothing / static_cast<double>(K));
    const double on = std::log(1.0 - smoothing + smoothing / static_cast<double>(K));
    Tensor out({P, K}, off);
    for (std::size_t p = 0; p < P; ++p) {
        if (grid->tokens[p] >= K) throw DomainError("init_selection: token id out of range");
        out[p * K + grid->tokens[p]] = on;
    }
    return out;
}

Tensor codebook_tensor(const Codebook& codebook) {
    return Tensor({codebook.size(), codebook.dim()},
                  std::vector<double>(codebook.data().begin(), codebook.data().end()));
}

namespace {

std::vector<std::size_t> all_positions(std::size_t count) {
    std::vector<std::size_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = i;
    return out;
}

TokenId row_argmax(std::span<const double> row) {
    return static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

Var select_embedding(Tape& tape, Var selection, const Tensor& codebook, const Tensor& noise, double tau, bool hard,
                     std::uint32_t side) {
    const ad::Shape s = selection.shape();  // copy: recording new nodes may reallocate the tape
    if (s.size() != 2 || codebook.rank() != 2 || s[1] != codebook.extent(0))
        throw ShapeError("select_embedding: selection " + ad::shape_string(s) + " vs codebook " +
                         ad::shape_string(codebook.shape()));
    if (s[0] != static_cast<std::size_t>(side) * side) throw ShapeError("select_embedding: row count is not side^2");
    Var y = ad::gumbel_softmax(selection, noise, tau, hard);
    Var rows = ad::matmul(y, tape.constant(codebook));
    const auto positions = all_positions(s[0]);
    return ad::place_columns(Tensor({1, codebook.extent(1), side, side}), positions, rows);
}

Embedding select_embedding(const Tensor& selection, const Codebook& codebook, double tau, bool hard, Stream& rng) {
    if (selection.rank() != 2) throw ShapeError("select_embedding: selection must be [m^2, K]");
    const auto side = static_cast<std::uint32_t>(std::lround(std::sqrt(static_cast<double>(selection.extent(0)))));
    Tape tape;
    Tensor noise = ad::sample_gumbel(selection.shape(), rng);
    Var e = select_embedding(tape, tape.constant(selection), codebook_tensor(codebook), noise, tau, hard, side);
    return iem::from_tensor(e.value());
}

Var selection_loss(Tape& tape, const iem::IemModel& model, Var embedding, std::uint32_t concept_id,
                   double regularization, Objective objective) {
    if (concept_id >= model.concepts()) throw DomainError("loss: concept " + std::to_string(concept_id) + " out of range");
    Var logits = model.logits(tape, embedding);
    Var probs = objective == Objective::probability ? ad::softmax(logits) : ad::log_softmax(logits);
    const std::uint32_t idx[1] = {concept_id};
    Var p = ad::pick(probs, idx);
    Var loss = ad::scale(ad::sum(p), -1.0);
    if (regularization != 0.0) loss = ad::add(loss, ad::scale(ad::sum_of_squares(embedding), regularization));
    return loss;
}

std::vector<TokenId> extract_tokens(const Tensor& selection, const RegionMask& mask) {
    if (selection.rank() != 2 || selection.extent(0) != mask.flags.size())
        throw ShapeError("extract_tokens: selection rows do not match the mask");
    const std::size_t K = selection.extent(1);
    std::vector<TokenId> out;
    for (auto p : mask.positions()) out.push_back(row_argmax(selection.data().subspan(p * K, K)));
    return out;
}

TokenGrid apply_tokens(const TokenGrid& grid, const RegionMask& mask, std::span<const TokenId> tokens) {
    if (grid.tokens.size() != mask.flags.size()) throw ShapeError("apply_tokens: grid and mask sizes differ");
    const auto positions = mask.positions();
    if (positions.size() != tokens.size()) throw ShapeError("apply_tokens: token count does not match the mask");
    TokenGrid out = grid;
    for (std::size_t i = 0; i < positions.size(); ++i) out.tokens[positions[i]] = tokens[i];
    return out;
}

std::vector<std::uint32_t> snapshot_steps(std::uint32_t steps, std::uint32_t interval) {
    if (interval == 0) throw ConfigError("snapshot interval must be >= 1");
    std::vector<std::uint32_t> out;
    for (std::uint32_t s = 0; s <= steps; s += interval) {
        out.push_back(s);
        if (steps - s < interval) break;
    }
    if (out.back() != steps) out.push_back(steps);
    return out;
}

// ---- Optimization ---------------------------------------------------------------------

namespace {

Snapshot measure(const iem::IemModel& model, const Codebook& codebook, const TokenGrid& grid,
                 std::uint32_t concept_id, double regularization, std::uint32_t step) {
    Embedding e = embed(codebook, grid);
    const double p = iem::forward(model, e)[concept_id];
    double ss = 0.0;
    for (double v : e.data) ss += v * v;
    return {step, -p + regularization * ss, p, grid};
}

void check_mask(const RegionMask& mask, std::uint32_t side) {
    if (mask.side != side || mask.flags.size() != static_cast<std::size_t>(side) * side)
        throw ShapeError("optimize: mask does not match the grid side");
    if (mask.count() == 0) throw UsageError("optimize: region mask has no optimizable positions");
}

}  // namespace

double optimize_step(const iem::IemModel& model, const Tensor& codebook, std::uint32_t concept_id,
                     const Tensor& base, std::span<const std::size_t> positions, Tensor& rows, const Tensor& noise,
                     double tau, bool hard, double learning_rate, double regularization, Objective objective) {
    Tape tape;
    Var p = tape.leaf(rows);
    Var y = ad::gumbel_softmax(p, noise, tau, hard);
    Var e = ad::place_columns(base, positions, ad::matmul(y, tape.constant(codebook)));
    Var loss = selection_loss(tape, model, e, concept_id, regularization, objective);
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw NumericError("non-finite loss");
    tape.backward(loss);
    const Tensor& g = p.grad();
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] -= learning_rate * g[i];
    return value;
}

OptResult optimize(const iem::IemModel& model, const Codebook& codebook, std::uint32_t concept_id,
                   const RegionMask& mask, const OptConfig& config, const TokenGrid* start) {
    config.validate();
    const std::uint32_t side = mask.side;
    check_mask(mask, side);
    if (concept_id >= model.concepts()) throw DomainError("optimize: concept " + std::to_string(concept_id) + " out of range");
    if (config.init == InitMode::from_grid && !start) throw UsageError("from-grid initialization needs a start grid");
    model.check_input({1, codebook.dim(), side, side});

    const std::size_t K = codebook.size();
    Tensor selection = init_selection(config.init, start, side, K, config.smoothing);
    const auto positions = mask.positions();
    const std::size_t R = positions.size();

    // Grid outside the mask never changes.
    TokenGrid context{side, std::vector<TokenId>(static_cast<std::size_t>(side) * side)};
    if (start) {
        context = *start;
    } else {
        for (std::size_t q = 0; q < context.tokens.size(); ++q)
            context.tokens[q] = row_argmax(selection.data().subspan(q * K, K));
    }
    const Tensor base = iem::to_tensor(embed(codebook, context));
    const Tensor cb = codebook_tensor(codebook);

    Tensor rows({R, K});
    for (std::size_t i = 0; i < R; ++i) {
        std::copy_n(selection.data().begin() + static_cast<std::ptrdiff_t>(positions[i] * K), K,
                    rows.data().begin() + static_cast<std::ptrdiff_t>(i * K));
    }
    auto readout = [&] {
        TokenGrid g = context;
        for (std::size_t i = 0; i < R; ++i) g.tokens[positions[i]] = row_argmax(rows.data().subspan(i * K, K));
        return g;
    };

    OptResult result;
    const auto snaps = snapshot_steps(config.steps, config.snapshot_interval);
    std::size_t next_snap = 0;
    Stream rng(config.seed, "optimize/gumbel", concept_id);
    Tensor noise;
    if (config.frozen_noise) noise = ad::sample_gumbel({R, K}, rng);

    for (std::uint32_t step = 0;; ++step) {
        if (next_snap < snaps.size() && snaps[next_snap] == step) {
            result.trajectory.snapshots.push_back(
                measure(model, codebook, readout(), concept_id, config.regularization, step));
            ++next_snap;
        }
        if (step == config.steps) break;
        if (!config.frozen_noise) noise = ad::sample_gumbel({R, K}, rng);
        try {
            optimize_step(model, cb, concept_id, base, positions, rows, noise, config.temperature_at(step), config.hard,
                          config.learning_rate, config.regularization, config.objective);
        } catch (const NumericError& e) {
            throw OptimizationError("optimize: step " + std::to_string(step) + ": " + e.what());
        }
        if (!rows.all_finite()) throw OptimizationError("optimize: step " + std::to_string(step) + ": non-finite logits");
    }
    for (std::size_t i = 0; i < R; ++i) {
        std::copy_n(rows.data().begin() + static_cast<std::ptrdiff_t>(i * K), K,
                    selection.data().begin() + static_cast<std::ptrdiff_t>(positions[i] * K));
    }
    result.selection = std::move(selection);
    return result;
}

EditResult edit_grid(const TokenGrid& grid, const RegionMask& mask, std::uint32_t target,
                     const iem::IemModel& model, const Codebook& codebook, const OptConfig& config,
                     std::uint32_t cell_pixels) {
    OptConfig cfg = config;
    cfg.init = InitMode::from_grid;
    OptResult r = optimize(model, codebook, target, mask, cfg, &grid);
    EditResult out;
    out.edited = apply_tokens(grid, mask, extract_tokens(r.selection, mask));
    for (const auto& s : r.trajectory.snapshots) out.rasters.emplace_back(s.step, render(s.grid, cell_pixels));
    out.trajectory = std::move(r.trajectory);
    return out;
}

BaselineResult embedding_opt_baseline(const iem::IemModel& model, const Codebook& codebook, const TokenGrid& grid,
                                      std::uint32_t concept_id, const RegionMask& mask, const OptConfig& config) {
    config.validate();
    check_mask(mask, grid.side);
    if (concept_id >= model.concepts()) throw DomainError("optimize: concept " + std::to_string(concept_id) + " out of range");
    const auto positions = mask.positions();
    const std::size_t R = positions.size();
    const std::size_t d = codebook.dim();
    const Tensor base = iem::to_tensor(embed(codebook, grid));

    Tensor cols({R, d});
    for (std::size_t i = 0; i < R; ++i) {
        auto row = codebook.row(grid.tokens[positions[i]]);
        std::copy(row.begin(), row.end(), cols.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    auto readout = [&] {
        TokenGrid g = grid;
        for (std::size_t i = 0; i < R; ++i) g.tokens[positions[i]] = quantize(codebook, cols.data().subspan(i * d, d));
        return g;
    };

    BaselineResult out;
    const auto snaps = snapshot_steps(config.steps, config.snapshot_interval);
    std::size_t next_snap = 0;
    for (std::uint32_t step = 0;; ++step) {
        if (next_snap < snaps.size() && snaps[next_snap] == step) {
            out.trajectory.snapshots.push_back(
                measure(model, codebook, readout(), concept_id, config.regularization, step));
            ++next_snap;
        }
        if (step == config.steps) break;
        try {
            Tape tape;
            Var v = tape.leaf(cols);
            Var loss = selection_loss(tape, model, ad::place_columns(base, positions, v), concept_id,
                                      config.regularization, config.objective);
            if (!std::isfinite(loss.value().item())) throw NumericError("non-finite loss");
            tape.backward(loss);
            const Tensor& g = v.grad();
            for (std::size_t i = 0; i < cols.size(); ++i) cols[i] -= config.embedding_learning_rate * g[i];
        } catch (const NumericError& e) {
            throw OptimizationError("embedding baseline: step " + std::to_string(step) + ": " + e.what());
        }
        if (!cols.all_finite()) throw OptimizationError("embedding baseline: step " + std::to_string(step) + ": non-finite embedding");
    }
    out.grid = readout();
    return out;
}

// ---- Flip evaluation ---------------------------------------------------------------------

std::string_view flip_method_name(FlipMethod m) noexcept {
    return m == FlipMethod::token_selection ? "token-selection" : "embedding";
}

std::vector<FlipRow> flip_eval(const iem::IemModel& explainer, const iem::IemModel& evaluator,
                               const Codebook& codebook, const Dataset& test, const FlipConfig& config,
                               unsigned threads) {
    config.opt.validate();
    const RegionMask mask =
        RegionMask::rect(test.side, config.region_h, config.region_w, config.region_row, config.region_col);

    struct Run {
        std::size_t pair, record;
        std::uint32_t from, to;
    };
    std::vector<Run> runs;
    std::vector<std::size_t> direction_of;  // run -> direction index
    for (std::size_t p = 0; p < config.pairs.size(); ++p) {
        auto [a, b] = config.pairs[p];
        if (a == b) throw UsageError("flip_eval: paired concepts must differ");
        if (a >= explainer.concepts() || b >= explainer.concepts()) throw DomainError("flip_eval: concept out of range");
        for (auto [from, to] : {std::pair{a, b}, std::pair{b, a}}) {
            auto records = test.indices_of(from);
            if (records.size() < config.images)
                throw UsageError("flip_eval: test split has only " + std::to_string(records.size()) +
                                 " images of concept " + std::to_string(from));
            for (std::uint32_t i = 0; i < config.images; ++i) {
                runs.push_back({p, records[i], from, to});
                direction_of.push_back(p * 2 + (from == a ? 0 : 1));
            }
        }
    }

    // [run][method] -> (dP_orig, dP_targ)
    std::vector<std::array<std::pair<double, double>, 2>> deltas(runs.size());
    parallel_for(runs.size(), threads, [&](std::size_t r) {
        const Run& run = runs[r];
        const TokenGrid& grid = test.grids[run.record];
        OptConfig cfg = config.opt;
        cfg.init = InitMode::from_grid;
        cfg.seed = Stream(config.opt.seed, "flip", r).next_u64();
        auto before = iem::forward(evaluator, embed(codebook, grid));

        OptResult sel = optimize(explainer, codebook, run.to, mask, cfg, &grid);
        TokenGrid edited = apply_tokens(grid, mask, extract_tokens(sel.selection, mask));
        BaselineResult emb = embedding_opt_baseline(explainer, codebook, grid, run.to, mask, cfg);

        const TokenGrid* outs[2] = {&edited, &emb.grid};
        for (int m = 0; m < 2; ++m) {
            auto after = iem::forward(evaluator, embed(codebook, *outs[m]));
            deltas[r][m] = {after[run.from] - before[run.from], after[run.to] - before[run.to]};
        }
    });

    std::vector<FlipRow> rows;
    for (std::size_t dir = 0; dir < config.pairs.size() * 2; ++dir) {
        for (int m = 0; m < 2; ++m) {
            FlipRow row;
            row.pair = dir / 2;
            row.method = m == 0 ? FlipMethod::token_selection : FlipMethod::embedding;
            for (std::size_t r = 0; r < runs.size(); ++r) {
                if (direction_of[r] != dir) continue;
                row.from = runs[r].from;
                row.to = runs[r].to;
                row.delta_orig += deltas[r][m].first;
                row.delta_targ += deltas[r][m].second;
                ++row.trials;
            }
            if (row.trials) {
                row.delta_orig /= static_cast<double>(row.trials);
                row.delta_targ /= static_cast<double>(row.trials);
            }
            rows.push_back(row);
        }
    }
    return rows;
}

std::string format_flip_csv(std::span<const FlipRow> rows) {
    std::ostringstream os;
    os.precision(17);
    os << "pair,direction,method,dP_orig_mean,dP_targ_mean,trials\n";
    for (const auto& r : rows) {
        os << r.pair << ',' << r.from << "->" << r.to << ',' << flip_method_name(r.method) << ',' << r.delta_orig
           << ',' << r.delta_targ << ',' << r.trials << '\n';
    }
    return os.str();
}

std::string format_trajectory_csv(const OptTrajectory& trajectory) {
    std::ostringstream os;
    os.precision(17);
    os << "step,loss,target_probability\n";
    for (const auto& s : trajectory.snapshots) os << s.step << ',' << s.loss << ',' << s.target_probability << '\n';
    return os.str();
}

}  // namespace cortex::codebook_opt
