// cortex: command-line front end for the synthetic-world explanation pipeline.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cortex/bias.hpp"
#include "cortex/binio.hpp"
#include "cortex/codebook_opt.hpp"
#include "cortex/dataset.hpp"
#include "cortex/error.hpp"
#include "cortex/iem.hpp"
#include "cortex/parallel.hpp"
#include "cortex/saliency.hpp"

namespace fs = std::filesystem;
using namespace cortex;

namespace {

// ---- helpers ----------------------------------------------------------------

std::vector<std::uint32_t> parse_values(const std::string& text) {
    auto number = [&](std::string_view s) {
        std::uint32_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size()) throw UsageError("bad number '" + std::string(s) + "' in '" + text + "'");
        return v;
    };
    std::vector<std::uint32_t> out;
    if (text.find(':') != std::string::npos) {
        std::vector<std::string_view> parts;
        std::string_view rest = text;
        for (std::size_t pos; (pos = rest.find(':')) != std::string_view::npos; rest.remove_prefix(pos + 1))
            parts.push_back(rest.substr(0, pos));
        parts.push_back(rest);
        if (parts.size() != 3) throw UsageError("range '" + text + "' must be START:STOP:STEP");
        auto lo = number(parts[0]), hi = number(parts[1]), step = number(parts[2]);
        if (step == 0 || lo > hi) throw UsageError("range '" + text + "' is empty or has a zero step");
        for (std::uint32_t v = lo; v <= hi; v += step) out.push_back(v);
        return out;
    }
    std::string_view rest = text;
    while (true) {
        auto pos = rest.find(',');
        out.push_back(number(rest.substr(0, pos)));
        if (pos == std::string_view::npos) break;
        rest.remove_prefix(pos + 1);
    }
    return out;
}

void prepare_out(const fs::path& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
}

// Every output directory gets the resolved options; `cortex --config run.ini` reruns the command.
void write_run_record(const fs::path& out, const CLI::App& cmd) {
    std::string text = "[" + cmd.get_name() + "]\n" + cmd.config_to_str(true, false);
    binio::write_text_atomic(out / "run.ini", text);
}

void write_text(const fs::path& path, const std::string& text) { binio::write_text_atomic(path, text); }

void check_model(const iem::IemModel& model, const DatasetBundle& data, const std::string& what) {
    if (model.spec().dim != data.world.codebook.dim())
        throw UsageError(what + " expects d=" + std::to_string(model.spec().dim) + " but the dataset codebook has d=" +
                         std::to_string(data.world.codebook.dim()));
    if (model.concepts() != data.world.config.concepts)
        throw UsageError(what + " predicts " + std::to_string(model.concepts()) + " concepts but the dataset has " +
                         std::to_string(data.world.config.concepts));
    model.check_input({1, data.world.codebook.dim(), data.world.config.side, data.world.config.side});
}

iem::IemModel load_model(const fs::path& path, const DatasetBundle& data, const std::string& what) {
    auto model = iem::load_checkpoint(path);
    check_model(model, data, what + " (" + path.string() + ")");
    return model;
}

// Explanations are judged on a model other than the one that produced them.
void require_independent(const fs::path& explainer, const fs::path& evaluator) {
    std::error_code ec;
    if (fs::equivalent(explainer, evaluator, ec) || binio::read_file(explainer) == binio::read_file(evaluator))
        throw UsageError("explainer and evaluator checkpoints are identical; the evaluator must be an independent model");
}

const Dataset& split_of(const DatasetBundle& b, const std::string& name) {
    if (name == "train") return b.train;
    if (name == "val") return b.val;
    if (name == "test") return b.test;
    throw UsageError("unknown split '" + name + "' (expected train, val or test)");
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// ---- world / dataset ------------------------------------------------------------------

struct WorldOpts {
    WorldConfig cfg;
    void add(CLI::App* app) {
        app->add_option("--codebook-size", cfg.codebook_size, "codebook size K")->capture_default_str();
        app->add_option("--dim", cfg.dim, "token vector dimension d")->capture_default_str();
        app->add_option("--side", cfg.side, "grid side m")->capture_default_str();
        app->add_option("--concepts", cfg.concepts, "concept count n")->capture_default_str();
        app->add_option("--signature-size", cfg.signature_size, "signature tokens per concept")->capture_default_str();
        app->add_option("--context-pool", cfg.context_pool, "shared context pool size")->capture_default_str();
        app->add_option("--context-size", cfg.context_size, "context tokens per concept")->capture_default_str();
        app->add_option("--signature-plants", cfg.signature_plants, "signature plants per grid (g)")->capture_default_str();
        app->add_option("--context-plants", cfg.context_plants, "context plants per grid (c)")->capture_default_str();
        app->add_option("--background-range", cfg.background_range, "background token count")->capture_default_str();
        app->add_option("--seed", cfg.seed, "world seed")->capture_default_str();
    }
};

void run_gen_world(const WorldConfig& cfg, const fs::path& out) {
    World world = build_world(cfg);
    prepare_out(out);
    save_codebook(out / "codebook.bin", world.codebook);
    std::ostringstream os;
    os << "concept,kind,tokens\n";
    auto list = [&](const std::vector<TokenId>& ids) {
        std::string s;
        for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? " " : "") + std::to_string(ids[i]);
        return s;
    };
    for (const auto& c : world.concepts) {
        os << c.id << ",signature," << list(c.signature) << '\n';
        os << c.id << ",context," << list(c.context) << '\n';
    }
    os << "-,background," << list(world.background) << '\n';
    if (world.mask_token) os << "-,mask," << *world.mask_token << '\n';
    write_text(out / "world.csv", os.str());
}

// ---- training ----------------------------------------------------------------------

std::string metrics_csv(const std::vector<iem::EpochRecord>& history) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,loss,top1,top3,top5\n";
    for (const auto& e : history) os << e.epoch << ',' << e.train_loss << ',' << e.val.top1 << ',' << e.val.top3 << ',' << e.val.top5 << '\n';
    return os.str();
}

// ---- shared option groups ----------------------------------------------------------------

struct SaliencyOpts {
    saliency::SaliencySpec spec;
    void add(CLI::App* app) {
        app->add_option("--samples", spec.samples, "SmoothGrad sample count N")->capture_default_str();
        app->add_option("--noise", spec.noise, "SmoothGrad noise scale")->capture_default_str();
    }
};

struct PolicyOpts {
    std::string mode = "mean";
    saliency::MaskPolicy resolve(const World& world) const {
        saliency::MaskPolicy p;
        p.mode = saliency::parse_mask_mode(mode);
        if (p.mode == saliency::MaskMode::mask_token) {
            if (!world.mask_token) throw UsageError("this world has no reserved mask token");
            p.token = world.mask_token;
        }
        return p;
    }
    void add(CLI::App* app) {
        app->add_option("--policy", mode, "replacement for masked positions: zero, mean, mask-token")->capture_default_str();
    }
};

struct OptOpts {
    codebook_opt::OptConfig cfg;
    std::string objective = "log-probability";
    std::string init = "from-grid";
    bool soft = false;
    void add(CLI::App* app, bool with_init) {
        app->add_option("--steps", cfg.steps, "optimization steps")->capture_default_str();
        app->add_option("--lr", cfg.learning_rate, "step size on selection logits")->capture_default_str();
        app->add_option("--embedding-lr", cfg.embedding_learning_rate, "step size of the embedding baseline")->capture_default_str();
        app->add_option("--tau", cfg.temperature, "Gumbel-Softmax temperature")->capture_default_str();
        app->add_option("--tau-final", cfg.final_temperature, "temperature at the last step (linear anneal)")->capture_default_str();
        app->add_option("--reg", cfg.regularization, "embedding norm penalty")->capture_default_str();
        app->add_option("--smoothing", cfg.smoothing, "from-grid init smoothing")->capture_default_str();
        app->add_option("--objective", objective, "probability or log-probability")->capture_default_str();
        app->add_flag("--soft", soft, "soft Gumbel-Softmax forward");
        app->add_option("--seed", cfg.seed, "noise seed")->capture_default_str();
        if (with_init) app->add_option("--init", init, "uniform or from-grid")->capture_default_str();
    }
    codebook_opt::OptConfig resolve() const {
        auto c = cfg;
        c.objective = codebook_opt::parse_objective(objective);
        c.init = codebook_opt::parse_init_mode(init);
        c.hard = !soft;
        return c;
    }
};

int run(int argc, char** argv) {
    CLI::App app{"cortex: token-level explanation of vector-quantized grids"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "show help for every command");
    app.set_config("--config", "", "read options from an INI file (e.g. a run.ini written by an earlier run)");
    unsigned threads = default_threads();

    auto add_threads = [&](CLI::App* c) {
        c->add_option("--threads", threads, "worker threads (results never depend on this)")->capture_default_str();
        c->configurable()->fallthrough();
    };

    // gen-world
    WorldOpts gw;
    fs::path gw_out;
    auto* c_world = app.add_subcommand("gen-world", "build a world: codebook and token roles");
    gw.add(c_world);
    c_world->add_option("--out", gw_out, "output directory")->required();
    add_threads(c_world);

    // gen-dataset
    WorldOpts gd;
    SplitCounts counts;
    fs::path gd_out;
    auto* c_data = app.add_subcommand("gen-dataset", "generate train/val/test grids with ground truth");
    gd.add(c_data);
    c_data->add_option("--train", counts.train, "train grids per concept")->capture_default_str();
    c_data->add_option("--val", counts.val, "validation grids per concept")->capture_default_str();
    c_data->add_option("--test", counts.test, "test grids per concept")->capture_default_str();
    c_data->add_option("--out", gd_out, "output directory")->required();
    add_threads(c_data);

    // train-iem
    fs::path tr_data, tr_out;
    std::string tr_arch = "pool-mlp", tr_opt = "adam";
    iem::ArchSpec tr_spec;
    double tr_bias = -1.0;
    iem::TrainConfig tr_cfg;
    auto* c_train = app.add_subcommand("train-iem", "train an information extractor");
    c_train->add_option("--data", tr_data, "dataset directory")->required();
    c_train->add_option("--out", tr_out, "output directory")->required();
    c_train->add_option("--arch", tr_arch, "pool-mlp or small-conv")->capture_default_str();
    c_train->add_option("--width", tr_spec.width, "encoder width / first conv channels")->capture_default_str();
    c_train->add_option("--head-width", tr_spec.head_width, "head width / second conv channels")->capture_default_str();
    c_train->add_option("--encoder-bias", tr_bias, "initial first-layer bias")->capture_default_str();
    c_train->add_option("--lr", tr_cfg.learning_rate, "learning rate")->capture_default_str();
    c_train->add_option("--weight-decay", tr_cfg.weight_decay, "L2 weight decay")->capture_default_str();
    c_train->add_option("--epochs", tr_cfg.epochs, "epochs")->capture_default_str();
    c_train->add_option("--batch", tr_cfg.batch_size, "mini-batch size")->capture_default_str();
    c_train->add_option("--optimizer", tr_opt, "adam or sgd")->capture_default_str();
    c_train->add_option("--decay-factor", tr_cfg.decay_factor, "step decay factor")->capture_default_str();
    c_train->add_option("--decay-period", tr_cfg.decay_period, "epochs between decays")->capture_default_str();
    c_train->add_option("--seed", tr_cfg.seed, "init and shuffle seed")->capture_default_str();
    add_threads(c_train);

    // explain-sample
    fs::path xs_model, xs_data, xs_out;
    std::uint32_t xs_concept = 0, xs_n = 20, xs_k = 10, xs_limit = 0;
    std::string xs_split = "train";
    std::uint64_t xs_seed = 0;
    bool xs_per_image = false;
    SaliencyOpts xs_sal;
    auto* c_xs = app.add_subcommand("explain-sample", "SmoothGrad token sets: per image (Top-n) and per concept (Top-k)");
    c_xs->add_option("--model", xs_model, "extractor checkpoint")->required();
    c_xs->add_option("--data", xs_data, "dataset directory")->required();
    c_xs->add_option("--out", xs_out, "output directory")->required();
    c_xs->add_option("--concept", xs_concept, "concept to explain")->required();
    c_xs->add_option("--split", xs_split, "split whose images are explained")->capture_default_str();
    c_xs->add_option("--n", xs_n, "tokens per image")->capture_default_str();
    c_xs->add_option("--k", xs_k, "tokens per concept")->capture_default_str();
    c_xs->add_option("--limit", xs_limit, "explain only the first LIMIT images (0 = all)")->capture_default_str();
    c_xs->add_flag("--per-image", xs_per_image, "count a token once per image when aggregating");
    c_xs->add_option("--seed", xs_seed, "noise seed")->capture_default_str();
    xs_sal.add(c_xs);
    add_threads(c_xs);

    // explain-codebook
    fs::path xc_model, xc_data, xc_out;
    std::uint32_t xc_concept = 0, xc_snap = 500, xc_record = 0;
    std::string xc_mask, xc_split = "test";
    OptOpts xc_opt;
    xc_opt.init = "uniform";
    auto* c_xc = app.add_subcommand("explain-codebook", "optimize a token selection toward a concept and extract its tokens");
    c_xc->add_option("--model", xc_model, "extractor checkpoint")->required();
    c_xc->add_option("--data", xc_data, "dataset directory (codebook and start grids)")->required();
    c_xc->add_option("--out", xc_out, "output directory")->required();
    c_xc->add_option("--concept", xc_concept, "target concept")->required();
    c_xc->add_option("--mask", xc_mask, "optimizable region HxW@ROW,COL (default: whole grid)");
    c_xc->add_option("--split", xc_split, "split of the start grid (from-grid init)")->capture_default_str();
    c_xc->add_option("--record", xc_record, "record of the start grid (from-grid init)")->capture_default_str();
    c_xc->add_option("--snap", xc_snap, "snapshot interval")->capture_default_str();
    xc_opt.add(c_xc, true);
    add_threads(c_xc);

    // eval-mask
    fs::path em_explainer, em_evaluator, em_data, em_out;
    std::string em_protocol = "image", em_method = "both", em_n = "5:50:5";
    std::uint32_t em_images = 0, em_k = 10;
    std::uint64_t em_seed = 0;
    SaliencyOpts em_sal;
    PolicyOpts em_policy;
    auto* c_em = app.add_subcommand("eval-mask", "masking evaluation under an independent evaluator");
    c_em->add_option("--explainer", em_explainer, "checkpoint that produces explanations")->required();
    c_em->add_option("--evaluator", em_evaluator, "independent checkpoint that scores masked grids")->required();
    c_em->add_option("--data", em_data, "dataset directory")->required();
    c_em->add_option("--out", em_out, "output directory")->required();
    c_em->add_option("--protocol", em_protocol, "image (Top-n positions per image) or concept (token sets per concept)")->capture_default_str();
    c_em->add_option("--method", em_method, "image: tis, random, both; concept: cortex, frequency, both")->capture_default_str();
    c_em->add_option("--n", em_n, "image protocol: masked positions, START:STOP:STEP or a list; concept protocol: Top-n per image")->capture_default_str();
    c_em->add_option("--k", em_k, "concept protocol: tokens per concept")->capture_default_str();
    c_em->add_option("--images", em_images, "image protocol: use the first IMAGES test grids (0 = all)")->capture_default_str();
    c_em->add_option("--seed", em_seed, "noise and random-selection seed")->capture_default_str();
    em_sal.add(c_em);
    em_policy.add(c_em);
    add_threads(c_em);

    // flip-eval
    fs::path fe_explainer, fe_evaluator, fe_data, fe_out;
    std::string fe_region = "4x4@6,6", fe_pairs = "0,1,2,3,4,5,6,7,8,9";
    std::uint32_t fe_images = 20;
    OptOpts fe_opt;
    auto* c_fe = app.add_subcommand("flip-eval", "optimize grids of one concept toward its paired concept");
    c_fe->add_option("--explainer", fe_explainer, "checkpoint the optimizers follow")->required();
    c_fe->add_option("--evaluator", fe_evaluator, "independent checkpoint that scores the results")->required();
    c_fe->add_option("--data", fe_data, "dataset directory")->required();
    c_fe->add_option("--out", fe_out, "output directory")->required();
    c_fe->add_option("--pairs", fe_pairs, "concept ids, consecutive ids form a pair")->capture_default_str();
    c_fe->add_option("--images", fe_images, "test grids per direction")->capture_default_str();
    c_fe->add_option("--region", fe_region, "optimizable region HxW@ROW,COL")->capture_default_str();
    fe_opt.add(c_fe, false);
    add_threads(c_fe);

    // edit
    fs::path ed_model, ed_data, ed_out;
    std::string ed_mask = "4x4@6,6", ed_split = "test";
    std::uint32_t ed_target = 0, ed_record = 0, ed_snap = 500, ed_cell = 8;
    OptOpts ed_opt;
    auto* c_ed = app.add_subcommand("edit", "edit a grid toward a target concept inside a region");
    c_ed->add_option("--model", ed_model, "extractor checkpoint")->required();
    c_ed->add_option("--data", ed_data, "dataset directory")->required();
    c_ed->add_option("--out", ed_out, "output directory")->required();
    c_ed->add_option("--target", ed_target, "target concept")->required();
    c_ed->add_option("--split", ed_split, "split of the grid to edit")->capture_default_str();
    c_ed->add_option("--record", ed_record, "record of the grid to edit")->capture_default_str();
    c_ed->add_option("--mask", ed_mask, "optimizable region HxW@ROW,COL")->capture_default_str();
    c_ed->add_option("--snap", ed_snap, "snapshot interval")->capture_default_str();
    c_ed->add_option("--cell", ed_cell, "pixels per token in snapshots")->capture_default_str();
    ed_opt.add(c_ed, false);
    add_threads(c_ed);

    // detect-bias
    fs::path db_model, db_data, db_out;
    double db_lambda = 0.5;
    std::uint32_t db_grids = 500;
    std::string db_n = "5,10,20";
    std::uint64_t db_neutral_seed = 0;
    bool db_literal = false;
    bias::BiasConfig db_cfg;
    SaliencyOpts db_sal;
    auto* c_db = app.add_subcommand("detect-bias", "compare two concepts' token sets on neutral grids");
    c_db->add_option("--model", db_model, "extractor checkpoint")->required();
    c_db->add_option("--data", db_data, "dataset directory (world and training split)")->required();
    c_db->add_option("--out", db_out, "output directory")->required();
    c_db->add_option("--lambda", db_lambda, "share of neutral signature plants drawn from group A")->capture_default_str();
    c_db->add_option("--group-a", db_cfg.group_a, "concept of group A")->capture_default_str();
    c_db->add_option("--group-b", db_cfg.group_b, "concept of group B")->capture_default_str();
    c_db->add_option("--grids", db_grids, "neutral grids")->capture_default_str();
    c_db->add_option("--n", db_n, "Top-n values per image")->capture_default_str();
    c_db->add_option("--k", db_cfg.k, "tokens per concept set")->capture_default_str();
    c_db->add_option("--seed", db_cfg.seed, "saliency seed")->capture_default_str();
    c_db->add_option("--neutral-seed", db_neutral_seed, "neutral grid seed")->capture_default_str();
    c_db->add_flag("--literal-delta", db_literal, "also report the halved-scale delta (P(x>y) + P(x=y)/2 - 1/2)");
    db_sal.add(c_db);
    add_threads(c_db);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (threads == 0) throw UsageError("--threads must be at least 1");

    if (*c_world) {
        gw.cfg.validate();
        run_gen_world(gw.cfg, gw_out);
        write_run_record(gw_out, *c_world);
        std::printf("world written to %s\n", gw_out.string().c_str());
    } else if (*c_data) {
        gd.cfg.validate();
        if (counts.train == 0 || counts.val == 0 || counts.test == 0) throw UsageError("split sizes must be positive");
        auto bundle = gen_dataset(build_world(gd.cfg), counts, threads);
        prepare_out(gd_out);
        write_dataset(gd_out, bundle);
        write_run_record(gd_out, *c_data);
        std::printf("dataset written to %s (seed %llu)\n", gd_out.string().c_str(),
                    static_cast<unsigned long long>(gd.cfg.seed));
    } else if (*c_train) {
        auto data = read_dataset(tr_data);
        tr_spec.arch = iem::parse_architecture(tr_arch);
        tr_spec.dim = data.world.config.dim;
        tr_spec.concepts = data.world.config.concepts;
        if (tr_opt == "adam") tr_cfg.optimizer = iem::OptimizerKind::adam;
        else if (tr_opt == "sgd") tr_cfg.optimizer = iem::OptimizerKind::sgd;
        else throw UsageError("unknown optimizer '" + tr_opt + "' (expected adam or sgd)");
        auto model = iem::IemModel::initialize(tr_spec, tr_cfg.seed, tr_bias);
        model.check_input({1, tr_spec.dim, data.world.config.side, data.world.config.side});
        auto result = iem::train(std::move(model), data.train, data.val, data.world.codebook, tr_cfg, threads);
        prepare_out(tr_out);
        iem::save_checkpoint(result.model, tr_out / "model.ckpt");
        write_text(tr_out / "metrics.csv", metrics_csv(result.history));
        write_run_record(tr_out, *c_train);
        const auto& best = result.history.at(result.best_epoch - 1).val;
        std::printf("best epoch %u: val top1 %.4f top3 %.4f top5 %.4f loss %.4f\n", result.best_epoch, best.top1,
                    best.top3, best.top5, best.loss);
    } else if (*c_xs) {
        auto data = read_dataset(xs_data);
        auto model = load_model(xs_model, data, "model");
        (void)data.world.concept_spec(xs_concept);
        const Dataset& split = split_of(data, xs_split);
        auto records = split.indices_of(xs_concept);
        if (xs_limit && records.size() > xs_limit) records.resize(xs_limit);
        auto set = saliency::explain_concept(model, data.world.codebook, split.grids, records, xs_concept, xs_sal.spec,
                                             xs_n, xs_k, xs_seed, threads, xs_per_image);
        prepare_out(xs_out);
        saliency::write_explanation(xs_out / "explanation.json", set);
        write_run_record(xs_out, *c_xs);
        std::printf("concept %u tokens:", xs_concept);
        for (const auto& t : set.concept_tokens) std::printf(" %u(%u)", t.token, t.frequency);
        std::printf("\n");
    } else if (*c_xc) {
        auto data = read_dataset(xc_data);
        auto model = load_model(xc_model, data, "model");
        (void)data.world.concept_spec(xc_concept);
        const std::uint32_t side = data.world.config.side;
        auto mask = xc_mask.empty() ? codebook_opt::RegionMask::full(side) : codebook_opt::RegionMask::parse(xc_mask, side);
        auto cfg = xc_opt.resolve();
        cfg.snapshot_interval = xc_snap;
        const TokenGrid* start = nullptr;
        if (cfg.init == codebook_opt::InitMode::from_grid) {
            const Dataset& split = split_of(data, xc_split);
            if (xc_record >= split.size()) throw UsageError("record " + std::to_string(xc_record) + " out of range");
            start = &split.grids[xc_record];
        }
        auto result = codebook_opt::optimize(model, data.world.codebook, xc_concept, mask, cfg, start);
        auto tokens = codebook_opt::extract_tokens(result.selection, mask);
        auto positions = mask.positions();
        std::ostringstream os;
        os << "position,row,col,token\n";
        for (std::size_t i = 0; i < positions.size(); ++i)
            os << positions[i] << ',' << positions[i] / side << ',' << positions[i] % side << ',' << tokens[i] << '\n';
        prepare_out(xc_out);
        write_text(xc_out / "tokens.csv", os.str());
        write_text(xc_out / "trajectory.csv", codebook_opt::format_trajectory_csv(result.trajectory));
        write_ppm(xc_out / "final.ppm", render(result.trajectory.snapshots.back().grid, 8));
        write_run_record(xc_out, *c_xc);
        std::printf("concept %u: p %.4f after %u steps\n", xc_concept,
                    result.trajectory.snapshots.back().target_probability, cfg.steps);
    } else if (*c_em) {
        require_independent(em_explainer, em_evaluator);
        auto data = read_dataset(em_data);
        auto explainer = load_model(em_explainer, data, "explainer");
        auto evaluator = load_model(em_evaluator, data, "evaluator");
        auto policy = em_policy.resolve(data.world);
        const auto& cb = data.world.codebook;
        prepare_out(em_out);
        if (em_protocol == "image") {
            if (em_method != "tis" && em_method != "random" && em_method != "both")
                throw UsageError("image protocol methods: tis, random, both");
            auto ns = parse_values(em_n);
            std::size_t count = em_images ? std::min<std::size_t>(em_images, data.test.size()) : data.test.size();
            saliency::MaskingInputs in{&explainer, &evaluator, &cb,
                                       std::span<const TokenGrid>(data.test.grids).first(count),
                                       std::span<const std::uint32_t>(data.test.labels).first(count)};
            std::vector<saliency::MaskingCurve> curves;
            for (auto sel : {saliency::Selector::tis, saliency::Selector::random}) {
                if (em_method != "both" && em_method != saliency::selector_name(sel)) continue;
                curves.push_back(saliency::masking_curve(in, sel, ns, policy, em_sal.spec, em_seed, threads));
            }
            write_text(em_out / "curves.csv", saliency::format_curves_csv(curves));
            for (const auto& c : curves) {
                std::printf("%s:", std::string(saliency::selector_name(c.selector)).c_str());
                for (std::size_t i = 0; i < c.n_values.size(); ++i) std::printf(" n=%u %.4f", c.n_values[i], c.mean(i));
                std::printf("\n");
            }
        } else if (em_protocol == "concept") {
            if (em_method != "cortex" && em_method != "frequency" && em_method != "both")
                throw UsageError("concept protocol methods: cortex, frequency, both");
            auto ns = parse_values(em_n);
            if (ns.size() != 1) throw UsageError("concept protocol takes a single --n");
            const std::uint32_t n_concepts = data.world.config.concepts;
            std::ostringstream os;
            os.precision(17);
            os << "method,n,k,delta_accuracy,delta_probability,mean_masked,accuracy_before\n";
            for (std::string m : {"cortex", "frequency"}) {
                if (em_method != "both" && em_method != m) continue;
                std::vector<std::vector<TokenId>> sets;
                for (std::uint32_t c = 0; c < n_concepts; ++c) {
                    if (m == "cortex") {
                        auto records = data.train.indices_of(c);
                        auto set = saliency::explain_concept(explainer, cb, data.train.grids, records, c, em_sal.spec,
                                                             ns[0], em_k, em_seed, threads);
                        sets.push_back(saliency::token_ids(set.concept_tokens));
                    } else {
                        sets.push_back(saliency::token_ids(saliency::frequency_baseline(data.train, c, em_k, cb.size())));
                    }
                }
                auto r = saliency::concept_mask_eval(evaluator, cb, data.test, sets, policy, threads);
                os << m << ',' << ns[0] << ',' << em_k << ',' << r.delta_accuracy << ',' << r.delta_probability << ','
                   << r.mean_masked << ',' << r.accuracy_before << '\n';
                std::printf("%s: dA %.4f dP %.4f masked %.2f\n", m.c_str(), r.delta_accuracy, r.delta_probability,
                            r.mean_masked);
            }
            write_text(em_out / "concept_mask.csv", os.str());
        } else {
            throw UsageError("unknown protocol '" + em_protocol + "' (expected image or concept)");
        }
        write_run_record(em_out, *c_em);
    } else if (*c_fe) {
        require_independent(fe_explainer, fe_evaluator);
        auto data = read_dataset(fe_data);
        auto explainer = load_model(fe_explainer, data, "explainer");
        auto evaluator = load_model(fe_evaluator, data, "evaluator");
        auto ids = parse_values(fe_pairs);
        if (ids.empty() || ids.size() % 2) throw UsageError("--pairs needs an even number of concept ids");
        codebook_opt::FlipConfig fc;
        fc.pairs.clear();
        for (std::size_t i = 0; i < ids.size(); i += 2) fc.pairs.emplace_back(ids[i], ids[i + 1]);
        fc.images = fe_images;
        auto region = codebook_opt::RegionMask::parse(fe_region, data.world.config.side);
        auto pos = region.positions();
        fc.region_row = static_cast<std::uint32_t>(pos.front() / region.side);
        fc.region_col = static_cast<std::uint32_t>(pos.front() % region.side);
        fc.region_h = static_cast<std::uint32_t>(pos.back() / region.side) - fc.region_row + 1;
        fc.region_w = static_cast<std::uint32_t>(pos.back() % region.side) - fc.region_col + 1;
        fc.opt = fe_opt.resolve();
        auto rows = codebook_opt::flip_eval(explainer, evaluator, data.world.codebook, data.test, fc, threads);
        prepare_out(fe_out);
        write_text(fe_out / "flip.csv", codebook_opt::format_flip_csv(rows));
        write_run_record(fe_out, *c_fe);
        std::fputs(codebook_opt::format_flip_csv(rows).c_str(), stdout);
    } else if (*c_ed) {
        auto data = read_dataset(ed_data);
        auto model = load_model(ed_model, data, "model");
        (void)data.world.concept_spec(ed_target);
        const Dataset& split = split_of(data, ed_split);
        if (ed_record >= split.size()) throw UsageError("record " + std::to_string(ed_record) + " out of range");
        auto mask = codebook_opt::RegionMask::parse(ed_mask, data.world.config.side);
        auto cfg = ed_opt.resolve();
        cfg.snapshot_interval = ed_snap;
        auto result = codebook_opt::edit_grid(split.grids[ed_record], mask, ed_target, model, data.world.codebook, cfg, ed_cell);
        prepare_out(ed_out);
        for (const auto& [step, raster] : result.rasters) {
            char name[32];
            std::snprintf(name, sizeof name, "step_%06u.ppm", step);
            write_ppm(ed_out / name, raster);
        }
        write_text(ed_out / "trajectory.csv", codebook_opt::format_trajectory_csv(result.trajectory));
        write_run_record(ed_out, *c_ed);
        const auto& s = result.trajectory.snapshots;
        std::printf("p(target=%u): %.4f -> %.4f, %zu snapshots\n", ed_target, s.front().target_probability,
                    s.back().target_probability, s.size());
    } else if (*c_db) {
        auto data = read_dataset(db_data);
        auto model = load_model(db_model, data, "model");
        db_cfg.n_values = parse_values(db_n);
        db_cfg.saliency = db_sal.spec;
        bias::NeutralWorldSpec ns{db_lambda, db_cfg.group_a, db_cfg.group_b};
        auto neutral = bias::neutral_grids(data.world, ns, db_grids, db_neutral_seed);
        auto rows = bias::bias_report(model, data.world.codebook, data.train, neutral, db_cfg, threads);
        std::string text = bias::format_bias_text(rows, db_cfg, db_lambda);
        if (db_literal) {
            text += "\nhalved-scale delta (half the standard value):\n";
            for (const auto& r : rows) {
                auto fa = bias::token_frequency(neutral, r.tokens_a);
                auto fb = bias::token_frequency(neutral, r.tokens_b);
                std::vector<double> xa(fa.counts.begin(), fa.counts.end()), xb(fb.counts.begin(), fb.counts.end());
                text += "  Top-" + std::to_string(r.n) + ": " + fmt(bias::cliffs_delta_literal(xa, xb)) + "\n";
            }
        }
        prepare_out(db_out);
        write_text(db_out / "bias.csv", bias::format_bias_csv(rows, db_cfg.seed));
        write_text(db_out / "bias.txt", text);
        write_run_record(db_out, *c_db);
        std::fputs(text.c_str(), stdout);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "cortex: usage error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "cortex: invalid configuration: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "cortex: error: " << e.what() << '\n';
        return 1;
    }
}
