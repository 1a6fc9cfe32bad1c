#include "cortex/dataset.hpp"

#include <json.hpp>

#include "cortex/binio.hpp"
#include "cortex/error.hpp"
#include "cortex/parallel.hpp"

namespace cortex {

using json = nlohmann::json;

std::vector<std::size_t> Dataset::indices_of(std::uint32_t concept_id) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == concept_id) out.push_back(i);
    }
    return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
    Dataset out;
    out.side = side;
    for (std::size_t i : indices) {
        out.grids.push_back(grids.at(i));
        out.labels.push_back(labels.at(i));
        out.truth.push_back(truth.at(i));
    }
    return out;
}

Dataset generate_split(const World& world, const std::string& split, std::uint32_t per_concept,
                       unsigned threads) {
    if (per_concept == 0) throw ConfigError("dataset: per-concept count for split '" + split + "' must be positive");
    const std::uint32_t n = world.config.concepts;
    const std::size_t total = std::size_t{per_concept} * n;
    Dataset data;
    data.side = world.config.side;
    data.grids.resize(total);
    data.labels.resize(total);
    data.truth.resize(total);
    const std::string purpose = "grid/" + split;
    parallel_for(total, threads, [&](std::size_t r) {
        auto label = static_cast<std::uint32_t>(r % n);
        Stream rng(world.config.seed, purpose, r);
        auto [grid, truth] = sample_grid(world, label, rng);
        data.grids[r] = std::move(grid);
        data.labels[r] = label;
        data.truth[r] = std::move(truth);
    });
    return data;
}

DatasetBundle gen_dataset(const World& world, SplitCounts per_concept, unsigned threads) {
    DatasetBundle b{world, per_concept, {}, {}, {}};
    b.train = generate_split(world, "train", per_concept.train, threads);
    b.val = generate_split(world, "val", per_concept.val, threads);
    b.test = generate_split(world, "test", per_concept.test, threads);
    return b;
}

std::vector<std::uint8_t> encode_grids(const Dataset& data) {
    binio::Writer w;
    for (const auto& g : data.grids) {
        for (TokenId t : g.tokens) w.u16(static_cast<std::uint16_t>(t));
    }
    return w.buffer();
}

std::vector<std::uint8_t> encode_labels(const Dataset& data) {
    binio::Writer w;
    for (auto l : data.labels) w.u16(static_cast<std::uint16_t>(l));
    return w.buffer();
}

std::vector<std::uint8_t> encode_truth(const Dataset& data) {
    binio::Writer w;
    for (const auto& t : data.truth) {
        for (TokenKind k : t.kinds) w.u8(static_cast<std::uint8_t>(k));
    }
    return w.buffer();
}

namespace {

json config_to_json(const WorldConfig& c) {
    return json{{"codebook_size", c.codebook_size},     {"dim", c.dim},
                {"side", c.side},                       {"concepts", c.concepts},
                {"signature_size", c.signature_size},   {"context_pool", c.context_pool},
                {"context_size", c.context_size},       {"signature_plants", c.signature_plants},
                {"context_plants", c.context_plants},   {"background_range", c.background_range},
                {"seed", c.seed}};
}

WorldConfig config_from_json(const json& j) {
    WorldConfig c;
    c.codebook_size = j.at("codebook_size").get<std::uint32_t>();
    c.dim = j.at("dim").get<std::uint32_t>();
    c.side = j.at("side").get<std::uint32_t>();
    c.concepts = j.at("concepts").get<std::uint32_t>();
    c.signature_size = j.at("signature_size").get<std::uint32_t>();
    c.context_pool = j.at("context_pool").get<std::uint32_t>();
    c.context_size = j.at("context_size").get<std::uint32_t>();
    c.signature_plants = j.at("signature_plants").get<std::uint32_t>();
    c.context_plants = j.at("context_plants").get<std::uint32_t>();
    c.background_range = j.at("background_range").get<std::uint32_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

constexpr const char* kSplits[] = {"train", "val", "test"};

template <class Bundle>
auto& split_of(Bundle& b, std::string_view name) {
    if (name == "train") return b.train;
    if (name == "val") return b.val;
    return b.test;
}

Dataset decode_split(const std::filesystem::path& dir, const std::string& name, std::size_t records,
                     const World& world) {
    const std::uint32_t m = world.config.side;
    const std::size_t cells = std::size_t{m} * m;
    Dataset data;
    data.side = m;

    auto grid_path = dir / (name + "_grids.bin");
    auto grid_bytes = binio::read_file(grid_path);
    if (grid_bytes.size() != records * cells * 2) {
        throw FormatError(grid_path.string() + ": expected " + std::to_string(records * cells * 2) + " bytes, found " +
                          std::to_string(grid_bytes.size()));
    }
    binio::Reader gr(grid_bytes, grid_path.string());
    for (std::size_t r = 0; r < records; ++r) {
        TokenGrid g{m, std::vector<TokenId>(cells)};
        for (auto& t : g.tokens) {
            t = gr.u16();
            if (t >= world.config.codebook_size) gr.fail("token index out of range");
        }
        data.grids.push_back(std::move(g));
    }

    auto label_path = dir / (name + "_labels.bin");
    auto label_bytes = binio::read_file(label_path);
    if (label_bytes.size() != records * 2) throw FormatError(label_path.string() + ": record count mismatch");
    binio::Reader lr(label_bytes, label_path.string());
    for (std::size_t r = 0; r < records; ++r) {
        std::uint32_t l = lr.u16();
        if (l >= world.config.concepts) lr.fail("label out of range");
        data.labels.push_back(l);
    }

    auto truth_path = dir / (name + "_truth.bin");
    auto truth_bytes = binio::read_file(truth_path);
    if (truth_bytes.size() != records * cells) throw FormatError(truth_path.string() + ": record count mismatch");
    binio::Reader tr(truth_bytes, truth_path.string());
    for (std::size_t r = 0; r < records; ++r) {
        GroundTruth t{std::vector<TokenKind>(cells)};
        for (auto& k : t.kinds) {
            std::uint8_t v = tr.u8();
            if (v > 2) tr.fail("unknown token kind");
            k = static_cast<TokenKind>(v);
        }
        data.truth.push_back(std::move(t));
    }
    return data;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    json manifest;
    manifest["format"] = "cortex-dataset";
    manifest["version"] = 1;
    manifest["seed"] = bundle.world.config.seed;
    manifest["config"] = config_to_json(bundle.world.config);
    manifest["per_concept"] = {{"train", bundle.per_concept.train},
                               {"val", bundle.per_concept.val},
                               {"test", bundle.per_concept.test}};
    json concepts = json::array();
    for (const auto& c : bundle.world.concepts) {
        concepts.push_back({{"id", c.id}, {"signature", c.signature}, {"context", c.context}});
    }
    manifest["concepts"] = concepts;
    manifest["codebook"] = "codebook.bin";

    for (const char* name : kSplits) {
        const Dataset& data = split_of(bundle, name);
        std::string s(name);
        manifest["splits"][s] = {{"records", data.size()},
                                 {"grids", s + "_grids.bin"},
                                 {"labels", s + "_labels.bin"},
                                 {"truth", s + "_truth.bin"}};
        binio::write_file_atomic(dir / (s + "_grids.bin"), encode_grids(data));
        binio::write_file_atomic(dir / (s + "_labels.bin"), encode_labels(data));
        binio::write_file_atomic(dir / (s + "_truth.bin"), encode_truth(data));
    }
    save_codebook(dir / "codebook.bin", bundle.world.codebook);
    binio::write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

DatasetBundle read_dataset(const std::filesystem::path& dir) {
    auto manifest_path = dir / "manifest.json";
    auto bytes = binio::read_file(manifest_path);
    json manifest;
    try {
        manifest = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    DatasetBundle bundle;
    try {
        if (manifest.at("format") != "cortex-dataset") throw FormatError(manifest_path.string() + ": not a dataset manifest");
        if (manifest.at("version") != 1) throw VersionError(manifest_path.string() + ": unsupported version");
        WorldConfig cfg = config_from_json(manifest.at("config"));
        try {
            cfg.validate();
        } catch (const ConfigError& e) {
            throw FormatError(manifest_path.string() + ": " + e.what());
        }
        const auto& concepts = manifest.at("concepts");
        if (concepts.size() != cfg.concepts) {
            throw FormatError(manifest_path.string() + ": manifest lists " + std::to_string(concepts.size()) +
                              " concepts but config declares " + std::to_string(cfg.concepts));
        }
        bundle.world = build_world(cfg);
        for (std::size_t i = 0; i < concepts.size(); ++i) {
            if (concepts[i].at("signature").get<std::vector<TokenId>>() != bundle.world.concepts[i].signature ||
                concepts[i].at("context").get<std::vector<TokenId>>() != bundle.world.concepts[i].context) {
                throw FormatError(manifest_path.string() + ": concept " + std::to_string(i) +
                                  " token sets do not match the seeded world");
            }
        }
        Codebook stored = load_codebook(dir / manifest.at("codebook").get<std::string>());
        if (!(stored == bundle.world.codebook)) {
            throw FormatError((dir / "codebook.bin").string() + ": codebook does not match manifest seed");
        }
        const auto& pc = manifest.at("per_concept");
        bundle.per_concept = {pc.at("train").get<std::uint32_t>(), pc.at("val").get<std::uint32_t>(),
                              pc.at("test").get<std::uint32_t>()};
        for (const char* name : kSplits) {
            auto records = manifest.at("splits").at(name).at("records").get<std::size_t>();
            split_of(bundle, name) = decode_split(dir, name, records, bundle.world);
        }
    } catch (const json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    return bundle;
}

}  // namespace cortex
