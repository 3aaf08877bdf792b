#include "c2v/cli.hpp"

#include "c2v/binary_io.hpp"
#include "c2v/checkpoint.hpp"
#include "c2v/config.hpp"
#include "c2v/probe.hpp"
#include "c2v/targets.hpp"
#include "c2v/trainer.hpp"
#include "c2v/unit_store.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace c2v {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

ExtractResult extract_dataset(const ExtractOptions& opt) {
    if (opt.out_dir.empty()) throw ConfigError("extract needs an output directory");
    fs::create_directories(opt.out_dir);
    const auto corpus = synthesize_corpus(opt.corpus, opt.seed);
    const auto codec = train_rvq(corpus.stacked_features(), opt.num_stages, opt.codebook_size, opt.kmeans_iters, opt.seed);

    std::vector<NamedSequence> seqs;
    seqs.reserve(corpus.ids.size());
    for (std::size_t u = 0; u < corpus.ids.size(); ++u) {
        auto units = encode(codec, corpus.features[u].cast<double>());
        seqs.push_back({corpus.ids[u], std::move(units)});
    }

    ExtractResult r;
    const fs::path dir(opt.out_dir);
    r.dataset = (dir / "dataset.c2v").string();
    r.codec = (dir / "codec.c2vc").string();
    r.labels = (dir / "labels.txt").string();
    r.manifest = pack_dataset(seqs, r.dataset);
    save_codec(codec, r.codec);
    write_labels(r.labels, corpus);
    return r;
}

namespace {

struct Usage : Error {
    using Error::Error;
};

std::string dashed(std::string key) {
    for (auto& c : key)
        if (c == '_') c = '-';
    return key;
}

std::string output_root() {
    if (const char* env = std::getenv("C2V_OUT"); env && *env) return env;
    return "c2v_out";
}

std::string default_path(const std::string& stage, const std::string& file) {
    return (fs::path(output_root()) / stage / file).string();
}

/// Options shared by every subcommand plus a key->value map filled by flags
/// that mirror config keys.
struct Command {
    std::string config_path;
    std::string out_dir;
    bool json = false;
    std::map<std::string, std::string> flags;

    void add_keys(CLI::App* app, const std::vector<std::pair<std::string, std::string>>& keys) {
        for (const auto& [key, help] : keys) app->add_option("--" + dashed(key), flags[key], help);
    }
    Config resolve(const CLI::App* app) const {
        Config c = config_path.empty() ? Config{} : Config::load(config_path);
        for (const auto& [key, value] : flags)
            if (app->count("--" + dashed(key))) c.set(key, value);
        return c;
    }
};

void add_common(CLI::App* app, Command& cmd) {
    app->add_option("--config", cmd.config_path, "key = value config file; flags override it");
    app->add_option("--out", cmd.out_dir, "output directory (default: $C2V_OUT/<subcommand>)");
    app->add_flag("--json", cmd.json, "print a machine-readable summary");
}

std::string checksum_or_empty(const std::string& path) {
    std::error_code ec;
    if (path.empty() || !fs::is_regular_file(path, ec)) return "";
    return hex64(file_checksum(path));
}

void write_provenance(const std::string& dir, const std::string& subcommand, const std::vector<std::string>& args,
                      const std::map<std::string, std::string>& config, const std::vector<std::string>& inputs,
                      const std::vector<std::string>& outputs) {
    json j;
    j["tool"] = "c2v";
    j["version"] = kVersion;
    j["subcommand"] = subcommand;
    j["args"] = args;
    j["config"] = config;
    j["config_hash"] = hex64(config_hash(config));
    std::vector<std::string> seeds;
    for (const auto& [k, v] : config)
        if (k.find("seed") != std::string::npos) seeds.push_back(k + "=" + v);
    j["seeds"] = seeds;
    j["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                 std::to_string(EIGEN_MINOR_VERSION);
    j["compiler"] = __VERSION__;
    json in = json::object(), out = json::object();
    for (const auto& p : inputs) in[p] = checksum_or_empty(p);
    for (const auto& p : outputs) out[p] = checksum_or_empty(p);
    j["inputs"] = in;
    j["outputs"] = out;
    std::ofstream f(fs::path(dir) / "provenance.json", std::ios::trunc);
    f << j.dump(2) << '\n';
}

std::string read_magic(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path);
    char m[4] = {};
    in.read(m, 4);
    if (in.gcount() != 4) throw FormatError(path + " is too short to be a c2v artifact");
    return std::string(m, 4);
}

std::vector<std::uint32_t> parse_sizes(const std::string& s) {
    std::vector<std::uint32_t> out;
    std::istringstream is(s);
    std::string part;
    while (std::getline(is, part, ',')) out.push_back(static_cast<std::uint32_t>(std::stoul(part)));
    return out;
}

// ---------------------------------------------------------------------------

int cmd_extract(const Command& cmd, const CLI::App* app, const std::vector<std::string>& args, std::ostream& out) {
    static const std::set<std::string> known = {"seed", "utterances", "min_frames", "max_frames", "feature_dim",
                                                "phonemes", "speakers", "noise", "speaker_scale", "min_segment",
                                                "max_segment", "frame_rate", "stages", "codebook_size", "kmeans_iters"};
    const auto cfg = cmd.resolve(app);
    cfg.require_known(known);
    ExtractOptions o;
    auto& c = o.corpus;
    o.seed = cfg.get_u64("seed", 0);
    c.num_utterances = cfg.get_u64("utterances", c.num_utterances);
    c.min_frames = cfg.get_u64("min_frames", c.min_frames);
    c.max_frames = cfg.get_u64("max_frames", c.max_frames);
    c.feature_dim = cfg.get_u64("feature_dim", c.feature_dim);
    c.num_phonemes = cfg.get_u64("phonemes", c.num_phonemes);
    c.num_speakers = cfg.get_u64("speakers", c.num_speakers);
    c.noise = cfg.get_double("noise", c.noise);
    c.speaker_scale = cfg.get_double("speaker_scale", c.speaker_scale);
    c.min_segment = cfg.get_u64("min_segment", c.min_segment);
    c.max_segment = cfg.get_u64("max_segment", c.max_segment);
    c.frame_rate_hz = static_cast<int>(cfg.get_u64("frame_rate", static_cast<std::uint64_t>(c.frame_rate_hz)));
    o.num_stages = cfg.get_u64("stages", o.num_stages);
    o.codebook_size = cfg.get_u64("codebook_size", o.codebook_size);
    o.kmeans_iters = static_cast<int>(cfg.get_u64("kmeans_iters", static_cast<std::uint64_t>(o.kmeans_iters)));
    o.out_dir = cmd.out_dir.empty() ? default_path("extract", "") : cmd.out_dir;

    const auto r = extract_dataset(o);
    const auto report = storage_report(r.manifest);
    std::map<std::string, std::string> kv = cfg.entries();
    kv["seed"] = std::to_string(o.seed);
    write_provenance(o.out_dir, "extract", args, kv, {}, {r.dataset, r.codec, r.labels});
    if (cmd.json) {
        json j{{"dataset", r.dataset}, {"codec", r.codec}, {"labels", r.labels},
               {"utterances", r.manifest.utterance_ids.size()}, {"frames", r.manifest.total_frames()},
               {"checksum", hex64(file_checksum(r.dataset))}, {"ratio", report.ratio}};
        out << j.dump() << '\n';
    } else {
        out << "wrote " << r.dataset << " (" << r.manifest.utterance_ids.size() << " utterances, "
            << r.manifest.total_frames() << " frames, checksum " << hex64(file_checksum(r.dataset)) << ")\n";
        out << "wrote " << r.codec << "\nwrote " << r.labels << '\n';
    }
    return 0;
}

int cmd_pack(const Command& cmd, const CLI::App* app, const std::vector<std::string>& args, std::ostream& out) {
    static const std::set<std::string> known = {"input", "layout", "codebook_sizes", "frame_rate", "id"};
    const auto cfg = cmd.resolve(app);
    cfg.require_known(known);
    const auto input = cfg.get("input", "");
    if (input.empty()) throw Usage("pack needs --input");
    ImportSchema schema;
    const auto layout = cfg.get("layout", "text");
    if (layout == "text") schema.layout = ImportSchema::Layout::text;
    else if (layout == "raw_int32" || layout == "raw") schema.layout = ImportSchema::Layout::raw_int32;
    else throw ConfigError("unknown layout '" + layout + "' (expected text or raw_int32)");
    if (cfg.has("codebook_sizes")) schema.codebook_sizes = parse_sizes(cfg.get("codebook_sizes", ""));
    schema.frame_rate_hz = static_cast<int>(cfg.get_u64("frame_rate", 0));
    schema.default_id = cfg.get("id", fs::path(input).stem().string());

    const auto seqs = import_external_units(input, schema);
    const auto dir = cmd.out_dir.empty() ? default_path("pack", "") : cmd.out_dir;
    fs::create_directories(dir);
    const auto path = (fs::path(dir) / "dataset.c2v").string();
    const auto manifest = pack_dataset(seqs, path);
    write_provenance(dir, "pack", args, cfg.entries(), {input}, {path});
    if (cmd.json) {
        out << json{{"dataset", path}, {"utterances", seqs.size()}, {"frames", manifest.total_frames()},
                    {"checksum", hex64(file_checksum(path))}}
                   .dump()
            << '\n';
    } else {
        out << "wrote " << path << " (" << seqs.size() << " utterances, " << manifest.total_frames() << " frames)\n";
    }
    return 0;
}

int cmd_pretrain(const Command& cmd, const CLI::App* app, const std::vector<std::string>& args, std::ostream& out,
                 std::uint64_t stop_at, const std::string& resume) {
    auto cfg = cmd.resolve(app);
    const bool default_data = !cfg.has("dataset");
    if (default_data) cfg.set("dataset", default_path("extract", "dataset.c2v"));
    if (default_data && !cfg.has("init_codec") && fs::exists(default_path("extract", "codec.c2vc")))
        cfg.set("init_codec", default_path("extract", "codec.c2vc"));
    const auto config = TrainConfig::from_config(cfg);
    PretrainOptions po;
    po.out_dir = cmd.out_dir.empty() ? default_path("pretrain", "") : cmd.out_dir;
    po.stop_at = stop_at;
    po.resume_from = resume;
    if (!cmd.json) {
        po.on_log = [&out](const TrainMetrics& m) {
            out << "step " << m.step << "  loss " << m.loss << "  lr " << m.lr << "  masked " << m.masked_frames
                << "  frames/s " << static_cast<long long>(m.frames_per_second) << '\n';
        };
    }
    const auto r = pretrain(config, po);
    std::vector<std::string> inputs{config.dataset};
    if (!config.targets.empty()) inputs.push_back(config.targets);
    if (!config.init_codec.empty()) inputs.push_back(config.init_codec);
    if (!resume.empty()) inputs.push_back(resume);
    auto kv = config.to_map();
    write_provenance(po.out_dir, "pretrain", args, kv, inputs, {r.final_checkpoint});
    if (cmd.json) {
        json j{{"checkpoint", r.final_checkpoint}, {"config_hash", hex64(r.config_hash)},
               {"heldout_accuracy", r.heldout.accuracy}, {"chance", r.heldout.chance},
               {"heldout_masked_frames", r.heldout.masked_frames},
               {"final_loss", r.metrics.empty() ? 0.0 : r.metrics.back().loss}};
        out << j.dump() << '\n';
    } else {
        out << "checkpoint " << r.final_checkpoint << "\nheld-out masked accuracy " << r.heldout.accuracy
            << " (chance " << r.heldout.chance << ", " << r.heldout.masked_frames << " masked frames)\n";
    }
    return 0;
}

int cmd_relabel(const Command& cmd, const CLI::App* app, const std::vector<std::string>& args, std::ostream& out) {
    static const std::set<std::string> known = {"checkpoint", "dataset", "layer", "k", "sample_fraction", "seed",
                                                "max_iters"};
    const auto cfg = cmd.resolve(app);
    cfg.require_known(known);
    const auto ck_path = cfg.get("checkpoint", default_path("pretrain", "last.c2vk"));
    const auto data_path = cfg.get("dataset", default_path("extract", "dataset.c2v"));
    RelabelOptions o;
    if (cfg.has("layer")) {
        o.layer_index = cfg.get_u64("layer", 1);
    } else {
        const auto ck = load_checkpoint(ck_path);
        o.layer_index = std::max<std::size_t>(1, ck.encoder.n_layers / 2);
    }
    o.k = cfg.get_u64("k", o.k);
    o.sample_fraction = cfg.get_double("sample_fraction", o.sample_fraction);
    o.seed = cfg.get_u64("seed", o.seed);
    o.max_iters = static_cast<int>(cfg.get_u64("max_iters", static_cast<std::uint64_t>(o.max_iters)));

    const auto dir = cmd.out_dir.empty() ? default_path("relabel", "") : cmd.out_dir;
    fs::create_directories(dir);
    const auto path = (fs::path(dir) / "targets.c2vt").string();
    const auto dataset = PackedDataset::open(data_path, LoadMode::in_memory);
    const auto r = relabel_dataset(ck_path, dataset, o, path);
    auto kv = r.provenance;
    kv["dataset"] = data_path;
    kv["checkpoint"] = ck_path;
    write_provenance(dir, "relabel", args, kv, {ck_path, data_path}, {path});
    if (cmd.json) {
        out << json{{"targets", path}, {"inertia", r.model.inertia}, {"iterations", r.model.iterations},
                    {"sampled_utterances", r.sampled_utterances}, {"sampled_frames", r.sampled_frames}}
                   .dump()
            << '\n';
    } else {
        out << "wrote " << path << " (layer " << o.layer_index << ", k=" << o.k << ", " << r.sampled_frames
            << " sampled frames, inertia " << r.model.inertia << ")\n";
    }
    return 0;
}

int cmd_probe(const Command& cmd, const CLI::App* app, const std::vector<std::string>& args, std::ostream& out) {
    static const std::set<std::string> known = {"checkpoint", "dataset", "labels", "codec", "task", "seed", "epochs",
                                                "lr", "heldout_fraction"};
    const auto cfg = cmd.resolve(app);
    cfg.require_known(known);
    ProbeRunOptions o;
    o.checkpoint = cfg.get("checkpoint", default_path("pretrain", "last.c2vk"));
    o.dataset = cfg.get("dataset", default_path("extract", "dataset.c2v"));
    o.labels = cfg.get("labels", default_path("extract", "labels.txt"));
    o.codec = cfg.get("codec", default_path("extract", "codec.c2vc"));
    const auto task = cfg.get("task", "all");
    if (task != "all") o.tasks = {parse_probe_task(task)};
    o.seed = cfg.get_u64("seed", o.seed);
    o.train.epochs = cfg.get_u64("epochs", o.train.epochs);
    o.train.lr = cfg.get_double("lr", o.train.lr);
    o.heldout_fraction = cfg.get_double("heldout_fraction", o.heldout_fraction);

    const auto rows = run_probe(o);
    const auto dir = cmd.out_dir.empty() ? default_path("probe", "") : cmd.out_dir;
    fs::create_directories(dir);
    const auto path = (fs::path(dir) / "probe_results.txt").string();
    write_probe_results(path, rows);
    auto kv = cfg.entries();
    kv["seed"] = std::to_string(o.seed);
    write_provenance(dir, "probe", args, kv, {o.checkpoint, o.dataset, o.labels, o.codec}, {path});
    if (cmd.json) {
        json j = json::array();
        for (const auto& r : rows)
            j.push_back({{"task", to_string(r.task)}, {"strategy", r.strategy}, {"seed", r.seed},
                         {"accuracy", r.accuracy}, {"baseline_accuracy", r.baseline_accuracy},
                         {"majority", r.majority}, {"alpha", r.alpha}});
        out << json{{"results", path}, {"rows", j}}.dump() << '\n';
    } else {
        out << format_probe_table(rows) << "wrote " << path << '\n';
    }
    return 0;
}

int cmd_bench(const Command& cmd, const CLI::App* app, const std::vector<std::string>& args, std::ostream& out) {
    static const std::set<std::string> known = {"dataset", "repeats"};
    const auto cfg = cmd.resolve(app);
    cfg.require_known(known);
    const auto path = cfg.get("dataset", default_path("extract", "dataset.c2v"));
    const auto r = bench_throughput(path, static_cast<int>(cfg.get_u64("repeats", 3)));
    const auto dir = cmd.out_dir.empty() ? default_path("bench", "") : cmd.out_dir;
    fs::create_directories(dir);
    write_provenance(dir, "bench", args, cfg.entries(), {path}, {});
    if (cmd.json) {
        out << json{{"utterances", r.utterances}, {"frames", r.frames}, {"in_ram_fps", r.in_ram_frames_per_second},
                    {"streaming_fps", r.streaming_frames_per_second}, {"ratio", r.ratio},
                    {"checksums_match", r.in_ram_checksum == r.streaming_checksum}}
                   .dump()
            << '\n';
    } else {
        out << r.to_text();
    }
    return r.in_ram_checksum == r.streaming_checksum ? 0 : 2;
}

int cmd_inspect(const std::string& path, bool as_json, std::ostream& out) {
    const auto magic = read_magic(path);
    if (magic == std::string(kUnitMagic, 4)) {
        const auto ds = PackedDataset::open(path, LoadMode::seek);
        const auto report = storage_report(ds.manifest());
        if (as_json) {
            out << json{{"kind", "dataset"}, {"utterances", ds.size()}, {"frames", ds.manifest().total_frames()},
                        {"num_codebooks", ds.manifest().num_codebooks}, {"ratio", report.ratio},
                        {"ratio_with_header", report.ratio_with_header},
                        {"theoretical_ratio", report.theoretical_ratio}}
                       .dump()
                << '\n';
        } else {
            out << "unit dataset " << path << '\n' << ds.manifest().to_text() << '\n' << format_storage_report(report);
        }
    } else if (magic == std::string(kTargetMagic, 4)) {
        const auto store = read_target_store(path);
        if (as_json) {
            out << json{{"kind", "targets"}, {"utterances", store.labels.size()}, {"provenance", store.provenance}}
                       .dump()
                << '\n';
        } else {
            out << "target store " << path << "\nutterances " << store.labels.size() << '\n';
            for (const auto& [k, v] : store.provenance) out << k << " " << v << '\n';
        }
    } else if (magic == "C2VK") {
        const auto ck = load_checkpoint(path);
        std::size_t count = 0;
        for (const auto* t : ck.params.tensors()) count += static_cast<std::size_t>(t->size());
        if (as_json) {
            out << json{{"kind", "checkpoint"}, {"step", ck.step}, {"parameters", count},
                        {"encoder", ck.encoder.to_map()}, {"train", ck.train_config},
                        {"optimizer", ck.optimizer.has_value()}, {"teacher", ck.teacher.has_value()}}
                       .dump()
                << '\n';
        } else {
            out << "checkpoint " << path << "\nstep " << ck.step << "\nparameters " << count << '\n';
            for (const auto& [k, v] : ck.encoder.to_map()) out << k << " " << v << '\n';
            for (const auto& [k, v] : ck.train_config) out << "train." << k << " " << v << '\n';
            out << "optimizer state " << (ck.optimizer ? "yes" : "no") << "\nteacher state "
                << (ck.teacher ? "yes" : "no") << '\n';
        }
    } else if (magic == "C2VC") {
        const auto codec = load_codec(path);
        if (as_json) {
            out << json{{"kind", "codec"}, {"stages", codec.stages.size()},
                        {"codebook_size", codec.stages.empty() ? 0 : codec.stages[0].rows()}, {"dim", codec.dim()},
                        {"frame_rate_hz", codec.frame_rate_hz}}
                       .dump()
                << '\n';
        } else {
            out << "toy codec " << path << "\nstages " << codec.stages.size() << "\ncodebook_size "
                << (codec.stages.empty() ? 0 : codec.stages[0].rows()) << "\ndim " << codec.dim()
                << "\nframe_rate_hz " << codec.frame_rate_hz << '\n';
        }
    } else {
        throw FormatError(path + " is not a c2v artifact (unknown magic)");
    }
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"c2v: masked prediction pretraining over discrete codec units", "c2v"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    Command extract_cmd, pack_cmd, pretrain_cmd, relabel_cmd, probe_cmd, bench_cmd;
    std::uint64_t stop_at = 0;
    std::string resume, inspect_path;
    bool inspect_json = false;

    auto* extract = app.add_subcommand("extract", "synthesize a corpus, fit the toy codec and pack its units");
    add_common(extract, extract_cmd);
    extract_cmd.add_keys(extract, {{"seed", "corpus and codec seed"},
                                   {"utterances", "number of utterances"},
                                   {"min_frames", "shortest utterance"},
                                   {"max_frames", "longest utterance"},
                                   {"feature_dim", "feature dimension"},
                                   {"phonemes", "phoneme classes"},
                                   {"speakers", "speakers"},
                                   {"noise", "Gaussian noise level"},
                                   {"speaker_scale", "speaker offset scale"},
                                   {"min_segment", "shortest phoneme segment"},
                                   {"max_segment", "longest phoneme segment"},
                                   {"frame_rate", "frame rate in Hz"},
                                   {"stages", "RVQ stages (codebooks)"},
                                   {"codebook_size", "codewords per stage"},
                                   {"kmeans_iters", "Lloyd iterations per stage"}});

    auto* pack = app.add_subcommand("pack", "import externally extracted units into a packed dataset");
    add_common(pack, pack_cmd);
    pack_cmd.add_keys(pack, {{"input", "text or raw int32 unit file"},
                             {"layout", "text | raw_int32"},
                             {"codebook_sizes", "comma-separated vocabulary sizes"},
                             {"frame_rate", "frame rate in Hz"},
                             {"id", "utterance id when the file names none"}});

    auto* pretrain_app = app.add_subcommand("pretrain", "masked-prediction pretraining");
    add_common(pretrain_app, pretrain_cmd);
    {
        std::vector<std::pair<std::string, std::string>> keys;
        for (const auto& k : TrainConfig::known_keys()) keys.emplace_back(k, "config key " + k);
        pretrain_cmd.add_keys(pretrain_app, keys);
    }
    pretrain_app->add_option("--stop-at", stop_at, "stop after this many steps (resumable)");
    pretrain_app->add_option("--resume", resume, "checkpoint to resume from");

    auto* relabel = app.add_subcommand("relabel", "k-means targets from a checkpoint's latents");
    add_common(relabel, relabel_cmd);
    relabel_cmd.add_keys(relabel, {{"checkpoint", "encoder checkpoint"},
                                   {"dataset", "packed dataset"},
                                   {"layer", "layer whose outputs are clustered"},
                                   {"k", "clusters"},
                                   {"sample_fraction", "fraction of utterances used to fit"},
                                   {"seed", "sampling and k-means seed"},
                                   {"max_iters", "Lloyd iteration cap"}});

    auto* probe = app.add_subcommand("probe", "frozen-encoder probes against the raw-unit baseline");
    add_common(probe, probe_cmd);
    probe_cmd.add_keys(probe, {{"checkpoint", "encoder checkpoint"},
                               {"dataset", "packed dataset"},
                               {"labels", "label sidecar"},
                               {"codec", "codec for the raw-unit baseline"},
                               {"task", "phoneme | speaker | all"},
                               {"seed", "split and probe seed"},
                               {"epochs", "full-batch probe epochs"},
                               {"lr", "probe learning rate"},
                               {"heldout_fraction", "held-out utterance fraction"}});

    auto* bench = app.add_subcommand("bench", "in-RAM versus streaming loader throughput");
    add_common(bench, bench_cmd);
    bench_cmd.add_keys(bench, {{"dataset", "packed dataset"}, {"repeats", "timing repeats"}});

    auto* inspect = app.add_subcommand("inspect", "describe any c2v artifact");
    inspect->add_option("file", inspect_path, "dataset, target store, checkpoint or codec")->required();
    inspect->add_flag("--json", inspect_json, "machine-readable output");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, err, err);
        return 1;
    }

    try {
        if (*extract) return cmd_extract(extract_cmd, extract, args, out);
        if (*pack) return cmd_pack(pack_cmd, pack, args, out);
        if (*pretrain_app) return cmd_pretrain(pretrain_cmd, pretrain_app, args, out, stop_at, resume);
        if (*relabel) return cmd_relabel(relabel_cmd, relabel, args, out);
        if (*probe) return cmd_probe(probe_cmd, probe, args, out);
        if (*bench) return cmd_bench(bench_cmd, bench, args, out);
        if (*inspect) return cmd_inspect(inspect_path, inspect_json, out);
    } catch (const Usage& e) {
        err << "usage error: " << e.what() << '\n' << app.help();
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, std::cout, std::cerr);
}

}  // namespace c2v
