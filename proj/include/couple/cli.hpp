#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "trainer.hpp"

namespace couple::cli {

namespace fs = std::filesystem;

inline constexpr const char* tool_version = "1.0.0";

/// File layout of one run directory.
struct RunPaths {
    fs::path root;

    fs::path config() const { return root / "config.json"; }
    fs::path data() const { return root / "data"; }
    fs::path source_manifest() const { return data() / "source.json"; }
    fs::path target_manifest() const { return data() / "target.json"; }
    fs::path target_eval_labels() const { return data() / "target_eval.lbl"; }
    fs::path synth_report() const { return root / "synth.json"; }
    fs::path graph() const { return root / "graph.json"; }
    fs::path graph_report() const { return root / "graph_report.json"; }
    fs::path diffusion() const { return root / "diffusion.json"; }
    fs::path warmup_checkpoint() const { return root / "warmup.cpl"; }
    fs::path checkpoint() const { return root / "model.cpl"; }
    fs::path history() const { return root / "history.jsonl"; }
    fs::path train_report() const { return root / "train_report.json"; }
    fs::path walks() const { return root / "walks.json"; }
    fs::path codes(const std::string& domain) const { return root / "codes" / (domain + ".hsh"); }
    fs::path code_ids(const std::string& domain) const { return root / "codes" / (domain + ".ids"); }
    fs::path index() const { return root / "index.hsh"; }
    fs::path index_ids() const { return root / "index.ids"; }
    fs::path query() const { return root / "query.json"; }
    fs::path metrics() const { return root / "metrics.json"; }
    fs::path curves() const { return root / "curves"; }
    fs::path speed() const { return root / "speed.json"; }
    fs::path sweep() const { return root / "sweep.json"; }
    fs::path sweep_csv() const { return root / "sweep.csv"; }
};

inline RunPaths paths_for(const RunConfig& cfg) { return {run_directory(cfg)}; }

inline void write_json(const fs::path& path, const nlohmann::json& j)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorCode::io, "cannot write '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

inline nlohmann::json read_json(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::io, "missing input '" + path.string() + "'");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), ErrorCode::format, "'" + path.string() + "' is not valid JSON");
    return j;
}

inline void require_input(const fs::path& path, const std::string& producer)
{
    require(fs::exists(path), ErrorCode::io,
            "missing input '" + path.string() + "'; run `couple " + producer + "` first");
}

/// Envelope shared by every report: the resolved config and run metadata.
/// Nothing time-dependent goes in, so reports of identical runs are
/// byte-identical.
inline nlohmann::json report_header(const RunConfig& cfg, const std::string& command)
{
    return {{"command", command},
            {"run", {{"id", config_hash_hex(cfg)}, {"seed", cfg.seed}, {"tool_version", tool_version}}},
            {"config", config_to_json(cfg)}};
}

inline std::vector<std::string> prepare_run(const RunConfig& cfg)
{
    auto warnings = cfg.validate();
    const auto p = paths_for(cfg);
    fs::create_directories(p.root);
    write_json(p.config(), config_to_json(cfg));
    return warnings;
}

// ---------------------------------------------------------------------------
// Stage data
// ---------------------------------------------------------------------------

/// Writes the task of `cfg` into the run's data directory. Features are
/// stored as float32, so every later stage reads the same values.
inline nlohmann::json cmd_synth(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    TransferTask task = load_task(cfg);
    task.source.validate();
    task.target.validate();
    save_dataset(task.source, p.data(), "source");
    save_dataset(task.target, p.data(), "target");
    if (!task.hidden_target_labels.empty()) write_labels(p.target_eval_labels(), task.hidden_target_labels);

    nlohmann::json rep = report_header(cfg, "synth");
    rep["warnings"] = warnings;
    rep["source"] = {{"n", task.source.size()}, {"d", task.source.dim()}, {"num_classes", task.source.num_classes}};
    rep["target"] = {{"n", task.target.size()}, {"d", task.target.dim()}};
    rep["hidden_target_labels"] = !task.hidden_target_labels.empty();
    if (!task.corrupted_targets.empty())
        rep["corrupted_targets"] = std::count(task.corrupted_targets.begin(), task.corrupted_targets.end(), 1);
    write_json(p.synth_report(), rep);
    return rep;
}

/// Loads the run's materialized data, creating it first if absent.
inline PreparedData stage_data(const RunConfig& cfg)
{
    const auto p = paths_for(cfg);
    if (!fs::exists(p.source_manifest()) || !fs::exists(p.target_manifest())) cmd_synth(cfg);
    RunConfig files = cfg;
    files.benchmark = "files";
    files.source_manifest = p.source_manifest().string();
    files.target_manifest = p.target_manifest().string();
    files.target_eval_labels = fs::exists(p.target_eval_labels()) ? p.target_eval_labels().string() : "";
    return prepare(files);
}

// ---------------------------------------------------------------------------
// Graph and diffusion
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_graph(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    const PreparedData d = stage_data(cfg);
    const CrossDomainGraph g = build_graph(cfg, d.source_latent, d.source_labels(), d.target_latent);
    save_graph(p.graph(), g);

    std::size_t cross = 0, intra_source = 0, intra_target = 0;
    for (const auto& e : g.edges()) {
        if (g.domain(e.u) != g.domain(e.v)) ++cross;
        else if (g.domain(e.u) == Domain::source) ++intra_source;
        else ++intra_target;
    }
    nlohmann::json rep = report_header(cfg, "graph");
    rep["warnings"] = warnings;
    rep["num_nodes"] = g.num_nodes();
    rep["num_source"] = g.num_source();
    rep["num_target"] = g.num_target();
    rep["edge_count"] = g.edge_count();
    rep["edges"] = {{"cross", cross}, {"intra_source", intra_source}, {"intra_target", intra_target}};
    rep["average_degree"] = average_degree(g);
    write_json(p.graph_report(), rep);
    return rep;
}

/// Graph of the run: the saved dump when present, otherwise built afresh.
inline CrossDomainGraph stage_graph(const RunConfig& cfg, const PreparedData& d)
{
    const auto p = paths_for(cfg);
    if (fs::exists(p.graph())) return load_graph(p.graph());
    return build_graph(cfg, d.source_latent, d.source_labels(), d.target_latent);
}

inline nlohmann::json cmd_diffuse(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    require_input(p.graph(), "graph");
    const SelectionStage st = select_stage(cfg, load_graph(p.graph()));

    nlohmann::json rep = report_header(cfg, "diffuse");
    rep["warnings"] = warnings;
    rep.update(diffusion_report(st.problem, st.solution, &st.confident));
    rep["flows"] = st.solution.flows;

    // Noise diagnostics need predictions and held-out labels; the warm-up
    // model supplies the former when training has run.
    if (fs::exists(p.warmup_checkpoint()) && fs::exists(p.target_eval_labels())) {
        const PreparedData d = stage_data(cfg);
        const auto pl = pseudo_label(load_checkpoint(p.warmup_checkpoint()), d.target_latent);
        rep["diagnostics"] = diagnostics_to_json(
            diagnostics(st.confident, pl.labels, d.task.hidden_target_labels, *st.graph));
    }
    write_json(p.diffusion(), rep);
    return rep;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_train(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    const PreparedData d = stage_data(cfg);

    TrainInputs in = train_inputs(d);
    std::optional<SelectionStage> fixed;
    if (cfg.graph_features == "input" && cfg.outer_rounds > 0) {
        fixed = select_stage(cfg, stage_graph(cfg, d));
        in.fixed_selection = &*fixed;
    }

    fs::create_directories(p.root);
    std::ofstream history(p.history(), std::ios::binary);
    require(history.good(), ErrorCode::io, "cannot write '" + p.history().string() + "'");
    const TrainResult res = train(cfg, in, [&](const nlohmann::json& rec, const HashModel&) {
        history << rec.dump() << "\n";
    });
    history.close();
    save_checkpoint(p.warmup_checkpoint(), res.warmup_model);
    save_checkpoint(p.checkpoint(), res.model);
    if (fixed && cfg.outer_rounds > 0) {
        // Walk dump of the last round, for inspection.
        const auto last = cfg.outer_rounds - 1;
        const auto batches = sample_batches(d.task.source.size(), fixed->confident_targets, cfg.batch_size,
                                            seeds::round_batches(cfg.seed, last));
        try {
            const auto walks = sample_walks(*fixed->graph, fixed->confident, cfg.walk_k,
                                            batches.size() * cfg.batch_size, seeds::round_walks(cfg.seed, last),
                                            cfg.walk_attempts);
            write_json(p.walks(), walks_to_json(walks.paths));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::empty_input) throw;
        }
    }

    nlohmann::json rep = report_header(cfg, "train");
    rep["warnings"] = warnings;
    rep["history"] = res.history;
    rep["checkpoint"] = p.checkpoint().filename().string();
    rep["warmup_checkpoint"] = p.warmup_checkpoint().filename().string();
    if (!d.task.hidden_target_labels.empty()) {
        const double base = evaluate_transfer(cfg, res.warmup_model, d, false).map;
        const double full = evaluate_transfer(cfg, res.model, d, false).map;
        rep["target_map"] = {{"warmup", base}, {"final", full}, {"gain", full - base}};
    }
    write_json(p.train_report(), rep);
    return rep;
}

// ---------------------------------------------------------------------------
// Codes, index, query, evaluation
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_encode(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    require_input(p.checkpoint(), "train");
    const HashModel model = load_checkpoint(p.checkpoint());
    const PreparedData d = stage_data(cfg);
    require(model.input_dim() == static_cast<std::size_t>(d.source_latent.cols()), ErrorCode::shape_mismatch,
            "checkpoint input dimension does not match the data");

    const auto source = encode_index(model, d.source_latent);
    const auto target = encode_index(model, d.target_latent);
    fs::create_directories(p.codes("source").parent_path());
    save_codes(p.codes("source"), source);
    save_ids(p.code_ids("source"), source.ids);
    save_codes(p.codes("target"), target);
    save_ids(p.code_ids("target"), target.ids);

    nlohmann::json rep = report_header(cfg, "encode");
    rep["warnings"] = warnings;
    rep["code_length"] = model.code_length();
    rep["source_codes"] = source.n;
    rep["target_codes"] = target.n;
    return rep;
}

/// The retrieval database is the source domain's codes.
inline nlohmann::json cmd_index(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    require_input(p.codes("source"), "encode");
    const auto db = load_codes(p.codes("source"), p.code_ids("source"));
    save_codes(p.index(), db);
    save_ids(p.index_ids(), db.ids);
    nlohmann::json rep = report_header(cfg, "index");
    rep["warnings"] = warnings;
    rep["n"] = db.n;
    rep["L"] = db.L;
    rep["words_per_code"] = db.words_per_code;
    return rep;
}

inline nlohmann::json cmd_query(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    require_input(p.index(), "index");
    require_input(p.codes("target"), "encode");
    const auto db = load_codes(p.index(), p.index_ids());
    const auto queries = load_codes(p.codes("target"), p.code_ids("target"));
    const auto res = search(db, queries, cfg.query_k);

    nlohmann::json rep = report_header(cfg, "query");
    rep["warnings"] = warnings;
    rep["k"] = cfg.query_k;
    rep["clamped"] = res.clamped;
    auto& out = rep["results"] = nlohmann::json::array();
    for (std::size_t q = 0; q < queries.n; ++q) {
        auto hits = nlohmann::json::array();
        for (const auto& h : res.hits[q]) hits.push_back({{"id", h.id}, {"distance", h.distance}});
        out.push_back({{"query", queries.ids[q]}, {"hits", std::move(hits)}});
    }
    write_json(p.query(), rep);
    return rep;
}

/// Target codes query the indexed source codes; relevance is equal class.
inline nlohmann::json cmd_eval(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    require_input(p.index(), "index");
    require_input(p.codes("target"), "encode");
    require_input(p.source_manifest(), "synth");
    require(fs::exists(p.target_eval_labels()), ErrorCode::io,
            "missing input '" + p.target_eval_labels().string() + "': evaluation needs held-out target labels");
    const auto db = load_codes(p.index(), p.index_ids());
    const auto queries = load_codes(p.codes("target"), p.code_ids("target"));
    const auto source = load_dataset(p.source_manifest());
    require(source.has_labels(), ErrorCode::invalid_argument, "source dataset has no labels");
    const auto target_labels = read_labels(p.target_eval_labels());

    auto labels_by_id = [](const std::vector<ClassId>& labels, const BinaryCodeIndex& idx, const std::string& what) {
        std::vector<ClassId> out(idx.n);
        for (std::size_t i = 0; i < idx.n; ++i) {
            require(idx.ids[i] < labels.size(), ErrorCode::invalid_argument,
                    what + " id " + std::to_string(idx.ids[i]) + " has no label");
            out[i] = labels[idx.ids[i]];
        }
        return out;
    };
    const auto db_labels = labels_by_id(*source.labels, db, "database");
    const auto q_labels = labels_by_id(target_labels, queries, "query");

    EvalOptions opt;
    opt.map_cutoff = cfg.map_cutoff;
    opt.pr_points = cfg.pr_points;
    const MetricsReport m = evaluate_retrieval(queries, q_labels, db, db_labels, opt);
    write_curves_csv(p.curves(), "target", m);

    nlohmann::json rep = report_header(cfg, "eval");
    rep["warnings"] = warnings;
    rep["metrics"] = metrics_to_json(m);
    write_json(p.metrics(), rep);
    return rep;
}

inline nlohmann::json cmd_speedtest(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    const SpeedReport r = speed_test(cfg.speed_n, cfg.code_length, cfg.speed_runs, cfg.speed_k, cfg.seed);
    nlohmann::json rep = report_header(cfg, "speedtest");
    rep["warnings"] = warnings;
    rep["n"] = r.n;
    rep["L"] = r.L;
    rep["K"] = r.K;
    rep["runs"] = r.runs;
    rep["hash_ms"] = r.hash_ms;
    rep["dense_ms"] = r.dense_ms;
    rep["speedup"] = r.speedup();
    write_json(p.speed(), rep);
    return rep;
}

// ---------------------------------------------------------------------------
// Sensitivity sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    std::string parameter; ///< "gamma" or "k"
    double value = 0.0;
    std::vector<double> maps; ///< one per seed
    double mean = 0.0;
    double stddev = 0.0;
};

struct SweepTable {
    std::vector<std::uint64_t> seeds;
    std::vector<double> warmup_maps;
    std::vector<SweepRow> rows;
};

/// Varies gamma (walk_k fixed) and walk_k (gamma fixed) around the config,
/// training once per setting and seed. Settings shared by both axes are
/// trained only once.
inline SweepTable run_sweep(const RunConfig& cfg)
{
    SweepTable t;
    for (std::size_t s = 0; s < cfg.sweep_seeds; ++s) t.seeds.push_back(cfg.seed + s);

    std::map<std::tuple<double, std::size_t, std::uint64_t>, double> cache;
    std::map<std::uint64_t, PreparedData> data;
    auto map_for = [&](double gamma, std::size_t k, std::uint64_t seed) {
        const auto key = std::make_tuple(gamma, k, seed);
        if (auto it = cache.find(key); it != cache.end()) return it->second;
        RunConfig c = cfg;
        c.seed = seed;
        c.gamma = gamma;
        c.walk_k = k;
        auto dit = data.find(seed);
        if (dit == data.end()) dit = data.emplace(seed, prepare(c)).first;
        const TrainResult res = train(c, train_inputs(dit->second));
        if (t.warmup_maps.size() < t.seeds.size() && gamma == cfg.gamma && k == cfg.walk_k)
            t.warmup_maps.push_back(evaluate_transfer(c, res.warmup_model, dit->second, false).map);
        const double m = evaluate_transfer(c, res.model, dit->second, false).map;
        cache.emplace(key, m);
        return m;
    };

    auto add = [&](const std::string& name, double value, double gamma, std::size_t k) {
        SweepRow row{name, value, {}, 0.0, 0.0};
        for (auto seed : t.seeds) row.maps.push_back(map_for(gamma, k, seed));
        std::tie(row.mean, row.stddev) = mean_std(row.maps);
        t.rows.push_back(std::move(row));
    };
    // The shared setting first, so the warm-up baseline is recorded per seed.
    for (auto seed : t.seeds) map_for(cfg.gamma, cfg.walk_k, seed);
    for (double g : cfg.sweep_gammas) add("gamma", g, g, cfg.walk_k);
    for (std::size_t k : cfg.sweep_ks) add("k", static_cast<double>(k), cfg.gamma, k);
    return t;
}

inline nlohmann::json sweep_to_json(const SweepTable& t)
{
    nlohmann::json j;
    j["seeds"] = t.seeds;
    j["warmup_map"] = t.warmup_maps;
    auto& rows = j["rows"] = nlohmann::json::array();
    for (const auto& r : t.rows)
        rows.push_back({{"parameter", r.parameter}, {"value", r.value}, {"map", r.maps}, {"mean", r.mean},
                        {"std", r.stddev}});
    return j;
}

inline nlohmann::json cmd_sweep(const RunConfig& cfg)
{
    auto warnings = prepare_run(cfg);
    const auto p = paths_for(cfg);
    const SweepTable t = run_sweep(cfg);
    nlohmann::json rep = report_header(cfg, "sweep");
    rep["warnings"] = warnings;
    rep["sweep"] = sweep_to_json(t);
    write_json(p.sweep(), rep);

    std::ofstream csv(p.sweep_csv(), std::ios::binary);
    require(csv.good(), ErrorCode::io, "cannot write '" + p.sweep_csv().string() + "'");
    csv.precision(17);
    csv << "parameter,value,map_mean,map_std\n";
    for (const auto& r : t.rows) csv << r.parameter << ',' << r.value << ',' << r.mean << ',' << r.stddev << '\n';
    return rep;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

using Command = nlohmann::json (*)(const RunConfig&);

inline const std::map<std::string, Command>& commands()
{
    static const std::map<std::string, Command> table = {
        {"synth", cmd_synth},   {"graph", cmd_graph}, {"diffuse", cmd_diffuse}, {"train", cmd_train},
        {"encode", cmd_encode}, {"index", cmd_index}, {"query", cmd_query},     {"eval", cmd_eval},
        {"speedtest", cmd_speedtest}, {"sweep", cmd_sweep},
    };
    return table;
}

/// Machine-readable failure record printed on stderr.
inline nlohmann::json error_record(const std::string& command, const std::string& code, const std::string& message)
{
    return {{"status", "error"}, {"command", command}, {"error", code}, {"message", message}};
}

} // namespace couple::cli
