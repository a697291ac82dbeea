#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "diffusion.hpp"
#include "error.hpp"
#include "hashmodel.hpp"

namespace couple {

/// Every knob of a pipeline run. Field names double as JSON keys.
struct RunConfig {
    std::uint64_t seed = 0;

    // data: "shift" (synthetic clusters), "digits" (8x8 glyphs) or "files"
    std::string benchmark = "shift";
    std::uint32_t num_classes = 5;
    std::size_t n_source = 500;
    std::size_t n_target = 500;
    std::size_t dim = 16;
    double shift = 2.0;
    double noise_frac = 0.3;
    double noise_spread = 2.0;
    std::string source_manifest;
    std::string target_manifest;
    std::string target_eval_labels; ///< LBL1 file with held-out target labels

    // frozen feature extractor: "identity" or "random_features"
    std::string encoder = "identity";
    std::size_t encoder_dim = 64;

    // graph and diffusion
    std::size_t k_mnn = 3;
    double same_label_weight = 1.0;
    bool graph_center = true;
    std::string graph_features = "input"; ///< "input" or "codes"
    double mass_budget = 0.95;
    double relaxation = 1.8;
    double tolerance = 1e-8;
    std::size_t max_iter = 200000;
    std::string quota_base = "all_targets";
    double gamma = 0.5;

    // mixup walks
    std::size_t walk_k = 5;
    std::size_t walk_attempts = 100;

    // model and optimization
    std::size_t hidden = 512;
    std::size_t code_length = 64;
    std::size_t batch_size = 32;
    double learning_rate = 0.001;
    std::size_t warmup_epochs = 5;
    std::size_t outer_rounds = 20;
    double weight_target = 1.0;
    double weight_pixel = 1.0;
    double weight_manifold = 1.0;
    double weight_margin = 0.1;
    std::string consistency = "target_anchor";
    double consistency_scale = 1.0; ///< multiplies code inner products in the consistency loss
    /// When target pseudo-labels are recomputed: "batch", "round" or "warmup".
    std::string pseudo_refresh = "batch";

    // evaluation
    std::size_t map_cutoff = 0;
    std::size_t pr_points = 21;

    // stage commands that do not touch training
    std::size_t query_k = 10;
    std::size_t speed_n = 100000;
    std::size_t speed_runs = 1000;
    std::size_t speed_k = 10;
    std::vector<double> sweep_gammas = {0.3, 0.5, 0.7};
    std::vector<std::size_t> sweep_ks = {2, 3, 4, 5, 6, 7, 8, 9, 10};
    std::size_t sweep_seeds = 3;

    std::string output_dir = "runs";
    /// Explicit run directory; empty means output_dir/seed<seed>-<hash>.
    std::string run_dir;

    /// Range and enum checks; returns warnings that do not stop a run.
    std::vector<std::string> validate() const
    {
        auto bad = [](const std::string& m) { throw Error(ErrorCode::invalid_argument, "config: " + m); };
        if (!(gamma > 0.0 && gamma <= 1.0)) bad("gamma must lie in (0, 1]");
        if (code_length == 0) bad("code_length must be positive");
        if (hidden == 0) bad("hidden must be positive");
        if (batch_size == 0) bad("batch_size must be positive");
        if (!(learning_rate > 0.0)) bad("learning_rate must be positive");
        if (walk_k == 0) bad("walk_k must be at least 1");
        if (k_mnn == 0) bad("k_mnn must be at least 1");
        if (!(mass_budget > 0.0 && mass_budget < 1.0)) bad("mass_budget must lie in (0, 1)");
        if (!(relaxation > 0.0 && relaxation < 2.0)) bad("relaxation must lie in (0, 2)");
        if (!(tolerance > 0.0)) bad("tolerance must be positive");
        if (benchmark != "shift" && benchmark != "digits" && benchmark != "files")
            bad("benchmark must be shift, digits or files");
        if (benchmark == "files" && (source_manifest.empty() || target_manifest.empty()))
            bad("benchmark=files needs source_manifest and target_manifest");
        if (encoder != "identity" && encoder != "random_features") bad("encoder must be identity or random_features");
        if (graph_features != "input" && graph_features != "codes") bad("graph_features must be input or codes");
        if (quota_base != "all_targets" && quota_base != "positive_x") bad("quota_base must be all_targets or positive_x");
        if (pseudo_refresh != "batch" && pseudo_refresh != "round" && pseudo_refresh != "warmup")
            bad("pseudo_refresh must be batch, round or warmup");
        if (consistency != "target_anchor" && consistency != "source_pairs")
            bad("consistency must be target_anchor or source_pairs");
        if (!(consistency_scale > 0.0)) bad("consistency_scale must be positive");
        for (double w : {weight_target, weight_pixel, weight_manifold, weight_margin})
            if (!(w >= 0.0)) bad("loss weights must be nonnegative");
        if (query_k == 0 || speed_k == 0 || speed_runs == 0) bad("query_k, speed_k and speed_runs must be positive");
        if (speed_k > speed_n) bad("speed_k must not exceed speed_n");
        for (double g : sweep_gammas)
            if (!(g > 0.0 && g <= 1.0)) bad("sweep_gammas entries must lie in (0, 1]");
        for (std::size_t k : sweep_ks)
            if (k == 0) bad("sweep_ks entries must be positive");
        if (sweep_seeds == 0) bad("sweep_seeds must be positive");

        std::vector<std::string> warnings;
        static constexpr std::size_t usual[] = {16, 32, 48, 64, 96, 128};
        if (std::find(std::begin(usual), std::end(usual), code_length) == std::end(usual))
            warnings.push_back("code_length " + std::to_string(code_length) +
                               " is outside the usual set {16,32,48,64,96,128}");
        return warnings;
    }

    QuotaBase quota() const { return quota_base == "positive_x" ? QuotaBase::positive_x : QuotaBase::all_targets; }
    ConsistencyDenominator consistency_mode() const
    {
        return consistency == "source_pairs" ? ConsistencyDenominator::source_pairs
                                             : ConsistencyDenominator::target_anchor;
    }
};

#define COUPLE_CONFIG_FIELDS(X)                                                                                    \
    X(seed) X(benchmark) X(num_classes) X(n_source) X(n_target) X(dim) X(shift) X(noise_frac) X(noise_spread)      \
    X(source_manifest) X(target_manifest) X(target_eval_labels) X(encoder) X(encoder_dim) X(k_mnn)                 \
    X(same_label_weight) X(graph_center) X(graph_features) X(mass_budget) X(relaxation) X(tolerance) X(max_iter) X(quota_base)     \
    X(gamma) X(walk_k) X(walk_attempts) X(hidden) X(code_length) X(batch_size) X(learning_rate) X(warmup_epochs)   \
    X(outer_rounds) X(weight_target) X(weight_pixel) X(weight_manifold) X(weight_margin) X(consistency) X(consistency_scale) X(pseudo_refresh) \
    X(map_cutoff) X(pr_points) X(query_k) X(speed_n) X(speed_runs) X(speed_k) X(sweep_gammas) X(sweep_ks)          \
    X(sweep_seeds) X(output_dir) X(run_dir)

inline nlohmann::json config_to_json(const RunConfig& c)
{
    nlohmann::json j;
#define X(name) j[#name] = c.name;
    COUPLE_CONFIG_FIELDS(X)
#undef X
    return j;
}

/// Applies the keys present in `j` on top of `base`. Unknown keys and
/// mistyped values are errors.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {})
{
    require(j.is_object(), ErrorCode::format, "config: top level must be a JSON object");
    const nlohmann::json known = config_to_json(base);
    for (const auto& [key, value] : j.items())
        require(known.contains(key), ErrorCode::invalid_argument, "config: unknown key '" + key + "'");
    try {
#define X(name)                                                                                                     \
    if (j.contains(#name)) j.at(#name).get_to(base.name);
        COUPLE_CONFIG_FIELDS(X)
#undef X
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, std::string("config: ") + e.what());
    }
    return base;
}

/// Applies one "key=value" override. The value is parsed as JSON when it
/// parses, otherwise taken as a plain string.
inline RunConfig apply_override(const RunConfig& c, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    require(eq != std::string::npos && eq > 0, ErrorCode::invalid_argument,
            "override '" + assignment + "' is not of the form key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    // Strings that look numeric still belong in string fields.
    const nlohmann::json current = config_to_json(c);
    if (current.contains(key) && current.at(key).is_string() && !value.is_string()) value = text;
    return config_from_json(nlohmann::json{{key, value}}, c);
}

inline RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {})
{
    std::ifstream in(path);
    require(in.good(), ErrorCode::io, "cannot open config '" + path.string() + "'");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), ErrorCode::format, "config '" + path.string() + "' is not valid JSON");
    RunConfig c = config_from_json(j);
    // Relative paths in the file resolve against its directory.
    const auto base = path.parent_path();
    for (std::string* p : {&c.source_manifest, &c.target_manifest, &c.target_eval_labels})
        if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
    for (const auto& o : overrides) c = apply_override(c, o);
    return c;
}

/// Keys that change neither the data nor the trained model.
inline const std::vector<std::string>& presentation_keys()
{
    static const std::vector<std::string> keys = {"map_cutoff", "pr_points",   "query_k",   "speed_n",
                                                  "speed_runs", "speed_k",     "sweep_gammas", "sweep_ks",
                                                  "sweep_seeds", "output_dir", "run_dir"};
    return keys;
}

/// FNV-1a over the canonical JSON of the training-relevant keys, so stage
/// commands with different presentation settings share a run directory.
inline std::uint64_t config_hash(const RunConfig& c)
{
    nlohmann::json j = config_to_json(c);
    for (const auto& k : presentation_keys()) j.erase(k);
    const std::string text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string config_hash_hex(const RunConfig& c)
{
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << config_hash(c);
    return s.str();
}

/// run_dir when set, else <output_dir>/seed<seed>-<hash as 16 hex digits>.
inline std::filesystem::path run_directory(const RunConfig& c)
{
    if (!c.run_dir.empty()) return c.run_dir;
    std::ostringstream name;
    name << "seed" << c.seed << '-' << std::hex << std::setw(16) << std::setfill('0') << config_hash(c);
    return std::filesystem::path(c.output_dir) / name.str();
}

} // namespace couple
