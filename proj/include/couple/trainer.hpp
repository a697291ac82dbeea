#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "dataset.hpp"
#include "diffusion.hpp"
#include "encoder.hpp"
#include "eval.hpp"
#include "graph.hpp"
#include "hashmodel.hpp"
#include "index.hpp"
#include "mixup.hpp"

namespace couple {

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// Seeds for independent pipeline stages, all derived from the run seed.
namespace seeds {
inline std::uint64_t data(std::uint64_t s) { return s; }
inline std::uint64_t encoder(std::uint64_t s) { return mix_seed(s ^ 0xE0C0DE); }
inline std::uint64_t model(std::uint64_t s) { return mix_seed(s ^ 0x5EED0001); }
inline std::uint64_t warmup_epoch(std::uint64_t s, std::size_t e) { return mix_seed(s ^ (0x1000000ULL + e)); }
inline std::uint64_t round_batches(std::uint64_t s, std::size_t r) { return mix_seed(s ^ (0x2000000ULL + r)); }
inline std::uint64_t round_walks(std::uint64_t s, std::size_t r) { return mix_seed(s ^ (0x3000000ULL + r)); }
} // namespace seeds

/// Source and target datasets named by the config, plus held-out target
/// labels when available.
inline TransferTask load_task(const RunConfig& cfg)
{
    if (cfg.benchmark == "shift") {
        SyntheticShiftOptions opt;
        opt.noise_spread = cfg.noise_spread;
        return make_synthetic_shift(seeds::data(cfg.seed), cfg.num_classes, cfg.n_source, cfg.n_target, cfg.dim,
                                    cfg.shift, cfg.noise_frac, opt);
    }
    if (cfg.benchmark == "digits") return make_digits_transfer(seeds::data(cfg.seed), cfg.n_source, cfg.n_target);

    TransferTask task;
    task.source = load_dataset(cfg.source_manifest);
    task.target = load_dataset(cfg.target_manifest);
    require(task.source.has_labels(), ErrorCode::invalid_argument, "source dataset must be labeled");
    require(task.source.dim() == task.target.dim(), ErrorCode::shape_mismatch,
            "source and target feature dimensions differ");
    if (!cfg.target_eval_labels.empty()) task.hidden_target_labels = read_labels(cfg.target_eval_labels);
    else if (task.target.labels) task.hidden_target_labels = *task.target.labels;
    // Training never sees target labels.
    task.target.labels.reset();
    return task;
}

inline std::unique_ptr<Encoder> make_encoder(const RunConfig& cfg, std::size_t input_dim)
{
    if (cfg.encoder == "random_features")
        return std::make_unique<RandomFeatureEncoder>(input_dim, cfg.encoder_dim, seeds::encoder(cfg.seed));
    return std::make_unique<IdentityEncoder>();
}

/// Raw inputs and their frozen encodings for both domains.
struct PreparedData {
    TransferTask task;
    std::unique_ptr<Encoder> encoder;
    Matrix source_latent;
    Matrix target_latent;

    std::span<const ClassId> source_labels() const { return *task.source.labels; }
    std::size_t num_classes() const { return task.source.num_classes; }
};

inline PreparedData prepare(const RunConfig& cfg)
{
    PreparedData d;
    d.task = load_task(cfg);
    d.task.source.validate();
    d.task.target.validate();
    require(d.task.source.size() > 0 && d.task.target.size() > 0, ErrorCode::empty_input,
            "source and target datasets must be nonempty");
    d.encoder = make_encoder(cfg, d.task.source.dim());
    d.source_latent = d.encoder->encode(d.task.source.features);
    d.target_latent = d.encoder->encode(d.task.target.features);
    return d;
}

// ---------------------------------------------------------------------------
// Graph stage
// ---------------------------------------------------------------------------

/// Graph, diffusion solution and confident set of one round.
struct SelectionStage {
    std::unique_ptr<CrossDomainGraph> graph;
    DiffusionProblem problem;
    DiffusionSolution solution;
    ConfidentSet confident;
    /// Target-local indices of the confident members.
    std::vector<std::uint32_t> confident_targets;
};

inline CrossDomainGraph build_graph(const RunConfig& cfg, const Matrix& source_rows,
                                    std::span<const ClassId> source_labels, const Matrix& target_rows)
{
    GraphOptions opt;
    opt.k = cfg.k_mnn;
    opt.same_label_weight = cfg.same_label_weight;
    opt.center_domains = cfg.graph_center;
    return build_mnn_graph(source_rows, source_labels, target_rows, opt);
}

inline DiffusionSolution run_diffusion(const RunConfig& cfg, const DiffusionProblem& p)
{
    SolveOptions s;
    s.tol = cfg.tolerance;
    s.max_iter = cfg.max_iter;
    s.relaxation = cfg.relaxation;
    return solve(p, s);
}

inline SelectionStage select_stage(const RunConfig& cfg, CrossDomainGraph graph)
{
    SelectionStage st;
    st.graph = std::make_unique<CrossDomainGraph>(std::move(graph));
    DiffusionOptions dopt;
    dopt.mass_budget = cfg.mass_budget;
    st.problem = init_problem(*st.graph, dopt);
    st.solution = run_diffusion(cfg, st.problem);
    st.confident = select_confident(st.solution, *st.graph, cfg.gamma, cfg.quota());
    for (NodeId id : st.confident.member_ids) st.confident_targets.push_back(st.graph->target_index(id));
    return st;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct BatchLosses {
    double source = 0.0;
    double target = 0.0;
    double pixel = 0.0;
    double manifold = 0.0;
    double margin = 0.0;
    double total = 0.0;

    void accumulate(const BatchLosses& b)
    {
        source += b.source, target += b.target, pixel += b.pixel;
        manifold += b.manifold, margin += b.margin, total += b.total;
    }
    void scale(double s)
    {
        source *= s, target *= s, pixel *= s;
        manifold *= s, margin *= s, total *= s;
    }
};

inline nlohmann::json losses_to_json(const BatchLosses& l)
{
    return {{"source", l.source}, {"target", l.target},  {"pixel", l.pixel},
            {"manifold", l.manifold}, {"margin", l.margin}, {"total", l.total}};
}

struct TrainResult {
    HashModel model;
    HashModel warmup_model;
    /// One record per epoch: warm-up epochs first, then one per outer round.
    std::vector<nlohmann::json> history;
    std::optional<ConfidentSet> confident;
    PseudoLabels pseudo;
};

using EpochCallback = std::function<void(const nlohmann::json&, const HashModel&)>;

/// Inputs of one training run. `fixed_selection`, when given, replaces the
/// graph stage (it must come from the same config and data).
struct TrainInputs {
    const Matrix* source_raw = nullptr;
    const Matrix* target_raw = nullptr;
    const Matrix* source_latent = nullptr;
    const Matrix* target_latent = nullptr;
    std::span<const ClassId> source_labels;
    std::size_t num_classes = 0;
    const Encoder* encoder = nullptr;
    const SelectionStage* fixed_selection = nullptr;
    /// Held-out target labels, only used for the diagnostics in the history.
    std::span<const ClassId> hidden_target_labels;
};

inline TrainInputs train_inputs(const PreparedData& d)
{
    TrainInputs in;
    in.source_raw = &d.task.source.features;
    in.target_raw = &d.task.target.features;
    in.source_latent = &d.source_latent;
    in.target_latent = &d.target_latent;
    in.source_labels = d.source_labels();
    in.num_classes = d.num_classes();
    in.encoder = d.encoder.get();
    in.hidden_target_labels = d.task.hidden_target_labels;
    return in;
}

namespace detail {

inline Matrix gather_rows(const Matrix& m, std::span<const std::uint32_t> idx)
{
    Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
    return out;
}

template <class T>
std::vector<T> gather(std::span<const T> v, std::span<const std::uint32_t> idx)
{
    std::vector<T> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(v[i]);
    return out;
}

inline double accuracy(std::span<const ClassId> predicted, std::span<const ClassId> truth,
                       std::span<const std::uint32_t> subset)
{
    if (subset.empty()) return 0.0;
    std::size_t ok = 0;
    for (auto i : subset) ok += predicted[i] == truth[i] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(subset.size());
}

} // namespace detail

/// Warm-up on the labeled source, then `outer_rounds` rounds of
/// pseudo-labeling, diffusion-based selection, walk sampling and joint
/// optimization of the source, consistency, mixup and margin losses.
/// Single-threaded apart from graph construction and walk sampling, both
/// of which are deterministic.
inline TrainResult train(const RunConfig& cfg, const TrainInputs& in, const EpochCallback& on_epoch = {})
{
    require(in.source_raw && in.target_raw && in.source_latent && in.target_latent && in.encoder,
            ErrorCode::invalid_argument, "train: missing inputs");
    const std::size_t n_s = static_cast<std::size_t>(in.source_latent->rows());
    require(in.source_labels.size() == n_s, ErrorCode::shape_mismatch, "train: source label count mismatch");
    require(in.num_classes >= 1, ErrorCode::invalid_argument, "train: need at least one class");
    const std::size_t L = cfg.code_length;

    TrainResult res;
    res.model = HashModel::init(static_cast<std::size_t>(in.source_latent->cols()), cfg.hidden, L, in.num_classes,
                                seeds::model(cfg.seed));
    AdamOptions aopt;
    aopt.learning_rate = cfg.learning_rate;
    Adam adam(res.model, aopt);

    auto emit = [&](nlohmann::json rec) {
        if (on_epoch) on_epoch(rec, res.model);
        res.history.push_back(std::move(rec));
    };

    for (std::size_t e = 0; e < cfg.warmup_epochs; ++e) {
        BatchLosses epoch;
        const auto batches = source_epoch(n_s, cfg.batch_size, seeds::warmup_epoch(cfg.seed, e));
        for (const auto& idx : batches) {
            const Matrix x = detail::gather_rows(*in.source_latent, idx);
            const auto y = detail::gather(in.source_labels, idx);
            auto ls = loss_source(res.model, x, y);
            auto lm = loss_margin(res.model);
            ls.grad.add(lm.grad, cfg.weight_margin);
            BatchLosses b;
            b.source = ls.value;
            b.margin = lm.value;
            b.total = ls.value + cfg.weight_margin * lm.value;
            epoch.accumulate(b);
            adam.step(res.model, ls.grad);
        }
        epoch.scale(1.0 / static_cast<double>(batches.size()));
        emit({{"phase", "warmup"}, {"epoch", e}, {"losses", losses_to_json(epoch)}, {"steps", adam.steps()}});
    }
    res.warmup_model = res.model;
    res.warmup_model.round_to_float();

    std::optional<SelectionStage> own_selection;
    const SelectionStage* selection = in.fixed_selection;
    const bool rebuild_each_round = cfg.graph_features == "codes" && !in.fixed_selection;
    const DomainRows raw_rows{in.source_raw, in.target_raw, n_s};
    const DomainRows latent_rows{in.source_latent, in.target_latent, n_s};

    std::vector<ClassId> pseudo(static_cast<std::size_t>(in.target_latent->rows()), 0);
    for (std::size_t r = 0; r < cfg.outer_rounds; ++r) {
        if (!selection || rebuild_each_round) {
            if (rebuild_each_round) {
                own_selection = select_stage(cfg, build_graph(cfg, forward(res.model, *in.source_latent).relaxed,
                                                              in.source_labels,
                                                              forward(res.model, *in.target_latent).relaxed));
            } else {
                own_selection = select_stage(
                    cfg, build_graph(cfg, *in.source_latent, in.source_labels, *in.target_latent));
            }
            selection = &*own_selection;
        }
        const CrossDomainGraph& g = *selection->graph;
        require(!selection->confident_targets.empty(), ErrorCode::empty_input,
                "train: confident set is empty; diffusion reached no target node");

        const auto batches =
            sample_batches(n_s, selection->confident_targets, cfg.batch_size, seeds::round_batches(cfg.seed, r));
        std::vector<MixupPair> pool;
        std::size_t walks_kept = 0;
        try {
            const auto walks = sample_walks(g, selection->confident, cfg.walk_k, batches.size() * cfg.batch_size,
                                            seeds::round_walks(cfg.seed, r), cfg.walk_attempts);
            walks_kept = walks.paths.size();
            for (const auto& p : walks.paths) {
                const auto pairs = extract_pairs(p, g);
                pool.insert(pool.end(), pairs.begin(), pairs.end());
            }
        } catch (const Error& e) {
            if (e.code() != ErrorCode::empty_input) throw;
        }
        const bool fallback = pool.empty();
        if (fallback) pool = direct_pairs(g, selection->confident);

        if (cfg.pseudo_refresh == "round" || (cfg.pseudo_refresh == "warmup" && r == 0))
            pseudo = pseudo_label(res.model, *in.target_latent).labels;
        BatchLosses epoch;
        std::size_t cursor = 0;
        for (const auto& b : batches) {
            const Matrix xs = detail::gather_rows(*in.source_latent, b.source_indices);
            const Matrix xt = detail::gather_rows(*in.target_latent, b.target_indices);
            const auto ys = detail::gather(in.source_labels, b.source_indices);

            std::vector<MixupPair> pairs;
            for (std::size_t k = 0; k < cfg.batch_size && !pool.empty(); ++k) {
                pairs.push_back(pool[cursor]);
                cursor = (cursor + 1) % pool.size();
            }

            // Pseudo-labels come from the current model, for exactly the
            // targets this step touches.
            if (cfg.pseudo_refresh == "batch") {
                std::vector<std::uint32_t> touched(b.target_indices);
                for (const auto& p : pairs) touched.push_back(static_cast<std::uint32_t>(p.j - n_s));
                const auto fresh = pseudo_label(res.model, detail::gather_rows(*in.target_latent, touched));
                for (std::size_t k = 0; k < touched.size(); ++k) pseudo[touched[k]] = fresh.labels[k];
            }
            const auto yt = detail::gather(std::span<const ClassId>(pseudo), b.target_indices);
            const DomainLabels labels{in.source_labels, pseudo, n_s};

            auto total = loss_source(res.model, xs, ys);
            const auto lt = loss_target_consistency(res.model, xs, ys, xt, yt, cfg.consistency_mode(),
                                                    cfg.consistency_scale);
            const auto lp = loss_pixel(res.model, *in.encoder, pairs, raw_rows, labels);
            const auto lmf = loss_manifold(res.model, pairs, latent_rows, labels);
            const auto lm = loss_margin(res.model);
            BatchLosses bl;
            bl.source = total.value;
            bl.target = lt.value;
            bl.pixel = lp.value;
            bl.manifold = lmf.value;
            bl.margin = lm.value;
            bl.total = bl.source + cfg.weight_target * bl.target + cfg.weight_pixel * bl.pixel +
                       cfg.weight_manifold * bl.manifold + cfg.weight_margin * bl.margin;
            total.grad.add(lt.grad, cfg.weight_target)
                .add(lp.grad, cfg.weight_pixel)
                .add(lmf.grad, cfg.weight_manifold)
                .add(lm.grad, cfg.weight_margin);
            epoch.accumulate(bl);
            adam.step(res.model, total.grad);
        }
        epoch.scale(1.0 / static_cast<double>(batches.size()));

        nlohmann::json rec{{"phase", "adapt"},
                           {"epoch", cfg.warmup_epochs + r},
                           {"round", r},
                           {"losses", losses_to_json(epoch)},
                           {"steps", adam.steps()},
                           {"confident", selection->confident.member_ids.size()},
                           {"walks_kept", walks_kept},
                           {"pairs", pool.size()},
                           {"direct_pair_fallback", fallback},
                           {"diffusion_iterations", selection->solution.iterations}};
        res.pseudo = pseudo_label(res.model, *in.target_latent);
        if (in.hidden_target_labels.size() == res.pseudo.labels.size()) {
            std::vector<std::uint32_t> all(res.pseudo.labels.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
            rec["pseudo_accuracy_all"] = detail::accuracy(res.pseudo.labels, in.hidden_target_labels, all);
            rec["pseudo_accuracy_confident"] =
                detail::accuracy(res.pseudo.labels, in.hidden_target_labels, selection->confident_targets);
        }
        emit(std::move(rec));
        res.confident = selection->confident;
    }

    // Checkpoints hold float32; rounding here makes saved and in-memory
    // models encode identically.
    res.model.round_to_float();
    return res;
}

// ---------------------------------------------------------------------------
// Encoding and evaluation
// ---------------------------------------------------------------------------

inline BinaryCodeIndex encode_index(const HashModel& model, const Matrix& latent, std::uint64_t first_id = 0)
{
    const Matrix codes = forward(model, latent).binary;
    std::vector<std::uint64_t> ids(static_cast<std::size_t>(codes.rows()));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = first_id + i;
    return pack(codes, ids);
}

/// Cross-domain retrieval: target codes query the source database.
inline MetricsReport evaluate_transfer(const RunConfig& cfg, const HashModel& model, const Matrix& source_latent,
                                       std::span<const ClassId> source_labels, const Matrix& target_latent,
                                       std::span<const ClassId> target_labels, bool with_bit_correlation = true)
{
    require(!target_labels.empty(), ErrorCode::invalid_argument, "evaluation needs held-out target labels");
    EvalOptions opt;
    opt.map_cutoff = cfg.map_cutoff;
    opt.pr_points = cfg.pr_points;
    opt.bit_correlation = with_bit_correlation;
    return evaluate_retrieval(encode_index(model, target_latent), target_labels, encode_index(model, source_latent),
                              source_labels, opt);
}

inline MetricsReport evaluate_transfer(const RunConfig& cfg, const HashModel& model, const PreparedData& d,
                                       bool with_bit_correlation = true)
{
    return evaluate_transfer(cfg, model, d.source_latent, d.source_labels(), d.target_latent,
                             d.task.hidden_target_labels, with_bit_correlation);
}

} // namespace couple
