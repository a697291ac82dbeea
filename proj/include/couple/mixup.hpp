#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "diffusion.hpp"
#include "encoder.hpp"
#include "graph.hpp"
#include "hashmodel.hpp"
#include "rng.hpp"

namespace couple {

struct WalkPath {
    std::vector<NodeId> node_ids;  ///< k + 1 nodes, first is a source node
    std::vector<double> edge_weights; ///< weight of each of the k hops
};

/// Source/target endpoints of one graph edge and its mixing coefficients.
struct MixupPair {
    NodeId i = 0; ///< source-domain node
    NodeId j = 0; ///< target-domain node
    double w = 0.0;
    double lambda_i = 1.0; ///< 1 / (1 + w)
    double lambda_j = 0.0; ///< w / (1 + w)

    static MixupPair make(NodeId source_node, NodeId target_node, double w)
    {
        require(w >= 0.0 && std::isfinite(w), ErrorCode::invalid_argument, "mixup pair weight must be >= 0");
        MixupPair p;
        p.i = source_node;
        p.j = target_node;
        p.w = w;
        p.lambda_i = 1.0 / (1.0 + w);
        p.lambda_j = 1.0 - p.lambda_i;
        return p;
    }
};

/// Per-node cumulative edge weights for proportional neighbor sampling.
class TransitionTable {
public:
    explicit TransitionTable(const CrossDomainGraph& g) : graph_(&g), cumulative_(g.num_nodes())
    {
        for (NodeId u = 0; u < g.num_nodes(); ++u) {
            double acc = 0.0;
            for (const auto& a : g.neighbors(u)) {
                acc += a.w;
                cumulative_[u].push_back(acc);
            }
        }
    }

    /// Next node from u with probability w(u, v) / deg(u); false at a dead end.
    bool step(Rng& rng, NodeId u, NodeId& next, double& weight) const
    {
        const auto& cum = cumulative_[u];
        if (cum.empty() || cum.back() <= 0.0) return false;
        const double r = rng.uniform() * cum.back();
        auto it = std::upper_bound(cum.begin(), cum.end(), r);
        if (it == cum.end()) --it;
        const auto idx = static_cast<std::size_t>(it - cum.begin());
        const auto& adj = graph_->neighbors(u)[idx];
        next = adj.to;
        weight = adj.w;
        return true;
    }

private:
    const CrossDomainGraph* graph_;
    std::vector<std::vector<double>> cumulative_;
};

struct WalkSample {
    std::vector<WalkPath> paths;
    std::size_t requested = 0;
    std::size_t attempts = 0;
};

/// Weighted random walks of k hops from uniformly chosen source nodes,
/// kept only when they end inside the confident set. Walk w uses its own
/// generator seeded with seed ^ w, so results do not depend on threading.
inline WalkSample sample_walks(const CrossDomainGraph& g, const ConfidentSet& confident, std::size_t k,
                               std::size_t count, std::uint64_t seed, std::size_t max_attempts = 100)
{
    require(k >= 1, ErrorCode::invalid_argument, "sample_walks: k must be at least 1");
    require(!confident.member_ids.empty(), ErrorCode::empty_input, "sample_walks: confident set is empty");
    require(g.num_source() > 0, ErrorCode::empty_input, "sample_walks: graph has no source nodes");

    std::vector<std::uint8_t> in_confident(g.num_nodes(), 0);
    for (NodeId id : confident.member_ids) in_confident.at(id) = 1;
    const TransitionTable table(g);

    std::vector<std::optional<WalkPath>> slots(count);
    std::vector<std::size_t> attempts(count, 0);
    parallel_for(count, [&](std::size_t begin, std::size_t end) {
        for (std::size_t w = begin; w < end; ++w) {
            Rng rng(seed ^ static_cast<std::uint64_t>(w));
            for (std::size_t a = 0; a < max_attempts; ++a) {
                ++attempts[w];
                WalkPath path;
                path.node_ids.reserve(k + 1);
                path.edge_weights.reserve(k);
                NodeId u = static_cast<NodeId>(rng.below(g.num_source()));
                path.node_ids.push_back(u);
                bool ok = true;
                for (std::size_t s = 0; s < k && ok; ++s) {
                    NodeId next = 0;
                    double weight = 0.0;
                    ok = table.step(rng, u, next, weight);
                    if (ok) {
                        path.node_ids.push_back(next);
                        path.edge_weights.push_back(weight);
                        u = next;
                    }
                }
                if (ok && in_confident[u]) {
                    slots[w] = std::move(path);
                    break;
                }
            }
        }
    });

    WalkSample out;
    out.requested = count;
    for (std::size_t w = 0; w < count; ++w) {
        out.attempts += attempts[w];
        if (slots[w]) out.paths.push_back(std::move(*slots[w]));
    }
    require(count == 0 || !out.paths.empty(), ErrorCode::empty_input,
            "sample_walks: no walk reached the confident set within the attempt budget");
    return out;
}

/// Consecutive hops joining a source and a target node, oriented
/// (source, target). Same-domain hops yield nothing.
inline std::vector<MixupPair> extract_pairs(const WalkPath& path, const CrossDomainGraph& g)
{
    std::vector<MixupPair> pairs;
    for (std::size_t s = 0; s + 1 < path.node_ids.size(); ++s) {
        const NodeId u = path.node_ids[s];
        const NodeId v = path.node_ids[s + 1];
        if (g.domain(u) == g.domain(v)) continue;
        const double w = s < path.edge_weights.size() ? path.edge_weights[s] : g.weight(u, v);
        if (g.domain(u) == Domain::source)
            pairs.push_back(MixupPair::make(u, v, w));
        else
            pairs.push_back(MixupPair::make(v, u, w));
    }
    return pairs;
}

/// Cross-domain edges incident to confident nodes; used when no walk
/// reaches the confident set.
inline std::vector<MixupPair> direct_pairs(const CrossDomainGraph& g, const ConfidentSet& confident)
{
    std::vector<MixupPair> pairs;
    for (NodeId t : confident.member_ids)
        for (const auto& a : g.neighbors(t))
            if (g.domain(a.to) == Domain::source) pairs.push_back(MixupPair::make(a.to, t, a.w));
    return pairs;
}

/// lambda_i x_i + lambda_j x_j.
inline RowVector mix_inputs(const MixupPair& pair, const Eigen::Ref<const RowVector>& x_i,
                            const Eigen::Ref<const RowVector>& x_j)
{
    require(x_i.size() == x_j.size(), ErrorCode::shape_mismatch, "mix_inputs: dimension mismatch");
    return pair.lambda_i * x_i + pair.lambda_j * x_j;
}

/// lambda_i onehot(y_i) + lambda_j onehot(y_hat_j).
inline RowVector mix_labels(const MixupPair& pair, ClassId y_i, ClassId y_hat_j, std::size_t num_classes)
{
    require(y_i < num_classes && y_hat_j < num_classes, ErrorCode::invalid_argument,
            "mix_labels: class id out of range");
    RowVector y = RowVector::Zero(static_cast<Eigen::Index>(num_classes));
    y(y_i) += pair.lambda_i;
    y(y_hat_j) += pair.lambda_j;
    return y;
}

/// Rows of the two domains addressed by graph node id.
struct DomainRows {
    const Matrix* source = nullptr;
    const Matrix* target = nullptr;
    std::size_t num_source = 0;

    auto row(NodeId node) const
    {
        return node < num_source ? source->row(node) : target->row(node - num_source);
    }
};

/// Labels addressed by graph node id: ground truth for sources, pseudo-labels
/// for targets.
struct DomainLabels {
    std::span<const ClassId> source;
    std::span<const ClassId> target;
    std::size_t num_source = 0;

    ClassId operator()(NodeId node) const { return node < num_source ? source[node] : target[node - num_source]; }
};

inline Matrix mixed_rows(std::span<const MixupPair> pairs, const DomainRows& rows)
{
    Matrix out(static_cast<Eigen::Index>(pairs.size()), rows.source->cols());
    for (std::size_t p = 0; p < pairs.size(); ++p)
        out.row(static_cast<Eigen::Index>(p)) = mix_inputs(pairs[p], rows.row(pairs[p].i), rows.row(pairs[p].j));
    return out;
}

inline Matrix mixed_labels(std::span<const MixupPair> pairs, const DomainLabels& labels, std::size_t num_classes)
{
    Matrix out(static_cast<Eigen::Index>(pairs.size()), static_cast<Eigen::Index>(num_classes));
    for (std::size_t p = 0; p < pairs.size(); ++p)
        out.row(static_cast<Eigen::Index>(p)) =
            mix_labels(pairs[p], labels(pairs[p].i), labels(pairs[p].j), num_classes);
    return out;
}

/// Input-level mixing: raw inputs are mixed, then encoded, then hashed.
/// The soft-target cross-entropy used here equals the cross-entropy of the
/// mixed prototype sum_c y_c tanh(z_c) against the softmax, since the mixed
/// label sums to one.
inline LossValue loss_pixel(const HashModel& model, const Encoder& encoder, std::span<const MixupPair> pairs,
                            const DomainRows& raw_inputs, const DomainLabels& labels)
{
    if (pairs.empty()) return {0.0, Gradients::zeros_like(model)};
    const Matrix mixed = encoder.encode(mixed_rows(pairs, raw_inputs));
    return loss_soft_targets(model, mixed, mixed_labels(pairs, labels, model.num_classes()));
}

/// Feature-level mixing: already-encoded features are mixed, then hashed.
inline LossValue loss_manifold(const HashModel& model, std::span<const MixupPair> pairs,
                               const DomainRows& latent, const DomainLabels& labels)
{
    if (pairs.empty()) return {0.0, Gradients::zeros_like(model)};
    return loss_soft_targets(model, mixed_rows(pairs, latent), mixed_labels(pairs, labels, model.num_classes()));
}

inline nlohmann::json walks_to_json(std::span<const WalkPath> paths)
{
    auto arr = nlohmann::json::array();
    for (const auto& p : paths) arr.push_back({{"nodes", p.node_ids}, {"weights", p.edge_weights}});
    return arr;
}

} // namespace couple
