#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"

namespace couple {

struct Neighbor {
    std::uint32_t id = 0;
    double similarity = 0.0;
};

struct WeightedEdge {
    NodeId u = 0;
    NodeId v = 0;
    double w = 0.0;
};

/// Orders by similarity descending, then id ascending.
inline bool neighbor_before(const Neighbor& a, const Neighbor& b)
{
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.id < b.id;
}

namespace detail {

inline Matrix unit_rows(const Matrix& m)
{
    Matrix out = m;
    l2_normalize_rows(out);
    return out;
}

} // namespace detail

/// Exact k nearest neighbors by cosine similarity, full scan.
///
/// With `exclude_self`, query and base are the same set and row i is not
/// its own neighbor. Results per query are sorted by `neighbor_before`.
inline std::vector<std::vector<Neighbor>> knn(const Matrix& query_rows, const Matrix& base_rows, std::size_t k,
                                              bool exclude_self = false)
{
    const std::size_t n_base = static_cast<std::size_t>(base_rows.rows());
    const std::size_t available = exclude_self ? (n_base > 0 ? n_base - 1 : 0) : n_base;
    require(n_base > 0 && available > 0, ErrorCode::empty_input, "knn: empty base set");
    require(k >= 1 && k <= available, ErrorCode::invalid_argument,
            "knn: k=" + std::to_string(k) + " outside [1, " + std::to_string(available) + "]");
    require(query_rows.cols() == base_rows.cols(), ErrorCode::shape_mismatch, "knn: dimension mismatch");

    const Matrix q = detail::unit_rows(query_rows);
    const Matrix b = detail::unit_rows(base_rows);
    std::vector<std::vector<Neighbor>> result(static_cast<std::size_t>(q.rows()));

    parallel_for(result.size(), [&](std::size_t begin, std::size_t end) {
        std::vector<Neighbor> scratch;
        scratch.reserve(n_base);
        for (std::size_t i = begin; i < end; ++i) {
            scratch.clear();
            const Vector sims = b * q.row(static_cast<Eigen::Index>(i)).transpose();
            for (std::size_t j = 0; j < n_base; ++j) {
                if (exclude_self && j == i) continue;
                scratch.push_back({static_cast<std::uint32_t>(j), sims(static_cast<Eigen::Index>(j))});
            }
            std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k), scratch.end(),
                              neighbor_before);
            result[i].assign(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k));
        }
    });
    return result;
}

/// Weighted undirected simple graph over source nodes [0, n_s) followed by
/// target nodes [n_s, n_s + n_t).
class CrossDomainGraph {
public:
    struct Adjacent {
        NodeId to = 0;
        double w = 0.0;
    };

    CrossDomainGraph() = default;

    /// Builds from an edge list. Duplicate pairs keep the maximum weight.
    CrossDomainGraph(std::vector<Domain> node_domain, std::span<const WeightedEdge> edges)
        : node_domain_(std::move(node_domain))
    {
        const std::size_t n = node_domain_.size();
        for (std::size_t i = 1; i < n; ++i)
            require(!(node_domain_[i - 1] == Domain::target && node_domain_[i] == Domain::source),
                    ErrorCode::invalid_argument, "graph: source nodes must precede target nodes");
        num_source_ = static_cast<std::size_t>(
            std::count(node_domain_.begin(), node_domain_.end(), Domain::source));

        std::map<std::pair<NodeId, NodeId>, double> merged;
        for (const auto& e : edges) {
            require(e.u < n && e.v < n, ErrorCode::invalid_argument, "graph: edge endpoint out of range");
            require(e.u != e.v, ErrorCode::invalid_argument, "graph: self-loop");
            require(std::isfinite(e.w) && e.w >= 0.0, ErrorCode::invalid_argument,
                    "graph: edge weight must be finite and nonnegative");
            const auto key = std::minmax(e.u, e.v);
            auto [it, inserted] = merged.emplace(key, e.w);
            if (!inserted) it->second = std::max(it->second, e.w);
        }
        adjacency_.assign(n, {});
        degree_.assign(n, 0.0);
        edges_.reserve(merged.size());
        for (const auto& [key, w] : merged) {
            edges_.push_back({key.first, key.second, w});
            adjacency_[key.first].push_back({key.second, w});
            adjacency_[key.second].push_back({key.first, w});
        }
        for (auto& list : adjacency_)
            std::sort(list.begin(), list.end(), [](const Adjacent& a, const Adjacent& b) { return a.to < b.to; });
        for (std::size_t i = 0; i < n; ++i)
            for (const auto& a : adjacency_[i]) degree_[i] += a.w;
    }

    std::size_t num_nodes() const { return node_domain_.size(); }
    std::size_t num_source() const { return num_source_; }
    std::size_t num_target() const { return num_nodes() - num_source_; }
    std::size_t edge_count() const { return edges_.size(); }

    Domain domain(NodeId i) const { return node_domain_[i]; }
    bool is_target(NodeId i) const { return node_domain_[i] == Domain::target; }
    const std::vector<Domain>& node_domains() const { return node_domain_; }

    NodeId target_node(std::size_t target_index) const { return static_cast<NodeId>(num_source_ + target_index); }
    std::size_t target_index(NodeId node) const { return node - num_source_; }

    std::span<const Adjacent> neighbors(NodeId i) const { return adjacency_[i]; }
    double weighted_degree(NodeId i) const { return degree_[i]; }
    const std::vector<double>& weighted_degrees() const { return degree_; }

    /// Canonical edge list, u < v, sorted lexicographically.
    const std::vector<WeightedEdge>& edges() const { return edges_; }

    /// Weight of edge (i, j), or 0 when absent.
    double weight(NodeId i, NodeId j) const
    {
        const auto& list = adjacency_[i];
        auto it = std::lower_bound(list.begin(), list.end(), j,
                                   [](const Adjacent& a, NodeId id) { return a.to < id; });
        return (it != list.end() && it->to == j) ? it->w : 0.0;
    }

private:
    std::vector<Domain> node_domain_;
    std::size_t num_source_ = 0;
    std::vector<std::vector<Adjacent>> adjacency_;
    std::vector<double> degree_;
    std::vector<WeightedEdge> edges_;
};

/// Mean weighted degree over all nodes.
inline double average_degree(const CrossDomainGraph& g)
{
    require(g.num_nodes() > 0, ErrorCode::empty_input, "average_degree: empty graph");
    const auto& deg = g.weighted_degrees();
    return std::accumulate(deg.begin(), deg.end(), 0.0) / static_cast<double>(deg.size());
}

struct GraphOptions {
    std::size_t k = 3;
    double same_label_weight = 1.0;
    bool intra_source = true;
    bool intra_target = true;
    /// Subtract each domain's mean feature before measuring cosine
    /// similarity, so a constant offset between domains does not dominate.
    bool center_domains = false;
};

namespace detail {

inline bool contains(const std::vector<Neighbor>& list, std::uint32_t id)
{
    return std::any_of(list.begin(), list.end(), [id](const Neighbor& n) { return n.id == id; });
}

inline double clamp_weight(double cosine) { return std::clamp(cosine, 0.0, 1.0); }

} // namespace detail

/// Mutual-kNN relationship graph over source followed by target samples.
///
/// Cross edges join s and t when each is among the other's k nearest in the
/// opposite domain. Target pairs use the same rule within the target. All
/// same-label source pairs are joined with `same_label_weight`. Similarity
/// edges weigh max(0, cosine).
inline CrossDomainGraph build_mnn_graph(const Matrix& source_features, std::span<const ClassId> source_labels,
                                        const Matrix& target_features, const GraphOptions& opt = {})
{
    require(source_features.cols() == target_features.cols(), ErrorCode::shape_mismatch,
            "build_mnn_graph: source and target dimensions differ");
    require(static_cast<std::size_t>(source_features.rows()) == source_labels.size(), ErrorCode::shape_mismatch,
            "build_mnn_graph: source label count differs from row count");
    const std::size_t n_s = static_cast<std::size_t>(source_features.rows());
    const std::size_t n_t = static_cast<std::size_t>(target_features.rows());

    std::vector<Domain> domains(n_s, Domain::source);
    domains.resize(n_s + n_t, Domain::target);
    std::vector<WeightedEdge> edges;

    auto prepared = [&](const Matrix& m) {
        if (!opt.center_domains || m.rows() == 0) return detail::unit_rows(m);
        return detail::unit_rows(m.rowwise() - m.colwise().mean());
    };
    const Matrix s_unit = prepared(source_features);
    const Matrix t_unit = prepared(target_features);
    auto cosine = [&](const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
        return a.row(static_cast<Eigen::Index>(i)).dot(b.row(static_cast<Eigen::Index>(j)));
    };

    if (n_s > 0 && n_t > 0) {
        const std::size_t k_st = std::min(opt.k, n_t);
        const std::size_t k_ts = std::min(opt.k, n_s);
        const auto s_in_t = knn(s_unit, t_unit, k_st);
        const auto t_in_s = knn(t_unit, s_unit, k_ts);
        for (std::size_t i = 0; i < n_s; ++i) {
            for (const auto& nb : s_in_t[i]) {
                if (!detail::contains(t_in_s[nb.id], static_cast<std::uint32_t>(i))) continue;
                edges.push_back({static_cast<NodeId>(i), static_cast<NodeId>(n_s + nb.id),
                                 detail::clamp_weight(cosine(s_unit, i, t_unit, nb.id))});
            }
        }
    }

    if (opt.intra_target && n_t > 1) {
        const auto t_in_t = knn(t_unit, t_unit, std::min(opt.k, n_t - 1), true);
        for (std::size_t j = 0; j < n_t; ++j) {
            for (const auto& nb : t_in_t[j]) {
                if (nb.id <= j || !detail::contains(t_in_t[nb.id], static_cast<std::uint32_t>(j))) continue;
                edges.push_back({static_cast<NodeId>(n_s + j), static_cast<NodeId>(n_s + nb.id),
                                 detail::clamp_weight(cosine(t_unit, j, t_unit, nb.id))});
            }
        }
    }

    if (opt.intra_source) {
        for (std::size_t i = 0; i < n_s; ++i)
            for (std::size_t j = i + 1; j < n_s; ++j)
                if (source_labels[i] == source_labels[j])
                    edges.push_back({static_cast<NodeId>(i), static_cast<NodeId>(j), opt.same_label_weight});
    }

    return CrossDomainGraph(std::move(domains), edges);
}

inline CrossDomainGraph build_mnn_graph(const EmbeddingDataset& source, const EmbeddingDataset& target,
                                        const GraphOptions& opt = {})
{
    require(source.dim() == target.dim(), ErrorCode::shape_mismatch,
            "build_mnn_graph: source and target dimensions differ");
    require(source.has_labels(), ErrorCode::invalid_argument, "build_mnn_graph: source labels are required");
    return build_mnn_graph(source.features, *source.labels, target.features, opt);
}

// ---------------------------------------------------------------------------
// JSON dump
// ---------------------------------------------------------------------------

inline nlohmann::json graph_to_json(const CrossDomainGraph& g)
{
    nlohmann::json j;
    j["num_nodes"] = g.num_nodes();
    auto& domains = j["domains"] = nlohmann::json::array();
    for (Domain d : g.node_domains()) domains.push_back(std::string(to_string(d)));
    auto& edges = j["edges"] = nlohmann::json::array();
    for (const auto& e : g.edges()) edges.push_back({{"u", e.u}, {"v", e.v}, {"w", e.w}});
    return j;
}

inline CrossDomainGraph graph_from_json(const nlohmann::json& j)
{
    try {
        std::vector<Domain> domains;
        for (const auto& d : j.at("domains")) domains.push_back(domain_from_string(d.get<std::string>()));
        require(j.value("num_nodes", domains.size()) == domains.size(), ErrorCode::shape_mismatch,
                "graph dump: num_nodes disagrees with domain list");
        std::vector<WeightedEdge> edges;
        for (const auto& e : j.at("edges"))
            edges.push_back({e.at("u").get<NodeId>(), e.at("v").get<NodeId>(), e.at("w").get<double>()});
        return CrossDomainGraph(std::move(domains), edges);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, std::string("graph dump: ") + e.what());
    }
}

inline void save_graph(const std::filesystem::path& path, const CrossDomainGraph& g)
{
    auto out = detail::open_out(path);
    out << graph_to_json(g).dump() << "\n";
}

inline CrossDomainGraph load_graph(const std::filesystem::path& path)
{
    auto in = detail::open_in(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, "graph dump '" + path.string() + "': " + e.what());
    }
    return graph_from_json(j);
}

} // namespace couple
