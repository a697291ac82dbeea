#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "graph.hpp"

namespace couple {

/// How source mass is handled when a connected component holds more mass
/// than its nodes can absorb. With uniform capacity T = avg_degree / 2 and
/// source mass = weighted degree, a component is over capacity exactly when
/// its source-source edge weight exceeds its target-target edge weight, and
/// the quadratic program is then unbounded below.
enum class MassPolicy {
    verbatim,         ///< keep mass = weighted degree; overfull components diverge
    component_budget, ///< rescale an overfull component's mass to budget * capacity
};

struct DiffusionOptions {
    MassPolicy mass_policy = MassPolicy::component_budget;
    double mass_budget = 0.9; ///< fraction of component capacity, in (0, 1)
};

/// Source mass and per-node capacity on a graph.
struct DiffusionProblem {
    const CrossDomainGraph* graph = nullptr;
    std::vector<double> mass;
    std::vector<double> capacity;
    /// Component-wise factor applied to the mass (1 where untouched).
    std::vector<double> mass_scale;
};

/// Connected-component id per node, numbered in order of lowest member.
inline std::vector<std::uint32_t> connected_components(const CrossDomainGraph& g)
{
    constexpr auto unset = ~std::uint32_t{0};
    std::vector<std::uint32_t> comp(g.num_nodes(), unset);
    std::uint32_t next = 0;
    std::vector<NodeId> stack;
    for (NodeId start = 0; start < g.num_nodes(); ++start) {
        if (comp[start] != unset) continue;
        comp[start] = next;
        stack.push_back(start);
        while (!stack.empty()) {
            const NodeId u = stack.back();
            stack.pop_back();
            for (const auto& a : g.neighbors(u)) {
                if (comp[a.to] == unset) {
                    comp[a.to] = next;
                    stack.push_back(a.to);
                }
            }
        }
        ++next;
    }
    return comp;
}

/// Source nodes start with mass equal to their weighted degree, targets with
/// none; every node gets capacity average_degree / 2.
inline DiffusionProblem init_problem(const CrossDomainGraph& g, const DiffusionOptions& opt = {})
{
    require(g.num_nodes() > 0, ErrorCode::empty_input, "init_problem: empty graph");
    const double avg = average_degree(g);
    require(avg > 0.0, ErrorCode::invalid_argument, "init_problem: zero average degree");
    require(opt.mass_budget > 0.0 && opt.mass_budget < 1.0, ErrorCode::invalid_argument,
            "init_problem: mass budget must lie in (0, 1)");

    const std::size_t n = g.num_nodes();
    DiffusionProblem p;
    p.graph = &g;
    p.mass.assign(n, 0.0);
    p.capacity.assign(n, avg / 2.0);
    p.mass_scale.assign(n, 1.0);
    for (NodeId i = 0; i < n; ++i)
        if (g.domain(i) == Domain::source) p.mass[i] = g.weighted_degree(i);

    if (opt.mass_policy == MassPolicy::component_budget) {
        const auto comp = connected_components(g);
        const std::size_t n_comp = comp.empty() ? 0 : *std::max_element(comp.begin(), comp.end()) + 1;
        std::vector<double> comp_mass(n_comp, 0.0), comp_capacity(n_comp, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            comp_mass[comp[i]] += p.mass[i];
            comp_capacity[comp[i]] += p.capacity[i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = comp[i];
            if (comp_mass[c] > comp_capacity[c]) {
                p.mass_scale[i] = opt.mass_budget * comp_capacity[c] / comp_mass[c];
                p.mass[i] *= p.mass_scale[i];
            }
        }
    }
    return p;
}

struct SolveOptions {
    double tol = 1e-8;
    std::size_t max_iter = 100000;
    /// Over-relaxation factor in (0, 2); 1 is plain coordinate descent.
    double relaxation = 1.0;
    bool record_delivered_mass = false;
};

struct DiffusionSolution {
    std::vector<double> x;
    /// Flow along each canonical edge of the graph, oriented u -> v.
    std::vector<double> flows;
    /// Mass held at each node after the flows: mass + inflow - outflow.
    std::vector<double> net_mass;
    double kkt_residual = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    /// Sum of min(net_mass, capacity) after each sweep, when recorded.
    std::vector<double> delivered_mass_history;
};

/// Gradient of x'Lx + x'(T - Delta): 2(Lx)_i + T_i - Delta_i.
inline std::vector<double> diffusion_gradient(const DiffusionProblem& p, std::span<const double> x)
{
    const auto& g = *p.graph;
    std::vector<double> grad(g.num_nodes());
    for (NodeId i = 0; i < g.num_nodes(); ++i) {
        double lx = g.weighted_degree(i) * x[i];
        for (const auto& a : g.neighbors(i)) lx -= a.w * x[a.to];
        grad[i] = 2.0 * lx + p.capacity[i] - p.mass[i];
    }
    return grad;
}

/// Largest violation of g >= 0, x >= 0, x_i g_i = 0.
inline double kkt_residual(std::span<const double> x, std::span<const double> grad)
{
    double r = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i] > 0.0 ? std::abs(grad[i]) : std::max(0.0, -grad[i]);
        r = std::max(r, v);
    }
    return r;
}

namespace detail {

inline double delivered_mass(const DiffusionProblem& p, std::span<const double> grad)
{
    // net mass m_i = T_i - g_i
    double total = 0.0;
    for (std::size_t i = 0; i < grad.size(); ++i) total += std::min(p.capacity[i] - grad[i], p.capacity[i]);
    return total;
}

} // namespace detail

/// Cyclic coordinate descent on  min x'Lx + x'(T - Delta)  s.t. x >= 0.
///
/// Each coordinate takes its exact constrained minimizer
///   x_i = max(0, (sum_j w_ij x_j - (T_i - Delta_i) / 2) / deg_i)
/// in node order, so the result is deterministic. A relaxation factor other
/// than 1 turns the sweep into projected successive over-relaxation. Flows are recovered as
/// f(u -> v) = 2 w_uv (x_u - x_v), the primal solution for this scaling.
inline DiffusionSolution solve(const DiffusionProblem& p, const SolveOptions& opt = {})
{
    require(p.graph != nullptr, ErrorCode::invalid_argument, "solve: problem has no graph");
    require(opt.tol > 0.0, ErrorCode::invalid_argument, "solve: tolerance must be positive");
    require(opt.relaxation > 0.0 && opt.relaxation < 2.0, ErrorCode::invalid_argument,
            "solve: relaxation must lie in (0, 2)");
    const auto& g = *p.graph;
    const std::size_t n = g.num_nodes();

    for (NodeId i = 0; i < n; ++i) {
        require(std::isfinite(p.mass[i]) && std::isfinite(p.capacity[i]), ErrorCode::numerical,
                "solve: non-finite mass or capacity");
        if (g.weighted_degree(i) <= 0.0)
            require(p.capacity[i] >= p.mass[i], ErrorCode::numerical,
                    "solve: isolated node with excess mass makes the problem unbounded");
    }

    DiffusionSolution sol;
    sol.x.assign(n, 0.0);
    auto grad = diffusion_gradient(p, sol.x);
    sol.kkt_residual = kkt_residual(sol.x, grad);
    if (opt.record_delivered_mass) sol.delivered_mass_history.push_back(detail::delivered_mass(p, grad));

    while (sol.kkt_residual > opt.tol && sol.iterations < opt.max_iter) {
        for (NodeId i = 0; i < n; ++i) {
            const double deg = g.weighted_degree(i);
            if (deg <= 0.0) continue;
            double s = 0.0;
            for (const auto& a : g.neighbors(i)) s += a.w * sol.x[a.to];
            const double unconstrained = (s - 0.5 * (p.capacity[i] - p.mass[i])) / deg;
            sol.x[i] = std::max(0.0, sol.x[i] + opt.relaxation * (unconstrained - sol.x[i]));
        }
        ++sol.iterations;
        grad = diffusion_gradient(p, sol.x);
        sol.kkt_residual = kkt_residual(sol.x, grad);
        require(std::isfinite(sol.kkt_residual), ErrorCode::numerical,
                "solve: non-finite iterate (malformed weights?)");
        if (opt.record_delivered_mass) sol.delivered_mass_history.push_back(detail::delivered_mass(p, grad));
    }
    sol.converged = sol.kkt_residual <= opt.tol;

    // Where a component's mass equals its capacity the objective is flat
    // along the all-ones direction there; report the smallest minimizer so
    // relaxation drift cannot lift zero nodes. The gradient is unchanged.
    {
        const auto comp = connected_components(g);
        const std::size_t n_comp = n == 0 ? 0 : *std::max_element(comp.begin(), comp.end()) + 1;
        std::vector<double> slack(n_comp, 0.0), scale(n_comp, 0.0);
        std::vector<double> low(n_comp, std::numeric_limits<double>::infinity());
        for (std::size_t i = 0; i < n; ++i) {
            slack[comp[i]] += p.capacity[i] - p.mass[i];
            scale[comp[i]] += std::abs(p.capacity[i]) + std::abs(p.mass[i]);
            low[comp[i]] = std::min(low[comp[i]], sol.x[i]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = comp[i];
            if (std::abs(slack[c]) <= 1e-12 * scale[c]) sol.x[i] = std::max(0.0, sol.x[i] - low[c]);
        }
    }

    sol.flows.reserve(g.edge_count());
    for (const auto& e : g.edges()) sol.flows.push_back(2.0 * e.w * (sol.x[e.u] - sol.x[e.v]));
    sol.net_mass.resize(n);
    for (std::size_t i = 0; i < n; ++i) sol.net_mass[i] = p.capacity[i] - grad[i];
    return sol;
}

// ---------------------------------------------------------------------------
// Confident set
// ---------------------------------------------------------------------------

enum class QuotaBase {
    all_targets, ///< quota = ceil(gamma * n_t), zero-x nodes still excluded
    positive_x,  ///< quota = ceil(gamma * #{targets with x > 0})
};

struct ConfidentSet {
    std::vector<NodeId> member_ids; ///< graph node ids, ascending
    double gamma = 0.5;
    double threshold_value = 0.0;   ///< smallest x among members (0 if empty)
    std::size_t quota = 0;
};

inline std::size_t gamma_quota(double gamma, std::size_t count)
{
    // The small slack keeps products like 0.3 * 10 from rounding up to 4.
    const double q = std::ceil(gamma * static_cast<double>(count) - 1e-9);
    return std::min(count, static_cast<std::size_t>(std::max(0.0, q)));
}

/// Target nodes ranked by x descending (lower id first on ties); the top
/// quota with x > 0 are kept.
inline ConfidentSet select_confident(const DiffusionSolution& sol, const CrossDomainGraph& g, double gamma,
                                     QuotaBase base = QuotaBase::all_targets, bool require_converged = true)
{
    require(gamma > 0.0 && gamma <= 1.0, ErrorCode::invalid_argument, "select_confident: gamma must be in (0,1]");
    require(g.num_target() > 0, ErrorCode::empty_input, "select_confident: graph has no target nodes");
    require(!require_converged || sol.converged, ErrorCode::not_converged,
            "select_confident: diffusion did not converge");
    require(sol.x.size() == g.num_nodes(), ErrorCode::shape_mismatch, "select_confident: solution size mismatch");

    std::vector<NodeId> ranked;
    ranked.reserve(g.num_target());
    for (std::size_t t = 0; t < g.num_target(); ++t) ranked.push_back(g.target_node(t));
    std::stable_sort(ranked.begin(), ranked.end(), [&](NodeId a, NodeId b) { return sol.x[a] > sol.x[b]; });

    const auto positive = static_cast<std::size_t>(
        std::count_if(ranked.begin(), ranked.end(), [&](NodeId i) { return sol.x[i] > 0.0; }));
    ConfidentSet cs;
    cs.gamma = gamma;
    cs.quota = gamma_quota(gamma, base == QuotaBase::all_targets ? g.num_target() : positive);
    const std::size_t take = std::min(cs.quota, positive);
    cs.member_ids.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take));
    cs.threshold_value = take > 0 ? sol.x[cs.member_ids.back()] : 0.0;
    std::sort(cs.member_ids.begin(), cs.member_ids.end());
    return cs;
}

// ---------------------------------------------------------------------------
// Noise diagnostics
// ---------------------------------------------------------------------------

/// Quality of the confident set against correct/incorrect predictions.
/// Ratios with an empty denominator set are left empty.
struct NoiseDiagnostics {
    std::size_t correct = 0;   ///< |T|
    std::size_t incorrect = 0; ///< |N|
    std::size_t confident = 0; ///< |C|
    std::optional<double> a1;  ///< |T n C| / |T|
    std::optional<double> a0;  ///< |N \ C| / |N|
    std::optional<double> acc_f1;
    /// Per target: weight into correctly predicted targets over total weight.
    std::vector<double> alpha_per_node;
};

inline NoiseDiagnostics diagnostics(const ConfidentSet& cs, std::span<const ClassId> predicted,
                                    std::span<const ClassId> hidden, const CrossDomainGraph& g)
{
    const std::size_t n_t = g.num_target();
    require(predicted.size() == n_t && hidden.size() == n_t, ErrorCode::shape_mismatch,
            "diagnostics: label vectors must cover every target node");

    std::vector<std::uint8_t> in_correct(g.num_nodes(), 0), in_confident(g.num_nodes(), 0);
    for (NodeId id : cs.member_ids) {
        require(id < g.num_nodes() && g.is_target(id), ErrorCode::invalid_argument,
                "diagnostics: confident member is not a target node");
        in_confident[id] = 1;
    }
    NoiseDiagnostics d;
    std::size_t correct_and_conf = 0, incorrect_not_conf = 0, conf_not_correct = 0;
    for (std::size_t t = 0; t < n_t; ++t) {
        const NodeId id = g.target_node(t);
        const bool ok = predicted[t] == hidden[t];
        in_correct[id] = ok;
        if (ok) {
            ++d.correct;
            if (in_confident[id]) ++correct_and_conf;
        } else {
            ++d.incorrect;
            if (!in_confident[id]) ++incorrect_not_conf;
            if (in_confident[id]) ++conf_not_correct;
        }
    }
    d.confident = cs.member_ids.size();
    const std::size_t correct_not_conf = d.correct - correct_and_conf;

    if (d.correct > 0) d.a1 = static_cast<double>(correct_and_conf) / static_cast<double>(d.correct);
    if (d.incorrect > 0) d.a0 = static_cast<double>(incorrect_not_conf) / static_cast<double>(d.incorrect);
    const double denom = 2.0 * static_cast<double>(d.correct) + static_cast<double>(conf_not_correct) +
                         static_cast<double>(correct_not_conf);
    if (denom > 0.0) d.acc_f1 = 2.0 * static_cast<double>(d.correct) / denom;

    d.alpha_per_node.assign(n_t, 0.0);
    for (std::size_t t = 0; t < n_t; ++t) {
        const NodeId id = g.target_node(t);
        double to_correct = 0.0, total = 0.0;
        for (const auto& a : g.neighbors(id)) {
            total += a.w;
            if (in_correct[a.to]) to_correct += a.w;
        }
        d.alpha_per_node[t] = total > 0.0 ? to_correct / total : 0.0;
    }
    return d;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

inline nlohmann::json diffusion_report(const DiffusionProblem& p, const DiffusionSolution& sol,
                                       const ConfidentSet* cs = nullptr)
{
    nlohmann::json j;
    j["x"] = sol.x;
    j["mass"] = p.mass;
    j["capacity"] = p.capacity;
    j["net_mass"] = sol.net_mass;
    j["converged"] = sol.converged;
    j["iterations"] = sol.iterations;
    j["kkt_residual"] = sol.kkt_residual;
    if (cs) {
        j["confident"] = {{"ids", cs->member_ids},
                          {"gamma", cs->gamma},
                          {"quota", cs->quota},
                          {"threshold_value", cs->threshold_value}};
    }
    return j;
}

inline nlohmann::json diagnostics_to_json(const NoiseDiagnostics& d)
{
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"correct", d.correct},       {"incorrect", d.incorrect}, {"confident", d.confident},
            {"a1", opt(d.a1)},            {"a0", opt(d.a0)},          {"acc_f1", opt(d.acc_f1)},
            {"alpha", d.alpha_per_node}};
}

} // namespace couple
