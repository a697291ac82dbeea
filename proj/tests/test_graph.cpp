#include <set>
#include <tuple>

#include <gtest/gtest.h>

#include <couple/graph.hpp>

#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace couple;

namespace {

using EdgeKey = std::pair<NodeId, NodeId>;

std::set<EdgeKey> edge_keys(const CrossDomainGraph& g)
{
    std::set<EdgeKey> out;
    for (const auto& e : g.edges()) out.insert({e.u, e.v});
    return out;
}

/// Expected edge set from the definitions, using exhaustive neighbor lists.
std::set<EdgeKey> mnn_oracle(const Matrix& s, const std::vector<ClassId>& ys, const Matrix& t, std::size_t k)
{
    const auto n_s = static_cast<NodeId>(s.rows());
    std::set<EdgeKey> out;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const auto st = oracle::top_k(t, s.row(i), k);
        for (auto j : st) {
            const auto ts = oracle::top_k(s, t.row(static_cast<Eigen::Index>(j)), k);
            if (std::find(ts.begin(), ts.end(), static_cast<std::size_t>(i)) != ts.end())
                out.insert({static_cast<NodeId>(i), static_cast<NodeId>(n_s + j)});
        }
    }
    const std::size_t kt = std::min<std::size_t>(k, t.rows() - 1);
    for (Eigen::Index a = 0; a < t.rows(); ++a)
        for (auto b : oracle::top_k(t, t.row(a), kt, a)) {
            const auto back = oracle::top_k(t, t.row(static_cast<Eigen::Index>(b)), kt, static_cast<long>(b));
            if (std::find(back.begin(), back.end(), static_cast<std::size_t>(a)) != back.end())
                out.insert({static_cast<NodeId>(n_s + std::min<std::size_t>(a, b)),
                            static_cast<NodeId>(n_s + std::max<std::size_t>(a, b))});
        }
    for (std::size_t i = 0; i < ys.size(); ++i)
        for (std::size_t j = i + 1; j < ys.size(); ++j)
            if (ys[i] == ys[j]) out.insert({static_cast<NodeId>(i), static_cast<NodeId>(j)});
    return out;
}

ErrorCode code_of(const std::function<void()>& fn)
{
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected couple::Error";
    return ErrorCode::io;
}

} // namespace

TEST(Knn, SelfRankedFirst)
{
    Rng rng(1);
    const Matrix base = oracle::random_matrix(rng, 6, 4);
    const auto r = knn(base.row(3), base, 2);
    EXPECT_EQ(r[0][0].id, 3u);
    EXPECT_NEAR(r[0][0].similarity, 1.0, 1e-12);
}

TEST(Knn, AntipodalOrdering)
{
    Matrix base(2, 1), q(1, 1);
    base << 1, -1;
    q << 1;
    const auto r = knn(q, base, 2);
    EXPECT_EQ(r[0][0].id, 0u);
    EXPECT_EQ(r[0][1].id, 1u);
    EXPECT_DOUBLE_EQ(r[0][1].similarity, -1.0);
}

TEST(Knn, MatchesExhaustiveSort)
{
    Rng rng(2);
    for (int trial = 0; trial < 30; ++trial) {
        const Matrix base = oracle::random_matrix(rng, 4 + trial % 9, 3);
        const Matrix q = oracle::random_matrix(rng, 5, 3);
        const std::size_t k = 1 + static_cast<std::size_t>(trial) % 4;
        const auto r = knn(q, base, k);
        for (Eigen::Index i = 0; i < q.rows(); ++i) {
            const auto expect = oracle::top_k(base, q.row(i), k);
            ASSERT_EQ(r[i].size(), k);
            for (std::size_t j = 0; j < k; ++j) {
                EXPECT_EQ(r[i][j].id, expect[j]);
                EXPECT_NEAR(r[i][j].similarity, oracle::cosine(base.row(expect[j]), q.row(i)), 1e-12);
            }
        }
    }
}

TEST(Knn, TiesBreakByLowerId)
{
    Matrix base(4, 2), q(1, 2);
    base << 1, 0, 0, 1, 2, 0, 0, 3;
    q << 1, 1;
    const auto r = knn(q, base, 4);
    std::vector<std::uint32_t> ids;
    for (const auto& n : r[0]) ids.push_back(n.id);
    EXPECT_EQ(ids, (std::vector<std::uint32_t>{0, 1, 2, 3}));
}

TEST(Knn, ExcludeSelf)
{
    Rng rng(4);
    const Matrix base = oracle::random_matrix(rng, 5, 3);
    const auto r = knn(base, base, 4, true);
    for (std::size_t i = 0; i < 5; ++i)
        for (const auto& n : r[i]) EXPECT_NE(n.id, i);
}

TEST(Knn, Errors)
{
    const Matrix empty(0, 2), one = Matrix::Ones(1, 2), three = Matrix::Ones(1, 3);
    EXPECT_EQ(code_of([&] { knn(one, empty, 1); }), ErrorCode::empty_input);
    EXPECT_EQ(code_of([&] { knn(one, one, 2); }), ErrorCode::invalid_argument);
    EXPECT_EQ(code_of([&] { knn(one, one, 0); }), ErrorCode::invalid_argument);
    EXPECT_EQ(code_of([&] { knn(three, one, 1); }), ErrorCode::shape_mismatch);
}

TEST(Mnn, IdenticalSingletons)
{
    Matrix s(1, 3), t(1, 3);
    s << 1, 2, 3;
    t << 1, 2, 3;
    const std::vector<ClassId> y = {0};
    const auto g = build_mnn_graph(s, y, t, GraphOptions{.k = 1});
    ASSERT_EQ(g.edge_count(), 1u);
    EXPECT_EQ(g.edges()[0].u, 0u);
    EXPECT_EQ(g.edges()[0].v, 1u);
    EXPECT_NEAR(g.edges()[0].w, 1.0, 1e-12);
}

TEST(Mnn, SameLabelSourcesAlwaysJoined)
{
    Matrix s(2, 2), t(1, 2);
    s << 1, 0, -1, 0.001;
    t << 0, 1;
    const std::vector<ClassId> y = {4, 4};
    const auto g = build_mnn_graph(s, y, t, GraphOptions{.k = 1});
    EXPECT_EQ(g.weight(0, 1), 1.0);
    EXPECT_EQ(g.weight(1, 0), 1.0);
}

TEST(Mnn, PlantedPointsMatchOracle)
{
    Matrix s(3, 2), t(3, 2);
    s << 1, 0.1, 0.1, 1, -1, 0.2;
    t << 0.9, 0.2, 0.2, 0.8, 0.5, 0.5;
    const std::vector<ClassId> y = {0, 1, 2};
    const auto g = build_mnn_graph(s, y, t, GraphOptions{.k = 1});
    EXPECT_EQ(edge_keys(g), mnn_oracle(s, y, t, 1));
}

TEST(Mnn, RandomInstancesMatchOracleAndInvariants)
{
    Rng rng(7);
    for (int trial = 0; trial < 25; ++trial) {
        const Eigen::Index ns = 3 + trial % 6, nt = 3 + (trial * 7) % 8;
        const Matrix s = oracle::random_matrix(rng, ns, 4), t = oracle::random_matrix(rng, nt, 4);
        std::vector<ClassId> y(ns);
        for (auto& v : y) v = static_cast<ClassId>(rng.below(3));
        const std::size_t k = 1 + trial % 3;
        const auto g = build_mnn_graph(s, y, t, GraphOptions{.k = k});
        EXPECT_EQ(edge_keys(g), mnn_oracle(s, y, t, k)) << "trial " << trial;

        for (NodeId i = 0; i < g.num_nodes(); ++i) {
            double deg = 0.0;
            for (const auto& a : g.neighbors(i)) {
                EXPECT_NE(a.to, i);
                EXPECT_GE(a.w, 0.0);
                EXPECT_LE(a.w, 1.0);
                EXPECT_EQ(g.weight(a.to, i), a.w);
                deg += a.w;
            }
            EXPECT_NEAR(g.weighted_degree(i), deg, 1e-9);
        }
        for (const auto& e : g.edges()) {
            if (e.u < g.num_source() && e.v < g.num_source()) continue;
            const auto a = e.u < ns ? Eigen::RowVectorXd(s.row(e.u)) : Eigen::RowVectorXd(t.row(e.u - ns));
            const Eigen::RowVectorXd b = t.row(e.v - ns);
            EXPECT_NEAR(e.w, std::clamp(oracle::cosine(a, b), 0.0, 1.0), 1e-12);
        }
    }
}

TEST(Mnn, CenteringRemovesDomainOffset)
{
    Rng rng(8);
    const Matrix s = oracle::random_matrix(rng, 12, 3);
    const std::vector<ClassId> y(12, 0);
    const Matrix t = s.rowwise() + Eigen::RowVector3d(50, -20, 30);
    GraphOptions opt{.k = 1, .center_domains = true};
    const auto g = build_mnn_graph(s, y, t, opt);
    // With the offset removed every source pairs with its own translated copy.
    for (NodeId i = 0; i < 12; ++i) EXPECT_NEAR(g.weight(i, 12 + i), 1.0, 1e-9) << i;
}

TEST(Mnn, PermutationEquivariance)
{
    Rng rng(9);
    const Eigen::Index ns = 10, nt = 9;
    const Matrix s = oracle::random_matrix(rng, ns, 5), t = oracle::random_matrix(rng, nt, 5);
    std::vector<ClassId> y(ns);
    for (auto& v : y) v = static_cast<ClassId>(rng.below(3));
    std::vector<std::size_t> ps(ns), pt(nt);
    std::iota(ps.begin(), ps.end(), 0);
    std::iota(pt.begin(), pt.end(), 0);
    rng.shuffle(std::span<std::size_t>(ps));
    rng.shuffle(std::span<std::size_t>(pt));
    Matrix s2(ns, 5), t2(nt, 5);
    std::vector<ClassId> y2(ns);
    for (Eigen::Index i = 0; i < ns; ++i) s2.row(i) = s.row(ps[i]), y2[i] = y[ps[i]];
    for (Eigen::Index i = 0; i < nt; ++i) t2.row(i) = t.row(pt[i]);

    const auto g = build_mnn_graph(s, y, t);
    const auto g2 = build_mnn_graph(s2, y2, t2);
    auto original = [&](NodeId v) -> NodeId {
        return v < ns ? static_cast<NodeId>(ps[v]) : static_cast<NodeId>(ns + pt[v - ns]);
    };
    std::set<std::tuple<NodeId, NodeId>> mapped;
    for (const auto& e : g2.edges()) {
        const NodeId a = original(e.u), b = original(e.v);
        mapped.insert({std::min(a, b), std::max(a, b)});
        EXPECT_NEAR(g.weight(a, b), e.w, 1e-12);
    }
    std::set<std::tuple<NodeId, NodeId>> direct;
    for (const auto& e : g.edges()) direct.insert({e.u, e.v});
    EXPECT_EQ(mapped, direct);
}

TEST(Mnn, Errors)
{
    const Matrix s = Matrix::Ones(2, 3), t = Matrix::Ones(2, 2);
    const std::vector<ClassId> y = {0, 1};
    EXPECT_EQ(code_of([&] { build_mnn_graph(s, y, t); }), ErrorCode::shape_mismatch);
    EmbeddingDataset src, tgt;
    src.features = Matrix::Ones(2, 2);
    tgt.features = Matrix::Ones(2, 2);
    EXPECT_EQ(code_of([&] { build_mnn_graph(src, tgt); }), ErrorCode::invalid_argument);
}

TEST(Graph, DuplicatesKeepMaxAndRejectBadEdges)
{
    const std::vector<Domain> d = {Domain::source, Domain::target};
    const std::vector<WeightedEdge> e = {{0, 1, 0.2}, {1, 0, 0.7}};
    const CrossDomainGraph g(d, e);
    EXPECT_EQ(g.edge_count(), 1u);
    EXPECT_EQ(g.weight(0, 1), 0.7);
    const std::vector<WeightedEdge> loop = {{1, 1, 0.5}}, neg = {{0, 1, -0.5}}, far = {{0, 5, 0.5}};
    EXPECT_EQ(code_of([&] { CrossDomainGraph(d, loop); }), ErrorCode::invalid_argument);
    EXPECT_EQ(code_of([&] { CrossDomainGraph(d, neg); }), ErrorCode::invalid_argument);
    EXPECT_EQ(code_of([&] { CrossDomainGraph(d, far); }), ErrorCode::invalid_argument);
    const std::vector<Domain> bad = {Domain::target, Domain::source};
    EXPECT_EQ(code_of([&] { CrossDomainGraph(bad, {}); }), ErrorCode::invalid_argument);
}

TEST(AverageDegree, Examples)
{
    const std::vector<WeightedEdge> one = {{0, 1, 1.0}};
    EXPECT_DOUBLE_EQ(average_degree(CrossDomainGraph({Domain::source, Domain::target}, one)), 1.0);
    const std::vector<WeightedEdge> tri = {{0, 1, 1.0}, {1, 2, 1.0}, {0, 2, 1.0}};
    EXPECT_DOUBLE_EQ(average_degree(CrossDomainGraph({Domain::source, Domain::target, Domain::target}, tri)), 2.0);
    EXPECT_EQ(code_of([] { average_degree(CrossDomainGraph()); }), ErrorCode::empty_input);

    Rng rng(10);
    const auto g = oracle::random_graph(rng, 3, 5, 0.5);
    double total = 0.0;
    for (const auto& e : g.edges()) total += 2.0 * e.w;
    EXPECT_NEAR(average_degree(g), total / 8.0, 1e-12);
}

TEST(GraphJson, RoundTripIsLossless)
{
    TempDir dir;
    Rng rng(11);
    const auto g = oracle::random_graph(rng, 4, 6, 0.6);
    save_graph(dir / "g.json", g);
    const auto back = load_graph(dir / "g.json");
    EXPECT_EQ(back.node_domains(), g.node_domains());
    ASSERT_EQ(back.edge_count(), g.edge_count());
    for (std::size_t i = 0; i < g.edge_count(); ++i) {
        EXPECT_EQ(back.edges()[i].u, g.edges()[i].u);
        EXPECT_EQ(back.edges()[i].v, g.edges()[i].v);
        EXPECT_EQ(back.edges()[i].w, g.edges()[i].w);
    }
    EXPECT_EQ(code_of([] { graph_from_json(nlohmann::json::parse(R"({"edges":[]})")); }), ErrorCode::format);
}
