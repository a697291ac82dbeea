#include <chrono>
#include <fstream>

#include <gtest/gtest.h>

#include <couple/index.hpp>

#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace couple;

namespace {

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

double float_hamming(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j)
{
    return 0.5 * (static_cast<double>(a.cols()) - a.row(i).dot(b.row(j)));
}

/// Full ranking by (distance, row) from float arithmetic.
std::vector<std::pair<double, std::size_t>> full_sort(const Matrix& db, const Matrix& q, Eigen::Index qi)
{
    std::vector<std::pair<double, std::size_t>> order;
    for (Eigen::Index b = 0; b < db.rows(); ++b) order.push_back({float_hamming(q, qi, db, b), static_cast<std::size_t>(b)});
    std::sort(order.begin(), order.end());
    return order;
}

} // namespace

TEST(Pack, Examples)
{
    auto idx = pack(Matrix::Ones(1, 64));
    ASSERT_EQ(idx.words_per_code, 1u);
    EXPECT_EQ(idx.packed[0], ~std::uint64_t{0});
    idx = pack(-Matrix::Ones(2, 64));
    EXPECT_EQ(idx.packed[0], 0u);
    EXPECT_EQ(idx.packed[1], 0u);
    idx = pack(Matrix::Ones(1, 65));
    ASSERT_EQ(idx.words_per_code, 2u);
    EXPECT_EQ(idx.packed[0], ~std::uint64_t{0});
    EXPECT_EQ(idx.packed[1], 0x1u);
    Matrix one_bit = -Matrix::Ones(1, 8);
    one_bit(0, 3) = 1.0;
    EXPECT_EQ(pack(one_bit).packed[0], 0x8u);
}

TEST(Pack, RejectsNonBinaryAndIdMismatch)
{
    Matrix m = Matrix::Ones(2, 4);
    m(1, 2) = 0.0;
    EXPECT_EQ(code_of([&] { pack(m); }), ErrorCode::invalid_argument);
    EXPECT_EQ(code_of([] { pack(Matrix::Ones(2, 4), {7}); }), ErrorCode::shape_mismatch);
    EXPECT_EQ(pack(Matrix::Ones(2, 4), {7, 9}).ids, (std::vector<std::uint64_t>{7, 9}));
}

TEST(Pack, RoundTripAcrossCodeLengths)
{
    Rng rng(1);
    for (std::size_t L : {16, 32, 48, 64, 65, 96, 128}) {
        const Matrix c = oracle::random_signs(rng, 25, static_cast<Eigen::Index>(L));
        const auto idx = pack(c);
        EXPECT_EQ(unpack(idx), c) << L;
        EXPECT_EQ(pack(unpack(idx)).packed, idx.packed);
        if (L % 64) {
            const std::uint64_t mask = (std::uint64_t{1} << (L % 64)) - 1;
            for (std::size_t i = 0; i < idx.n; ++i) EXPECT_EQ(idx.code(i).back() & ~mask, 0u);
        }
    }
}

TEST(Hamming, ExamplesAndFloatOracle)
{
    Rng rng(2);
    const Matrix a = oracle::random_signs(rng, 1, 16);
    const auto pa = pack(a), pn = pack(-a);
    EXPECT_EQ(hamming(pa.code(0), pa.code(0)), 0u);
    EXPECT_EQ(hamming(pa.code(0), pn.code(0)), 16u);
    for (std::size_t L : {48, 64, 100, 128}) {
        const Matrix x = oracle::random_signs(rng, 20, static_cast<Eigen::Index>(L));
        const auto p = pack(x);
        for (Eigen::Index i = 0; i < 20; ++i)
            for (Eigen::Index j = 0; j < 20; ++j)
                EXPECT_EQ(static_cast<double>(hamming(p.code(i), p.code(j))), float_hamming(x, i, x, j));
    }
}

TEST(Hamming, MetricAxioms)
{
    Rng rng(3);
    const Matrix x = oracle::random_signs(rng, 30, 48);
    const auto p = pack(x);
    for (int t = 0; t < 500; ++t) {
        const auto a = rng.below(30), b = rng.below(30), c = rng.below(30);
        EXPECT_EQ(hamming(p.code(a), p.code(a)), 0u);
        EXPECT_EQ(hamming(p.code(a), p.code(b)), hamming(p.code(b), p.code(a)));
        EXPECT_LE(hamming(p.code(a), p.code(c)), hamming(p.code(a), p.code(b)) + hamming(p.code(b), p.code(c)));
    }
}

TEST(Search, EqualsFullSortOracle)
{
    Rng rng(4);
    for (std::size_t L : {16, 32, 48, 64, 96, 128}) {
        const std::size_t n = 150;
        Matrix db = oracle::random_signs(rng, n, static_cast<Eigen::Index>(L));
        for (int dup = 0; dup < 10; ++dup) db.row(n - 1 - dup) = db.row(dup);
        const Matrix q = oracle::random_signs(rng, 6, static_cast<Eigen::Index>(L));
        const auto idx = pack(db), qi = pack(q);
        for (std::size_t K : {std::size_t{1}, std::size_t{5}, std::size_t{64}, std::size_t{65}, n}) {
            const auto res = search(idx, qi, K);
            EXPECT_FALSE(res.clamped);
            for (Eigen::Index a = 0; a < q.rows(); ++a) {
                const auto order = full_sort(db, q, a);
                ASSERT_EQ(res.hits[a].size(), K);
                for (std::size_t r = 0; r < K; ++r) {
                    EXPECT_EQ(res.hits[a][r].row, order[r].second);
                    EXPECT_EQ(res.hits[a][r].distance, order[r].first);
                }
            }
        }
    }
}

TEST(Search, StoredCodeFirstAndTiesToLowerId)
{
    Rng rng(5);
    Matrix db = oracle::random_signs(rng, 10, 32);
    db.row(7) = db.row(3);
    const auto idx = pack(db, {100, 101, 102, 103, 104, 105, 106, 107, 108, 109});
    const auto res = search(idx, pack(db.row(3)), 2);
    EXPECT_EQ(res.hits[0][0].row, 3u);
    EXPECT_EQ(res.hits[0][0].id, 103u);
    EXPECT_EQ(res.hits[0][0].distance, 0u);
    EXPECT_EQ(res.hits[0][1].row, 7u);
}

TEST(Search, KBeyondSizeIsClampedAndFlagged)
{
    Rng rng(6);
    const auto idx = pack(oracle::random_signs(rng, 4, 16));
    const auto res = search(idx, pack(oracle::random_signs(rng, 2, 16)), 10);
    EXPECT_TRUE(res.clamped);
    EXPECT_EQ(res.hits[0].size(), 4u);
    EXPECT_EQ(code_of([&] { search(idx, idx, 0); }), ErrorCode::invalid_argument);
    EXPECT_EQ(code_of([&] { search(idx, pack(Matrix::Ones(1, 8)), 1); }), ErrorCode::shape_mismatch);
}

TEST(Search, ShardedScanMatchesSequential)
{
    Rng rng(7);
    const auto idx = pack(oracle::random_signs(rng, 3000, 64));
    const auto q = pack(oracle::random_signs(rng, 5, 64));
    for (std::size_t K : {std::size_t{10}, std::size_t{200}}) {
        const auto a = search(idx, q, K, 1), b = search(idx, q, K, 4);
        for (std::size_t i = 0; i < 5; ++i) {
            ASSERT_EQ(a.hits[i].size(), b.hits[i].size());
            for (std::size_t r = 0; r < K; ++r) {
                EXPECT_EQ(a.hits[i][r].row, b.hits[i][r].row);
                EXPECT_EQ(a.hits[i][r].distance, b.hits[i][r].distance);
            }
        }
    }
}

TEST(Search, RankAllIsNondecreasing)
{
    Rng rng(8);
    const auto idx = pack(oracle::random_signs(rng, 50, 24));
    const auto res = rank_all(idx, pack(oracle::random_signs(rng, 3, 24)));
    for (const auto& hits : res.hits) {
        ASSERT_EQ(hits.size(), 50u);
        for (std::size_t r = 1; r < hits.size(); ++r) {
            EXPECT_LE(hits[r - 1].distance, hits[r].distance);
            if (hits[r - 1].distance == hits[r].distance) {
                EXPECT_LT(hits[r - 1].row, hits[r].row);
            }
        }
    }
}

TEST(Dense, ValidRankingAgainstSortOracle)
{
    Rng rng(9);
    const FloatMatrix db = oracle::random_matrix(rng, 200, 16).cast<float>();
    const Eigen::RowVectorXf q = oracle::random_matrix(rng, 1, 16).cast<float>();
    const auto hits = dense_scan_baseline(db, q, 10);
    ASSERT_EQ(hits.size(), 10u);
    const Eigen::VectorXf s = db * q.transpose();
    std::vector<std::pair<float, std::uint32_t>> all;
    for (Eigen::Index i = 0; i < s.size(); ++i) all.push_back({-s(i), static_cast<std::uint32_t>(i)});
    std::sort(all.begin(), all.end());
    for (std::size_t r = 0; r < 10; ++r) EXPECT_EQ(hits[r].row, all[r].second);
}

TEST(Speed, SmallRunCompletesQuickly)
{
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = speed_test(1000, 64, 10, 10, 1);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_LT(secs, 1.0);
    EXPECT_EQ(rep.n, 1000u);
    EXPECT_GT(rep.hash_ms, 0.0);
    EXPECT_GT(rep.dense_ms, 0.0);
}

TEST(Files, CodesAndIdsRoundTrip)
{
    TempDir dir;
    Rng rng(10);
    for (std::size_t L : {16, 64, 96}) {
        const auto idx = pack(oracle::random_signs(rng, 12, static_cast<Eigen::Index>(L)),
                              {5, 4, 3, 2, 1, 0, 11, 10, 9, 8, 7, 6});
        save_codes(dir / "c.hsh", idx);
        save_ids(dir / "c.ids", idx.ids);
        const auto back = load_codes(dir / "c.hsh", dir / "c.ids");
        EXPECT_EQ(back.n, idx.n);
        EXPECT_EQ(back.L, L);
        EXPECT_EQ(back.packed, idx.packed);
        EXPECT_EQ(back.ids, idx.ids);
        EXPECT_EQ(std::filesystem::file_size(dir / "c.hsh"), 12u + 12u * words_for(L) * 8u);
    }
}

TEST(Files, RejectsNonzeroPaddingAndTruncation)
{
    TempDir dir;
    auto idx = pack(Matrix::Ones(2, 10));
    idx.packed[1] |= std::uint64_t{1} << 40;
    save_codes(dir / "pad.hsh", idx);
    EXPECT_EQ(code_of([&] { load_codes(dir / "pad.hsh"); }), ErrorCode::format);

    save_codes(dir / "ok.hsh", pack(Matrix::Ones(2, 10)));
    save_ids(dir / "short.ids", std::vector<std::uint64_t>{1});
    EXPECT_EQ(code_of([&] { load_codes(dir / "ok.hsh", dir / "short.ids"); }), ErrorCode::shape_mismatch);
    std::ofstream(dir / "bad.hsh") << "HSHX";
    EXPECT_EQ(code_of([&] { load_codes(dir / "bad.hsh"); }), ErrorCode::format);
}

TEST(Concatenate, AppendsRowsAndIds)
{
    const auto a = pack(Matrix::Ones(2, 8), {1, 2});
    const auto b = pack(-Matrix::Ones(1, 8), {9});
    const auto c = concatenate(a, b);
    EXPECT_EQ(c.n, 3u);
    EXPECT_EQ(c.ids, (std::vector<std::uint64_t>{1, 2, 9}));
    EXPECT_EQ(unpack(c).row(2), -RowVector::Ones(8));
    EXPECT_EQ(concatenate(BinaryCodeIndex{}, b).n, 1u);
    EXPECT_EQ(code_of([&] { concatenate(a, pack(Matrix::Ones(1, 9))); }), ErrorCode::shape_mismatch);
}
