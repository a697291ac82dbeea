#include <fstream>

#include <gtest/gtest.h>

#include <couple/dataset.hpp>

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

void write_text(const std::filesystem::path& p, const std::string& s)
{
    std::ofstream(p, std::ios::binary) << s;
}

} // namespace

TEST(Features, RoundTripIsFloat32Exact)
{
    TempDir dir;
    Rng rng(1);
    const Matrix m = oracle::random_matrix(rng, 7, 3);
    write_features(dir / "a.emb", m);
    const Matrix back = read_features(dir / "a.emb");
    ASSERT_EQ(back.rows(), 7);
    ASSERT_EQ(back.cols(), 3);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) EXPECT_EQ(back(i, j), static_cast<double>(static_cast<float>(m(i, j))));
    EXPECT_EQ(std::filesystem::file_size(dir / "a.emb"), 4u + 8u + 7u * 3u * 4u);
}

TEST(Features, RejectsBadMagicTruncationAndTrailingBytes)
{
    TempDir dir;
    write_text(dir / "bad.emb", "EMBX");
    EXPECT_EQ(code_of([&] { read_features(dir / "bad.emb"); }), ErrorCode::format);

    write_features(dir / "ok.emb", Matrix::Ones(2, 2));
    std::string bytes;
    {
        std::ifstream in(dir / "ok.emb", std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    write_text(dir / "short.emb", bytes.substr(0, bytes.size() - 1));
    EXPECT_EQ(code_of([&] { read_features(dir / "short.emb"); }), ErrorCode::shape_mismatch);
    write_text(dir / "long.emb", bytes + "x");
    EXPECT_EQ(code_of([&] { read_features(dir / "long.emb"); }), ErrorCode::shape_mismatch);
    EXPECT_EQ(code_of([&] { read_features(dir / "missing.emb"); }), ErrorCode::io);
}

TEST(Labels, RoundTrip)
{
    TempDir dir;
    const std::vector<ClassId> y = {0, 4, 2, 2, 9};
    write_labels(dir / "y.lbl", y);
    EXPECT_EQ(read_labels(dir / "y.lbl"), y);
}

TEST(Csv, ParsesFeaturesAndLabels)
{
    TempDir dir;
    write_text(dir / "a.csv", "1.5,2,0\r\n\n-3,4e-1,2\n");
    const auto [m, y] = read_csv(dir / "a.csv", true);
    ASSERT_EQ(m.rows(), 2);
    ASSERT_EQ(m.cols(), 2);
    EXPECT_DOUBLE_EQ(m(0, 0), 1.5);
    EXPECT_DOUBLE_EQ(m(1, 1), 0.4);
    ASSERT_TRUE(y.has_value());
    EXPECT_EQ(*y, (std::vector<ClassId>{0, 2}));

    const auto [m2, y2] = read_csv(dir / "a.csv", false);
    EXPECT_EQ(m2.cols(), 3);
    EXPECT_FALSE(y2.has_value());
}

TEST(Csv, RaggedRowsAndBadCells)
{
    TempDir dir;
    write_text(dir / "ragged.csv", "1,2\n3\n");
    EXPECT_EQ(code_of([&] { read_csv(dir / "ragged.csv", false); }), ErrorCode::shape_mismatch);
    write_text(dir / "nan.csv", "1,abc\n");
    EXPECT_EQ(code_of([&] { read_csv(dir / "nan.csv", false); }), ErrorCode::format);
    write_text(dir / "label.csv", "1,2,-1\n");
    EXPECT_EQ(code_of([&] { read_csv(dir / "label.csv", true); }), ErrorCode::format);
}

TEST(Manifest, SaveLoadRoundTrip)
{
    TempDir dir;
    EmbeddingDataset ds;
    ds.name = "demo";
    ds.domain = Domain::target;
    ds.features = Matrix::Constant(4, 2, 0.25);
    ds.labels = std::vector<ClassId>{0, 1, 2, 1};
    ds.num_classes = 3;
    const auto manifest = save_dataset(ds, dir.path(), "demo");
    const auto back = load_dataset(manifest);
    EXPECT_EQ(back.name, "demo");
    EXPECT_EQ(back.domain, Domain::target);
    EXPECT_EQ(back.num_classes, 3u);
    EXPECT_TRUE(back.features.isApprox(ds.features));
    EXPECT_EQ(back.labels, ds.labels);
}

TEST(Manifest, LabelCountMismatchIsShapeError)
{
    TempDir dir;
    write_features(dir / "x.emb", Matrix::Zero(3, 2));
    write_labels(dir / "x.lbl", {0, 1});
    write_text(dir / "x.json",
               R"({"name":"x","domain":"source","features":"x.emb","labels":"x.lbl","num_classes":2})");
    EXPECT_EQ(code_of([&] { load_dataset(dir / "x.json"); }), ErrorCode::shape_mismatch);
}

TEST(Manifest, DeclaredShapeIsChecked)
{
    TempDir dir;
    write_features(dir / "x.emb", Matrix::Zero(3, 2));
    write_text(dir / "x.json", R"({"name":"x","domain":"source","features":"x.emb","num_classes":2,"n":4,"d":2})");
    EXPECT_EQ(code_of([&] { load_dataset(dir / "x.json"); }), ErrorCode::shape_mismatch);
}

TEST(Validate, LabelOutOfRangeAndNonFinite)
{
    EmbeddingDataset ds;
    ds.features = Matrix::Zero(2, 2);
    ds.labels = std::vector<ClassId>{0, 3};
    ds.num_classes = 3;
    EXPECT_EQ(code_of([&] { ds.validate(); }), ErrorCode::invalid_argument);
    ds.labels = std::vector<ClassId>{0, 2};
    ds.validate();
    ds.features(1, 1) = std::nan("");
    EXPECT_EQ(code_of([&] { ds.validate(); }), ErrorCode::numerical);
}

TEST(Normalize, ExamplesAndIdempotence)
{
    Matrix m(3, 2);
    m << 3, 4, 0, 0, -2, 0;
    l2_normalize_rows(m);
    EXPECT_DOUBLE_EQ(m(0, 0), 0.6);
    EXPECT_DOUBLE_EQ(m(0, 1), 0.8);
    EXPECT_EQ(m(1, 0), 0.0);
    EXPECT_EQ(m(1, 1), 0.0);
    EXPECT_DOUBLE_EQ(m(2, 0), -1.0);

    Rng rng(3);
    Matrix r = oracle::random_matrix(rng, 20, 5, 3.0);
    l2_normalize_rows(r);
    Matrix again = r;
    l2_normalize_rows(again);
    EXPECT_LT((again - r).cwiseAbs().maxCoeff(), 1e-15);
    for (Eigen::Index i = 0; i < r.rows(); ++i) EXPECT_NEAR(r.row(i).norm(), 1.0, 1e-12);
}

TEST(SyntheticShift, DeterministicPerSeed)
{
    const auto a = make_synthetic_shift(5, 4, 40, 30, 6, 1.0, 0.2);
    const auto b = make_synthetic_shift(5, 4, 40, 30, 6, 1.0, 0.2);
    const auto c = make_synthetic_shift(6, 4, 40, 30, 6, 1.0, 0.2);
    EXPECT_EQ(a.source.features, b.source.features);
    EXPECT_EQ(a.target.features, b.target.features);
    EXPECT_EQ(a.corrupted_targets, b.corrupted_targets);
    EXPECT_NE(a.source.features, c.source.features);
    EXPECT_FALSE(a.target.labels.has_value());
    EXPECT_EQ(std::count(a.corrupted_targets.begin(), a.corrupted_targets.end(), 1), 6);
    for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ((*a.source.labels)[i], i % 4);
}

TEST(SyntheticShift, NoShiftNoNoiseIsNearestNeighborSeparable)
{
    // Nearest source neighbor of each target, by brute force.
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        const auto t = make_synthetic_shift(seed, 5, 500, 500, 16, 0.0, 0.0);
        std::size_t correct = 0;
        for (Eigen::Index i = 0; i < t.target.features.rows(); ++i) {
            Eigen::Index best = 0;
            (t.source.features.rowwise() - t.target.features.row(i)).rowwise().squaredNorm().minCoeff(&best);
            correct += (*t.source.labels)[best] == t.hidden_target_labels[i];
        }
        EXPECT_GE(correct, 475u) << "seed " << seed;
    }
}

TEST(SyntheticShift, ShiftMovesTargetMeanByShift)
{
    const auto a = make_synthetic_shift(9, 3, 3000, 3000, 8, 0.0, 0.0);
    const auto b = make_synthetic_shift(9, 3, 3000, 3000, 8, 2.5, 0.0);
    const RowVector delta = b.target.features.colwise().mean() - a.target.features.colwise().mean();
    EXPECT_NEAR(delta.norm(), 2.5, 0.05);
}

TEST(SyntheticShift, RejectsBadArguments)
{
    EXPECT_EQ(code_of([] { make_synthetic_shift(0, 1, 10, 10, 2, 0, 0); }), ErrorCode::invalid_argument);
    EXPECT_EQ(code_of([] { make_synthetic_shift(0, 3, 10, 10, 2, -1, 0); }), ErrorCode::invalid_argument);
    EXPECT_EQ(code_of([] { make_synthetic_shift(0, 3, 10, 10, 2, 0, 1.5); }), ErrorCode::invalid_argument);
}

TEST(Digits, ShapesAndDeterminism)
{
    const auto a = make_digits_transfer(2, 60, 40);
    const auto b = make_digits_transfer(2, 60, 40);
    EXPECT_EQ(a.source.features.rows(), 60);
    EXPECT_EQ(a.target.features.rows(), 40);
    EXPECT_EQ(a.source.num_classes, 10u);
    EXPECT_EQ(a.source.features, b.source.features);
    EXPECT_EQ(a.target.features, b.target.features);
    a.source.validate();
    EXPECT_EQ(a.hidden_target_labels.size(), 40u);
}

TEST(Batches, ExactMultipleAndRemainder)
{
    std::vector<std::uint32_t> pool(64);
    std::iota(pool.begin(), pool.end(), 0u);
    const auto b64 = sample_batches(100, pool, 32, 7);
    ASSERT_EQ(b64.size(), 2u);
    EXPECT_EQ(b64[0].target_indices.size(), 32u);
    EXPECT_EQ(b64[1].source_indices.size(), 32u);

    const std::span<const std::uint32_t> first33(pool.data(), 33);
    const auto b33 = sample_batches(100, first33, 32, 7);
    ASSERT_EQ(b33.size(), 2u);
    EXPECT_EQ(b33[0].target_indices.size(), 32u);
    EXPECT_EQ(b33[1].target_indices.size(), 1u);
    EXPECT_EQ(b33[1].source_indices.size(), 1u);
}

TEST(Batches, EpochCoversPoolOnceAndIsDeterministic)
{
    std::vector<std::uint32_t> pool = {3, 9, 11, 20, 21, 40, 41};
    const auto a = sample_batches(5, pool, 3, 99);
    const auto b = sample_batches(5, pool, 3, 99);
    std::vector<std::uint32_t> seen;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].target_indices, b[i].target_indices);
        EXPECT_EQ(a[i].source_indices, b[i].source_indices);
        EXPECT_EQ(a[i].rng_seed, b[i].rng_seed);
        seen.insert(seen.end(), a[i].target_indices.begin(), a[i].target_indices.end());
        for (auto s : a[i].source_indices) EXPECT_LT(s, 5u);
    }
    std::sort(seen.begin(), seen.end());
    EXPECT_EQ(seen, pool);
    // The first five source draws are a permutation of [0, 5).
    std::vector<std::uint32_t> src;
    for (const auto& batch : a) src.insert(src.end(), batch.source_indices.begin(), batch.source_indices.end());
    std::vector<std::uint32_t> head(src.begin(), src.begin() + 5);
    std::sort(head.begin(), head.end());
    EXPECT_EQ(head, (std::vector<std::uint32_t>{0, 1, 2, 3, 4}));
}

TEST(Batches, RejectsEmptyAndZeroSize)
{
    std::vector<std::uint32_t> pool = {1};
    EXPECT_EQ(code_of([&] { sample_batches(0, pool, 2, 0); }), ErrorCode::empty_input);
    EXPECT_EQ(code_of([&] { sample_batches(3, {}, 2, 0); }), ErrorCode::empty_input);
    EXPECT_EQ(code_of([&] { sample_batches(3, pool, 0, 0); }), ErrorCode::invalid_argument);
}

TEST(SourceEpoch, CoversEverySourceOnce)
{
    const auto e = source_epoch(10, 4, 1);
    ASSERT_EQ(e.size(), 3u);
    EXPECT_EQ(e[2].size(), 2u);
    std::vector<std::uint32_t> all;
    for (const auto& b : e) all.insert(all.end(), b.begin(), b.end());
    std::sort(all.begin(), all.end());
    for (std::uint32_t i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);
}
