#pragma once

#include <bit>
#include <chrono>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "common.hpp"
#include "dataset.hpp"
#include "rng.hpp"

namespace couple {

/// Bit-packed binary codes. Bit b of a code lives in word b / 64 at bit
/// position b % 64; a set bit means +1. Padding bits past L are zero.
struct BinaryCodeIndex {
    std::size_t n = 0;
    std::size_t L = 0;
    std::size_t words_per_code = 0;
    std::vector<std::uint64_t> packed;
    std::vector<std::uint64_t> ids;

    std::span<const std::uint64_t> code(std::size_t row) const
    {
        return {packed.data() + row * words_per_code, words_per_code};
    }
};

inline std::size_t words_for(std::size_t L) { return (L + 63) / 64; }

/// Packs a matrix of +-1 entries, one code per row. Ids default to row numbers.
inline BinaryCodeIndex pack(const Matrix& codes, std::vector<std::uint64_t> ids = {})
{
    BinaryCodeIndex idx;
    idx.n = static_cast<std::size_t>(codes.rows());
    idx.L = static_cast<std::size_t>(codes.cols());
    idx.words_per_code = words_for(idx.L);
    idx.packed.assign(idx.n * idx.words_per_code, 0);
    for (std::size_t i = 0; i < idx.n; ++i) {
        for (std::size_t b = 0; b < idx.L; ++b) {
            const double v = codes(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b));
            require(v == 1.0 || v == -1.0, ErrorCode::invalid_argument,
                    "pack: code entry at (" + std::to_string(i) + ", " + std::to_string(b) + ") is not +-1");
            if (v == 1.0) idx.packed[i * idx.words_per_code + b / 64] |= std::uint64_t{1} << (b % 64);
        }
    }
    if (ids.empty()) {
        ids.resize(idx.n);
        std::iota(ids.begin(), ids.end(), std::uint64_t{0});
    }
    require(ids.size() == idx.n, ErrorCode::shape_mismatch, "pack: id count differs from code count");
    idx.ids = std::move(ids);
    return idx;
}

inline Matrix unpack(const BinaryCodeIndex& idx)
{
    Matrix codes(static_cast<Eigen::Index>(idx.n), static_cast<Eigen::Index>(idx.L));
    for (std::size_t i = 0; i < idx.n; ++i)
        for (std::size_t b = 0; b < idx.L; ++b)
            codes(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) =
                ((idx.packed[i * idx.words_per_code + b / 64] >> (b % 64)) & 1u) ? 1.0 : -1.0;
    return codes;
}

/// Number of differing bits, i.e. (L - a'b) / 2 on the +-1 codes.
inline std::uint32_t hamming(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b)
{
    std::uint32_t d = 0;
    for (std::size_t w = 0; w < a.size(); ++w) d += static_cast<std::uint32_t>(std::popcount(a[w] ^ b[w]));
    return d;
}

struct Hit {
    std::uint32_t row = 0; ///< position in the index
    std::uint64_t id = 0;  ///< payload id
    std::uint32_t distance = 0;
};

struct SearchResult {
    std::vector<std::vector<Hit>> hits;
    bool clamped = false; ///< K exceeded the index size and was reduced to n
};

namespace detail {

inline void hamming_scan(const BinaryCodeIndex& idx, std::span<const std::uint64_t> query,
                         std::span<std::uint16_t> out, std::size_t begin, std::size_t end)
{
    const std::size_t wpc = idx.words_per_code;
    const std::uint64_t* base = idx.packed.data();
    if (wpc == 1) {
        const std::uint64_t q = query[0];
        for (std::size_t i = begin; i < end; ++i) out[i] = static_cast<std::uint16_t>(std::popcount(base[i] ^ q));
        return;
    }
    for (std::size_t i = begin; i < end; ++i) {
        std::uint32_t d = 0;
        const std::uint64_t* row = base + i * wpc;
        for (std::size_t w = 0; w < wpc; ++w) d += static_cast<std::uint32_t>(std::popcount(row[w] ^ query[w]));
        out[i] = static_cast<std::uint16_t>(d);
    }
}

/// Counting selection over distances in [0, L]: rows ordered by
/// (distance, row), first k kept.
inline std::vector<Hit> select_top_k(const BinaryCodeIndex& idx, std::span<const std::uint16_t> dist, std::size_t k,
                                     std::vector<std::uint32_t>& histogram)
{
    histogram.assign(idx.L + 2, 0);
    for (std::size_t i = 0; i < idx.n; ++i) ++histogram[dist[i]];
    std::size_t radius = 0, below = 0;
    while (radius <= idx.L && below + histogram[radius] < k) below += histogram[radius++];
    // all rows with distance < radius are kept, plus (k - below) at radius
    std::vector<std::uint32_t> offset(radius + 2, 0);
    for (std::size_t d = 0; d <= radius && d <= idx.L; ++d)
        offset[d + 1] = offset[d] + (d < radius ? histogram[d] : static_cast<std::uint32_t>(k - below));
    std::vector<Hit> hits(k);
    std::vector<std::uint32_t> cursor(offset.begin(), offset.end() - 1);
    for (std::size_t i = 0; i < idx.n; ++i) {
        const std::size_t d = dist[i];
        if (d > radius) continue;
        if (cursor[d] >= offset[d + 1]) continue;
        hits[cursor[d]++] = {static_cast<std::uint32_t>(i), idx.ids[i], static_cast<std::uint32_t>(d)};
    }
    return hits;
}

} // namespace detail

/// Reusable buffers for repeated single-query scans.
struct SearchScratch {
    std::vector<std::uint16_t> distances;
    std::vector<std::uint32_t> histogram;
};

namespace detail {

/// Small-K path: one fused pass that keeps a sorted buffer of the best K
/// and rejects a row with a single comparison once the buffer is full.
/// Rows arrive in increasing order and only strictly better rows enter, so
/// ties keep the lower row.
inline std::vector<Hit> scan_bounded(const BinaryCodeIndex& idx, std::span<const std::uint64_t> query, std::size_t k)
{
    std::vector<Hit> best;
    best.reserve(k + 1);
    const std::size_t wpc = idx.words_per_code;
    const std::uint64_t* base = idx.packed.data();
    std::uint32_t worst = ~std::uint32_t{0};
    auto offer = [&](std::size_t i, std::uint32_t d) {
        if (best.size() == k && d >= worst) return;
        auto pos = std::upper_bound(best.begin(), best.end(), d,
                                    [](std::uint32_t v, const Hit& h) { return v < h.distance; });
        best.insert(pos, Hit{static_cast<std::uint32_t>(i), idx.ids[i], d});
        if (best.size() > k) best.pop_back();
        if (best.size() == k) worst = best.back().distance;
    };
    if (wpc == 1) {
        const std::uint64_t q = query[0];
        for (std::size_t i = 0; i < idx.n; ++i) {
            const auto d = static_cast<std::uint32_t>(std::popcount(base[i] ^ q));
            if (d < worst) offer(i, d);
        }
    } else {
        for (std::size_t i = 0; i < idx.n; ++i) {
            std::uint32_t d = 0;
            const std::uint64_t* row = base + i * wpc;
            for (std::size_t w = 0; w < wpc; ++w) d += static_cast<std::uint32_t>(std::popcount(row[w] ^ query[w]));
            if (d < worst) offer(i, d);
        }
    }
    return best;
}

} // namespace detail

/// Top-K for one packed query code; K must not exceed the index size.
/// Sharded scanning (threads > 1) fills a distance array in parallel and
/// selects sequentially, giving the same hits as the single-threaded path.
inline std::vector<Hit> search_one(const BinaryCodeIndex& idx, std::span<const std::uint64_t> code, std::size_t K,
                                   SearchScratch& scratch, unsigned threads = 1)
{
    if (K == 0) return {};
    if (threads <= 1 && K <= 64) return detail::scan_bounded(idx, code, K);
    scratch.distances.resize(idx.n);
    auto& dist = scratch.distances;
    if (threads > 1) {
        parallel_for(
            idx.n, [&](std::size_t b, std::size_t e) { detail::hamming_scan(idx, code, dist, b, e); }, threads);
    } else {
        detail::hamming_scan(idx, code, dist, 0, idx.n);
    }
    return detail::select_top_k(idx, dist, K, scratch.histogram);
}

/// Exact linear-scan top-K by Hamming distance, ties to the lower row.
/// `threads` > 1 splits the distance scan into shards; the selection step
/// is sequential, so results match the single-threaded scan.
inline SearchResult search(const BinaryCodeIndex& idx, const BinaryCodeIndex& queries, std::size_t K,
                           unsigned threads = 1)
{
    require(K >= 1, ErrorCode::invalid_argument, "search: K must be at least 1");
    require(queries.L == idx.L, ErrorCode::shape_mismatch, "search: code lengths differ");
    SearchResult res;
    if (K > idx.n) {
        K = idx.n;
        res.clamped = true;
    }
    res.hits.resize(queries.n);
    SearchScratch scratch;
    for (std::size_t q = 0; q < queries.n; ++q) res.hits[q] = search_one(idx, queries.code(q), K, scratch, threads);
    return res;
}

/// Full ranking of the index for each query (K = n).
inline SearchResult rank_all(const BinaryCodeIndex& idx, const BinaryCodeIndex& queries)
{
    return search(idx, queries, std::max<std::size_t>(idx.n, 1));
}

// ---------------------------------------------------------------------------
// Dense baseline
// ---------------------------------------------------------------------------

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ScoredHit {
    std::uint32_t row = 0;
    float score = 0.0f;
};

/// Float32 exhaustive inner-product scan; top-K by score, ties to lower row.
inline std::vector<ScoredHit> dense_scan_baseline(const FloatMatrix& database, const Eigen::RowVectorXf& query,
                                                  std::size_t K)
{
    require(database.cols() == query.size(), ErrorCode::shape_mismatch, "dense_scan_baseline: dimension mismatch");
    K = std::min<std::size_t>(K, static_cast<std::size_t>(database.rows()));
    const Eigen::VectorXf scores = database * query.transpose();
    std::vector<ScoredHit> best;
    best.reserve(K + 1);
    float worst = -std::numeric_limits<float>::infinity();
    for (Eigen::Index i = 0; i < scores.size(); ++i) {
        const float s = scores(i);
        if (best.size() == K && !(s > worst)) continue;
        auto pos = std::upper_bound(best.begin(), best.end(), s, [](float v, const ScoredHit& h) { return v > h.score; });
        best.insert(pos, ScoredHit{static_cast<std::uint32_t>(i), s});
        if (best.size() > K) best.pop_back();
        if (best.size() == K) worst = best.back().score;
    }
    return best;
}

struct SpeedReport {
    std::size_t n = 0;
    std::size_t L = 0;
    std::size_t K = 0;
    std::size_t runs = 0;
    double hash_ms = 0.0;  ///< mean per query
    double dense_ms = 0.0; ///< mean per query
    double speedup() const { return hash_ms > 0.0 ? dense_ms / hash_ms : 0.0; }
};

/// Times single-query top-K on random codes: packed Hamming scan against a
/// float32 inner-product scan over the same n x L vectors.
inline SpeedReport speed_test(std::size_t n, std::size_t L, std::size_t runs, std::size_t K, std::uint64_t seed)
{
    require(n >= 1 && L >= 1 && runs >= 1 && K >= 1 && K <= n, ErrorCode::invalid_argument,
            "speed_test: need n, L, runs >= 1 and 1 <= K <= n");
    Rng rng(seed);
    Matrix codes(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(L));
    for (Eigen::Index i = 0; i < codes.rows(); ++i)
        for (Eigen::Index j = 0; j < codes.cols(); ++j) codes(i, j) = (rng.next_u64() & 1u) ? 1.0 : -1.0;
    const auto idx = pack(codes);
    const FloatMatrix dense = codes.cast<float>();

    Matrix qcodes(static_cast<Eigen::Index>(runs), static_cast<Eigen::Index>(L));
    for (Eigen::Index i = 0; i < qcodes.rows(); ++i)
        for (Eigen::Index j = 0; j < qcodes.cols(); ++j) qcodes(i, j) = (rng.next_u64() & 1u) ? 1.0 : -1.0;
    const auto queries = pack(qcodes);
    const FloatMatrix qdense = qcodes.cast<float>();

    using clock = std::chrono::steady_clock;
    SpeedReport r{n, L, K, runs, 0.0, 0.0};
    std::uint64_t sink = 0;

    auto t0 = clock::now();
    SearchScratch scratch;
    for (std::size_t q = 0; q < runs; ++q) {
        const auto hits = search_one(idx, queries.code(q), K, scratch);
        sink += hits.front().row;
    }
    auto t1 = clock::now();
    for (std::size_t q = 0; q < runs; ++q) {
        const Eigen::RowVectorXf query = qdense.row(static_cast<Eigen::Index>(q));
        const auto res = dense_scan_baseline(dense, query, K);
        sink += res.front().row;
    }
    auto t2 = clock::now();
    r.hash_ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(runs);
    r.dense_ms = std::chrono::duration<double, std::milli>(t2 - t1).count() / static_cast<double>(runs);
    if (sink == ~std::uint64_t{0}) r.runs = 0; // keeps the loops observable
    return r;
}

// ---------------------------------------------------------------------------
// Codes file
// ---------------------------------------------------------------------------

/// "HSH1", u32 n, u32 L, then n * ceil(L/64) u64 words little-endian.
/// Ids go to a separate file of n raw u64 values.
inline void save_codes(const std::filesystem::path& path, const BinaryCodeIndex& idx)
{
    auto out = detail::open_out(path);
    detail::write_magic(out, "HSH1");
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(idx.n));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(idx.L));
    for (auto w : idx.packed) detail::write_le<std::uint64_t>(out, w);
}

inline void save_ids(const std::filesystem::path& path, std::span<const std::uint64_t> ids)
{
    auto out = detail::open_out(path);
    for (auto id : ids) detail::write_le<std::uint64_t>(out, id);
}

inline std::vector<std::uint64_t> load_ids(const std::filesystem::path& path, std::size_t n)
{
    const std::string what = "ids file '" + path.string() + "'";
    auto in = detail::open_in(path);
    std::vector<std::uint64_t> ids(n);
    for (auto& id : ids) id = detail::read_le<std::uint64_t>(in, what);
    detail::expect_eof(in, what);
    return ids;
}

inline BinaryCodeIndex load_codes(const std::filesystem::path& path,
                                  const std::optional<std::filesystem::path>& ids_path = std::nullopt)
{
    const std::string what = "codes file '" + path.string() + "'";
    auto in = detail::open_in(path);
    detail::expect_magic(in, "HSH1", what);
    BinaryCodeIndex idx;
    idx.n = detail::read_le<std::uint32_t>(in, what);
    idx.L = detail::read_le<std::uint32_t>(in, what);
    require(idx.L > 0, ErrorCode::format, what + ": zero code length");
    idx.words_per_code = words_for(idx.L);
    idx.packed.resize(idx.n * idx.words_per_code);
    for (auto& w : idx.packed) w = detail::read_le<std::uint64_t>(in, what);
    detail::expect_eof(in, what);
    if (idx.L % 64 != 0) {
        const std::uint64_t mask = (std::uint64_t{1} << (idx.L % 64)) - 1;
        for (std::size_t i = 0; i < idx.n; ++i)
            require((idx.packed[i * idx.words_per_code + idx.words_per_code - 1] & ~mask) == 0, ErrorCode::format,
                    what + ": nonzero padding bits in row " + std::to_string(i));
    }
    if (ids_path) {
        idx.ids = load_ids(*ids_path, idx.n);
    } else {
        idx.ids.resize(idx.n);
        std::iota(idx.ids.begin(), idx.ids.end(), std::uint64_t{0});
    }
    return idx;
}

/// Appends the rows of b to a; both must share L.
inline BinaryCodeIndex concatenate(BinaryCodeIndex a, const BinaryCodeIndex& b)
{
    if (a.n == 0 && a.L == 0) return b;
    require(a.L == b.L, ErrorCode::shape_mismatch, "concatenate: code lengths differ");
    a.packed.insert(a.packed.end(), b.packed.begin(), b.packed.end());
    a.ids.insert(a.ids.end(), b.ids.begin(), b.ids.end());
    a.n += b.n;
    return a;
}

} // namespace couple
