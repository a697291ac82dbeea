#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "index.hpp"

namespace couple {

/// AP over a ranking given as relevance flags in rank order.
///
/// With cutoff = 0 the whole ranking is scored and the sum of precisions at
/// relevant ranks is divided by `total_relevant` (relevant items in the
/// database). With cutoff > 0 only the top `cutoff` ranks are scored and the
/// divisor is the number of relevant items found there.
inline double average_precision(std::span<const std::uint8_t> relevant_in_rank_order, std::size_t total_relevant,
                                std::size_t cutoff = 0)
{
    require(!relevant_in_rank_order.empty(), ErrorCode::empty_input, "average_precision: empty ranking");
    const std::size_t n = cutoff == 0 ? relevant_in_rank_order.size()
                                      : std::min(cutoff, relevant_in_rank_order.size());
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (!relevant_in_rank_order[r]) continue;
        ++hits;
        sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    const std::size_t divisor = cutoff == 0 ? total_relevant : hits;
    return divisor == 0 ? 0.0 : sum / static_cast<double>(divisor);
}

inline double average_precision(std::span<const std::uint8_t> relevant_in_rank_order)
{
    const auto total = static_cast<std::size_t>(
        std::count(relevant_in_rank_order.begin(), relevant_in_rank_order.end(), std::uint8_t{1}));
    return average_precision(relevant_in_rank_order, total);
}

struct PrPoint {
    std::size_t cutoff = 0;
    double recall = 0.0;
    double precision = 0.0;
};

/// Precision and recall at rank cutoffs 1..n, downsampled to `points`
/// evenly spaced cutoffs that always include the first and last rank.
inline std::vector<PrPoint> pr_curve(std::span<const std::uint8_t> relevant_in_rank_order, std::size_t total_relevant,
                                     std::size_t points)
{
    const std::size_t n = relevant_in_rank_order.size();
    std::vector<PrPoint> full(n);
    std::size_t hits = 0;
    for (std::size_t r = 0; r < n; ++r) {
        hits += relevant_in_rank_order[r] ? 1 : 0;
        full[r].cutoff = r + 1;
        full[r].precision = static_cast<double>(hits) / static_cast<double>(r + 1);
        full[r].recall = total_relevant == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total_relevant);
    }
    if (points == 0 || points >= n) return full;
    std::vector<PrPoint> out;
    out.reserve(points);
    if (points == 1) {
        out.push_back(full.back());
        return out;
    }
    for (std::size_t p = 0; p < points; ++p) {
        const std::size_t r = (p * (n - 1)) / (points - 1);
        out.push_back(full[r]);
    }
    return out;
}

struct TopNPoint {
    std::size_t n = 0;
    double precision = 0.0;
    double recall = 0.0;
    bool clamped = false; ///< requested N exceeded the ranking length
};

inline std::vector<TopNPoint> topn_curves(std::span<const std::uint8_t> relevant_in_rank_order,
                                          std::size_t total_relevant, std::span<const std::size_t> ns)
{
    std::vector<std::size_t> prefix(relevant_in_rank_order.size() + 1, 0);
    for (std::size_t r = 0; r < relevant_in_rank_order.size(); ++r)
        prefix[r + 1] = prefix[r] + (relevant_in_rank_order[r] ? 1 : 0);
    std::vector<TopNPoint> out;
    for (std::size_t requested : ns) {
        TopNPoint pt;
        pt.n = std::min(requested, relevant_in_rank_order.size());
        pt.clamped = pt.n != requested;
        if (pt.n > 0) pt.precision = static_cast<double>(prefix[pt.n]) / static_cast<double>(pt.n);
        pt.recall = total_relevant == 0 ? 0.0 : static_cast<double>(prefix[pt.n]) / static_cast<double>(total_relevant);
        out.push_back(pt);
    }
    return out;
}

/// Pearson correlation between code bits (columns). A constant column has
/// correlation 0 with every other column and 1 with itself.
inline Matrix bit_correlation(const Matrix& codes)
{
    require(codes.rows() >= 2, ErrorCode::invalid_argument, "bit_correlation: need at least two codes");
    const Eigen::Index L = codes.cols();
    const Matrix centered = codes.rowwise() - codes.colwise().mean();
    const Matrix cov = centered.transpose() * centered;
    Matrix corr = Matrix::Identity(L, L);
    for (Eigen::Index a = 0; a < L; ++a) {
        for (Eigen::Index b = a + 1; b < L; ++b) {
            const double denom = std::sqrt(cov(a, a) * cov(b, b));
            const double c = denom > 0.0 ? std::clamp(cov(a, b) / denom, -1.0, 1.0) : 0.0;
            corr(a, b) = corr(b, a) = c;
        }
    }
    return corr;
}

// ---------------------------------------------------------------------------
// Retrieval evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
    std::size_t map_cutoff = 0; ///< 0 = mAP over the full ranking
    std::size_t pr_points = 21;
    std::vector<std::size_t> topn = {1, 5, 10, 20, 50, 100, 200, 500, 1000};
    bool bit_correlation = true;
};

struct MetricsReport {
    double map = 0.0;
    std::size_t queries = 0;
    std::size_t excluded_queries = 0; ///< no relevant item in the database
    std::vector<PrPoint> pr_curve;    ///< mean over counted queries
    std::vector<TopNPoint> topn;      ///< mean over counted queries
    std::map<ClassId, double> per_class_map;
    Matrix bit_correlation;
};

/// Ranks the database by Hamming distance for every query and averages
/// the metrics over queries with at least one relevant database item.
inline MetricsReport evaluate_retrieval(const BinaryCodeIndex& queries, std::span<const ClassId> query_labels,
                                        const BinaryCodeIndex& database, std::span<const ClassId> database_labels,
                                        const EvalOptions& opt = {})
{
    require(query_labels.size() == queries.n && database_labels.size() == database.n, ErrorCode::shape_mismatch,
            "evaluate_retrieval: label counts differ from code counts");
    require(database.n > 0, ErrorCode::empty_input, "evaluate_retrieval: empty database");

    std::map<ClassId, std::size_t> class_count;
    for (ClassId y : database_labels) ++class_count[y];

    MetricsReport rep;
    rep.queries = queries.n;
    std::map<ClassId, std::pair<double, std::size_t>> per_class;
    std::vector<std::uint8_t> flags(database.n);
    SearchScratch scratch;
    std::size_t counted = 0;
    double map_sum = 0.0;

    for (std::size_t q = 0; q < queries.n; ++q) {
        const ClassId y = query_labels[q];
        const std::size_t total = class_count.count(y) ? class_count[y] : 0;
        if (total == 0) {
            ++rep.excluded_queries;
            continue;
        }
        const auto hits = search_one(database, queries.code(q), database.n, scratch);
        for (std::size_t r = 0; r < hits.size(); ++r) flags[r] = database_labels[hits[r].row] == y;
        const double ap = average_precision(flags, total, opt.map_cutoff);
        map_sum += ap;
        auto& pc = per_class[y];
        pc.first += ap;
        ++pc.second;

        const auto pr = pr_curve(flags, total, opt.pr_points);
        const auto tn = topn_curves(flags, total, opt.topn);
        if (counted == 0) {
            rep.pr_curve = pr;
            rep.topn = tn;
        } else {
            for (std::size_t i = 0; i < pr.size(); ++i) {
                rep.pr_curve[i].precision += pr[i].precision;
                rep.pr_curve[i].recall += pr[i].recall;
            }
            for (std::size_t i = 0; i < tn.size(); ++i) {
                rep.topn[i].precision += tn[i].precision;
                rep.topn[i].recall += tn[i].recall;
            }
        }
        ++counted;
    }
    if (counted > 0) {
        const double inv = 1.0 / static_cast<double>(counted);
        rep.map = map_sum * inv;
        for (auto& p : rep.pr_curve) p.precision *= inv, p.recall *= inv;
        for (auto& t : rep.topn) t.precision *= inv, t.recall *= inv;
    }
    for (const auto& [cls, acc] : per_class) rep.per_class_map[cls] = acc.first / static_cast<double>(acc.second);
    if (opt.bit_correlation && database.n >= 2) rep.bit_correlation = couple::bit_correlation(unpack(database));
    return rep;
}

inline nlohmann::json metrics_to_json(const MetricsReport& r)
{
    nlohmann::json j;
    j["map"] = r.map;
    j["queries"] = r.queries;
    j["excluded_queries"] = r.excluded_queries;
    auto& pr = j["pr_curve"] = nlohmann::json::array();
    for (const auto& p : r.pr_curve) pr.push_back({{"cutoff", p.cutoff}, {"recall", p.recall}, {"precision", p.precision}});
    auto& tn = j["topn"] = nlohmann::json::array();
    for (const auto& t : r.topn)
        tn.push_back({{"n", t.n}, {"precision", t.precision}, {"recall", t.recall}, {"clamped", t.clamped}});
    auto& pc = j["per_class_map"] = nlohmann::json::object();
    for (const auto& [cls, v] : r.per_class_map) pc[std::to_string(cls)] = v;
    auto& corr = j["bit_correlation"] = nlohmann::json::array();
    for (Eigen::Index a = 0; a < r.bit_correlation.rows(); ++a) {
        std::vector<double> row(r.bit_correlation.row(a).begin(), r.bit_correlation.row(a).end());
        corr.push_back(row);
    }
    return j;
}

/// Plot-ready CSVs: <stem>_pr.csv and <stem>_topn.csv.
inline void write_curves_csv(const std::filesystem::path& dir, const std::string& stem, const MetricsReport& r)
{
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / (stem + "_pr.csv"));
        require(out.good(), ErrorCode::io, "cannot write PR curve CSV");
        out << "cutoff,recall,precision\n";
        out.precision(17);
        for (const auto& p : r.pr_curve) out << p.cutoff << ',' << p.recall << ',' << p.precision << '\n';
    }
    {
        std::ofstream out(dir / (stem + "_topn.csv"));
        require(out.good(), ErrorCode::io, "cannot write top-N CSV");
        out << "n,precision,recall\n";
        out.precision(17);
        for (const auto& t : r.topn) out << t.n << ',' << t.precision << ',' << t.recall << '\n';
    }
}

/// Mean and sample standard deviation.
inline std::pair<double, double> mean_std(std::span<const double> values)
{
    if (values.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    if (values.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

} // namespace couple
