#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "rng.hpp"

namespace couple {

/// Feature vectors for one domain, optionally labeled.
struct EmbeddingDataset {
    std::string name;
    Domain domain = Domain::source;
    Matrix features;
    std::optional<std::vector<ClassId>> labels;
    std::uint32_t num_classes = 0;

    std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
    bool has_labels() const { return labels.has_value(); }

    void validate() const
    {
        require(features.allFinite(), ErrorCode::numerical,
                "dataset '" + name + "' has non-finite features");
        if (labels) {
            require(labels->size() == size(), ErrorCode::shape_mismatch,
                    "dataset '" + name + "': label count differs from row count");
            for (ClassId y : *labels) {
                require(y < num_classes, ErrorCode::invalid_argument,
                        "dataset '" + name + "': label " + std::to_string(y) +
                            " out of range for " + std::to_string(num_classes) + " classes");
            }
        }
    }
};

/// Index pairs drawn for one optimization step.
struct MiniBatch {
    std::vector<std::uint32_t> source_indices;
    std::vector<std::uint32_t> target_indices;
    std::uint64_t rng_seed = 0;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T byteswap_if_big(T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    } else {
        return v;
    }
}

template <class T>
void write_le(std::ostream& out, T v)
{
    v = byteswap_if_big(v);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& in, const std::string& what)
{
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(in.gcount() == static_cast<std::streamsize>(sizeof(T)), ErrorCode::shape_mismatch,
            what + ": truncated payload");
    return byteswap_if_big(v);
}

inline void write_magic(std::ostream& out, std::string_view magic)
{
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic, const std::string& what)
{
    std::array<char, 4> buf{};
    in.read(buf.data(), 4);
    require(in.gcount() == 4 && std::string_view(buf.data(), 4) == magic, ErrorCode::format,
            what + ": expected magic '" + std::string(magic) + "'");
}

inline std::ifstream open_in(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    require(in.good(), ErrorCode::io, "cannot open '" + p.string() + "'");
    return in;
}

inline std::ofstream open_out(const std::filesystem::path& p)
{
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    require(out.good(), ErrorCode::io, "cannot write '" + p.string() + "'");
    return out;
}

inline void expect_eof(std::istream& in, const std::string& what)
{
    in.peek();
    require(in.eof(), ErrorCode::shape_mismatch, what + ": payload longer than header declares");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Binary feature and label files
// ---------------------------------------------------------------------------

/// "EMB1", u32 n, u32 d, n*d float32 row-major, little-endian.
inline void write_features(const std::filesystem::path& path, const Matrix& features)
{
    auto out = detail::open_out(path);
    detail::write_magic(out, "EMB1");
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(features.rows()));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(features.cols()));
    for (Eigen::Index i = 0; i < features.rows(); ++i)
        for (Eigen::Index j = 0; j < features.cols(); ++j)
            detail::write_le<float>(out, static_cast<float>(features(i, j)));
}

inline Matrix read_features(const std::filesystem::path& path)
{
    const std::string what = "feature file '" + path.string() + "'";
    auto in = detail::open_in(path);
    detail::expect_magic(in, "EMB1", what);
    const auto n = detail::read_le<std::uint32_t>(in, what);
    const auto d = detail::read_le<std::uint32_t>(in, what);
    Matrix m(n, d);
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = 0; j < d; ++j)
            m(i, j) = detail::read_le<float>(in, what);
    detail::expect_eof(in, what);
    return m;
}

/// "LBL1", u32 n, n u32 class ids.
inline void write_labels(const std::filesystem::path& path, const std::vector<ClassId>& labels)
{
    auto out = detail::open_out(path);
    detail::write_magic(out, "LBL1");
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(labels.size()));
    for (ClassId y : labels) detail::write_le<std::uint32_t>(out, y);
}

inline std::vector<ClassId> read_labels(const std::filesystem::path& path)
{
    const std::string what = "label file '" + path.string() + "'";
    auto in = detail::open_in(path);
    detail::expect_magic(in, "LBL1", what);
    const auto n = detail::read_le<std::uint32_t>(in, what);
    std::vector<ClassId> labels(n);
    for (auto& y : labels) y = detail::read_le<std::uint32_t>(in, what);
    detail::expect_eof(in, what);
    return labels;
}

/// Textual fallback: one sample per line, comma separated. When
/// `last_column_is_label` the final column is parsed as an integer class id.
inline std::pair<Matrix, std::optional<std::vector<ClassId>>>
read_csv(const std::filesystem::path& path, bool last_column_is_label)
{
    auto in = detail::open_in(path);
    std::vector<std::vector<double>> rows;
    std::vector<ClassId> labels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        require(!cells.empty(), ErrorCode::format, where + ": empty row");
        if (last_column_is_label) {
            std::size_t used = 0;
            long long y = -1;
            try {
                y = std::stoll(cells.back(), &used);
            } catch (const std::exception&) {
                used = 0;
            }
            require(used > 0 && y >= 0, ErrorCode::format, where + ": bad label '" + cells.back() + "'");
            labels.push_back(static_cast<ClassId>(y));
            cells.pop_back();
        }
        std::vector<double> row;
        row.reserve(cells.size());
        for (const auto& c : cells) {
            try {
                row.push_back(std::stod(c));
            } catch (const std::exception&) {
                throw Error(ErrorCode::format, where + ": bad number '" + c + "'");
            }
        }
        require(rows.empty() || rows.front().size() == row.size(), ErrorCode::shape_mismatch,
                where + ": column count differs from first row");
        rows.push_back(std::move(row));
    }
    const std::size_t d = rows.empty() ? 0 : rows.front().size();
    Matrix m(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) m(i, j) = rows[i][j];
    std::optional<std::vector<ClassId>> out_labels;
    if (last_column_is_label) out_labels = std::move(labels);
    return {std::move(m), std::move(out_labels)};
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Reads a JSON manifest. Relative paths resolve against the manifest's
/// directory. Optional keys beyond the required ones:
///   "format": "emb1" (default) | "csv"
///   "csv_label_column": bool, last CSV column holds labels
///   "n", "d": expected shape, checked against the payload when present
inline EmbeddingDataset load_dataset(const std::filesystem::path& manifest_path)
{
    auto in = detail::open_in(manifest_path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, "manifest '" + manifest_path.string() + "': " + e.what());
    }
    const auto base = manifest_path.parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base / path;
    };

    EmbeddingDataset ds;
    try {
        ds.name = j.at("name").get<std::string>();
        ds.domain = domain_from_string(j.at("domain").get<std::string>());
        ds.num_classes = j.at("num_classes").get<std::uint32_t>();
        const auto feature_path = resolve(j.at("features").get<std::string>());
        require(std::filesystem::exists(feature_path), ErrorCode::io,
                "missing feature file '" + feature_path.string() + "'");
        const std::string format = j.value("format", std::string("emb1"));
        if (format == "csv") {
            auto [m, labels] = read_csv(feature_path, j.value("csv_label_column", false));
            ds.features = std::move(m);
            ds.labels = std::move(labels);
        } else {
            require(format == "emb1", ErrorCode::format, "unknown feature format '" + format + "'");
            ds.features = read_features(feature_path);
        }
        if (j.contains("labels") && !j["labels"].is_null()) {
            const auto label_path = resolve(j["labels"].get<std::string>());
            require(std::filesystem::exists(label_path), ErrorCode::io,
                    "missing label file '" + label_path.string() + "'");
            ds.labels = read_labels(label_path);
        }
        if (j.contains("n"))
            require(j["n"].get<std::size_t>() == ds.size(), ErrorCode::shape_mismatch,
                    "manifest declares n=" + j["n"].dump() + " but payload has " +
                        std::to_string(ds.size()) + " rows");
        if (j.contains("d"))
            require(j["d"].get<std::size_t>() == ds.dim(), ErrorCode::shape_mismatch,
                    "manifest declares d=" + j["d"].dump() + " but payload has " +
                        std::to_string(ds.dim()) + " columns");
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, "manifest '" + manifest_path.string() + "': " + e.what());
    }
    ds.validate();
    return ds;
}

/// Writes `<stem>.emb`, `<stem>.lbl` (if labeled) and `<stem>.json` into dir;
/// returns the manifest path.
inline std::filesystem::path save_dataset(const EmbeddingDataset& ds, const std::filesystem::path& dir,
                                          const std::string& stem)
{
    std::filesystem::create_directories(dir);
    write_features(dir / (stem + ".emb"), ds.features);
    nlohmann::json j;
    j["name"] = ds.name;
    j["domain"] = std::string(to_string(ds.domain));
    j["features"] = stem + ".emb";
    j["num_classes"] = ds.num_classes;
    j["n"] = ds.size();
    j["d"] = ds.dim();
    if (ds.labels) {
        write_labels(dir / (stem + ".lbl"), *ds.labels);
        j["labels"] = stem + ".lbl";
    }
    const auto manifest = dir / (stem + ".json");
    auto out = detail::open_out(manifest);
    out << j.dump(2) << "\n";
    return manifest;
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

inline void l2_normalize_rows(Matrix& m)
{
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double norm = m.row(i).norm();
        if (norm > 0.0) m.row(i) /= norm;
    }
}

/// Scales each nonzero row to unit Euclidean norm; zero rows stay zero.
inline EmbeddingDataset l2_normalize(EmbeddingDataset ds)
{
    l2_normalize_rows(ds.features);
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic benchmarks
// ---------------------------------------------------------------------------

/// A source/target pair plus the target labels that only evaluation may see.
struct TransferTask {
    EmbeddingDataset source;
    EmbeddingDataset target;
    std::vector<ClassId> hidden_target_labels;
    /// Synthetic benchmarks only: 1 where a target was drawn off its class.
    std::vector<std::uint8_t> corrupted_targets;
};

struct SyntheticShiftOptions {
    double center_scale = 1.0;   ///< stddev of cluster-center coordinates
    double cluster_spread = 0.35; ///< per-coordinate stddev around a center
    double noise_spread = 2.0;    ///< spread multiplier for mislocated target points
};

/// Gaussian clusters in d dimensions. The target copies the source clusters,
/// translated by `shift` along one random unit direction; a `noise_frac`
/// share of target points is drawn around a wrong cluster's center instead.
inline TransferTask make_synthetic_shift(std::uint64_t seed, std::uint32_t num_classes, std::size_t n_source,
                                         std::size_t n_target, std::size_t dim, double shift, double noise_frac,
                                         const SyntheticShiftOptions& opt = {})
{
    require(num_classes >= 2, ErrorCode::invalid_argument, "synthetic shift needs at least 2 classes");
    require(shift >= 0.0, ErrorCode::invalid_argument, "shift must be nonnegative");
    require(noise_frac >= 0.0 && noise_frac <= 1.0, ErrorCode::invalid_argument, "noise_frac must be in [0,1]");
    require(dim >= 1, ErrorCode::invalid_argument, "dimension must be positive");

    Rng rng(seed);
    Matrix centers(num_classes, dim);
    for (Eigen::Index c = 0; c < centers.rows(); ++c)
        for (Eigen::Index j = 0; j < centers.cols(); ++j) centers(c, j) = rng.normal(0.0, opt.center_scale);

    RowVector direction(dim);
    for (Eigen::Index j = 0; j < direction.size(); ++j) direction(j) = rng.normal();
    direction /= direction.norm();

    auto draw = [&](Matrix& out, std::size_t row, std::uint32_t cluster, double offset, double spread) {
        for (std::size_t j = 0; j < dim; ++j)
            out(row, j) = centers(cluster, j) + offset * direction(j) + rng.normal(0.0, spread);
    };

    TransferTask task;
    task.source.name = "synthetic-source";
    task.source.domain = Domain::source;
    task.source.num_classes = num_classes;
    task.source.features.resize(n_source, dim);
    std::vector<ClassId> source_labels(n_source);
    for (std::size_t i = 0; i < n_source; ++i) {
        source_labels[i] = static_cast<ClassId>(i % num_classes);
        draw(task.source.features, i, source_labels[i], 0.0, opt.cluster_spread);
    }
    task.source.labels = std::move(source_labels);

    std::vector<std::uint8_t> noisy(n_target, 0);
    const auto n_noisy = static_cast<std::size_t>(std::llround(noise_frac * static_cast<double>(n_target)));
    std::vector<std::size_t> order(n_target);
    for (std::size_t i = 0; i < n_target; ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t i = 0; i < n_noisy; ++i) noisy[order[i]] = 1;

    task.target.name = "synthetic-target";
    task.target.domain = Domain::target;
    task.target.num_classes = num_classes;
    task.target.features.resize(n_target, dim);
    task.hidden_target_labels.resize(n_target);
    for (std::size_t i = 0; i < n_target; ++i) {
        const auto label = static_cast<ClassId>(i % num_classes);
        task.hidden_target_labels[i] = label;
        std::uint32_t cluster = label;
        double spread = opt.cluster_spread;
        if (noisy[i]) {
            cluster = static_cast<std::uint32_t>(rng.below(num_classes - 1));
            if (cluster >= label) ++cluster;
            spread *= opt.noise_spread;
        }
        draw(task.target.features, i, cluster, shift, spread);
    }
    task.corrupted_targets = std::move(noisy);
    return task;
}

namespace detail {

// 5x7 glyphs for 0..9, one row per string, '#' = ink.
inline const std::array<std::array<const char*, 7>, 10>& digit_glyphs()
{
    static const std::array<std::array<const char*, 7>, 10> glyphs = {{
        {" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "},
        {"  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "},
        {" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"},
        {"#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "},
        {"   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "},
        {"#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "},
        {"  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "},
        {"#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "},
        {" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "},
        {" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "},
    }};
    return glyphs;
}

struct DigitStyle {
    bool thick = false;      ///< dilate strokes by one pixel to the right
    double ink = 1.0;        ///< stroke intensity
    double background = 0.0; ///< blank-page intensity
    double pixel_noise = 0.1;
    int max_jitter = 1;      ///< uniform translation in [-j, j] per axis
};

inline void render_digit(Rng& rng, std::uint32_t digit, const DigitStyle& style, Matrix& out, std::size_t row)
{
    std::array<double, 64> canvas{};
    canvas.fill(style.background);
    const auto& glyph = digit_glyphs()[digit];
    const int dx = static_cast<int>(rng.below(2 * style.max_jitter + 1)) - style.max_jitter;
    const int dy = static_cast<int>(rng.below(2 * style.max_jitter + 1)) - style.max_jitter;
    auto ink_at = [&](int r, int c) {
        if (r >= 0 && r < 8 && c >= 0 && c < 8) canvas[r * 8 + c] = style.ink;
    };
    for (int r = 0; r < 7; ++r) {
        for (int c = 0; c < 5; ++c) {
            if (glyph[r][c] != '#') continue;
            const int rr = r + dy;
            const int cc = c + 1 + dx;
            ink_at(rr, cc);
            if (style.thick) ink_at(rr, cc + 1);
        }
    }
    for (std::size_t p = 0; p < 64; ++p) out(row, p) = canvas[p] + rng.normal(0.0, style.pixel_noise);
}

} // namespace detail

/// 8x8 digit images in two rendering styles: thin dark-on-light glyphs for
/// the source, thick low-contrast glyphs on a gray background for the target.
inline TransferTask make_digits_transfer(std::uint64_t seed, std::size_t n_source, std::size_t n_target)
{
    Rng rng(seed);
    const detail::DigitStyle source_style{false, 1.0, 0.0, 0.15, 1};
    const detail::DigitStyle target_style{true, 0.8, 0.25, 0.2, 1};

    TransferTask task;
    task.source.name = "digits-thin";
    task.source.domain = Domain::source;
    task.source.num_classes = 10;
    task.source.features.resize(n_source, 64);
    std::vector<ClassId> source_labels(n_source);
    for (std::size_t i = 0; i < n_source; ++i) {
        source_labels[i] = static_cast<ClassId>(i % 10);
        detail::render_digit(rng, source_labels[i], source_style, task.source.features, i);
    }
    task.source.labels = std::move(source_labels);

    task.target.name = "digits-thick";
    task.target.domain = Domain::target;
    task.target.num_classes = 10;
    task.target.features.resize(n_target, 64);
    task.hidden_target_labels.resize(n_target);
    for (std::size_t i = 0; i < n_target; ++i) {
        task.hidden_target_labels[i] = static_cast<ClassId>(i % 10);
        detail::render_digit(rng, task.hidden_target_labels[i], target_style, task.target.features, i);
    }
    return task;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One epoch over `target_pool`: the pool is shuffled and cut into batches
/// of `batch_size`, the last one possibly shorter. Each batch is paired with
/// the same number of source indices, drawn without replacement from a
/// reshuffled permutation of [0, n_source).
inline std::vector<MiniBatch> sample_batches(std::size_t n_source, std::span<const std::uint32_t> target_pool,
                                             std::size_t batch_size, std::uint64_t seed)
{
    require(n_source > 0 && !target_pool.empty(), ErrorCode::empty_input, "sample_batches: empty index pool");
    require(batch_size > 0, ErrorCode::invalid_argument, "sample_batches: batch size must be positive");
    Rng rng(seed);
    std::vector<std::uint32_t> targets(target_pool.begin(), target_pool.end());
    rng.shuffle(std::span<std::uint32_t>(targets));

    std::vector<std::uint32_t> source_perm(n_source);
    std::size_t source_cursor = n_source;
    auto next_source = [&]() {
        if (source_cursor == n_source) {
            for (std::size_t i = 0; i < n_source; ++i) source_perm[i] = static_cast<std::uint32_t>(i);
            rng.shuffle(std::span<std::uint32_t>(source_perm));
            source_cursor = 0;
        }
        return source_perm[source_cursor++];
    };

    std::vector<MiniBatch> batches;
    for (std::size_t begin = 0; begin < targets.size(); begin += batch_size) {
        const std::size_t end = std::min(targets.size(), begin + batch_size);
        MiniBatch b;
        b.target_indices.assign(targets.begin() + static_cast<std::ptrdiff_t>(begin),
                                targets.begin() + static_cast<std::ptrdiff_t>(end));
        b.source_indices.reserve(end - begin);
        for (std::size_t k = begin; k < end; ++k) b.source_indices.push_back(next_source());
        b.rng_seed = mix_seed(seed ^ batches.size());
        batches.push_back(std::move(b));
    }
    return batches;
}

/// Source-only epoch used during warm-up: every source index once.
inline std::vector<std::vector<std::uint32_t>> source_epoch(std::size_t n_source, std::size_t batch_size,
                                                            std::uint64_t seed)
{
    require(n_source > 0, ErrorCode::empty_input, "source_epoch: empty source set");
    Rng rng(seed);
    std::vector<std::uint32_t> perm(n_source);
    for (std::size_t i = 0; i < n_source; ++i) perm[i] = static_cast<std::uint32_t>(i);
    rng.shuffle(std::span<std::uint32_t>(perm));
    std::vector<std::vector<std::uint32_t>> out;
    for (std::size_t begin = 0; begin < n_source; begin += batch_size) {
        const std::size_t end = std::min(n_source, begin + batch_size);
        out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(begin),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

} // namespace couple
