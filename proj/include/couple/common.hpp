#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "error.hpp"

namespace couple {

/// Sample-major storage: one row per sample.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

using NodeId = std::uint32_t;
using ClassId = std::uint32_t;

enum class Domain : std::uint8_t { source, target };

inline std::string_view to_string(Domain d)
{
    return d == Domain::source ? "source" : "target";
}

inline Domain domain_from_string(std::string_view s)
{
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    throw Error(ErrorCode::format, "unknown domain tag '" + std::string(s) + "'");
}

/// Worker cap: COUPLE_THREADS if set and positive, else hardware concurrency.
inline unsigned worker_count()
{
    if (const char* env = std::getenv("COUPLE_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs body(begin, end) over contiguous chunks of [0, n). Each index is
/// visited by exactly one worker, so writes to per-index slots are safe.
template <class Body>
void parallel_for(std::size_t n, Body&& body, unsigned workers = worker_count())
{
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    if (workers <= 1) {
        if (n > 0) body(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&body, begin, end] { body(begin, end); });
    }
    for (auto& t : pool) t.join();
}

} // namespace couple
