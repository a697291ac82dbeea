#pragma once

#include <cmath>
#include <memory>

#include "common.hpp"
#include "rng.hpp"

namespace couple {

/// Frozen feature extractor applied before the hash head.
class Encoder {
public:
    virtual ~Encoder() = default;
    virtual Matrix encode(const Matrix& inputs) const = 0;
    virtual std::size_t output_dim(std::size_t input_dim) const = 0;
};

class IdentityEncoder final : public Encoder {
public:
    Matrix encode(const Matrix& inputs) const override { return inputs; }
    std::size_t output_dim(std::size_t input_dim) const override { return input_dim; }
};

/// f = tanh(x A + c) with A, c drawn once from a seeded Gaussian and never
/// trained. Gives pixel-level and feature-level mixing distinct meanings.
class RandomFeatureEncoder final : public Encoder {
public:
    RandomFeatureEncoder(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed)
        : projection_(input_dim, output_dim), offset_(output_dim)
    {
        Rng rng(seed);
        const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
        for (Eigen::Index i = 0; i < projection_.rows(); ++i)
            for (Eigen::Index j = 0; j < projection_.cols(); ++j) projection_(i, j) = rng.normal(0.0, scale);
        for (Eigen::Index j = 0; j < offset_.size(); ++j) offset_(j) = rng.normal(0.0, 0.1);
    }

    Matrix encode(const Matrix& inputs) const override
    {
        require(inputs.cols() == projection_.rows(), ErrorCode::shape_mismatch,
                "RandomFeatureEncoder: input dimension mismatch");
        Matrix out = inputs * projection_;
        out.rowwise() += offset_;
        return out.array().tanh().matrix();
    }

    std::size_t output_dim(std::size_t) const override { return static_cast<std::size_t>(projection_.cols()); }

private:
    Matrix projection_;
    RowVector offset_;
};

} // namespace couple
