#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "rng.hpp"

namespace couple {

/// Hash head: two tanh layers mapping d-dimensional features to L relaxed
/// bits, plus one learnable prototype row per class.
struct HashModel {
    Matrix W1; ///< d x h
    RowVector b1;
    Matrix W2; ///< h x L
    RowVector b2;
    Matrix Z;  ///< C x L prototype logits

    std::size_t input_dim() const { return static_cast<std::size_t>(W1.rows()); }
    std::size_t hidden_dim() const { return static_cast<std::size_t>(W1.cols()); }
    std::size_t code_length() const { return static_cast<std::size_t>(W2.cols()); }
    std::size_t num_classes() const { return static_cast<std::size_t>(Z.rows()); }

    static HashModel zeros(std::size_t d, std::size_t h, std::size_t L, std::size_t C)
    {
        HashModel m;
        m.W1 = Matrix::Zero(d, h);
        m.b1 = RowVector::Zero(h);
        m.W2 = Matrix::Zero(h, L);
        m.b2 = RowVector::Zero(L);
        m.Z = Matrix::Zero(C, L);
        return m;
    }

    /// Glorot-uniform weights, zero biases, standard-normal prototypes.
    static HashModel init(std::size_t d, std::size_t h, std::size_t L, std::size_t C, std::uint64_t seed)
    {
        require(d > 0 && h > 0 && L > 0 && C > 0, ErrorCode::invalid_argument, "HashModel: zero dimension");
        HashModel m = zeros(d, h, L, C);
        Rng rng(seed);
        auto glorot = [&](Matrix& w) {
            const double a = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-a, a);
        };
        glorot(m.W1);
        glorot(m.W2);
        for (Eigen::Index c = 0; c < m.Z.rows(); ++c)
            for (Eigen::Index j = 0; j < m.Z.cols(); ++j) m.Z(c, j) = rng.normal();
        return m;
    }

    /// Relaxed prototypes tanh(Z).
    Matrix relaxed_prototypes() const { return Z.array().tanh().matrix(); }

    bool all_finite() const
    {
        return W1.allFinite() && b1.allFinite() && W2.allFinite() && b2.allFinite() && Z.allFinite();
    }

    /// Rounds every parameter to float32 precision, the checkpoint precision.
    void round_to_float()
    {
        auto r = [](auto& m) { m = m.template cast<float>().template cast<double>(); };
        r(W1), r(b1), r(W2), r(b2), r(Z);
    }
};

/// Parameter-shaped gradient container.
struct Gradients {
    Matrix W1;
    RowVector b1;
    Matrix W2;
    RowVector b2;
    Matrix Z;

    static Gradients zeros_like(const HashModel& m)
    {
        return {Matrix::Zero(m.W1.rows(), m.W1.cols()), RowVector::Zero(m.b1.size()),
                Matrix::Zero(m.W2.rows(), m.W2.cols()), RowVector::Zero(m.b2.size()),
                Matrix::Zero(m.Z.rows(), m.Z.cols())};
    }

    Gradients& add(const Gradients& o, double scale = 1.0)
    {
        W1 += scale * o.W1;
        b1 += scale * o.b1;
        W2 += scale * o.W2;
        b2 += scale * o.b2;
        Z += scale * o.Z;
        return *this;
    }

    bool all_finite() const
    {
        return W1.allFinite() && b1.allFinite() && W2.allFinite() && b2.allFinite() && Z.allFinite();
    }

    std::array<double, 5> block_norms() const { return {W1.norm(), b1.norm(), W2.norm(), b2.norm(), Z.norm()}; }
};

/// Applies f(param_block, grad_block) to the five blocks in checkpoint order.
template <class M, class G, class F>
void for_each_block(M& model, G& grads, F&& f)
{
    f(model.W1, grads.W1);
    f(model.b1, grads.b1);
    f(model.W2, grads.W2);
    f(model.b2, grads.b2);
    f(model.Z, grads.Z);
}

struct LossValue {
    double value = 0.0;
    Gradients grad;
};

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct Codes {
    Matrix relaxed; ///< tanh outputs in (-1, 1)
    Matrix binary;  ///< sign of relaxed, sign(0) = +1
};

inline Matrix sign_codes(const Matrix& relaxed)
{
    return relaxed.unaryExpr([](double v) { return v >= 0.0 ? 1.0 : -1.0; });
}

/// Intermediate activations kept for backpropagation.
struct ForwardCache {
    Matrix inputs;
    Matrix hidden;  ///< tanh(X W1 + b1)
    Matrix relaxed; ///< tanh(H W2 + b2)
};

inline ForwardCache forward_cache(const HashModel& model, const Matrix& inputs)
{
    require(static_cast<std::size_t>(inputs.cols()) == model.input_dim(), ErrorCode::shape_mismatch,
            "forward: feature dimension " + std::to_string(inputs.cols()) + " != model input " +
                std::to_string(model.input_dim()));
    ForwardCache c;
    c.inputs = inputs;
    Matrix pre = inputs * model.W1;
    pre.rowwise() += model.b1;
    c.hidden = pre.array().tanh().matrix();
    Matrix out = c.hidden * model.W2;
    out.rowwise() += model.b2;
    c.relaxed = out.array().tanh().matrix();
    return c;
}

inline Codes forward(const HashModel& model, const Matrix& inputs)
{
    auto c = forward_cache(model, inputs);
    Codes codes;
    codes.binary = sign_codes(c.relaxed);
    codes.relaxed = std::move(c.relaxed);
    return codes;
}

/// Accumulates the network-parameter gradients for dLoss/dRelaxed into grad.
inline void backward(const HashModel& model, const ForwardCache& c, const Matrix& d_relaxed, Gradients& grad)
{
    const Matrix d_out = (d_relaxed.array() * (1.0 - c.relaxed.array().square())).matrix();
    grad.W2 += c.hidden.transpose() * d_out;
    grad.b2 += d_out.colwise().sum();
    const Matrix d_hidden = d_out * model.W2.transpose();
    const Matrix d_pre = (d_hidden.array() * (1.0 - c.hidden.array().square())).matrix();
    grad.W1 += c.inputs.transpose() * d_pre;
    grad.b1 += d_pre.colwise().sum();
}

/// Chain rule through tanh(Z).
inline void backward_prototypes(const Matrix& relaxed_z, const Matrix& d_relaxed_z, Gradients& grad)
{
    grad.Z += (d_relaxed_z.array() * (1.0 - relaxed_z.array().square())).matrix();
}

namespace detail {

inline Matrix softmax_rows(const Matrix& logits)
{
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        p.row(i) = (logits.row(i).array() - mx).exp().matrix();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

inline double logsumexp(const Eigen::Ref<const RowVector>& v)
{
    const double mx = v.maxCoeff();
    return mx + std::log((v.array() - mx).exp().sum());
}

} // namespace detail

/// Mean soft-target cross-entropy of softmax(tanh(Z) b) against `targets`
/// (rows summing to 1), with gradients for every parameter block.
inline LossValue loss_soft_targets(const HashModel& model, const Matrix& inputs, const Matrix& targets)
{
    require(targets.rows() == inputs.rows() && static_cast<std::size_t>(targets.cols()) == model.num_classes(),
            ErrorCode::shape_mismatch, "soft-target loss: target matrix shape mismatch");
    LossValue out{0.0, Gradients::zeros_like(model)};
    const auto n = inputs.rows();
    if (n == 0) return out;

    const auto cache = forward_cache(model, inputs);
    const Matrix zhat = model.relaxed_prototypes();
    const Matrix logits = cache.relaxed * zhat.transpose();
    const Matrix probs = detail::softmax_rows(logits);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double lse = detail::logsumexp(logits.row(i));
        for (Eigen::Index c = 0; c < logits.cols(); ++c)
            if (targets(i, c) != 0.0) total -= targets(i, c) * (logits(i, c) - lse);
    }
    out.value = total / static_cast<double>(n);

    const Matrix d_logits = (probs - targets) / static_cast<double>(n);
    backward(model, cache, d_logits * zhat, out.grad);
    backward_prototypes(zhat, d_logits.transpose() * cache.relaxed, out.grad);
    return out;
}

inline Matrix one_hot(std::span<const ClassId> labels, std::size_t num_classes)
{
    Matrix y = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] < num_classes, ErrorCode::invalid_argument, "label out of range");
        y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
    }
    return y;
}

/// Labeled-source cross-entropy over prototype logits, averaged over the batch.
inline LossValue loss_source(const HashModel& model, const Matrix& inputs, std::span<const ClassId> labels)
{
    require(static_cast<std::size_t>(inputs.rows()) == labels.size(), ErrorCode::shape_mismatch,
            "loss_source: label count differs from batch size");
    return loss_soft_targets(model, inputs, one_hot(labels, model.num_classes()));
}

/// Mean over ordered prototype pairs of max(0, cos(tanh z_c, tanh z_c')).
inline LossValue loss_margin(const HashModel& model)
{
    LossValue out{0.0, Gradients::zeros_like(model)};
    const auto C = static_cast<Eigen::Index>(model.num_classes());
    if (C < 2) return out;
    const Matrix zhat = model.relaxed_prototypes();
    std::vector<double> norms(static_cast<std::size_t>(C));
    for (Eigen::Index c = 0; c < C; ++c) norms[c] = std::max(zhat.row(c).norm(), 1e-12);

    Matrix d_zhat = Matrix::Zero(zhat.rows(), zhat.cols());
    const double pairs = static_cast<double>(C * (C - 1));
    for (Eigen::Index a = 0; a < C; ++a) {
        for (Eigen::Index b = 0; b < C; ++b) {
            if (a == b) continue;
            const double cosine = zhat.row(a).dot(zhat.row(b)) / (norms[a] * norms[b]);
            if (cosine <= 0.0) continue;
            out.value += cosine;
            d_zhat.row(a) += (zhat.row(b) / (norms[a] * norms[b]) - cosine * zhat.row(a) / (norms[a] * norms[a]));
            d_zhat.row(b) += (zhat.row(a) / (norms[a] * norms[b]) - cosine * zhat.row(b) / (norms[b] * norms[b]));
        }
    }
    out.value /= pairs;
    backward_prototypes(zhat, d_zhat / pairs, out.grad);
    return out;
}

struct PseudoLabels {
    std::vector<ClassId> labels;
    std::vector<double> confidence; ///< softmax probability gap between the top two classes
};

/// Class whose relaxed prototype best matches each binary code; ties go to
/// the lower class id.
inline PseudoLabels pseudo_label(const HashModel& model, const Matrix& inputs)
{
    const Codes codes = forward(model, inputs);
    const Matrix logits = codes.binary * model.relaxed_prototypes().transpose();
    const Matrix probs = detail::softmax_rows(logits);
    PseudoLabels out;
    out.labels.resize(static_cast<std::size_t>(logits.rows()));
    out.confidence.resize(out.labels.size());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < logits.cols(); ++c)
            if (logits(i, c) > logits(i, best)) best = c;
        double second = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c)
            if (c != best) second = std::max(second, probs(i, c));
        out.labels[static_cast<std::size_t>(i)] = static_cast<ClassId>(best);
        out.confidence[static_cast<std::size_t>(i)] = probs(i, best) - second;
    }
    return out;
}

enum class ConsistencyDenominator {
    target_anchor, ///< sum_i exp(b_i' b_j): candidates scored against the target
    source_pairs,  ///< sum_i exp(b_i' b_k): candidates scored against the positive
};

/// Contrastive consistency between target codes and same-(pseudo)label
/// source codes in the batch. For target j with positives P(j):
///   -1/|P| sum_{k in P} log( exp(b_k' b_j) / sum_{i in batch} exp(b_i' s) )
/// with s = b_j (target_anchor) or s = b_k (source_pairs). Targets without
/// positives are skipped; the loss averages over the remaining ones.
/// `similarity_scale` multiplies every code inner product (1 = as written).
inline LossValue loss_target_consistency(const HashModel& model, const Matrix& source_inputs,
                                         std::span<const ClassId> source_labels, const Matrix& target_inputs,
                                         std::span<const ClassId> target_pseudo,
                                         ConsistencyDenominator mode = ConsistencyDenominator::target_anchor,
                                         double similarity_scale = 1.0)
{
    require(similarity_scale > 0.0 && std::isfinite(similarity_scale), ErrorCode::invalid_argument,
            "loss_target_consistency: similarity scale must be positive");
    require(static_cast<std::size_t>(source_inputs.rows()) == source_labels.size() &&
                static_cast<std::size_t>(target_inputs.rows()) == target_pseudo.size(),
            ErrorCode::shape_mismatch, "loss_target_consistency: label count mismatch");
    LossValue out{0.0, Gradients::zeros_like(model)};
    const auto n_s = source_inputs.rows();
    const auto n_t = target_inputs.rows();
    if (n_s == 0 || n_t == 0) return out;

    const auto cs = forward_cache(model, source_inputs);
    const auto ct = forward_cache(model, target_inputs);
    // s * <a, b> = <sqrt(s) a, sqrt(s) b>
    const double root = std::sqrt(similarity_scale);
    const Matrix Bs = root * cs.relaxed;
    const Matrix Bt = root * ct.relaxed;
    Matrix dBs = Matrix::Zero(Bs.rows(), Bs.cols());
    Matrix dBt = Matrix::Zero(Bt.rows(), Bt.cols());

    std::vector<Eigen::Index> positives;
    std::size_t contributing = 0;
    double total = 0.0;
    for (Eigen::Index j = 0; j < n_t; ++j) {
        positives.clear();
        for (Eigen::Index k = 0; k < n_s; ++k)
            if (source_labels[k] == target_pseudo[j]) positives.push_back(k);
        if (positives.empty()) continue;
        ++contributing;
        const double inv_p = 1.0 / static_cast<double>(positives.size());
        const RowVector bj = Bt.row(j);

        if (mode == ConsistencyDenominator::target_anchor) {
            const RowVector scores = (Bs * bj.transpose()).transpose();
            const double lse = detail::logsumexp(scores);
            RowVector coef = (scores.array() - lse).exp().matrix(); // softmax
            double term = 0.0;
            for (auto k : positives) {
                term += lse - scores(k);
                coef(k) -= inv_p;
            }
            total += term * inv_p;
            dBt.row(j) += coef * Bs;
            dBs += coef.transpose() * bj;
        } else {
            double term = 0.0;
            for (auto k : positives) {
                const RowVector bk = Bs.row(k);
                const RowVector scores = (Bs * bk.transpose()).transpose();
                const double lse = detail::logsumexp(scores);
                const RowVector p = (scores.array() - lse).exp().matrix();
                term += lse - bk.dot(bj);
                // d lse / d b_i = p_i b_k, d lse / d b_k = sum_i p_i b_i
                dBs += inv_p * p.transpose() * bk;
                dBs.row(k) += inv_p * (p * Bs);
                dBs.row(k) -= inv_p * bj;
                dBt.row(j) -= inv_p * bk;
            }
            total += term * inv_p;
        }
    }
    if (contributing == 0) return out;
    const double scale = 1.0 / static_cast<double>(contributing);
    out.value = total * scale;
    backward(model, cs, dBs * (scale * root), out.grad);
    backward(model, ct, dBt * (scale * root), out.grad);
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamOptions {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adaptive moment estimation with bias correction.
class Adam {
public:
    Adam(const HashModel& model, AdamOptions opt = {})
        : opt_(opt), m_(Gradients::zeros_like(model)), v_(Gradients::zeros_like(model))
    {
    }

    void step(HashModel& model, const Gradients& grad)
    {
        require(grad.all_finite(), ErrorCode::numerical, "optimizer_step: non-finite gradient");
        require(grad.W1.rows() == model.W1.rows() && grad.W1.cols() == model.W1.cols() &&
                    grad.W2.cols() == model.W2.cols() && grad.Z.rows() == model.Z.rows(),
                ErrorCode::shape_mismatch, "optimizer_step: gradient shape mismatch");
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
            m = opt_.beta1 * m + (1.0 - opt_.beta1) * g;
            v = opt_.beta2 * v + (1.0 - opt_.beta2) * g.cwiseProduct(g);
            param.array() -= opt_.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + opt_.epsilon);
        };
        update(model.W1, grad.W1, m_.W1, v_.W1);
        update(model.b1, grad.b1, m_.b1, v_.b1);
        update(model.W2, grad.W2, m_.W2, v_.W2);
        update(model.b2, grad.b2, m_.b2, v_.b2);
        update(model.Z, grad.Z, m_.Z, v_.Z);
    }

    std::size_t steps() const { return t_; }

private:
    AdamOptions opt_;
    Gradients m_;
    Gradients v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

/// "CPL1", u32 d, h, L, C, then W1 (d x h), b1 (h), W2 (h x L), b2 (L),
/// Z (C x L), each row-major float32 little-endian.
inline void save_checkpoint(const std::filesystem::path& path, const HashModel& model)
{
    auto out = detail::open_out(path);
    detail::write_magic(out, "CPL1");
    for (std::size_t v : {model.input_dim(), model.hidden_dim(), model.code_length(), model.num_classes()})
        detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
    auto block = [&](const auto& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) detail::write_le<float>(out, static_cast<float>(m(i, j)));
    };
    block(model.W1), block(model.b1), block(model.W2), block(model.b2), block(model.Z);
}

inline HashModel load_checkpoint(const std::filesystem::path& path)
{
    const std::string what = "checkpoint '" + path.string() + "'";
    auto in = detail::open_in(path);
    detail::expect_magic(in, "CPL1", what);
    const auto d = detail::read_le<std::uint32_t>(in, what);
    const auto h = detail::read_le<std::uint32_t>(in, what);
    const auto L = detail::read_le<std::uint32_t>(in, what);
    const auto C = detail::read_le<std::uint32_t>(in, what);
    HashModel m = HashModel::zeros(d, h, L, C);
    auto block = [&](auto& mat) {
        for (Eigen::Index i = 0; i < mat.rows(); ++i)
            for (Eigen::Index j = 0; j < mat.cols(); ++j) mat(i, j) = detail::read_le<float>(in, what);
    };
    block(m.W1), block(m.b1), block(m.W2), block(m.b2), block(m.Z);
    detail::expect_eof(in, what);
    require(m.all_finite(), ErrorCode::numerical, what + ": non-finite parameters");
    return m;
}

} // namespace couple
