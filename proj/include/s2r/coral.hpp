#pragma once

// Correlation alignment (CORAL). A backbone feature map (bn, K, H', W') is
// viewed as K*bn samples of dimension d = H'*W'; the loss is the squared
// Frobenius distance between the source and target sample covariances,
// scaled by 1 / (4 d^2).

#include <cstddef>
#include <utility>

#include "s2r/autodiff.hpp"
#include "s2r/core.hpp"

namespace s2r::coral {

using ad::Shape;
using ad::Tensor;

struct TooFewSamples : Error {
    using Error::Error;
};

/// (n, d) matrix of n samples. Rows are samples.
struct FeatureMatrix {
    Tensor data;
    DomainTag domain = DomainTag::Simulated;

    std::size_t rows() const { return data.shape.at(0); }
    std::size_t cols() const { return data.shape.at(1); }
};

/// Each (batch, channel) slice becomes one row, batch-major then channel.
/// Row-major storage makes this a pure reinterpretation of the buffer.
inline FeatureMatrix reshape_feature_map(const Tensor& fm, DomainTag domain = DomainTag::Simulated) {
    if (fm.rank() != 4) throw ShapeMismatch("reshape_feature_map: expected (bn,K,H,W), got " + ad::shape_str(fm.shape));
    return {Tensor({fm.shape[0] * fm.shape[1], fm.shape[2] * fm.shape[3]}, fm.data), domain};
}

inline Tensor unreshape_feature_map(const FeatureMatrix& f, Shape fm_shape) {
    if (fm_shape.size() != 4 || ad::numel(fm_shape) != f.data.size() || fm_shape[0] * fm_shape[1] != f.rows())
        throw ShapeMismatch("unreshape_feature_map: " + ad::shape_str(f.data.shape) + " cannot become " +
                            ad::shape_str(fm_shape));
    return Tensor(std::move(fm_shape), f.data.data);
}

namespace detail {

inline void check_matrix(const Tensor& f, const char* what) {
    if (f.rank() != 2) throw ShapeMismatch(std::string(what) + ": expected an (n, d) matrix, got " + ad::shape_str(f.shape));
    if (f.shape[0] < 2)
        throw TooFewSamples(std::string(what) + ": covariance needs at least 2 samples, got " + std::to_string(f.shape[0]));
}

/// Rows minus the column means.
inline Tensor centered(const Tensor& f) {
    const std::size_t n = f.shape[0], d = f.shape[1];
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += f[i * d + j];
    for (double& m : mean) m /= static_cast<double>(n);
    Tensor c = f;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) c[i * d + j] -= mean[j];
    return c;
}

inline Tensor covariance_of_centered(const Tensor& xc) {
    const std::size_t n = xc.shape[0], d = xc.shape[1];
    Tensor cov({d, d}, 0.0);
    const double inv = 1.0 / static_cast<double>(n - 1);
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += xc[i * d + a] * xc[i * d + b];
            cov[a * d + b] = cov[b * d + a] = s * inv;
        }
    return cov;
}

inline void check_pair(const Tensor& fs, const Tensor& ft) {
    check_matrix(fs, "coral source");
    check_matrix(ft, "coral target");
    if (fs.shape[1] != ft.shape[1])
        throw DimensionMismatch("coral: source dimension " + std::to_string(fs.shape[1]) + " != target dimension " +
                                std::to_string(ft.shape[1]));
}

}  // namespace detail

/// Unbiased sample covariance (1 / (n - 1)), symmetric by construction.
inline Tensor covariance(const FeatureMatrix& f) {
    detail::check_matrix(f.data, "covariance");
    return detail::covariance_of_centered(detail::centered(f.data));
}

inline double coral_from_covariances(const Tensor& cs, const Tensor& ct) {
    const double d = static_cast<double>(cs.shape.at(0));
    double s = 0.0;
    for (std::size_t i = 0; i < cs.size(); ++i) {
        const double diff = cs[i] - ct[i];
        s += diff * diff;
    }
    return s / (4.0 * d * d);
}

inline double coral_loss(const FeatureMatrix& source, const FeatureMatrix& target) {
    detail::check_pair(source.data, target.data);
    return coral_from_covariances(covariance(source), covariance(target));
}

/// Analytic gradient of coral_loss with respect to both inputs:
///   dL/dF_S =  (F_S - mean_S) (C_S - C_T) / (d^2 (n_S - 1))
///   dL/dF_T = -(F_T - mean_T) (C_S - C_T) / (d^2 (n_T - 1))
inline std::pair<Tensor, Tensor> coral_backward(const FeatureMatrix& source, const FeatureMatrix& target) {
    detail::check_pair(source.data, target.data);
    const Tensor xs = detail::centered(source.data), xt = detail::centered(target.data);
    const Tensor cs = detail::covariance_of_centered(xs), ct = detail::covariance_of_centered(xt);
    const std::size_t d = cs.shape[0];
    Tensor delta = cs;
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= ct[i];
    auto apply = [&](const Tensor& xc, double factor) {
        const std::size_t n = xc.shape[0];
        Tensor g({n, d}, 0.0);
        ad::detail::gemm_nn(n, d, d, xc.data.data(), delta.data.data(), g.data.data());
        for (double& v : g.data) v *= factor;
        return g;
    };
    const double dd = static_cast<double>(d) * static_cast<double>(d);
    return {apply(xs, 1.0 / (dd * static_cast<double>(xs.shape[0] - 1))),
            apply(xt, -1.0 / (dd * static_cast<double>(xt.shape[0] - 1)))};
}

/// Tape-recorded CORAL loss between two (n, d) variables.
inline ad::Var coral_loss(ad::Var source, ad::Var target) {
    const FeatureMatrix fs{source.value(), DomainTag::Simulated};
    const FeatureMatrix ft{target.value(), DomainTag::Real};
    const double loss = coral_loss(fs, ft);
    return ad::custom({source, target}, Tensor::scalar(loss), [fs, ft](const Tensor& up, std::span<Tensor*> sinks) {
        if (!sinks[0] && !sinks[1]) return;
        auto [gs, gt] = coral_backward(fs, ft);
        if (sinks[0]) ad::detail::axpy(*sinks[0], gs, up[0]);
        if (sinks[1]) ad::detail::axpy(*sinks[1], gt, up[0]);
    });
}

}  // namespace s2r::coral
