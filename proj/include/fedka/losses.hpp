#pragma once

// Loss functions used by local training and the parameter server:
// classification NLL, the domain-classifier (disentangler) loss, the
// multi-kernel MMD between feature sets, and the alignment-weight ramp.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "fedka/nn.hpp"

namespace fedka::losses {

using nn::Index;
using nn::Matrix;
using nn::RowVector;

template <typename Scalar>
struct LossAndGrad {
    Scalar value{};
    Matrix<Scalar> grad;
};

/// Mean negative log-likelihood of integer labels under row log-probs.
template <typename Scalar>
LossAndGrad<Scalar> nll_loss(const Matrix<Scalar>& log_probs, const std::vector<int>& labels) {
    if (static_cast<Index>(labels.size()) != log_probs.rows()) {
        throw std::invalid_argument("nll_loss: label count does not match rows");
    }
    if (labels.empty()) throw std::invalid_argument("nll_loss: empty batch");
    const Index n = log_probs.rows();
    LossAndGrad<Scalar> out;
    out.grad = Matrix<Scalar>::Zero(n, log_probs.cols());
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
    for (Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= log_probs.cols()) throw std::out_of_range("nll_loss: label out of range");
        out.value -= log_probs(i, y);
        out.grad(i, y) = -inv_n;
    }
    out.value *= inv_n;
    return out;
}

inline constexpr int kNumKernels = 5;
inline constexpr double kBandwidthStep = 2.0;
inline constexpr double kMinBandwidth = 1e-6;

/// Five Gaussian bandwidths, each twice the previous, centred on a base value.
template <typename Scalar>
struct KernelBank {
    std::array<Scalar, kNumKernels> sigma{};

    static KernelBank centred_on(Scalar centre) {
        KernelBank bank;
        for (int r = 0; r < kNumKernels; ++r) {
            bank.sigma[static_cast<std::size_t>(r)] =
                centre * static_cast<Scalar>(std::pow(kBandwidthStep, r - kNumKernels / 2));
        }
        return bank;
    }
};

template <typename Scalar>
Matrix<Scalar> squared_distances(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
    const auto a_norm = a.rowwise().squaredNorm();
    const auto b_norm = b.rowwise().squaredNorm();
    Matrix<Scalar> d = (-2 * a * b.transpose()).colwise() + a_norm;
    d.rowwise() += b_norm.transpose();
    return d.cwiseMax(Scalar(0));
}

/// Median pairwise distance over the pooled rows sets the centre bandwidth.
template <typename Scalar>
KernelBank<Scalar> kernel_bank_from(const Matrix<Scalar>& h_a, const Matrix<Scalar>& h_b) {
    if (h_a.rows() == 0 || h_b.rows() == 0) throw std::invalid_argument("kernel_bank_from: empty input");
    if (h_a.cols() != h_b.cols()) throw std::invalid_argument("kernel_bank_from: width mismatch");
    Matrix<Scalar> pooled(h_a.rows() + h_b.rows(), h_a.cols());
    pooled << h_a, h_b;
    const Index n = pooled.rows();
    std::vector<Scalar> dists;
    dists.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
    for (Index i = 0; i < n; ++i) {
        for (Index j = i + 1; j < n; ++j) dists.push_back((pooled.row(i) - pooled.row(j)).norm());
    }
    Scalar median = 0;
    if (!dists.empty()) {
        const std::size_t mid = dists.size() / 2;
        std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
        median = dists[mid];
        if (dists.size() % 2 == 0) {
            const Scalar lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
            median = (median + lower) / 2;
        }
    }
    return KernelBank<Scalar>::centred_on(std::max(median, static_cast<Scalar>(kMinBandwidth)));
}

/// Biased (V-statistic) squared MMD under one Gaussian kernel
/// exp(-|h - h'|^2 / (2 sigma^2)), with its gradient with respect to h_a.
template <typename Scalar>
LossAndGrad<Scalar> mmd_sq(const Matrix<Scalar>& h_a, const Matrix<Scalar>& h_b, Scalar sigma) {
    if (h_a.cols() != h_b.cols()) throw std::invalid_argument("mmd_sq: width mismatch");
    if (h_a.rows() == 0 || h_b.rows() == 0) throw std::invalid_argument("mmd_sq: empty set");
    if (!(sigma > 0)) throw std::invalid_argument("mmd_sq: bandwidth must be positive");
    const Scalar m = static_cast<Scalar>(h_a.rows());
    const Scalar n = static_cast<Scalar>(h_b.rows());
    const Scalar scale = Scalar(-1) / (2 * sigma * sigma);
    const Matrix<Scalar> k_aa = (squared_distances(h_a, h_a) * scale).array().exp();
    const Matrix<Scalar> k_bb = (squared_distances(h_b, h_b) * scale).array().exp();
    const Matrix<Scalar> k_ab = (squared_distances(h_a, h_b) * scale).array().exp();

    LossAndGrad<Scalar> out;
    out.value = k_aa.sum() / (m * m) + k_bb.sum() / (n * n) - 2 * k_ab.sum() / (m * n);

    // d/da_p of sum_j w_pj k(a_p, x_j) = -(1/sigma^2) (rowsum(W) a_p - W x)_p
    const Scalar inv_s2 = Scalar(1) / (sigma * sigma);
    const Matrix<Scalar> w_aa = k_aa * (Scalar(2) / (m * m));
    const Matrix<Scalar> w_ab = k_ab * (Scalar(-2) / (m * n));
    Matrix<Scalar> grad = (h_a.array().colwise() * w_aa.rowwise().sum().array()).matrix() - w_aa * h_a;
    grad += (h_a.array().colwise() * w_ab.rowwise().sum().array()).matrix() - w_ab * h_b;
    out.grad = -inv_s2 * grad;
    return out;
}

/// Mean of the squared MMD over the five kernels of the bank.
template <typename Scalar>
LossAndGrad<Scalar> mk_mmd_sq(const Matrix<Scalar>& h_a, const Matrix<Scalar>& h_b, const KernelBank<Scalar>& bank) {
    LossAndGrad<Scalar> out;
    out.grad = Matrix<Scalar>::Zero(h_a.rows(), h_a.cols());
    for (Scalar sigma : bank.sigma) {
        auto term = mmd_sq(h_a, h_b, sigma);
        out.value += term.value;
        out.grad += term.grad;
    }
    const Scalar inv_r = Scalar(1) / Scalar(kNumKernels);
    out.value = std::max(out.value * inv_r, Scalar(0));
    out.grad *= inv_r;
    return out;
}

enum class DomainLabel : int { kClient = 0, kTarget = 1 };

template <typename Scalar>
struct DisentanglerResult {
    Scalar value{};
    nn::Network<Scalar> grad_classifier;
    Matrix<Scalar> grad_first;
    Matrix<Scalar> grad_second;
    nn::ForwardTape<Scalar> tape;  ///< train-mode tape of the joint batch
};

/// Sum of two mean-reduced domain NLL terms. Both sets go through the
/// domain classifier as one train-mode batch, so batch norm sees the pooled
/// statistics.
template <typename Scalar>
DisentanglerResult<Scalar> domain_pair_loss(const Matrix<Scalar>& h_first, DomainLabel label_first,
                                            const Matrix<Scalar>& h_second, DomainLabel label_second,
                                            const nn::Network<Scalar>& domain_classifier) {
    if (h_first.cols() != domain_classifier.input_dim() || h_second.cols() != domain_classifier.input_dim()) {
        throw std::invalid_argument("disentangler_loss: feature width does not match domain classifier");
    }
    if (domain_classifier.output_dim() != 2) throw std::invalid_argument("disentangler_loss: need 2 outputs");
    const Index n1 = h_first.rows();
    const Index n2 = h_second.rows();
    if (n1 == 0 || n2 == 0) throw std::invalid_argument("disentangler_loss: empty feature set");
    Matrix<Scalar> joint(n1 + n2, h_first.cols());
    joint << h_first, h_second;
    auto fwd = nn::forward(domain_classifier, joint, nn::Mode::kTrain);

    const std::vector<int> first_labels(static_cast<std::size_t>(n1), static_cast<int>(label_first));
    const std::vector<int> second_labels(static_cast<std::size_t>(n2), static_cast<int>(label_second));
    const auto first = nll_loss<Scalar>(fwd.output.topRows(n1), first_labels);
    const auto second = nll_loss<Scalar>(fwd.output.bottomRows(n2), second_labels);

    Matrix<Scalar> out_grad(n1 + n2, 2);
    out_grad << first.grad, second.grad;
    auto back = nn::backward(domain_classifier, fwd.tape, out_grad);

    DisentanglerResult<Scalar> out;
    out.value = first.value + second.value;
    out.grad_classifier = std::move(back.grads);
    out.grad_first = back.input_grad.topRows(n1);
    out.grad_second = back.input_grad.bottomRows(n2);
    out.tape = std::move(fwd.tape);
    return out;
}

/// Client features carry domain label 0, target features label 1.
template <typename Scalar>
DisentanglerResult<Scalar> disentangler_loss(const Matrix<Scalar>& h_client, const Matrix<Scalar>& h_target,
                                             const nn::Network<Scalar>& domain_classifier) {
    return domain_pair_loss(h_client, DomainLabel::kClient, h_target, DomainLabel::kTarget, domain_classifier);
}

/// Batch b of round r within a run of total_rounds rounds of
/// batches_per_round batches.
struct ScheduleClock {
    int batch = 0;
    int batches_per_round = 1;
    int round = 0;
    int total_rounds = 1;
    double gamma = 5.0;

    void validate() const {
        if (batches_per_round <= 0 || total_rounds <= 0) throw std::invalid_argument("ScheduleClock: non-positive total");
        if (batch < 0 || batch >= batches_per_round) throw std::invalid_argument("ScheduleClock: batch out of range");
        if (round < 0 || round >= total_rounds) throw std::invalid_argument("ScheduleClock: round out of range");
    }

    double progress() const {
        return (static_cast<double>(batch) + static_cast<double>(round) * batches_per_round) /
               (static_cast<double>(total_rounds) * batches_per_round);
    }
};

inline double lambda_from_progress(double progress, double gamma) {
    return 2.0 / (1.0 + std::exp(-gamma * progress)) - 1.0;
}

/// Sigmoid ramp from 0 towards 1 over training progress.
inline double lambda_schedule(const ScheduleClock& clock) {
    clock.validate();
    return lambda_from_progress(clock.progress(), clock.gamma);
}

/// Local objective: the encoder ascends the domain loss and descends MMD.
inline double combined_local_objective(double j_cls, double j_dis, double j_mmd, double lambda_p) {
    if (!std::isfinite(j_cls) || !std::isfinite(j_dis) || !std::isfinite(j_mmd) || !std::isfinite(lambda_p)) {
        throw std::domain_error("combined_local_objective: non-finite input");
    }
    return j_cls - lambda_p * (j_dis - j_mmd);
}

}  // namespace fedka::losses
