#pragma once

// Dense feed-forward networks with batch normalization, reverse-mode
// gradients and Adam. Everything is templated on the scalar type; the
// federation code instantiates it with double.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedka/random.hpp"

namespace fedka::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Index = Eigen::Index;

enum class OutputKind {
    kLogSoftmax,  ///< rows are log-probabilities over the last layer's width
    kFeatures,    ///< rows are ReLU features (encoder output)
};

enum class Mode { kTrain, kEval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Layer widths and per-affine-layer batch-norm flags. Every affine layer
/// except a log-softmax output is followed by (optional) batch norm and ReLU.
struct NetworkSpec {
    std::vector<Index> layer_dims;
    std::vector<bool> batchnorm;
    OutputKind output = OutputKind::kLogSoftmax;

    NetworkSpec() = default;
    NetworkSpec(std::vector<Index> dims, std::vector<bool> bn, OutputKind kind)
        : layer_dims(std::move(dims)), batchnorm(std::move(bn)), output(kind) {
        validate();
    }

    Index num_layers() const { return static_cast<Index>(layer_dims.size()) - 1; }
    Index input_dim() const { return layer_dims.front(); }
    Index output_dim() const { return layer_dims.back(); }

    void validate() const {
        if (layer_dims.size() < 2) throw std::invalid_argument("NetworkSpec: need at least 2 layer dims");
        for (Index d : layer_dims) {
            if (d <= 0) throw std::invalid_argument("NetworkSpec: layer dims must be positive");
        }
        if (static_cast<Index>(batchnorm.size()) != num_layers()) {
            throw std::invalid_argument("NetworkSpec: need one batch-norm flag per affine layer");
        }
        if (output == OutputKind::kLogSoftmax && batchnorm.back()) {
            throw std::invalid_argument("NetworkSpec: log-softmax output layer cannot carry batch norm");
        }
    }

    bool operator==(const NetworkSpec&) const = default;
};

template <typename Scalar>
struct Layer {
    Matrix<Scalar> weight;  // in x out
    RowVector<Scalar> bias;
    bool has_batchnorm = false;
    RowVector<Scalar> bn_scale;
    RowVector<Scalar> bn_shift;
    RowVector<Scalar> running_mean;
    RowVector<Scalar> running_var;
};

/// Parameters of one network. The same type carries gradients and Adam
/// moments; in those roles the running statistics stay zero.
template <typename Scalar>
struct Network {
    NetworkSpec spec;
    std::vector<Layer<Scalar>> layers;

    Index input_dim() const { return spec.input_dim(); }
    Index output_dim() const { return spec.output_dim(); }
};

/// Calls f on corresponding tensors of each network. Running statistics are
/// visited only when include_running_stats is set.
template <typename F, typename First, typename... Rest>
void for_each_tensor(bool include_running_stats, F&& f, First& first, Rest&... rest) {
    for (std::size_t i = 0; i < first.layers.size(); ++i) {
        f(first.layers[i].weight, rest.layers[i].weight...);
        f(first.layers[i].bias, rest.layers[i].bias...);
        if (first.layers[i].has_batchnorm) {
            f(first.layers[i].bn_scale, rest.layers[i].bn_scale...);
            f(first.layers[i].bn_shift, rest.layers[i].bn_shift...);
            if (include_running_stats) {
                f(first.layers[i].running_mean, rest.layers[i].running_mean...);
                f(first.layers[i].running_var, rest.layers[i].running_var...);
            }
        }
    }
}

template <typename Scalar>
Network<Scalar> zeros_like(const Network<Scalar>& net) {
    Network<Scalar> out = net;
    for_each_tensor(true, [](auto& t) { t.setZero(); }, out);
    return out;
}

template <typename Scalar>
std::size_t parameter_count(const Network<Scalar>& net, bool include_running_stats = true) {
    std::size_t n = 0;
    for_each_tensor(include_running_stats, [&](const auto& t) { n += static_cast<std::size_t>(t.size()); }, net);
    return n;
}

/// He-uniform weights in [-sqrt(6/fan_in), sqrt(6/fan_in)], zero biases,
/// identity batch norm.
template <typename Scalar = double>
Network<Scalar> init_network(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    Network<Scalar> net;
    net.spec = spec;
    for (Index l = 0; l < spec.num_layers(); ++l) {
        const Index fan_in = spec.layer_dims[l];
        const Index fan_out = spec.layer_dims[l + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        Layer<Scalar> layer;
        layer.weight.resize(fan_in, fan_out);
        for (Index c = 0; c < fan_out; ++c) {
            for (Index r = 0; r < fan_in; ++r) layer.weight(r, c) = static_cast<Scalar>(rng.uniform(-bound, bound));
        }
        layer.bias = RowVector<Scalar>::Zero(fan_out);
        layer.has_batchnorm = spec.batchnorm[l];
        if (layer.has_batchnorm) {
            layer.bn_scale = RowVector<Scalar>::Ones(fan_out);
            layer.bn_shift = RowVector<Scalar>::Zero(fan_out);
            layer.running_mean = RowVector<Scalar>::Zero(fan_out);
            layer.running_var = RowVector<Scalar>::Ones(fan_out);
        }
        net.layers.push_back(std::move(layer));
    }
    return net;
}

template <typename Scalar>
struct LayerCache {
    Matrix<Scalar> input;
    Matrix<Scalar> normalized;  // batch-norm x-hat
    RowVector<Scalar> batch_mean;
    RowVector<Scalar> batch_var;  // biased
    RowVector<Scalar> inv_std;
    Matrix<Scalar> output;  // post-activation (or log-probs for the last layer)
};

template <typename Scalar>
struct ForwardTape {
    Mode mode = Mode::kEval;
    Index batch_size = 0;
    std::vector<LayerCache<Scalar>> layers;
};

template <typename Scalar>
struct ForwardResult {
    Matrix<Scalar> output;
    ForwardTape<Scalar> tape;
};

template <typename Scalar>
Matrix<Scalar> log_softmax_rows(const Matrix<Scalar>& logits) {
    Matrix<Scalar> out(logits.rows(), logits.cols());
    for (Index r = 0; r < logits.rows(); ++r) {
        const Scalar max = logits.row(r).maxCoeff();
        const Scalar lse = max + std::log((logits.row(r).array() - max).exp().sum());
        out.row(r) = logits.row(r).array() - lse;
    }
    return out;
}

/// Pure forward pass. In train mode batch norm uses batch statistics, which
/// are recorded in the tape; commit_batch_statistics folds them into the
/// running estimates.
template <typename Scalar>
ForwardResult<Scalar> forward(const Network<Scalar>& net, const Matrix<Scalar>& batch, Mode mode) {
    if (batch.cols() != net.input_dim()) {
        throw std::invalid_argument("forward: batch has " + std::to_string(batch.cols()) +
                                    " columns, network expects " + std::to_string(net.input_dim()));
    }
    const Index n = batch.rows();
    if (n == 0) throw std::invalid_argument("forward: empty batch");
    const bool has_bn = std::any_of(net.layers.begin(), net.layers.end(), [](const auto& l) { return l.has_batchnorm; });
    if (mode == Mode::kTrain && has_bn && n < 2) {
        throw std::invalid_argument("forward: train-mode batch norm needs batch size >= 2");
    }

    ForwardResult<Scalar> result;
    result.tape.mode = mode;
    result.tape.batch_size = n;
    result.tape.layers.resize(net.layers.size());

    Matrix<Scalar> x = batch;
    const auto eps = static_cast<Scalar>(kBatchNormEps);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& layer = net.layers[l];
        auto& cache = result.tape.layers[l];
        cache.input = x;
        Matrix<Scalar> z = x * layer.weight;
        z.rowwise() += layer.bias;
        const bool last = l + 1 == net.layers.size();
        if (layer.has_batchnorm) {
            if (mode == Mode::kTrain) {
                cache.batch_mean = z.colwise().mean();
                cache.batch_var = (z.rowwise() - cache.batch_mean).array().square().colwise().mean();
                cache.inv_std = (cache.batch_var.array() + eps).rsqrt();
                cache.normalized = (z.rowwise() - cache.batch_mean).array().rowwise() * cache.inv_std.array();
            } else {
                cache.inv_std = (layer.running_var.array() + eps).rsqrt();
                cache.normalized = (z.rowwise() - layer.running_mean).array().rowwise() * cache.inv_std.array();
            }
            z = (cache.normalized.array().rowwise() * layer.bn_scale.array()).rowwise() + layer.bn_shift.array();
        }
        if (last && net.spec.output == OutputKind::kLogSoftmax) {
            cache.output = log_softmax_rows<Scalar>(z);
        } else {
            cache.output = z.cwiseMax(Scalar(0));
        }
        x = cache.output;
    }
    result.output = std::move(x);
    return result;
}

/// Momentum update of running statistics from a train-mode tape. Running
/// variance uses the unbiased batch estimate.
template <typename Scalar>
void commit_batch_statistics(Network<Scalar>& net, const ForwardTape<Scalar>& tape) {
    if (tape.mode != Mode::kTrain) return;
    if (tape.layers.size() != net.layers.size()) throw std::invalid_argument("commit_batch_statistics: stale tape");
    const auto momentum = static_cast<Scalar>(kBatchNormMomentum);
    const Scalar n = static_cast<Scalar>(tape.batch_size);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        auto& layer = net.layers[l];
        if (!layer.has_batchnorm) continue;
        const auto& cache = tape.layers[l];
        layer.running_mean = (Scalar(1) - momentum) * layer.running_mean + momentum * cache.batch_mean;
        layer.running_var =
            (Scalar(1) - momentum) * layer.running_var + momentum * cache.batch_var * (n / (n - Scalar(1)));
    }
}

/// Train-mode forward that also updates running statistics.
template <typename Scalar>
ForwardResult<Scalar> forward_train(Network<Scalar>& net, const Matrix<Scalar>& batch) {
    auto result = forward(net, batch, Mode::kTrain);
    commit_batch_statistics(net, result.tape);
    return result;
}

template <typename Scalar>
Matrix<Scalar> evaluate(const Network<Scalar>& net, const Matrix<Scalar>& batch) {
    return forward(net, batch, Mode::kEval).output;
}

template <typename Scalar>
struct BackwardResult {
    Network<Scalar> grads;
    Matrix<Scalar> input_grad;
};

/// Reverse pass. output_grad is dLoss/dOutput (for log-softmax networks,
/// the gradient with respect to the log-probabilities).
template <typename Scalar>
BackwardResult<Scalar> backward(const Network<Scalar>& net, const ForwardTape<Scalar>& tape,
                                const Matrix<Scalar>& output_grad) {
    if (tape.layers.size() != net.layers.size() || tape.layers.empty()) {
        throw std::invalid_argument("backward: tape does not match network");
    }
    const auto& last_cache = tape.layers.back();
    if (output_grad.rows() != last_cache.output.rows() || output_grad.cols() != last_cache.output.cols()) {
        throw std::invalid_argument("backward: output gradient shape does not match tape");
    }
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        if (tape.layers[l].input.cols() != net.layers[l].weight.rows() ||
            tape.layers[l].output.cols() != net.layers[l].weight.cols()) {
            throw std::invalid_argument("backward: stale tape");
        }
    }

    BackwardResult<Scalar> result;
    result.grads = zeros_like(net);
    Matrix<Scalar> grad = output_grad;
    const Scalar n = static_cast<Scalar>(tape.batch_size);

    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const auto& layer = net.layers[li];
        const auto& cache = tape.layers[li];
        auto& g = result.grads.layers[li];
        const bool last = li + 1 == net.layers.size();

        Matrix<Scalar> dz;
        if (last && net.spec.output == OutputKind::kLogSoftmax) {
            const Matrix<Scalar> probs = cache.output.array().exp();
            dz = grad - (probs.array().colwise() * grad.rowwise().sum().array()).matrix();
        } else {
            dz = (cache.output.array() > Scalar(0)).select(grad, Scalar(0));
        }

        if (layer.has_batchnorm) {
            g.bn_scale = (dz.array() * cache.normalized.array()).colwise().sum();
            g.bn_shift = dz.colwise().sum();
            const Matrix<Scalar> dxhat = dz.array().rowwise() * layer.bn_scale.array();
            if (tape.mode == Mode::kTrain) {
                const RowVector<Scalar> sum_dxhat = dxhat.colwise().sum();
                const RowVector<Scalar> sum_dxhat_xhat = (dxhat.array() * cache.normalized.array()).colwise().sum();
                Matrix<Scalar> centred = (dxhat * n).rowwise() - sum_dxhat;
                centred -= (cache.normalized.array().rowwise() * sum_dxhat_xhat.array()).matrix();
                dz = (centred.array().rowwise() * (cache.inv_std.array() / n)).matrix();
            } else {
                dz = (dxhat.array().rowwise() * cache.inv_std.array()).matrix();
            }
        }

        g.weight = cache.input.transpose() * dz;
        g.bias = dz.colwise().sum();
        grad = dz * layer.weight.transpose();
    }
    result.input_grad = std::move(grad);
    return result;
}

template <typename Scalar>
struct AdamState {
    Network<Scalar> first_moment;
    Network<Scalar> second_moment;
    std::int64_t step = 0;

    AdamState() = default;
    explicit AdamState(const Network<Scalar>& like)
        : first_moment(zeros_like(like)), second_moment(zeros_like(like)) {}
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename Scalar>
bool all_finite(const Network<Scalar>& net) {
    bool finite = true;
    for_each_tensor(true, [&](const auto& t) { finite = finite && t.allFinite(); }, net);
    return finite;
}

/// Bias-corrected Adam update of every trainable tensor. Throws, leaving
/// params and state untouched, when a gradient entry is not finite.
template <typename Scalar>
void adam_step(Network<Scalar>& params, const Network<Scalar>& grads, AdamState<Scalar>& state, Scalar lr,
               const AdamConfig& cfg = {}) {
    if (!all_finite(grads)) throw std::domain_error("adam_step: non-finite gradient");
    if (grads.layers.size() != params.layers.size()) throw std::invalid_argument("adam_step: shape mismatch");
    for_each_tensor(
        false,
        [](const auto& p, const auto& g) {
            if (p.rows() != g.rows() || p.cols() != g.cols()) throw std::invalid_argument("adam_step: shape mismatch");
        },
        params, grads);
    if (state.first_moment.layers.size() != params.layers.size()) state = AdamState<Scalar>(params);
    state.step += 1;
    const auto b1 = static_cast<Scalar>(cfg.beta1);
    const auto b2 = static_cast<Scalar>(cfg.beta2);
    const auto eps = static_cast<Scalar>(cfg.epsilon);
    const Scalar correction1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(state.step));
    const Scalar correction2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(state.step));
    for_each_tensor(
        false,
        [&](auto& p, const auto& g, auto& m, auto& v) {
            m = b1 * m + (Scalar(1) - b1) * g;
            v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
            p.array() -= lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps);
        },
        params, grads, state.first_moment, state.second_moment);
}

}  // namespace fedka::nn
