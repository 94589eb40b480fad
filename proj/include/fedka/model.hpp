#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fedka/nn.hpp"

namespace fedka {

using Matrix = nn::Matrix<double>;
using Network = nn::Network<double>;
using AdamState = nn::AdamState<double>;

/// Layer widths of the encoder, class classifier and domain classifier.
struct Architecture {
    int input_dim = 20;
    int encoder_hidden = 500;
    int feature_dim = 50;
    int classifier_hidden = 100;
    int domain_hidden = 100;
    int num_classes = 5;

    nn::NetworkSpec encoder_spec() const;
    nn::NetworkSpec classifier_spec() const;
    nn::NetworkSpec domain_spec() const;
};

/// Encoder followed by class classifier; the unit of aggregation.
struct Model {
    Network encoder;
    Network classifier;
};

struct ModelOptimizer {
    AdamState encoder;
    AdamState classifier;

    ModelOptimizer() = default;
    explicit ModelOptimizer(const Model& like) : encoder(like.encoder), classifier(like.classifier) {}
};

/// Domain classifier held by the parameter server, with its own optimizer.
struct DomainClassifier {
    Network net;
    AdamState adam;
};

Model init_model(const Architecture& arch, std::uint64_t seed);
DomainClassifier init_domain_classifier(const Architecture& arch, std::uint64_t seed);

/// Eval-mode log-probabilities.
Matrix log_probs(const Model& model, const Matrix& x);

/// Eval-mode argmax per row; ties resolve to the lowest class index.
std::vector<int> predict(const Model& model, const Matrix& x);
std::vector<int> argmax_rows(const Matrix& scores);

/// a - b over every tensor, running statistics included.
Model model_difference(const Model& a, const Model& b);

/// target += scale * delta over every tensor, running statistics included.
void add_scaled(Model& target, const Model& delta, double scale);

bool same_shape(const Model& a, const Model& b);
bool bitwise_equal(const Model& a, const Model& b);

/// FNV-1a over the raw bytes of every tensor.
std::uint64_t fingerprint(const Model& model);
std::string fingerprint_hex(const Model& model);

/// Extra gradient with respect to the encoder output, given the features of
/// the current batch.
using FeatureGradHook = std::function<Matrix(const Matrix& features)>;

/// One Adam step on mean NLL of labels, with an optional extra encoder-output
/// gradient. Running statistics are updated. Returns the NLL value.
double train_step(Model& model, ModelOptimizer& opt, const Matrix& x, const std::vector<int>& labels, double lr,
                  const FeatureGradHook& hook = {});

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace fedka
