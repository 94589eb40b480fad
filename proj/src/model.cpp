#include "fedka/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "fedka/losses.hpp"
#include "fedka/random.hpp"

namespace fedka {

nn::NetworkSpec Architecture::encoder_spec() const {
    return {{input_dim, encoder_hidden, feature_dim}, {true, true}, nn::OutputKind::kFeatures};
}

nn::NetworkSpec Architecture::classifier_spec() const {
    return {{feature_dim, classifier_hidden, num_classes}, {true, false}, nn::OutputKind::kLogSoftmax};
}

nn::NetworkSpec Architecture::domain_spec() const {
    return {{feature_dim, domain_hidden, 2}, {true, false}, nn::OutputKind::kLogSoftmax};
}

Model init_model(const Architecture& arch, std::uint64_t seed) {
    return {nn::init_network<double>(arch.encoder_spec(), derive_seed(seed, StreamTag::kInit, 0)),
            nn::init_network<double>(arch.classifier_spec(), derive_seed(seed, StreamTag::kInit, 1))};
}

DomainClassifier init_domain_classifier(const Architecture& arch, std::uint64_t seed) {
    DomainClassifier fd;
    fd.net = nn::init_network<double>(arch.domain_spec(), seed);
    // starts as the uniform domain classifier
    fd.net.layers.back().weight.setZero();
    fd.adam = AdamState(fd.net);
    return fd;
}

Matrix log_probs(const Model& model, const Matrix& x) {
    return nn::evaluate(model.classifier, nn::evaluate(model.encoder, x));
}

std::vector<int> argmax_rows(const Matrix& scores) {
    std::vector<int> out(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < scores.cols(); ++c) {
            if (scores(r, c) > scores(r, best)) best = c;
        }
        out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

std::vector<int> predict(const Model& model, const Matrix& x) { return argmax_rows(log_probs(model, x)); }

bool same_shape(const Model& a, const Model& b) {
    if (a.encoder.spec != b.encoder.spec || a.classifier.spec != b.classifier.spec) return false;
    bool same = true;
    auto check = [&](const Network& x, const Network& y) {
        nn::for_each_tensor(
            true, [&](const auto& s, const auto& t) { same = same && s.rows() == t.rows() && s.cols() == t.cols(); },
            x, y);
    };
    check(a.encoder, b.encoder);
    check(a.classifier, b.classifier);
    return same;
}

Model model_difference(const Model& a, const Model& b) {
    if (!same_shape(a, b)) throw std::invalid_argument("model_difference: shape mismatch");
    Model out = a;
    auto sub = [](auto& o, const auto& y) { o -= y; };
    nn::for_each_tensor(true, sub, out.encoder, b.encoder);
    nn::for_each_tensor(true, sub, out.classifier, b.classifier);
    return out;
}

void add_scaled(Model& target, const Model& delta, double scale) {
    if (!same_shape(target, delta)) throw std::invalid_argument("add_scaled: shape mismatch");
    auto axpy = [scale](auto& t, const auto& d) { t += scale * d; };
    nn::for_each_tensor(true, axpy, target.encoder, delta.encoder);
    nn::for_each_tensor(true, axpy, target.classifier, delta.classifier);
}

namespace {

template <typename F>
void for_each_model_tensor(const Model& m, F&& f) {
    nn::for_each_tensor(true, f, m.encoder);
    nn::for_each_tensor(true, f, m.classifier);
}

}  // namespace

bool bitwise_equal(const Model& a, const Model& b) {
    if (!same_shape(a, b)) return false;
    bool equal = true;
    auto cmp = [&](const auto& s, const auto& t) {
        equal = equal && std::memcmp(s.data(), t.data(), static_cast<std::size_t>(s.size()) * sizeof(double)) == 0;
    };
    nn::for_each_tensor(true, cmp, a.encoder, b.encoder);
    nn::for_each_tensor(true, cmp, a.classifier, b.classifier);
    return equal;
}

std::uint64_t fingerprint(const Model& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for_each_model_tensor(model, [&](const auto& t) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
        for (std::size_t i = 0; i < static_cast<std::size_t>(t.size()) * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    });
    return h;
}

std::string fingerprint_hex(const Model& model) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << fingerprint(model);
    return out.str();
}

double train_step(Model& model, ModelOptimizer& opt, const Matrix& x, const std::vector<int>& labels, double lr,
                  const FeatureGradHook& hook) {
    auto enc = nn::forward(model.encoder, x, nn::Mode::kTrain);
    auto cls = nn::forward(model.classifier, enc.output, nn::Mode::kTrain);
    const auto nll = losses::nll_loss<double>(cls.output, labels);
    if (!std::isfinite(nll.value)) throw std::domain_error("train_step: non-finite loss");
    auto cls_back = nn::backward(model.classifier, cls.tape, nll.grad);
    Matrix feature_grad = std::move(cls_back.input_grad);
    if (hook) feature_grad += hook(enc.output);
    auto enc_back = nn::backward(model.encoder, enc.tape, feature_grad);
    if (!nn::all_finite(enc_back.grads) || !nn::all_finite(cls_back.grads)) {
        throw std::domain_error("train_step: non-finite gradient");
    }
    nn::adam_step(model.encoder, enc_back.grads, opt.encoder, lr);
    nn::adam_step(model.classifier, cls_back.grads, opt.classifier, lr);
    nn::commit_batch_statistics(model.encoder, enc.tape);
    nn::commit_batch_statistics(model.classifier, cls.tape);
    return nll.value;
}

namespace {

using nlohmann::json;

json tensor_to_json(const Eigen::Ref<const Eigen::MatrixXd>& t) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < t.cols(); ++c) row.push_back(t(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

template <typename Dense>
void tensor_from_json(const json& j, Dense& t) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != t.rows()) {
        throw std::runtime_error("model file: tensor shape mismatch");
    }
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
        const auto& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != t.cols()) {
            throw std::runtime_error("model file: tensor shape mismatch");
        }
        for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
}

json network_to_json(const Network& net) {
    json j;
    j["layer_dims"] = net.spec.layer_dims;
    j["batchnorm"] = net.spec.batchnorm;
    j["output"] = net.spec.output == nn::OutputKind::kFeatures ? "features" : "log_softmax";
    json layers = json::array();
    for (const auto& layer : net.layers) {
        json l;
        l["weight"] = tensor_to_json(layer.weight);
        l["bias"] = tensor_to_json(layer.bias);
        if (layer.has_batchnorm) {
            l["bn_scale"] = tensor_to_json(layer.bn_scale);
            l["bn_shift"] = tensor_to_json(layer.bn_shift);
            l["running_mean"] = tensor_to_json(layer.running_mean);
            l["running_var"] = tensor_to_json(layer.running_var);
        }
        layers.push_back(std::move(l));
    }
    j["layers"] = std::move(layers);
    return j;
}

Network network_from_json(const json& j) {
    nn::NetworkSpec spec(j.at("layer_dims").get<std::vector<nn::Index>>(), j.at("batchnorm").get<std::vector<bool>>(),
                         j.at("output").get<std::string>() == "features" ? nn::OutputKind::kFeatures
                                                                        : nn::OutputKind::kLogSoftmax);
    Network net = nn::init_network<double>(spec, 0);
    const auto& layers = j.at("layers");
    if (layers.size() != net.layers.size()) throw std::runtime_error("model file: layer count mismatch");
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        auto& layer = net.layers[i];
        const auto& l = layers[i];
        tensor_from_json(l.at("weight"), layer.weight);
        tensor_from_json(l.at("bias"), layer.bias);
        if (layer.has_batchnorm) {
            tensor_from_json(l.at("bn_scale"), layer.bn_scale);
            tensor_from_json(l.at("bn_shift"), layer.bn_shift);
            tensor_from_json(l.at("running_mean"), layer.running_mean);
            tensor_from_json(l.at("running_var"), layer.running_var);
        }
    }
    return net;
}

}  // namespace

void save_model(const Model& model, const std::filesystem::path& path) {
    json j;
    j["encoder"] = network_to_json(model.encoder);
    j["classifier"] = network_to_json(model.classifier);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write model file " + path.string());
    out << j.dump() << '\n';
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open model file " + path.string());
    json j;
    try {
        in >> j;
        return {network_from_json(j.at("encoder")), network_from_json(j.at("classifier"))};
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed model file " + path.string() + ": " + e.what());
    }
}

}  // namespace fedka
