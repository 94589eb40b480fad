#include "fedka/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace fedka {

double tta(const Model& model, const Matrix& x, const std::vector<int>& labels) {
    if (x.rows() == 0) throw std::invalid_argument("tta: empty dataset");
    if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw std::invalid_argument("tta: label count mismatch");
    const auto pred = predict(model, x);
    long correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double tta(const Model& model, const DomainDataset& labeled) {
    if (!labeled.labeled()) throw std::invalid_argument("tta: dataset '" + labeled.domain_id + "' is unlabeled");
    return tta(model, labeled.features, *labeled.labels);
}

double mean_accuracy(std::vector<double> accuracies) {
    if (accuracies.empty()) throw std::invalid_argument("mean_accuracy: empty");
    std::sort(accuracies.begin(), accuracies.end());
    double sum = 0.0;
    for (double a : accuracies) sum += a;
    return sum / static_cast<double>(accuracies.size());
}

GroupEffect group_effect(const Model& global, const std::vector<ClientUpdate>& updates, const Model& aggregate,
                         const DomainDataset& test_set) {
    if (updates.empty()) throw std::invalid_argument("group_effect: no updates");
    GroupEffect ge;
    for (const auto& u : updates) {
        if (!same_shape(global, u.delta)) throw std::invalid_argument("group_effect: update shape mismatch");
        Model patched = global;
        add_scaled(patched, u.delta, 1.0);
        ge.patched_tta.push_back(tta(patched, test_set));
    }
    ge.aggregate_tta = tta(aggregate, test_set);
    ge.value = mean_accuracy(ge.patched_tta) - ge.aggregate_tta;
    return ge;
}

void dump_features(const Network& encoder, const std::vector<const DomainDataset*>& datasets,
                   const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write feature dump " + path.string());
    out << "domain_id,label";
    for (Eigen::Index f = 0; f < encoder.output_dim(); ++f) out << ",h" << f;
    out << '\n' << std::setprecision(17);
    for (const auto* ds : datasets) {
        const Matrix features = nn::evaluate(encoder, ds->features);
        for (Eigen::Index i = 0; i < features.rows(); ++i) {
            out << ds->domain_id << ',' << (ds->labels ? (*ds->labels)[static_cast<std::size_t>(i)] : -1);
            for (Eigen::Index f = 0; f < features.cols(); ++f) out << ',' << features(i, f);
            out << '\n';
        }
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace fedka
