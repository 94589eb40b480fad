#pragma once

#include <filesystem>
#include <vector>

#include "fedka/data.hpp"
#include "fedka/federation.hpp"
#include "fedka/model.hpp"

namespace fedka {

/// Per-round metrics. group_effect = mean(tta_patch) - tta_aggregated; when
/// group-effect evaluation is disabled tta_patch is empty and group_effect
/// is NaN.
struct RoundRecord {
    int round = 0;
    double lambda_p = 0.0;
    double tta_global = 0.0;      ///< global model after fine-tuning
    double tta_aggregated = 0.0;  ///< aggregate before fine-tuning
    std::vector<double> tta_patch;
    double group_effect = 0.0;
    double j_cls = 0.0;
    double j_dis = 0.0;
    double j_mmd = 0.0;
    long vote_ties = 0;
    long voted_samples = 0;
    long disentangler_packets = 0;
    long mmd_packets = 0;
    long gradient_packets = 0;
    long update_messages = 0;
};

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double tta(const Model& model, const Matrix& x, const std::vector<int>& labels);
double tta(const Model& model, const DomainDataset& labeled);

/// Mean of accuracies, summed in ascending order.
double mean_accuracy(std::vector<double> accuracies);

struct GroupEffect {
    std::vector<double> patched_tta;  ///< in update-list order
    double aggregate_tta = 0.0;
    double value = 0.0;
};

/// Accuracy of each patched model G_t + delta_k against the aggregate.
/// Positive values mean aggregation lost accuracy.
GroupEffect group_effect(const Model& global, const std::vector<ClientUpdate>& updates, const Model& aggregate,
                         const DomainDataset& test_set);

/// CSV "domain_id,label,h0..h{U-1}" of eval-mode encodings; label -1 for
/// unlabeled samples.
void dump_features(const Network& encoder, const std::vector<const DomainDataset*>& datasets,
                   const std::filesystem::path& path);

}  // namespace fedka
