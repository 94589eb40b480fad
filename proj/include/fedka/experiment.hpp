#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedka/data.hpp"
#include "fedka/federation.hpp"
#include "fedka/model.hpp"

namespace fedka {

/// Invalid configuration; key() names the offending key when there is one.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error(key.empty() ? what : "config key '" + key + "': " + what), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct ExperimentConfig {
    VariantTag variant = VariantTag::kFedKA;
    VotingMode voting = VotingMode::kSmall;
    ProtocolConfig protocol;
    Architecture arch;  ///< input_dim and num_classes are taken from the data
    std::uint64_t seed = 0;
    int replicates = 5;
    std::filesystem::path manifest;  ///< empty: synthetic data
    SyntheticSpec synthetic;
    std::filesystem::path out_dir = "out";
    bool dump_features = true;
    bool save_models = true;
    std::vector<VariantTag> sweep_variants = all_variants();

    VariantFlags flags() const { return VariantFlags::from_tag(variant, voting); }
    void validate() const;
};

/// Flat "key = value" lines; '#' starts a comment. Absent keys keep their
/// defaults and unknown keys are rejected.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Data for one replicate: synthetic domains from the replicate seed, or the
/// manifest's domains.
SyntheticDomains load_experiment_data(const ExperimentConfig& config, std::uint64_t replicate_seed);
std::uint64_t replicate_seed(const ExperimentConfig& config, int replicate);
int infer_num_classes(const SyntheticDomains& domains);

struct ReplicateResult {
    double max_tta = 0.0;
    double final_tta = 0.0;
    double ge_sum = 0.0;
    std::string initial_model_hash;
    std::vector<double> tta_history;
    std::vector<double> ge_history;
};

struct ExperimentSummary {
    VariantTag variant = VariantTag::kFedKA;
    std::vector<ReplicateResult> replicates;
    double max_tta_mean = 0.0;
    double max_tta_std = 0.0;
    double final_tta_mean = 0.0;
    double ge_sum_mean = 0.0;
    std::filesystem::path metrics_path;
};

/// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(const std::vector<double>& values);

/// Runs every replicate, streaming one JSON line per round to
/// out_dir/metrics.jsonl and closing with a summary line. Also writes the
/// final global model and a feature dump per replicate when enabled.
ExperimentSummary run_experiment(const ExperimentConfig& config);

/// One run per variant under out_dir/<variant>/, sharing the master seed,
/// plus out_dir/comparison.csv.
std::vector<ExperimentSummary> sweep(const ExperimentConfig& config, const std::vector<VariantTag>& variants);

}  // namespace fedka
