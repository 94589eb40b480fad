#include "fedka/experiment.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "fedka/metrics.hpp"

namespace fedka {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

long long parse_int(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(value, &used);
    } catch (const std::exception&) {
        throw ConfigError(key, "expected an integer, got '" + value + "'");
    }
    if (used != value.size()) throw ConfigError(key, "expected an integer, got '" + value + "'");
    return v;
}

int parse_positive(const std::string& key, const std::string& value) {
    const auto v = parse_int(key, value);
    if (v <= 0 || v > std::numeric_limits<int>::max()) throw ConfigError(key, "must be a positive integer");
    return static_cast<int>(v);
}

double parse_real(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        throw ConfigError(key, "expected a number, got '" + value + "'");
    }
    if (used != value.size() || !std::isfinite(v)) throw ConfigError(key, "expected a number, got '" + value + "'");
    return v;
}

double parse_positive_real(const std::string& key, const std::string& value) {
    const double v = parse_real(key, value);
    if (!(v > 0.0)) throw ConfigError(key, "must be positive");
    return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "off" || value == "no") return false;
    throw ConfigError(key, "expected true or false, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"variant",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             try {
                 c.variant = parse_variant(v);
             } catch (const std::invalid_argument& e) {
                 throw ConfigError(k, e.what());
             }
         }},
        {"rounds", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.protocol.total_rounds = parse_positive(k, v); }},
        {"batches_per_round", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.protocol.batches_per_round = parse_positive(k, v); }},
        {"batch_size", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.protocol.batch_size = parse_positive(k, v); }},
        {"mmd_batch_size", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.protocol.mmd_batch_size = parse_positive(k, v); }},
        {"lr", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.protocol.lr = parse_positive_real(k, v); }},
        {"gamma", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.protocol.gamma = parse_positive_real(k, v); }},
        {"voting_size",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             if (v == "all") {
                 c.voting = VotingMode::kAllTarget;
                 return;
             }
             const auto n = static_cast<std::size_t>(parse_positive(k, v));
             if (n == c.protocol.voting_large) {
                 c.voting = VotingMode::kLarge;
             } else {
                 c.voting = VotingMode::kSmall;
                 c.protocol.voting_small = n;
             }
         }},
        {"encoder_hidden", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.arch.encoder_hidden = parse_positive(k, v); }},
        {"feature_dim", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.arch.feature_dim = parse_positive(k, v); }},
        {"classifier_hidden", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.arch.classifier_hidden = parse_positive(k, v); }},
        {"domain_hidden", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.arch.domain_hidden = parse_positive(k, v); }},
        {"seed",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             const auto s = parse_int(k, v);
             if (s < 0) throw ConfigError(k, "must be non-negative");
             c.seed = static_cast<std::uint64_t>(s);
         }},
        {"replicates", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.replicates = parse_positive(k, v); }},
        {"group_effect", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.protocol.compute_group_effect = parse_bool(k, v); }},
        {"threads", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.protocol.threads = parse_positive(k, v); }},
        {"dump_features", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.dump_features = parse_bool(k, v); }},
        {"save_models", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.save_models = parse_bool(k, v); }},
        {"out", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
        {"manifest", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.manifest = v; }},
        {"synthetic_dim", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.synthetic.dim = parse_positive(k, v); }},
        {"synthetic_classes", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.synthetic.num_classes = parse_positive(k, v); }},
        {"synthetic_source_angles",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             c.synthetic.source_angles_deg.clear();
             for (const auto& item : split_list(v)) c.synthetic.source_angles_deg.push_back(parse_real(k, item));
             if (c.synthetic.source_angles_deg.empty()) throw ConfigError(k, "need at least one angle");
         }},
        {"synthetic_target_angle", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.synthetic.target_angle_deg = parse_real(k, v); }},
        {"synthetic_planes", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.synthetic.plane_count = parse_positive(k, v); }},
        {"synthetic_mean_scale", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.synthetic.mean_scale = parse_positive_real(k, v); }},
        {"synthetic_noise",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             c.synthetic.noise_sigma = parse_real(k, v);
             if (c.synthetic.noise_sigma < 0.0) throw ConfigError(k, "must be non-negative");
         }},
        {"synthetic_samples_per_source", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.synthetic.samples_per_source = parse_positive(k, v); }},
        {"synthetic_target_train", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.synthetic.target_train = parse_positive(k, v); }},
        {"synthetic_target_test", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.synthetic.target_test = parse_positive(k, v); }},
        {"sweep_variants",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             c.sweep_variants.clear();
             for (const auto& item : split_list(v)) {
                 try {
                     c.sweep_variants.push_back(parse_variant(item));
                 } catch (const std::invalid_argument& e) {
                     throw ConfigError(k, e.what());
                 }
             }
             if (c.sweep_variants.empty()) throw ConfigError(k, "need at least one variant");
         }},
    };
    return table;
}

}  // namespace

void ExperimentConfig::validate() const {
    try {
        protocol.validate();
    } catch (const std::invalid_argument& e) {
        const std::string what = e.what();
        throw ConfigError(what.substr(0, what.find(' ')), what);
    }
    if (manifest.empty()) {
        try {
            synthetic.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("synthetic", e.what());
        }
        if (static_cast<std::size_t>(synthetic.target_train) < protocol.samples_per_round()) {
            throw ConfigError("synthetic_target_train", "must hold at least one round of target samples");
        }
        if (static_cast<std::size_t>(synthetic.samples_per_source) < protocol.samples_per_round()) {
            throw ConfigError("synthetic_samples_per_source", "must hold at least one round of samples");
        }
        const auto flags = this->flags();
        const std::size_t needed = flags.voting == VotingMode::kSmall   ? protocol.voting_small
                                   : flags.voting == VotingMode::kLarge ? protocol.voting_large
                                                                        : 0;
        if (needed > static_cast<std::size_t>(synthetic.target_train)) {
            throw ConfigError("voting_size", "exceeds the target-train size " + std::to_string(synthetic.target_train));
        }
    }
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig config;
    std::istringstream in(text);
    std::string line;
    std::map<std::string, std::string> seen;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("", "line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!setters().contains(key)) throw ConfigError(key, "unknown key");
        if (seen.contains(key)) throw ConfigError(key, "given twice");
        seen[key] = value;
    }
    // voting_size depends on nothing else; apply in key order
    for (const auto& [key, value] : seen) setters().at(key)(config, key, value);
    config.validate();
    return config;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open config file " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    auto config = parse_config_text(text.str());
    if (!config.manifest.empty() && config.manifest.is_relative()) {
        config.manifest = path.parent_path() / config.manifest;
    }
    return config;
}

std::uint64_t replicate_seed(const ExperimentConfig& config, int replicate) {
    return derive_seed(config.seed, StreamTag::kReplicate, static_cast<std::uint64_t>(replicate));
}

int infer_num_classes(const SyntheticDomains& domains) {
    int max_label = -1;
    auto scan = [&](const DomainDataset& ds) {
        if (!ds.labels) return;
        for (int y : *ds.labels) max_label = std::max(max_label, y);
    };
    for (const auto& s : domains.sources) scan(s);
    scan(domains.target_test);
    if (max_label < 1) throw DataError("need at least two classes in the labeled domains");
    return max_label + 1;
}

SyntheticDomains load_experiment_data(const ExperimentConfig& config, std::uint64_t seed) {
    if (config.manifest.empty()) return generate_synthetic_domains(config.synthetic, seed);
    return load_manifest_domains(config.manifest);
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
    if (values.empty()) return {0.0, 0.0};
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    if (values.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

namespace {

using ojson = nlohmann::ordered_json;

ojson record_to_json(const RoundRecord& r, int replicate, const std::string& variant, int num_clients) {
    ojson j;
    j["replicate"] = replicate;
    j["round"] = r.round;
    j["variant"] = variant;
    j["lambda_p"] = r.lambda_p;
    j["tta_global"] = r.tta_global;
    j["tta_aggregated"] = r.tta_aggregated;
    for (int k = 0; k < num_clients; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        j["tta_patch_" + std::to_string(k)] = kk < r.tta_patch.size() ? ojson(r.tta_patch[kk]) : ojson(nullptr);
    }
    j["group_effect"] = std::isfinite(r.group_effect) ? ojson(r.group_effect) : ojson(nullptr);
    j["j_cls"] = r.j_cls;
    j["j_dis"] = r.j_dis;
    j["j_mmd"] = r.j_mmd;
    j["vote_ties"] = r.vote_ties;
    j["voted_samples"] = r.voted_samples;
    j["disentangler_packets"] = r.disentangler_packets;
    j["mmd_packets"] = r.mmd_packets;
    j["gradient_packets"] = r.gradient_packets;
    j["update_messages"] = r.update_messages;
    return j;
}

void check_data(const ExperimentConfig& config, const SyntheticDomains& domains) {
    const auto round_samples = config.protocol.samples_per_round();
    for (const auto& s : domains.sources) {
        if (static_cast<std::size_t>(s.size()) < round_samples) {
            throw DataError("source domain '" + s.domain_id + "' has fewer samples than one round draws");
        }
    }
    if (static_cast<std::size_t>(domains.target_train.size()) < round_samples) {
        throw DataError("target-train has fewer samples than one round draws");
    }
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& config) {
    config.validate();
    std::filesystem::create_directories(config.out_dir);
    ExperimentSummary summary;
    summary.variant = config.variant;
    summary.metrics_path = config.out_dir / "metrics.jsonl";
    std::ofstream metrics(summary.metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + summary.metrics_path.string());
    const std::string variant = to_string(config.variant);
    const VariantFlags flags = config.flags();

    try {
        for (int rep = 0; rep < config.replicates; ++rep) {
            const auto seed = replicate_seed(config, rep);
            const SyntheticDomains domains = load_experiment_data(config, seed);
            check_data(config, domains);
            Architecture arch = config.arch;
            arch.input_dim = static_cast<int>(domains.target_train.dim());
            arch.num_classes = config.manifest.empty() ? config.synthetic.num_classes : infer_num_classes(domains);
            for (const auto& s : domains.sources) s.validate(arch.num_classes);
            domains.target_test.validate(arch.num_classes);

            GlobalState state = init_global_state(arch, static_cast<int>(domains.sources.size()), seed);
            const FederationData data{&domains.sources, &domains.target_train, &domains.target_test, arch.num_classes};

            ReplicateResult result;
            result.initial_model_hash = fingerprint_hex(state.global);
            for (int t = 0; t < config.protocol.total_rounds; ++t) {
                const RoundRecord record = run_round(state, data, flags, config.protocol);
                metrics << record_to_json(record, rep, variant, static_cast<int>(domains.sources.size())).dump()
                        << '\n';
                metrics.flush();
                result.tta_history.push_back(record.tta_global);
                result.ge_history.push_back(record.group_effect);
                result.max_tta = std::max(result.max_tta, record.tta_global);
                if (std::isfinite(record.group_effect)) result.ge_sum += record.group_effect;
            }
            result.final_tta = result.tta_history.back();
            if (config.save_models) save_model(state.global, config.out_dir / ("model_rep" + std::to_string(rep) + ".json"));
            if (config.dump_features) {
                std::vector<const DomainDataset*> sets;
                for (const auto& s : domains.sources) sets.push_back(&s);
                sets.push_back(&domains.target_test);
                dump_features(state.global.encoder, sets, config.out_dir / ("features_rep" + std::to_string(rep) + ".csv"));
            }
            summary.replicates.push_back(std::move(result));
        }
    } catch (const std::exception& e) {
        ojson err;
        err["error"] = e.what();
        metrics << err.dump() << '\n';
        throw;
    }

    std::vector<double> max_tta, final_tta, ge_sum;
    std::vector<std::string> hashes;
    for (const auto& r : summary.replicates) {
        max_tta.push_back(r.max_tta);
        final_tta.push_back(r.final_tta);
        ge_sum.push_back(r.ge_sum);
        hashes.push_back(r.initial_model_hash);
    }
    std::tie(summary.max_tta_mean, summary.max_tta_std) = mean_std(max_tta);
    summary.final_tta_mean = mean_std(final_tta).first;
    summary.ge_sum_mean = mean_std(ge_sum).first;

    ojson line;
    line["summary"] = true;
    line["variant"] = variant;
    line["replicates"] = config.replicates;
    line["rounds"] = config.protocol.total_rounds;
    line["max_tta"] = max_tta;
    line["max_tta_mean"] = summary.max_tta_mean;
    line["max_tta_std"] = summary.max_tta_std;
    line["final_tta"] = final_tta;
    line["final_tta_mean"] = summary.final_tta_mean;
    line["ge_sum"] = ge_sum;
    line["ge_sum_mean"] = summary.ge_sum_mean;
    line["initial_model_hash"] = hashes;
    metrics << line.dump() << '\n';
    return summary;
}

std::vector<ExperimentSummary> sweep(const ExperimentConfig& config, const std::vector<VariantTag>& variants) {
    if (variants.empty()) throw ConfigError("sweep_variants", "need at least one variant");
    std::vector<ExperimentSummary> out;
    for (VariantTag tag : variants) {
        ExperimentConfig run = config;
        run.variant = tag;
        run.out_dir = config.out_dir / to_string(tag);
        out.push_back(run_experiment(run));
    }
    std::ofstream csv(config.out_dir / "comparison.csv");
    if (!csv) throw std::runtime_error("cannot write comparison.csv");
    csv << "variant,max_tta_mean,max_tta_std,final_tta_mean,ge_sum_mean,replicates\n";
    csv << std::setprecision(17);
    for (const auto& s : out) {
        csv << to_string(s.variant) << ',' << s.max_tta_mean << ',' << s.max_tta_std << ',' << s.final_tta_mean << ','
            << s.ge_sum_mean << ',' << s.replicates.size() << '\n';
    }
    return out;
}

}  // namespace fedka
