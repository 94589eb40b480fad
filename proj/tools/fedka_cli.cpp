// Command-line front end: run, sweep, gen-data, dump-features.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "fedka/data.hpp"
#include "fedka/experiment.hpp"
#include "fedka/metrics.hpp"
#include "fedka/model.hpp"

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::int64_t> seed;
    std::string out;
    std::string variant;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
    cmd->add_option("--config", opts.config, "Config file (flat key = value)");
    cmd->add_option("--seed", opts.seed, "Master seed, overrides the config");
    cmd->add_option("--out", opts.out, "Output directory, overrides the config");
    cmd->add_option("--variant", opts.variant, "Variant tag, overrides the config");
}

fedka::ExperimentConfig load(const CommonOptions& opts) {
    fedka::ExperimentConfig config = opts.config.empty() ? fedka::parse_config_text("") : fedka::parse_config(opts.config);
    if (opts.seed) {
        if (*opts.seed < 0) throw fedka::ConfigError("seed", "must be non-negative");
        config.seed = static_cast<std::uint64_t>(*opts.seed);
    }
    if (!opts.out.empty()) config.out_dir = opts.out;
    if (!opts.variant.empty()) {
        try {
            config.variant = fedka::parse_variant(opts.variant);
        } catch (const std::invalid_argument& e) {
            throw fedka::ConfigError("variant", e.what());
        }
    }
    config.validate();
    return config;
}

void print_summary(const fedka::ExperimentSummary& s) {
    std::cout << fedka::to_string(s.variant) << ": max TTA " << s.max_tta_mean << " +- " << s.max_tta_std
              << " over " << s.replicates.size() << " replicate(s), final TTA " << s.final_tta_mean
              << ", sum GE " << s.ge_sum_mean << " -> " << s.metrics_path.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated knowledge-alignment simulator"};
    app.require_subcommand(1);

    CommonOptions run_opts, sweep_opts, gen_opts, dump_opts;
    auto* run = app.add_subcommand("run", "Run one variant for every replicate");
    add_common(run, run_opts);

    auto* sweep_cmd = app.add_subcommand("sweep", "Run a list of variants with a shared seed");
    add_common(sweep_cmd, sweep_opts);
    std::string variant_list;
    sweep_cmd->add_option("--variants", variant_list, "Comma-separated variant tags (default: config or all seven)");

    auto* gen = app.add_subcommand("gen-data", "Write the synthetic domains of replicate 0 as CSV + manifest");
    add_common(gen, gen_opts);

    auto* dump = app.add_subcommand("dump-features", "Write eval-mode encoder features of every domain");
    add_common(dump, dump_opts);
    std::string model_path;
    dump->add_option("--model", model_path, "Model JSON written by run")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    fedka::ExperimentConfig config;
    try {
        if (*run) config = load(run_opts);
        if (*sweep_cmd) {
            config = load(sweep_opts);
            if (!variant_list.empty()) {
                config.sweep_variants.clear();
                std::string item;
                std::istringstream in(variant_list);
                while (std::getline(in, item, ',')) config.sweep_variants.push_back(fedka::parse_variant(item));
            }
        }
        if (*gen) config = load(gen_opts);
        if (*dump) config = load(dump_opts);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    }

    try {
        if (*run) {
            print_summary(fedka::run_experiment(config));
        } else if (*sweep_cmd) {
            for (const auto& s : fedka::sweep(config, config.sweep_variants)) print_summary(s);
            std::cout << "comparison: " << (config.out_dir / "comparison.csv").string() << '\n';
        } else if (*gen) {
            const auto domains = fedka::load_experiment_data(config, fedka::replicate_seed(config, 0));
            fedka::write_domains(domains, config.out_dir);
            std::cout << "wrote " << (config.out_dir / "manifest.csv").string() << '\n';
        } else if (*dump) {
            const auto model = fedka::load_model(model_path);
            const auto domains = fedka::load_experiment_data(config, fedka::replicate_seed(config, 0));
            std::vector<const fedka::DomainDataset*> sets;
            for (const auto& s : domains.sources) sets.push_back(&s);
            sets.push_back(&domains.target_train);
            sets.push_back(&domains.target_test);
            std::filesystem::create_directories(config.out_dir);
            const auto path = config.out_dir / "features.csv";
            fedka::dump_features(model.encoder, sets, path);
            std::cout << "wrote " << path.string() << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
