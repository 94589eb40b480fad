#include <doctest.h>

#include <json.hpp>

#include <fstream>
#include <set>

#include "fedka/experiment.hpp"
#include "scratch.hpp"

using namespace fedka;
using fedka::testing::read_text;
using fedka::testing::scratch_dir;

namespace {

const char* kTinyConfig = R"(# small end-to-end run
rounds = 2
replicates = 2
encoder_hidden = 12
feature_dim = 4
classifier_hidden = 8
domain_hidden = 6
synthetic_dim = 4
synthetic_classes = 3
synthetic_source_angles = 10, 20
synthetic_target_angle = 30
synthetic_planes = 4
synthetic_samples_per_source = 600
synthetic_target_train = 600
synthetic_target_test = 90
)";

ExperimentConfig tiny_config(const std::filesystem::path& out) {
    auto config = parse_config_text(kTinyConfig);
    config.out_dir = out;
    return config;
}

std::string config_error_key(const std::string& text) {
    try {
        parse_config_text(text).validate();
    } catch (const ConfigError& e) {
        return e.key();
    }
    return "<none>";
}

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(in, line)) out.push_back(nlohmann::json::parse(line));
    return out;
}

}  // namespace

TEST_CASE("an empty config gives the defaults") {
    const auto c = parse_config_text("");
    CHECK(c.variant == VariantTag::kFedKA);
    CHECK(c.protocol.total_rounds == 200);
    CHECK(c.protocol.lr == 0.0003);
    CHECK(c.protocol.batch_size == 16);
    CHECK(c.protocol.batches_per_round == 32);
    CHECK(c.protocol.gamma == 5.0);
    CHECK(c.voting == VotingMode::kSmall);
    CHECK(c.arch.encoder_hidden == 500);
    CHECK(c.arch.feature_dim == 50);
    CHECK(c.replicates == 5);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config errors name the key") {
    CHECK(config_error_key("rounds = -5") == "rounds");
    CHECK(config_error_key("vortingsize = 512") == "vortingsize");
    CHECK(config_error_key("lr = fast") == "lr");
    CHECK(config_error_key("variant = FedProx") == "variant");
    CHECK(config_error_key("rounds = 3\nrounds = 4") == "rounds");
    CHECK(config_error_key("group_effect = maybe") == "group_effect");
    CHECK(config_error_key("voting_size = 4096") == "voting_size");
    CHECK(config_error_key("voting_size = 2048\nsynthetic_target_train = 1024") == "voting_size");
    CHECK(config_error_key("mmd_batch_size = 100") == "mmd_batch_size");
    CHECK(config_error_key("just words") == "");
    try {
        parse_config_text("vortingsize = 512");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()) == "config key 'vortingsize': unknown key");
    }
}

TEST_CASE("config values and comments") {
    const auto c = parse_config_text("variant = Dis+Voting  # ablation row\n\n  voting_size = 2048\nseed = 9\nlr=0.001\n");
    CHECK(c.variant == VariantTag::kDisVoting);
    CHECK(c.voting == VotingMode::kLarge);
    CHECK(c.seed == 9);
    CHECK(c.protocol.lr == 0.001);
    CHECK(parse_config_text("voting_size = all").voting == VotingMode::kAllTarget);
    const auto small = parse_config_text("voting_size = 256");
    CHECK(small.voting == VotingMode::kSmall);
    CHECK(small.protocol.voting_small == 256);
    const auto sweep_list = parse_config_text("sweep_variants = FedAvg, FedKA");
    CHECK(sweep_list.sweep_variants == std::vector<VariantTag>{VariantTag::kFedAvg, VariantTag::kFedKA});
}

TEST_CASE("mean and sample standard deviation") {
    const auto [mean, sd] = mean_std({1.0, 2.0, 3.0, 4.0});
    CHECK(mean == 2.5);
    CHECK(sd == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
    CHECK(mean_std({0.7}).second == 0.0);
}

TEST_CASE("metrics file layout") {
    const auto dir = scratch_dir("run_layout");
    const auto summary = run_experiment(tiny_config(dir));
    const auto lines = read_jsonl(dir / "metrics.jsonl");
    REQUIRE(lines.size() == 5);
    std::set<std::string> keys;
    for (auto it = lines[0].begin(); it != lines[0].end(); ++it) keys.insert(it.key());
    for (std::size_t i = 0; i < 4; ++i) {
        std::set<std::string> these;
        for (auto it = lines[i].begin(); it != lines[i].end(); ++it) these.insert(it.key());
        CHECK(these == keys);
        CHECK(lines[i]["replicate"] == static_cast<int>(i / 2));
        CHECK(lines[i]["round"] == static_cast<int>(i % 2));
        CHECK(lines[i]["disentangler_packets"] == 64);
        CHECK(lines[i]["mmd_packets"] == 8);
    }
    for (const char* key : {"tta_global", "tta_patch_0", "tta_patch_1", "group_effect", "lambda_p", "vote_ties"}) {
        CHECK(keys.contains(key));
    }
    const auto& s = lines.back();
    CHECK(s["summary"] == true);
    CHECK(s["max_tta"].size() == 2);
    CHECK(s["max_tta_mean"].get<double>() == summary.max_tta_mean);
    CHECK(s["initial_model_hash"].size() == 2);
    CHECK(std::filesystem::exists(dir / "model_rep0.json"));
    CHECK(std::filesystem::exists(dir / "features_rep1.csv"));

    const Model saved = load_model(dir / "model_rep1.json");
    CHECK(saved.encoder.spec.layer_dims == std::vector<Eigen::Index>{4, 12, 4});
}

TEST_CASE("FedAvg runs send no exchange messages") {
    const auto dir = scratch_dir("run_fedavg");
    auto config = tiny_config(dir);
    config.variant = VariantTag::kFedAvg;
    config.replicates = 1;
    run_experiment(config);
    const auto lines = read_jsonl(dir / "metrics.jsonl");
    for (std::size_t i = 0; i + 1 < lines.size(); ++i) {
        CHECK(lines[i]["gradient_packets"] == 0);
        CHECK(lines[i]["voted_samples"] == 0);
        CHECK(lines[i]["update_messages"] == 2);
    }
}

TEST_CASE("disabled group effect is reported as null") {
    const auto dir = scratch_dir("run_no_ge");
    auto config = tiny_config(dir);
    config.protocol.compute_group_effect = false;
    config.replicates = 1;
    config.protocol.total_rounds = 1;
    run_experiment(config);
    const auto lines = read_jsonl(dir / "metrics.jsonl");
    CHECK(lines[0]["group_effect"].is_null());
    CHECK(lines[0]["tta_patch_0"].is_null());
    CHECK(lines[0]["tta_aggregated"].is_number());
}

TEST_CASE("identical configs give byte-identical metrics") {
    const auto a = scratch_dir("run_repeat_a");
    const auto b = scratch_dir("run_repeat_b");
    run_experiment(tiny_config(a));
    run_experiment(tiny_config(b));
    CHECK(read_text(a / "metrics.jsonl") == read_text(b / "metrics.jsonl"));
    CHECK(read_text(a / "model_rep1.json") == read_text(b / "model_rep1.json"));
}

TEST_CASE("sweep over every variant") {
    const auto dir = scratch_dir("sweep_all");
    auto config = tiny_config(dir);
    config.protocol.total_rounds = 1;
    config.replicates = 1;
    config.save_models = false;
    config.dump_features = false;
    const auto results = sweep(config, all_variants());
    CHECK(results.size() == 7);
    std::set<std::string> hashes;
    for (auto tag : all_variants()) {
        const auto path = dir / to_string(tag) / "metrics.jsonl";
        REQUIRE(std::filesystem::exists(path));
        const auto lines = read_jsonl(path);
        hashes.insert(lines.back()["initial_model_hash"][0].get<std::string>());
    }
    CHECK(hashes.size() == 1);
    const auto csv = read_text(dir / "comparison.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);
    CHECK(csv.rfind("variant,max_tta_mean,max_tta_std,final_tta_mean,ge_sum_mean,replicates\n", 0) == 0);
}

TEST_CASE("runs over a manifest") {
    const auto dir = scratch_dir("manifest_run");
    auto config = tiny_config(dir / "out");
    const auto domains = generate_synthetic_domains(config.synthetic, 3);
    write_domains(domains, dir / "data");
    config.manifest = dir / "data" / "manifest.csv";
    config.replicates = 1;
    config.protocol.total_rounds = 1;
    const auto summary = run_experiment(config);
    CHECK(summary.replicates.size() == 1);
    CHECK(summary.max_tta_mean >= 0.0);
}

TEST_CASE("a failing run ends its log with an error line") {
    const auto dir = scratch_dir("run_error");
    auto config = tiny_config(dir / "out");
    config.manifest = dir / "missing.csv";
    CHECK_THROWS(run_experiment(config));
    const auto lines = read_jsonl(dir / "out" / "metrics.jsonl");
    REQUIRE(lines.size() == 1);
    CHECK(lines[0].contains("error"));
}
