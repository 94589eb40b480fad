#pragma once

// Round protocol: local training with server-computed feature gradients,
// weighted aggregation, federated voting and global fine-tuning.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedka/data.hpp"
#include "fedka/model.hpp"
#include "fedka/random.hpp"

namespace fedka {

enum class VariantTag { kFedAvg, kFDann, kFDan, kVoting, kDisVoting, kDisMmd, kFedKA };

enum class VotingMode { kOff, kSmall, kLarge, kAllTarget };

std::string to_string(VariantTag tag);
VariantTag parse_variant(const std::string& text);
const std::vector<VariantTag>& all_variants();

struct VariantFlags {
    VariantTag tag = VariantTag::kFedKA;
    bool use_disentangler = true;
    bool use_mmd = true;
    VotingMode voting = VotingMode::kSmall;

    bool voting_enabled() const { return voting != VotingMode::kOff; }

    /// Building blocks switched on by an ablation row. voting_mode is used by
    /// rows that vote.
    static VariantFlags from_tag(VariantTag tag, VotingMode voting_mode = VotingMode::kSmall);
    bool consistent() const;
};

struct ProtocolConfig {
    int total_rounds = 200;
    int batches_per_round = 32;
    int batch_size = 16;
    int mmd_batch_size = 128;
    double lr = 0.0003;
    double gamma = 5.0;
    std::size_t voting_small = 512;
    std::size_t voting_large = 2048;
    bool compute_group_effect = true;
    int threads = 1;

    std::size_t samples_per_round() const {
        return static_cast<std::size_t>(batches_per_round) * static_cast<std::size_t>(batch_size);
    }
    int macro_ratio() const { return mmd_batch_size / batch_size; }
    void validate() const;
};

enum class PacketKind { kDisentangler, kMmd };

/// Client -> server: encoder features of one mini-batch (disentangler) or
/// one macro-batch (MMD).
struct FeaturePacket {
    int client_id = 0;
    PacketKind kind = PacketKind::kDisentangler;
    int batch_index = 0;
    Matrix features;
    std::vector<std::size_t> sample_indices;
};

/// Server -> client. grad_disentangler is dJ_dis/dH (the client applies the
/// reversal sign); grad_mmd is dJ_mmd/dH. Absent gradients are empty.
struct FeatureGradPacket {
    int client_id = 0;
    PacketKind kind = PacketKind::kDisentangler;
    Matrix grad_disentangler;
    Matrix grad_mmd;
    double j_dis = 0.0;
    double j_mmd = 0.0;
};

/// Client -> server at round end: local model minus the round's global model.
struct ClientUpdate {
    int client_id = 0;
    Model delta;
    std::int64_t sample_count = 0;
};

using ExchangeFn = std::function<FeatureGradPacket(const FeaturePacket&)>;

struct ClientState {
    int id = 0;
    Rng rng;
    ModelOptimizer optimizer;
};

struct ClientLogs {
    double j_cls_sum = 0.0;
    long cls_batches = 0;
    double j_dis_sum = 0.0;
    long disentangler_packets = 0;
    double j_mmd_sum = 0.0;
    long mmd_packets = 0;
};

struct LocalRoundResult {
    ClientUpdate update;
    Model local_model;
    ClientLogs logs;
};

/// Mini-batches of the round pool; a disentangler exchange per mini-batch and
/// an MMD exchange per macro-batch when the flags enable them. The macro-batch
/// MMD gradient is computed once at the macro-batch start and its rows are
/// applied, scaled by the macro/mini ratio, by the mini-batches that consume
/// those samples.
LocalRoundResult client_local_round(ClientState& client, const DomainDataset& data, const Model& global,
                                    const ExchangeFn& exchange, const VariantFlags& flags,
                                    const ProtocolConfig& config, int round);

/// Parameter-server side of one exchange. target_batch must have the packet's
/// row count. Disentangler packets train the client's domain classifier by one
/// Adam step.
FeatureGradPacket server_exchange(const FeaturePacket& packet, const Network& global_encoder, DomainClassifier& fd,
                                  const Matrix& target_batch, const VariantFlags& flags, double lr);

/// G + sum_k N_k / sum N * delta_k over every tensor including batch-norm
/// running statistics. Updates are combined in client-id order so the result
/// does not depend on list order.
Model fedavg_aggregate(const Model& global, const std::vector<ClientUpdate>& updates);

struct VoteResult {
    std::vector<int> labels;
    long ties = 0;
};

/// Majority vote per column of predictions[k][i]; ties are broken uniformly
/// among the maximal classes with rng, which is only drawn on ties.
VoteResult vote_labels(const std::vector<std::vector<int>>& predictions, int num_classes, Rng& rng);

VoteResult federated_vote(const std::vector<Model>& client_models, const Matrix& target_samples, int num_classes,
                          Rng& rng);

/// One pass over the voted set in mini-batches with learning rate
/// lambda_p * lr through the global optimizer. lambda_p == 0 changes nothing.
void fine_tune_global(Model& global, ModelOptimizer& optimizer, const Matrix& target_samples,
                      const std::vector<int>& pseudo_labels, double lambda_p, double lr, int batch_size);

struct GlobalState {
    Model global;
    ModelOptimizer global_optimizer;
    std::vector<DomainClassifier> domain_classifiers;  ///< one per client, server-held
    std::vector<ClientState> clients;
    Rng server_rng;
    int round = 0;
};

GlobalState init_global_state(const Architecture& arch, int num_clients, std::uint64_t seed);

struct FederationData {
    const std::vector<DomainDataset>* sources = nullptr;
    const DomainDataset* target_train = nullptr;
    const DomainDataset* target_test = nullptr;
    int num_classes = 0;
};

struct RoundRecord;

RoundRecord run_round(GlobalState& state, const FederationData& data, const VariantFlags& flags,
                      const ProtocolConfig& config);

}  // namespace fedka
