#include "fedka/federation.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <stdexcept>

#include "fedka/losses.hpp"
#include "fedka/metrics.hpp"

namespace fedka {

namespace {

struct VariantName {
    VariantTag tag;
    const char* name;
};

constexpr VariantName kVariantNames[] = {
    {VariantTag::kFedAvg, "FedAvg"},   {VariantTag::kFDann, "f-DANN"},        {VariantTag::kFDan, "f-DAN"},
    {VariantTag::kVoting, "Voting"},   {VariantTag::kDisVoting, "Dis+Voting"}, {VariantTag::kDisMmd, "Dis+MMD"},
    {VariantTag::kFedKA, "FedKA"},
};

}  // namespace

std::string to_string(VariantTag tag) {
    for (const auto& v : kVariantNames) {
        if (v.tag == tag) return v.name;
    }
    return "FedKA";
}

VariantTag parse_variant(const std::string& text) {
    for (const auto& v : kVariantNames) {
        if (text == v.name) return v.tag;
    }
    throw std::invalid_argument("unknown variant '" + text +
                                "' (expected FedAvg, f-DANN, f-DAN, Voting, Dis+Voting, Dis+MMD or FedKA)");
}

const std::vector<VariantTag>& all_variants() {
    static const std::vector<VariantTag> tags = [] {
        std::vector<VariantTag> out;
        for (const auto& v : kVariantNames) out.push_back(v.tag);
        return out;
    }();
    return tags;
}

VariantFlags VariantFlags::from_tag(VariantTag tag, VotingMode voting_mode) {
    if (voting_mode == VotingMode::kOff) voting_mode = VotingMode::kSmall;
    VariantFlags f;
    f.tag = tag;
    switch (tag) {
        case VariantTag::kFedAvg: f = {tag, false, false, VotingMode::kOff}; break;
        case VariantTag::kFDann: f = {tag, true, false, VotingMode::kOff}; break;
        case VariantTag::kFDan: f = {tag, false, true, VotingMode::kOff}; break;
        case VariantTag::kVoting: f = {tag, false, false, voting_mode}; break;
        case VariantTag::kDisVoting: f = {tag, true, false, voting_mode}; break;
        case VariantTag::kDisMmd: f = {tag, true, true, VotingMode::kOff}; break;
        case VariantTag::kFedKA: f = {tag, true, true, voting_mode}; break;
    }
    return f;
}

bool VariantFlags::consistent() const {
    const auto expected = from_tag(tag, voting);
    return expected.use_disentangler == use_disentangler && expected.use_mmd == use_mmd &&
           expected.voting_enabled() == voting_enabled();
}

void ProtocolConfig::validate() const {
    if (total_rounds <= 0) throw std::invalid_argument("rounds must be positive");
    if (batches_per_round <= 0) throw std::invalid_argument("batches_per_round must be positive");
    if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
    if (mmd_batch_size < batch_size || mmd_batch_size % batch_size != 0) {
        throw std::invalid_argument("mmd_batch_size must be a multiple of batch_size");
    }
    if (batches_per_round % macro_ratio() != 0) {
        throw std::invalid_argument("mmd_batch_size must divide the samples drawn per round");
    }
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
    if (threads < 1) throw std::invalid_argument("threads must be positive");
}

FeatureGradPacket server_exchange(const FeaturePacket& packet, const Network& global_encoder, DomainClassifier& fd,
                                  const Matrix& target_batch, const VariantFlags& flags, double lr) {
    if (packet.features.rows() != target_batch.rows()) {
        throw std::invalid_argument("server_exchange: packet has " + std::to_string(packet.features.rows()) +
                                    " rows, target batch has " + std::to_string(target_batch.rows()));
    }
    FeatureGradPacket reply;
    reply.client_id = packet.client_id;
    reply.kind = packet.kind;
    const bool wants_dis = packet.kind == PacketKind::kDisentangler && flags.use_disentangler;
    const bool wants_mmd = packet.kind == PacketKind::kMmd && flags.use_mmd;
    if (!wants_dis && !wants_mmd) return reply;

    const Matrix target_features = nn::evaluate(global_encoder, target_batch);
    if (wants_dis) {
        auto dis = losses::disentangler_loss<double>(packet.features, target_features, fd.net);
        nn::adam_step(fd.net, dis.grad_classifier, fd.adam, lr);
        nn::commit_batch_statistics(fd.net, dis.tape);
        reply.j_dis = dis.value;
        reply.grad_disentangler = std::move(dis.grad_first);
    }
    if (wants_mmd) {
        const auto bank = losses::kernel_bank_from<double>(packet.features, target_features);
        auto mmd = losses::mk_mmd_sq<double>(packet.features, target_features, bank);
        reply.j_mmd = mmd.value;
        reply.grad_mmd = std::move(mmd.grad);
    }
    return reply;
}

LocalRoundResult client_local_round(ClientState& client, const DomainDataset& data, const Model& global,
                                    const ExchangeFn& exchange, const VariantFlags& flags,
                                    const ProtocolConfig& config, int round) {
    if (!data.labeled()) throw std::invalid_argument("client_local_round: source domain must be labeled");
    const std::size_t round_samples = config.samples_per_round();
    if (static_cast<std::size_t>(data.size()) < static_cast<std::size_t>(config.batch_size)) {
        throw std::invalid_argument("client_local_round: dataset '" + data.domain_id + "' smaller than one batch");
    }
    const bool exchanges = flags.use_disentangler || flags.use_mmd;
    if (exchanges && !exchange) throw std::invalid_argument("client_local_round: exchange endpoint required");

    const BatchPlan plan = sample_batch(data, client.rng, round_samples, static_cast<std::size_t>(config.batch_size));
    const int ratio = config.macro_ratio();

    LocalRoundResult result;
    result.local_model = global;
    Model& local = result.local_model;
    ClientLogs& logs = result.logs;
    Matrix macro_grad;

    for (int b = 0; b < config.batches_per_round; ++b) {
        const losses::ScheduleClock clock{b, config.batches_per_round, round, config.total_rounds, config.gamma};
        const double lambda_p = losses::lambda_schedule(clock);
        const auto idx = plan.batch(static_cast<std::size_t>(b));
        const Matrix x = data.rows(idx);
        const auto y = data.label_rows(idx);

        if (flags.use_mmd && b % ratio == 0) {
            FeaturePacket packet;
            packet.client_id = client.id;
            packet.kind = PacketKind::kMmd;
            packet.batch_index = b;
            packet.sample_indices = plan.span(static_cast<std::size_t>(b), static_cast<std::size_t>(ratio));
            packet.features = nn::forward(local.encoder, data.rows(packet.sample_indices), nn::Mode::kTrain).output;
            auto reply = exchange(packet);
            if (!std::isfinite(reply.j_mmd)) throw std::domain_error("client_local_round: non-finite MMD loss");
            logs.j_mmd_sum += reply.j_mmd;
            logs.mmd_packets += 1;
            macro_grad = std::move(reply.grad_mmd);
        }

        FeatureGradHook hook;
        if (exchanges) {
            hook = [&](const Matrix& features) -> Matrix {
                Matrix extra = Matrix::Zero(features.rows(), features.cols());
                if (flags.use_disentangler) {
                    FeaturePacket packet;
                    packet.client_id = client.id;
                    packet.kind = PacketKind::kDisentangler;
                    packet.batch_index = b;
                    packet.features = features;
                    packet.sample_indices = idx;
                    auto reply = exchange(packet);
                    if (!std::isfinite(reply.j_dis)) {
                        throw std::domain_error("client_local_round: non-finite disentangler loss");
                    }
                    logs.j_dis_sum += reply.j_dis;
                    logs.disentangler_packets += 1;
                    // encoder ascends the domain loss
                    extra -= lambda_p * reply.grad_disentangler;
                }
                if (flags.use_mmd && macro_grad.size() > 0) {
                    const auto offset = static_cast<Eigen::Index>((b % ratio) * config.batch_size);
                    extra += (lambda_p * ratio) * macro_grad.middleRows(offset, features.rows());
                }
                return extra;
            };
        }
        const double j_cls = train_step(local, client.optimizer, x, y, config.lr, hook);
        logs.j_cls_sum += j_cls;
        logs.cls_batches += 1;
    }

    result.update.client_id = client.id;
    result.update.delta = model_difference(local, global);
    result.update.sample_count = static_cast<std::int64_t>(round_samples);
    return result;
}

Model fedavg_aggregate(const Model& global, const std::vector<ClientUpdate>& updates) {
    if (updates.empty()) throw std::invalid_argument("fedavg_aggregate: no updates");
    std::vector<const ClientUpdate*> ordered;
    std::int64_t total = 0;
    for (const auto& u : updates) {
        if (!same_shape(global, u.delta)) throw std::invalid_argument("fedavg_aggregate: update shape mismatch");
        if (u.sample_count < 0) throw std::invalid_argument("fedavg_aggregate: negative sample count");
        total += u.sample_count;
        ordered.push_back(&u);
    }
    if (total == 0) throw std::invalid_argument("fedavg_aggregate: all sample counts are zero");
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });

    // sum_k w_k d_k written as d_0 + sum_k w_k (d_k - d_0): identical deltas
    // then aggregate to exactly d_0.
    Model step = ordered.front()->delta;
    for (std::size_t k = 1; k < ordered.size(); ++k) {
        const double weight = static_cast<double>(ordered[k]->sample_count) / static_cast<double>(total);
        add_scaled(step, model_difference(ordered[k]->delta, ordered.front()->delta), weight);
    }
    Model next = global;
    add_scaled(next, step, 1.0);
    return next;
}

VoteResult vote_labels(const std::vector<std::vector<int>>& predictions, int num_classes, Rng& rng) {
    if (predictions.empty()) throw std::invalid_argument("federated_vote: no client predictions");
    const std::size_t n = predictions.front().size();
    if (n == 0) throw std::invalid_argument("federated_vote: empty sample set");
    for (const auto& p : predictions) {
        if (p.size() != n) throw std::invalid_argument("federated_vote: prediction length mismatch");
    }
    VoteResult out;
    out.labels.resize(n);
    std::vector<int> counts(static_cast<std::size_t>(num_classes));
    std::vector<int> candidates;
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(counts.begin(), counts.end(), 0);
        for (const auto& p : predictions) {
            const int c = p[i];
            if (c < 0 || c >= num_classes) throw std::out_of_range("federated_vote: predicted class out of range");
            counts[static_cast<std::size_t>(c)] += 1;
        }
        const int best = *std::max_element(counts.begin(), counts.end());
        candidates.clear();
        for (int c = 0; c < num_classes; ++c) {
            if (counts[static_cast<std::size_t>(c)] == best) candidates.push_back(c);
        }
        if (candidates.size() == 1) {
            out.labels[i] = candidates.front();
        } else {
            out.labels[i] = candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
            out.ties += 1;
        }
    }
    return out;
}

VoteResult federated_vote(const std::vector<Model>& client_models, const Matrix& target_samples, int num_classes,
                          Rng& rng) {
    if (target_samples.rows() == 0) throw std::invalid_argument("federated_vote: empty sample set");
    std::vector<std::vector<int>> predictions;
    predictions.reserve(client_models.size());
    for (const auto& m : client_models) predictions.push_back(predict(m, target_samples));
    return vote_labels(predictions, num_classes, rng);
}

void fine_tune_global(Model& global, ModelOptimizer& optimizer, const Matrix& target_samples,
                      const std::vector<int>& pseudo_labels, double lambda_p, double lr, int batch_size) {
    if (static_cast<Eigen::Index>(pseudo_labels.size()) != target_samples.rows()) {
        throw std::invalid_argument("fine_tune_global: label count does not match samples");
    }
    if (lambda_p == 0.0) return;
    const Eigen::Index n = target_samples.rows();
    for (Eigen::Index start = 0; start < n; start += batch_size) {
        const Eigen::Index rows = std::min<Eigen::Index>(batch_size, n - start);
        if (rows < 2) break;  // batch norm needs two rows
        const std::vector<int> labels(pseudo_labels.begin() + start, pseudo_labels.begin() + start + rows);
        train_step(global, optimizer, target_samples.middleRows(start, rows), labels, lambda_p * lr);
    }
}

GlobalState init_global_state(const Architecture& arch, int num_clients, std::uint64_t seed) {
    if (num_clients < 1) throw std::invalid_argument("init_global_state: need at least one client");
    GlobalState state;
    state.global = init_model(arch, seed);
    state.global_optimizer = ModelOptimizer(state.global);
    state.server_rng = Rng(derive_seed(seed, StreamTag::kServer, 0));
    for (int k = 0; k < num_clients; ++k) {
        const auto kk = static_cast<std::uint64_t>(k);
        state.domain_classifiers.push_back(
            init_domain_classifier(arch, derive_seed(seed, StreamTag::kInit, 100 + kk)));
        state.clients.push_back({k, Rng(derive_seed(seed, StreamTag::kClient, kk)), ModelOptimizer(state.global)});
    }
    return state;
}

namespace {

std::size_t voting_size(const VariantFlags& flags, const ProtocolConfig& config, std::size_t available) {
    switch (flags.voting) {
        case VotingMode::kOff: return 0;
        case VotingMode::kSmall: return config.voting_small;
        case VotingMode::kLarge: return config.voting_large;
        case VotingMode::kAllTarget: return available;
    }
    return 0;
}

}  // namespace

RoundRecord run_round(GlobalState& state, const FederationData& data, const VariantFlags& flags,
                      const ProtocolConfig& config) {
    config.validate();
    const auto& sources = *data.sources;
    const auto num_clients = static_cast<int>(state.clients.size());
    if (static_cast<int>(sources.size()) != num_clients) {
        throw std::invalid_argument("run_round: client count does not match source domains");
    }
    const int round = state.round;
    const Model global = state.global;

    const BatchPlan target_pool = sample_batch(*data.target_train, state.server_rng, config.samples_per_round(),
                                               static_cast<std::size_t>(config.batch_size));
    BatchPlan vote_pool;
    if (flags.voting_enabled()) {
        vote_pool = sample_batch(*data.target_train, state.server_rng,
                                 voting_size(flags, config, static_cast<std::size_t>(data.target_train->size())),
                                 static_cast<std::size_t>(config.batch_size));
    }

    const int ratio = config.macro_ratio();
    auto make_exchange = [&](int k) -> ExchangeFn {
        return [&, k](const FeaturePacket& packet) {
            const auto rows = packet.kind == PacketKind::kDisentangler
                                  ? target_pool.batch(static_cast<std::size_t>(packet.batch_index))
                                  : target_pool.span(static_cast<std::size_t>(packet.batch_index),
                                                     static_cast<std::size_t>(ratio));
            return server_exchange(packet, global.encoder, state.domain_classifiers[static_cast<std::size_t>(k)],
                                   data.target_train->rows(rows), flags, config.lr);
        };
    };

    std::vector<LocalRoundResult> results(static_cast<std::size_t>(num_clients));
    auto run_client = [&](int k) {
        const auto kk = static_cast<std::size_t>(k);
        results[kk] = client_local_round(state.clients[kk], sources[kk], global, make_exchange(k), flags, config,
                                         round);
    };
    if (config.threads > 1) {
        for (int first = 0; first < num_clients; first += config.threads) {
            std::vector<std::future<void>> jobs;
            for (int k = first; k < std::min(num_clients, first + config.threads); ++k) {
                jobs.push_back(std::async(std::launch::async, run_client, k));
            }
            for (auto& j : jobs) j.get();
        }
    } else {
        for (int k = 0; k < num_clients; ++k) run_client(k);
    }

    RoundRecord record;
    record.round = round;
    std::vector<ClientUpdate> updates;
    std::vector<Model> locals;
    ClientLogs total;
    for (auto& r : results) {
        total.j_cls_sum += r.logs.j_cls_sum;
        total.cls_batches += r.logs.cls_batches;
        total.j_dis_sum += r.logs.j_dis_sum;
        total.disentangler_packets += r.logs.disentangler_packets;
        total.j_mmd_sum += r.logs.j_mmd_sum;
        total.mmd_packets += r.logs.mmd_packets;
        updates.push_back(std::move(r.update));
        locals.push_back(std::move(r.local_model));
    }
    record.j_cls = total.cls_batches > 0 ? total.j_cls_sum / static_cast<double>(total.cls_batches) : 0.0;
    record.j_dis = total.disentangler_packets > 0 ? total.j_dis_sum / static_cast<double>(total.disentangler_packets) : 0.0;
    record.j_mmd = total.mmd_packets > 0 ? total.j_mmd_sum / static_cast<double>(total.mmd_packets) : 0.0;
    record.disentangler_packets = total.disentangler_packets;
    record.mmd_packets = total.mmd_packets;
    record.gradient_packets = total.disentangler_packets + total.mmd_packets;
    record.update_messages = static_cast<long>(updates.size());

    Model next = fedavg_aggregate(global, updates);

    if (config.compute_group_effect) {
        const auto ge = group_effect(global, updates, next, *data.target_test);
        record.tta_patch = ge.patched_tta;
        record.tta_aggregated = ge.aggregate_tta;
        record.group_effect = ge.value;
    } else {
        record.tta_aggregated = tta(next, *data.target_test);
        record.group_effect = std::numeric_limits<double>::quiet_NaN();
    }

    const losses::ScheduleClock end_clock{config.batches_per_round - 1, config.batches_per_round, round,
                                          config.total_rounds, config.gamma};
    record.lambda_p = losses::lambda_schedule(end_clock);

    if (flags.voting_enabled()) {
        const Matrix vote_x = data.target_train->rows(vote_pool.indices);
        const auto vote = federated_vote(locals, vote_x, data.num_classes, state.server_rng);
        record.vote_ties = vote.ties;
        record.voted_samples = static_cast<long>(vote.labels.size());
        fine_tune_global(next, state.global_optimizer, vote_x, vote.labels, record.lambda_p, config.lr,
                         config.batch_size);
    }

    record.tta_global = tta(next, *data.target_test);
    state.global = std::move(next);
    state.round += 1;
    return record;
}

}  // namespace fedka
