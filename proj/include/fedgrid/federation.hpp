#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedgrid/codec.hpp"
#include "fedgrid/microgrid.hpp"
#include "fedgrid/nn.hpp"
#include "fedgrid/ppo.hpp"
#include "fedgrid/rng.hpp"
#include "fedgrid/transport.hpp"

// Round orchestration across microgrid clients. Three algorithms share the
// protocol surface: FedAvg (clients return deltas, server averages the
// resulting parameters), PFH (a server-side hypernetwork emits per-client
// policies and learns from the returned deltas through its own Jacobian),
// and LocalOnly (no exchange). Only parameter vectors cross this boundary.

namespace fedgrid::fed {

enum class Algorithm { FedAvg, PFH, LocalOnly };

struct FedConfig {
    int rounds = 1;
    int local_steps = 1; // K
    Algorithm algorithm = Algorithm::LocalOnly;

    void validate() const {
        if (rounds < 1 || local_steps < 1)
            throw std::invalid_argument("fed: rounds and local_steps must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// FedAvg aggregation: elementwise mean of same-shaped parameter vectors.

inline nn::ParamVector fedavg_aggregate(std::span<const nn::ParamVector> thetas) {
    if (thetas.empty()) throw std::invalid_argument("fedavg: empty parameter list");
    nn::ParamVector mean = thetas.front();
    for (std::size_t i = 1; i < thetas.size(); ++i) {
        if (!thetas[i].same_shape(mean) || thetas[i].size() != mean.size())
            throw std::invalid_argument("fedavg: parameter shape mismatch at index " + std::to_string(i));
        for (std::size_t j = 0; j < mean.size(); ++j) mean.values[j] += thetas[i].values[j];
    }
    const double inv = 1.0 / static_cast<double>(thetas.size());
    for (double& v : mean.values) v *= inv;
    return mean;
}

// ---------------------------------------------------------------------------
// Personalized federated hypernetwork: phi maps a learned per-environment
// embedding v_i (length l) to the flat policy parameters theta_i (length m).

struct HypernetConfig {
    int embedding_dim = 8;            // l
    std::vector<int> hidden = {32};   // hidden layer widths of H_phi
    double lr = 0.1;                  // alpha, applied to phi
    double embedding_lr = 0.1;        // applied to each v_i
    double dropout = 0.0;             // keep-inverse dropout on hidden units
    double l2 = 0.0;                  // weight decay on phi
};

struct HypernetState {
    nn::ParamVector phi;                                   // l -> ... -> m
    std::map<std::uint32_t, std::vector<double>> embeddings;
    double hnet_lr = 0.1;
    double embedding_lr = 0.1;
    double dropout = 0.0;
    double l2 = 0.0;
    int embedding_dim = 0;
    std::vector<nn::LayerSpec> policy_shape; // how to reshape emitted thetas

    std::size_t policy_param_count() const { return nn::param_count(policy_shape); }
};

inline HypernetState make_hypernet(const HypernetConfig& cfg, std::vector<nn::LayerSpec> policy_shape,
                                   std::span<const std::uint32_t> env_ids, std::uint64_t seed) {
    if (cfg.embedding_dim < 1) throw std::invalid_argument("hypernet: embedding_dim must be >= 1");
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
        throw std::invalid_argument("hypernet: dropout must be in [0, 1)");
    HypernetState h;
    h.policy_shape = std::move(policy_shape);
    nn::validate_specs(h.policy_shape);
    const int m = static_cast<int>(nn::param_count(h.policy_shape));

    std::vector<nn::LayerSpec> specs;
    int in = cfg.embedding_dim;
    for (int w : cfg.hidden) {
        specs.push_back({in, w, nn::Activation::Tanh});
        in = w;
    }
    specs.push_back({in, m, nn::Activation::Identity});
    h.phi = nn::mlp_init(specs, rng::derive_seed(seed, {0x9111}));

    rng::Stream estream(rng::derive_seed(seed, {0xe111}));
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.embedding_dim));
    for (std::uint32_t id : env_ids) {
        if (h.embeddings.count(id)) throw std::invalid_argument("hypernet: duplicate env id");
        std::vector<double> v(static_cast<std::size_t>(cfg.embedding_dim));
        for (double& x : v) x = scale * estream.normal();
        h.embeddings.emplace(id, std::move(v));
    }
    h.hnet_lr = cfg.lr;
    h.embedding_lr = cfg.embedding_lr;
    h.dropout = cfg.dropout;
    h.l2 = cfg.l2;
    h.embedding_dim = cfg.embedding_dim;
    return h;
}

// theta_i = H_phi(v_i), reshaped to the policy layout. Pure.
inline nn::ParamVector hnet_forward(const HypernetState& h, std::uint32_t env_id) {
    const auto it = h.embeddings.find(env_id);
    if (it == h.embeddings.end())
        throw std::invalid_argument("hnet_forward: unknown env id " + std::to_string(env_id));
    const std::vector<double> flat = nn::mlp_forward(h.phi, it->second);
    nn::ParamVector theta(h.policy_shape);
    if (flat.size() != theta.size())
        throw std::logic_error("hnet_forward: hypernetwork output dim != policy param count");
    theta.values = flat;
    return theta;
}

// One hypernetwork update from client deltas (delta_i = theta_tilde_i -
// theta_i). phi moves once by the averaged vector-Jacobian product, each
// participating embedding moves by its own, oriented so that the emitted
// theta tracks the client's improved parameters: after the update,
// <theta_new - theta_old, delta> > 0 for a linear hypernetwork.
inline HypernetState pfh_update(const HypernetState& h,
                                const std::map<std::uint32_t, std::vector<double>>& deltas,
                                std::uint64_t dropout_seed = 0) {
    HypernetState out = h;
    if (deltas.empty()) return out;
    const std::size_t m = h.policy_param_count();

    std::optional<nn::UnitMasks> masks;
    if (h.dropout > 0.0) {
        // one mask per hidden layer, shared across envs within this update
        rng::Stream mstream(rng::derive_seed(dropout_seed, {0xd307}));
        const double keep = 1.0 - h.dropout;
        nn::UnitMasks mk(h.phi.layer_count() - 1);
        for (std::size_t k = 0; k + 1 < h.phi.layer_count(); ++k) {
            mk[k].resize(static_cast<std::size_t>(h.phi.shape_meta[k].output_dim));
            for (double& v : mk[k]) v = (mstream.uniform01() < keep) ? 1.0 / keep : 0.0;
        }
        masks = std::move(mk);
    }
    const nn::UnitMasks* mask_ptr = masks ? &*masks : nullptr;

    std::vector<double> phi_update(out.phi.size(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(deltas.size());
    for (const auto& [env_id, delta] : deltas) {
        const auto it = out.embeddings.find(env_id);
        if (it == out.embeddings.end())
            throw std::invalid_argument("pfh_update: unknown env id " + std::to_string(env_id));
        if (delta.size() != m)
            throw std::invalid_argument("pfh_update: delta size mismatch for env " + std::to_string(env_id));
        const auto grads = nn::mlp_backward(out.phi, it->second, delta, mask_ptr);
        for (std::size_t j = 0; j < phi_update.size(); ++j) phi_update[j] += inv_n * grads.params[j];
        for (std::size_t j = 0; j < it->second.size(); ++j)
            it->second[j] += out.embedding_lr * grads.input[j];
    }
    for (std::size_t j = 0; j < out.phi.size(); ++j) {
        out.phi.values[j] += out.hnet_lr * phi_update[j];
        if (out.l2 > 0.0) out.phi.values[j] -= out.hnet_lr * out.l2 * out.phi.values[j];
    }
    return out;
}

// Few-shot transfer: keep phi, allocate fresh embeddings for the new
// environments near the mean of the pretrained ones.
inline HypernetState transfer_init(const HypernetState& pretrained,
                                   std::span<const std::uint32_t> new_env_ids, std::uint64_t seed) {
    HypernetState out = pretrained;
    if (new_env_ids.empty()) return out;

    std::vector<double> center(static_cast<std::size_t>(out.embedding_dim), 0.0);
    if (!out.embeddings.empty()) {
        for (const auto& [id, v] : out.embeddings)
            for (std::size_t j = 0; j < center.size(); ++j) center[j] += v[j];
        for (double& c : center) c /= static_cast<double>(out.embeddings.size());
    }
    double norm = 0.0;
    for (double c : center) norm += c * c;
    norm = std::sqrt(norm);
    const double noise_scale = norm > 0.0 ? 0.01 * norm : 0.01;

    rng::Stream stream(rng::derive_seed(seed, {0x7a45}));
    for (std::uint32_t id : new_env_ids) {
        if (out.embeddings.count(id))
            throw std::invalid_argument("transfer_init: env id " + std::to_string(id) + " already registered");
        std::vector<double> v = center;
        for (double& x : v) x += noise_scale * stream.normal();
        out.embeddings.emplace(id, std::move(v));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Client: owns one environment, its critic and exploration state. The critic
// and log_std never leave the client; only policy parameters cross rounds.

struct ClientConfig {
    ppo::PpoConfig ppo;
    int rollout_days = 8; // env days per local step
    int eval_days = 2;    // deterministic evaluation horizon per round
};

struct LocalTrainResult {
    nn::ParamVector theta;       // trained policy parameters
    double train_mean_reward = 0.0;
    double eval_mean_reward = 0.0;
    double policy_loss = 0.0;
    double approx_kl = 0.0;
    int days = 0;
};

class Client {
public:
    Client(std::uint32_t env_id, mg::MicrogridEnv env, std::vector<nn::LayerSpec> policy_shape,
           std::vector<nn::LayerSpec> value_shape, ClientConfig cfg, std::uint64_t seed)
        : env_id_(env_id),
          env_(std::move(env)),
          cfg_(std::move(cfg)),
          stream_(rng::derive_seed(seed, {0xc11e, env_id})) {
        cfg_.ppo.validate();
        if (cfg_.rollout_days < 1 || cfg_.eval_days < 1)
            throw std::invalid_argument("client: rollout_days and eval_days must be >= 1");
        local_policy_.net = nn::mlp_init(policy_shape, rng::derive_seed(seed, {0x901, env_id}));
        local_policy_.log_std.assign(static_cast<std::size_t>(local_policy_.net.output_dim()), 0.0);
        value_ = nn::mlp_init(std::move(value_shape), rng::derive_seed(seed, {0x9a1, env_id}));
    }

    std::uint32_t env_id() const { return env_id_; }
    const nn::ParamVector& local_theta() const { return local_policy_.net; }
    const mg::MicrogridEnv& env() const { return env_; }
    const ClientConfig& config() const { return cfg_; }
    int days_per_round(int local_steps) const { return local_steps * cfg_.rollout_days; }

    // K local PPO steps starting from the given policy parameters.
    LocalTrainResult train_from(const nn::ParamVector& theta, int local_steps) {
        if (fail_next_train_) {
            fail_next_train_ = false;
            throw std::runtime_error("client " + std::to_string(env_id_) + ": injected failure");
        }
        ppo::PolicyParams policy{theta, local_policy_.log_std};
        LocalTrainResult r;
        double reward_sum = 0.0;
        for (int k = 0; k < local_steps; ++k) {
            auto batch = ppo::collect_rollout(env_, policy, value_, cfg_.rollout_days, stream_, cfg_.ppo);
            for (const auto& t : batch.transitions) reward_sum += t.reward;
            ppo::compute_gae(batch, cfg_.ppo.gamma, cfg_.ppo.gae_lambda);
            auto upd = ppo::ppo_update(policy, value_, batch, cfg_.ppo, stream_);
            policy = std::move(upd.policy);
            value_ = std::move(upd.value);
            r.policy_loss = upd.stats.policy_loss;
            r.approx_kl = upd.stats.approx_kl;
        }
        r.days = local_steps * cfg_.rollout_days;
        r.train_mean_reward = reward_sum / static_cast<double>(r.days);
        r.eval_mean_reward = ppo::evaluate(env_, policy, cfg_.eval_days, cfg_.ppo);
        local_policy_.log_std = policy.log_std; // exploration state stays local
        r.theta = std::move(policy.net);
        return r;
    }

    // LocalOnly: trains the client's own policy in place.
    LocalTrainResult train_local(int local_steps) {
        LocalTrainResult r = train_from(local_policy_.net, local_steps);
        local_policy_.net = r.theta;
        return r;
    }

    double evaluate_theta(const nn::ParamVector& theta, int n_days) const {
        return ppo::evaluate(env_, ppo::PolicyParams{theta, local_policy_.log_std}, n_days, cfg_.ppo);
    }

    void fail_next_train() { fail_next_train_ = true; } // test hook

private:
    std::uint32_t env_id_;
    mg::MicrogridEnv env_;
    ClientConfig cfg_;
    ppo::PolicyParams local_policy_;
    nn::ParamVector value_;
    rng::Stream stream_;
    bool fail_next_train_ = false;
};

// ---------------------------------------------------------------------------
// Round orchestration.

struct ServerState {
    Algorithm algorithm = Algorithm::LocalOnly;
    std::optional<HypernetState> hnet;          // PFH
    std::optional<nn::ParamVector> shared_theta; // FedAvg
    std::uint32_t round = 0;
};

struct EnvRoundMetrics {
    std::uint32_t env_id = 0;
    double train_mean_reward = 0.0;
    double eval_mean_reward = 0.0;
    double policy_loss = 0.0;
    double approx_kl = 0.0;
    int days = 0;
};

struct RoundResult {
    bool aborted = false;
    std::string error;
    std::vector<EnvRoundMetrics> per_env; // partial when aborted
};

namespace detail {

inline nn::ParamVector theta_for_client(const ServerState& server, const Client& client) {
    switch (server.algorithm) {
        case Algorithm::PFH: return hnet_forward(*server.hnet, client.env_id());
        case Algorithm::FedAvg: return *server.shared_theta;
        case Algorithm::LocalOnly: return client.local_theta();
    }
    throw std::logic_error("unknown algorithm");
}

} // namespace detail

// Runs one federation round: parameters down, K local PPO steps on every
// client concurrently, deltas back, one aggregation step. Any client failure
// aborts the round (server state untouched) and reports partial metrics —
// there is no silent partial aggregation.
inline RoundResult run_round(ServerState& server, std::vector<Client>& clients, const FedConfig& cfg) {
    cfg.validate();
    if (clients.empty()) throw std::invalid_argument("run_round: no clients registered");
    RoundResult result;
    const std::uint32_t round_no = server.round;

    struct Slot {
        RoundMessage down;
        std::future<std::pair<RoundMessage, EnvRoundMetrics>> fut;
    };
    std::vector<Slot> slots(clients.size());

    for (std::size_t i = 0; i < clients.size(); ++i) {
        Client& c = clients[i];
        if (server.algorithm != Algorithm::LocalOnly) {
            const nn::ParamVector theta = detail::theta_for_client(server, c);
            slots[i].down = RoundMessage{MsgKind::ParamsDown, round_no, c.env_id(), theta.values};
        }
        const RoundMessage* down = &slots[i].down;
        slots[i].fut = std::async(std::launch::async, [&c, down, &cfg, &server] {
            LocalTrainResult r = server.algorithm == Algorithm::LocalOnly
                                     ? c.train_local(cfg.local_steps)
                                     : [&] {
                                           nn::ParamVector theta(c.local_theta().shape_meta);
                                           theta.values = down->payload;
                                           return c.train_from(theta, cfg.local_steps);
                                       }();
            RoundMessage up{MsgKind::DeltaUp, down->round, c.env_id(), {}};
            if (server.algorithm != Algorithm::LocalOnly) {
                up.payload.resize(r.theta.size());
                for (std::size_t j = 0; j < r.theta.size(); ++j)
                    up.payload[j] = r.theta.values[j] - down->payload[j];
            }
            EnvRoundMetrics m{c.env_id(), r.train_mean_reward, r.eval_mean_reward,
                              r.policy_loss,  r.approx_kl,       r.days};
            return std::make_pair(std::move(up), m);
        });
    }

    std::map<std::uint32_t, std::vector<double>> deltas;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        try {
            auto [up, metrics] = slots[i].fut.get();
            result.per_env.push_back(metrics);
            deltas.emplace(up.env_id, std::move(up.payload));
        } catch (const std::exception& e) {
            result.aborted = true;
            if (!result.error.empty()) result.error += "; ";
            result.error += e.what();
        }
    }
    if (result.aborted) return result; // full participation or nothing
    if (server.algorithm != Algorithm::LocalOnly && deltas.size() != clients.size())
        throw std::invalid_argument("run_round: clients must have distinct env ids");

    switch (server.algorithm) {
        case Algorithm::LocalOnly:
            break;
        case Algorithm::FedAvg: {
            std::vector<nn::ParamVector> thetas;
            thetas.reserve(clients.size());
            for (const Client& c : clients) {
                nn::ParamVector t = *server.shared_theta;
                const auto& d = deltas.at(c.env_id());
                for (std::size_t j = 0; j < t.size(); ++j) t.values[j] += d[j];
                thetas.push_back(std::move(t));
            }
            server.shared_theta = fedavg_aggregate(thetas);
            break;
        }
        case Algorithm::PFH:
            server.hnet = pfh_update(*server.hnet, deltas,
                                     rng::derive_seed(0xd20u, {server.round}));
            break;
    }
    ++server.round;
    return result;
}

// ---------------------------------------------------------------------------
// Hypernetwork state persistence: concatenated codec frames. Frame layout:
//   Ack       round=1 (schema version), payload = header (dims + rates)
//   ParamsDown env_id=0, payload = phi values
//   Register  env_id=i, payload = embedding v_i     (one per env, sorted)

namespace detail {

inline void append_frame(std::ofstream& out, const RoundMessage& msg) {
    const auto bytes = encode(msg);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline RoundMessage read_frame(std::ifstream& in) {
    std::vector<std::uint8_t> head(kHeaderBytes);
    in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    if (in.gcount() != static_cast<std::streamsize>(head.size()))
        throw TruncatedFrameError("state file: truncated frame header");
    const std::uint32_t len = get_u32(head.data() + 13);
    if (len > kMaxPayloadElems) throw MalformedFrameError("state file: payload exceeds element cap");
    std::vector<std::uint8_t> frame = std::move(head);
    frame.resize(frame_size(len));
    in.read(reinterpret_cast<char*>(frame.data() + kHeaderBytes),
            static_cast<std::streamsize>(frame.size() - kHeaderBytes));
    if (in.gcount() != static_cast<std::streamsize>(frame.size() - kHeaderBytes))
        throw TruncatedFrameError("state file: truncated frame body");
    return decode(frame);
}

} // namespace detail

inline void save_hypernet(const HypernetState& h, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("state file: cannot open " + path + " for writing");

    RoundMessage header{MsgKind::Ack, 1, static_cast<std::uint32_t>(h.embeddings.size()), {}};
    header.payload = {static_cast<double>(h.embedding_dim), h.hnet_lr, h.embedding_lr,
                      h.dropout, h.l2, static_cast<double>(h.phi.layer_count()),
                      static_cast<double>(h.policy_shape.size())};
    for (const auto& s : h.phi.shape_meta) {
        header.payload.push_back(static_cast<double>(s.input_dim));
        header.payload.push_back(static_cast<double>(s.output_dim));
        header.payload.push_back(static_cast<double>(static_cast<int>(s.activation)));
    }
    for (const auto& s : h.policy_shape) {
        header.payload.push_back(static_cast<double>(s.input_dim));
        header.payload.push_back(static_cast<double>(s.output_dim));
        header.payload.push_back(static_cast<double>(static_cast<int>(s.activation)));
    }
    detail::append_frame(out, header);
    detail::append_frame(out, RoundMessage{MsgKind::ParamsDown, 1, 0, h.phi.values});
    for (const auto& [id, v] : h.embeddings)
        detail::append_frame(out, RoundMessage{MsgKind::Register, 1, id, v});
    if (!out) throw std::runtime_error("state file: write to " + path + " failed");
}

inline HypernetState load_hypernet(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("state file: cannot open " + path);

    const RoundMessage header = detail::read_frame(in);
    if (header.kind != MsgKind::Ack || header.round != 1)
        throw MalformedFrameError("state file: unexpected header frame");
    if (header.payload.size() < 7) throw MalformedFrameError("state file: short header payload");

    auto as_int = [](double v) { return static_cast<int>(std::llround(v)); };
    HypernetState h;
    std::size_t p = 0;
    h.embedding_dim = as_int(header.payload[p++]);
    h.hnet_lr = header.payload[p++];
    h.embedding_lr = header.payload[p++];
    h.dropout = header.payload[p++];
    h.l2 = header.payload[p++];
    const int phi_layers = as_int(header.payload[p++]);
    const int policy_layers = as_int(header.payload[p++]);
    if (phi_layers < 1 || policy_layers < 1 ||
        header.payload.size() != 7 + 3 * static_cast<std::size_t>(phi_layers + policy_layers))
        throw MalformedFrameError("state file: header layer table inconsistent");

    auto read_specs = [&](int count) {
        std::vector<nn::LayerSpec> specs;
        specs.reserve(static_cast<std::size_t>(count));
        for (int k = 0; k < count; ++k) {
            nn::LayerSpec s;
            s.input_dim = as_int(header.payload[p++]);
            s.output_dim = as_int(header.payload[p++]);
            s.activation = static_cast<nn::Activation>(as_int(header.payload[p++]));
            specs.push_back(s);
        }
        return specs;
    };
    auto phi_specs = read_specs(phi_layers);
    h.policy_shape = read_specs(policy_layers);

    const RoundMessage phi_frame = detail::read_frame(in);
    if (phi_frame.kind != MsgKind::ParamsDown)
        throw MalformedFrameError("state file: expected phi frame");
    h.phi = nn::ParamVector(phi_specs);
    if (phi_frame.payload.size() != h.phi.size())
        throw MalformedFrameError("state file: phi payload size mismatch");
    h.phi.values = phi_frame.payload;

    const std::uint32_t n_envs = header.env_id;
    for (std::uint32_t i = 0; i < n_envs; ++i) {
        const RoundMessage emb = detail::read_frame(in);
        if (emb.kind != MsgKind::Register)
            throw MalformedFrameError("state file: expected embedding frame");
        if (emb.payload.size() != static_cast<std::size_t>(h.embedding_dim))
            throw MalformedFrameError("state file: embedding size mismatch");
        h.embeddings.emplace(emb.env_id, emb.payload);
    }
    if (nn::param_count(h.policy_shape) != static_cast<std::size_t>(h.phi.output_dim()))
        throw MalformedFrameError("state file: policy shape disagrees with phi output");
    return h;
}

// ---------------------------------------------------------------------------
// Socket-distributed rounds. The server drives registered channels with the
// same ParamsDown/DeltaUp exchange as the in-process path; workers on the
// other end run client_serve. Register/Ack establish the session.

// Client side: announce env_id, then serve rounds until the channel closes.
inline void client_serve(MessageChannel& channel, Client& client, const FedConfig& cfg) {
    channel.send(RoundMessage{MsgKind::Register, 0, client.env_id(), {}});
    const RoundMessage ack = channel.recv();
    if (ack.kind != MsgKind::Ack)
        throw std::runtime_error("client_serve: expected Ack after Register");
    for (int r = 0; r < cfg.rounds; ++r) {
        const RoundMessage down = channel.recv();
        if (down.kind != MsgKind::ParamsDown)
            throw std::runtime_error("client_serve: expected ParamsDown");
        nn::ParamVector theta(client.local_theta().shape_meta);
        if (down.payload.size() != theta.size())
            throw std::runtime_error("client_serve: parameter payload size mismatch");
        theta.values = down.payload;
        const LocalTrainResult res = client.train_from(theta, cfg.local_steps);
        RoundMessage up{MsgKind::DeltaUp, down.round, client.env_id(), {}};
        up.payload.resize(res.theta.size());
        for (std::size_t j = 0; j < res.theta.size(); ++j)
            up.payload[j] = res.theta.values[j] - down.payload[j];
        channel.send(up);
    }
}

// Server side: accept Register from every channel, then run the configured
// number of rounds. Aggregation waits at a barrier for all deltas.
inline std::vector<std::uint32_t> server_accept_registrations(
    std::vector<MessageChannel*>& channels) {
    std::vector<std::uint32_t> ids;
    ids.reserve(channels.size());
    for (MessageChannel* ch : channels) {
        const RoundMessage reg = ch->recv();
        if (reg.kind != MsgKind::Register)
            throw std::runtime_error("server: expected Register");
        ids.push_back(reg.env_id);
        ch->send(RoundMessage{MsgKind::Ack, 0, reg.env_id, {}});
    }
    return ids;
}

inline void serve_round(ServerState& server, std::vector<MessageChannel*>& channels,
                        std::span<const std::uint32_t> env_ids) {
    if (server.algorithm == Algorithm::LocalOnly) return; // no exchange
    if (channels.size() != env_ids.size())
        throw std::invalid_argument("serve_round: channel/env count mismatch");

    std::vector<std::vector<double>> down_payloads(channels.size());
    for (std::size_t i = 0; i < channels.size(); ++i) {
        nn::ParamVector theta = server.algorithm == Algorithm::PFH
                                    ? hnet_forward(*server.hnet, env_ids[i])
                                    : *server.shared_theta;
        down_payloads[i] = theta.values;
        channels[i]->send(RoundMessage{MsgKind::ParamsDown, server.round, env_ids[i], down_payloads[i]});
    }
    std::map<std::uint32_t, std::vector<double>> deltas;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        const RoundMessage up = channels[i]->recv();
        if (up.kind != MsgKind::DeltaUp || up.round != server.round)
            throw std::runtime_error("serve_round: unexpected message from client");
        deltas.emplace(up.env_id, up.payload);
    }
    for (std::uint32_t id : env_ids)
        if (!deltas.count(id))
            throw std::runtime_error("serve_round: missing delta for env " + std::to_string(id));

    if (server.algorithm == Algorithm::FedAvg) {
        std::vector<nn::ParamVector> thetas;
        for (std::size_t i = 0; i < channels.size(); ++i) {
            nn::ParamVector t = *server.shared_theta;
            const auto& d = deltas.at(env_ids[i]);
            for (std::size_t j = 0; j < t.size(); ++j) t.values[j] += d[j];
            thetas.push_back(std::move(t));
        }
        server.shared_theta = fedavg_aggregate(thetas);
    } else {
        server.hnet = pfh_update(*server.hnet, deltas, rng::derive_seed(0xd20u, {server.round}));
    }
    ++server.round;
}

} // namespace fedgrid::fed
