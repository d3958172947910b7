#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedgrid/microgrid.hpp"
#include "fedgrid/nn.hpp"
#include "fedgrid/rng.hpp"

// Clipped-surrogate PPO with separate policy and value networks. The policy
// outputs Gaussian means in raw action space; the environment applies the
// sigmoid price squash. log_std is a learned state-independent vector.

namespace fedgrid::ppo {

struct Transition {
    std::array<double, mg::kStateDim> state{};
    std::array<double, mg::kActionDim> action{}; // raw (pre-squash)
    double log_prob = 0.0;
    double reward = 0.0; // $
    double value = 0.0;
    bool done = false;
};

struct TrajectoryBatch {
    std::vector<Transition> transitions;
    std::vector<double> advantages;
    std::vector<double> returns;
    double bootstrap_value = 0.0; // value of the state after the last step
};

struct PpoConfig {
    double clip_param = 0.2;
    int sgd_iters = 4;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double gamma = 0.99;
    double gae_lambda = 0.95;
    double entropy_coef = 0.01;
    double value_coef = 0.5;
    double grad_clip = 0.5;           // global-norm threshold; <= 0 disables
    bool normalize_advantages = true;
    double log_std_lo = -5.0;
    double log_std_hi = 2.0;
    double obs_energy_scale = 100.0;  // divides the kWh blocks of the state

    void validate() const {
        if (!(clip_param > 0.0) || clip_param > 1.0)
            throw std::invalid_argument("ppo: clip_param must be in (0, 1]");
        if (sgd_iters < 1) throw std::invalid_argument("ppo: sgd_iters must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("ppo: batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("ppo: learning_rate must be > 0");
        if (gamma < 0.0 || gamma > 1.0) throw std::invalid_argument("ppo: gamma must be in [0, 1]");
        if (gae_lambda < 0.0 || gae_lambda > 1.0) throw std::invalid_argument("ppo: gae_lambda must be in [0, 1]");
        if (log_std_lo > log_std_hi) throw std::invalid_argument("ppo: log_std bounds inverted");
        if (!(obs_energy_scale > 0.0)) throw std::invalid_argument("ppo: obs_energy_scale must be > 0");
    }
};

struct PolicyParams {
    nn::ParamVector net;              // 120 -> ... -> 48, emits Gaussian means
    std::vector<double> log_std;      // one entry per action dim
};

// Scaled observation: prices pass through, energy blocks divide by scale so
// tanh layers see O(1) inputs.
inline std::array<double, mg::kStateDim> observe(const mg::EnvState& s, double energy_scale) {
    std::array<double, mg::kStateDim> v = s.to_vector();
    for (int i = 2 * mg::kHoursPerDay; i < mg::kStateDim; ++i) v[static_cast<std::size_t>(i)] /= energy_scale;
    return v;
}

inline nn::GaussianHead policy_head(const PolicyParams& p, std::span<const double> obs,
                                    const PpoConfig& cfg) {
    return nn::make_head(nn::mlp_forward(p.net, obs), p.log_std, cfg.log_std_lo, cfg.log_std_hi);
}

// Steps the environment n_days times with stochastic actions, recording one
// transition per day plus the bootstrap value of the final state.
inline TrajectoryBatch collect_rollout(mg::MicrogridEnv& env, const PolicyParams& policy,
                                       const nn::ParamVector& value, int n_days,
                                       rng::Stream& stream, const PpoConfig& cfg) {
    if (n_days < 1) throw std::invalid_argument("collect_rollout: n_days must be >= 1");
    TrajectoryBatch batch;
    batch.transitions.reserve(static_cast<std::size_t>(n_days));
    for (int d = 0; d < n_days; ++d) {
        Transition t;
        t.state = observe(env.state(), cfg.obs_energy_scale);
        const auto head = policy_head(policy, t.state, cfg);
        const auto sample = nn::gaussian_sample(head, stream);
        std::copy(sample.action.begin(), sample.action.end(), t.action.begin());
        t.log_prob = sample.log_prob;
        t.value = nn::mlp_forward(value, t.state)[0];
        const auto out = env.step(env.prices_from_action(sample.action));
        t.reward = out.reward;
        t.done = false;
        batch.transitions.push_back(t);
    }
    const auto last_obs = observe(env.state(), cfg.obs_energy_scale);
    batch.bootstrap_value = nn::mlp_forward(value, last_obs)[0];
    return batch;
}

// Generalized advantage estimation; returns = advantages + values.
inline void compute_gae(TrajectoryBatch& batch, double gamma, double lambda) {
    const std::size_t n = batch.transitions.size();
    if (n == 0) throw std::invalid_argument("compute_gae: empty batch");
    batch.advantages.assign(n, 0.0);
    batch.returns.assign(n, 0.0);
    double gae = 0.0;
    for (std::size_t i = n; i-- > 0;) {
        const Transition& t = batch.transitions[i];
        const double next_value = t.done ? 0.0
                                 : (i + 1 < n ? batch.transitions[i + 1].value : batch.bootstrap_value);
        const double not_done = t.done ? 0.0 : 1.0;
        const double delta = t.reward + gamma * next_value * not_done - t.value;
        gae = delta + gamma * lambda * not_done * gae;
        batch.advantages[i] = gae;
        batch.returns[i] = gae + t.value;
    }
}

struct UpdateStats {
    double policy_loss = 0.0;   // mean clipped-surrogate loss, last epoch
    double value_loss = 0.0;    // mean squared error, last epoch
    double entropy = 0.0;
    double approx_kl = 0.0;     // mean(log_prob_old - log_prob_new), last epoch
    double max_grad_norm = 0.0; // largest pre-clip global norm seen
    int minibatches = 0;
};

struct UpdateResult {
    PolicyParams policy;
    nn::ParamVector value;
    UpdateStats stats;
};

namespace detail {

inline void check_finite(double x, const char* what) {
    if (!std::isfinite(x))
        throw std::runtime_error(std::string("ppo_update: non-finite ") + what + " detected, aborting");
}

} // namespace detail

// cfg.sgd_iters epochs of shuffled minibatch SGD on
//   clipped surrogate - entropy_coef * entropy + value_coef * (v - R)^2
// with global-norm gradient clipping across policy, log_std and value grads.
inline UpdateResult ppo_update(const PolicyParams& policy_in, const nn::ParamVector& value_in,
                               const TrajectoryBatch& batch, const PpoConfig& cfg,
                               rng::Stream& stream) {
    cfg.validate();
    const std::size_t n = batch.transitions.size();
    if (n == 0) throw std::invalid_argument("ppo_update: empty batch");
    if (batch.advantages.size() != n)
        throw std::invalid_argument("ppo_update: batch has no advantages (run compute_gae)");

    UpdateResult res{policy_in, value_in, {}};
    const std::size_t act_dim = res.policy.log_std.size();

    std::vector<double> adv = batch.advantages;
    if (cfg.normalize_advantages && n > 1) {
        const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(n);
        double var = 0.0;
        for (double a : adv) var += (a - mean) * (a - mean);
        const double stddev = std::sqrt(var / static_cast<double>(n));
        for (double& a : adv) a = (a - mean) / (stddev + 1e-8);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    std::vector<double> g_net(res.policy.net.size());
    std::vector<double> g_logstd(act_dim);
    std::vector<double> g_value(res.value.size());

    for (int epoch = 0; epoch < cfg.sgd_iters; ++epoch) {
        // Fisher-Yates with the seeded stream keeps updates reproducible
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[stream.next_below(i)]);

        double ep_policy_loss = 0.0, ep_value_loss = 0.0, ep_entropy = 0.0, ep_kl = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            const double mb = static_cast<double>(stop - start);
            std::fill(g_net.begin(), g_net.end(), 0.0);
            std::fill(g_logstd.begin(), g_logstd.end(), 0.0);
            std::fill(g_value.begin(), g_value.end(), 0.0);

            for (std::size_t idx = start; idx < stop; ++idx) {
                const Transition& t = batch.transitions[order[idx]];
                const double a_hat = adv[order[idx]];

                const auto head = policy_head(res.policy, t.state, cfg);
                const double lp_new = nn::gaussian_log_prob(head, t.action);
                detail::check_finite(lp_new, "log-probability");
                const double ratio = std::exp(lp_new - t.log_prob);

                const double unclipped = ratio * a_hat;
                const double clipped = std::clamp(ratio, 1.0 - cfg.clip_param, 1.0 + cfg.clip_param) * a_hat;
                ep_policy_loss += -std::min(unclipped, clipped) / static_cast<double>(n);
                ep_entropy += nn::gaussian_entropy(head) / static_cast<double>(n);
                ep_kl += (t.log_prob - lp_new) / static_cast<double>(n);

                // d(-min(u, c))/d lp_new
                double g_lp = 0.0;
                if (unclipped <= clipped)
                    g_lp = -a_hat * ratio;
                else if (ratio > 1.0 - cfg.clip_param && ratio < 1.0 + cfg.clip_param)
                    g_lp = -a_hat * ratio;
                g_lp /= mb;

                std::vector<double> g_mean(act_dim);
                for (std::size_t j = 0; j < act_dim; ++j) {
                    const double sd = std::exp(head.log_std[j]);
                    const double z = (t.action[j] - head.mean[j]) / sd;
                    g_mean[j] = g_lp * z / sd;
                    const bool clamped = res.policy.log_std[j] < cfg.log_std_lo ||
                                         res.policy.log_std[j] > cfg.log_std_hi;
                    if (!clamped)
                        g_logstd[j] += g_lp * (z * z - 1.0) - cfg.entropy_coef / mb;
                }
                const auto g_pol = nn::mlp_backward(res.policy.net, t.state, g_mean);
                for (std::size_t j = 0; j < g_net.size(); ++j) g_net[j] += g_pol.params[j];

                const double v = nn::mlp_forward(res.value, t.state)[0];
                const double ret = batch.returns[order[idx]];
                ep_value_loss += (v - ret) * (v - ret) / static_cast<double>(n);
                const double g_v = cfg.value_coef * 2.0 * (v - ret) / mb;
                const auto g_val = nn::mlp_backward(res.value, t.state, std::array<double, 1>{g_v});
                for (std::size_t j = 0; j < g_value.size(); ++j) g_value[j] += g_val.params[j];
            }

            double sq = 0.0;
            for (double g : g_net) sq += g * g;
            for (double g : g_logstd) sq += g * g;
            for (double g : g_value) sq += g * g;
            const double norm = std::sqrt(sq);
            detail::check_finite(norm, "gradient norm");
            res.stats.max_grad_norm = std::max(res.stats.max_grad_norm, norm);
            double scale = 1.0;
            if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) scale = cfg.grad_clip / norm;

            const double step = cfg.learning_rate * scale;
            for (std::size_t j = 0; j < g_net.size(); ++j) res.policy.net.values[j] -= step * g_net[j];
            for (std::size_t j = 0; j < act_dim; ++j) res.policy.log_std[j] -= step * g_logstd[j];
            for (std::size_t j = 0; j < g_value.size(); ++j) res.value.values[j] -= step * g_value[j];
            ++res.stats.minibatches;
        }
        res.stats.policy_loss = ep_policy_loss;
        res.stats.value_loss = ep_value_loss;
        res.stats.entropy = ep_entropy;
        res.stats.approx_kl = ep_kl;
    }
    return res;
}

// Mean daily profit of the deterministic policy (Gaussian mean) over n_days.
// Operates on a copy of the environment, so it is pure.
inline double evaluate(const mg::MicrogridEnv& env, const PolicyParams& policy, int n_days,
                       const PpoConfig& cfg = {}) {
    if (n_days < 1) throw std::invalid_argument("evaluate: n_days must be >= 1");
    mg::MicrogridEnv copy = env;
    copy.clear_horizon();
    double total = 0.0;
    for (int d = 0; d < n_days; ++d) {
        const auto obs = observe(copy.state(), cfg.obs_energy_scale);
        const auto mean = nn::mlp_forward(policy.net, obs);
        total += copy.step(copy.prices_from_action(mean)).reward;
    }
    return total / static_cast<double>(n_days);
}

} // namespace fedgrid::ppo
