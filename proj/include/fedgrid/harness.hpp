#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedgrid/federation.hpp"
#include "fedgrid/microgrid.hpp"
#include "fedgrid/ppo.hpp"
#include "fedgrid/scenario.hpp"

// Experiment runner: builds clusters, dispatches to the configured
// algorithm, and persists metrics as CSV plus a plain-text manifest. Every
// byte of output is a pure function of (config, seed).

namespace fedgrid::harness {

enum class ExpAlgorithm { PFH, FedAvg, LocalOnly, NoRL };

inline const char* algorithm_name(ExpAlgorithm a) {
    switch (a) {
        case ExpAlgorithm::PFH: return "PFH";
        case ExpAlgorithm::FedAvg: return "FedAvg";
        case ExpAlgorithm::LocalOnly: return "LocalOnly";
        case ExpAlgorithm::NoRL: return "NoRL";
    }
    return "?";
}

inline std::optional<ExpAlgorithm> parse_algorithm(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "pfh") return ExpAlgorithm::PFH;
    if (s == "fedavg") return ExpAlgorithm::FedAvg;
    if (s == "localonly" || s == "local") return ExpAlgorithm::LocalOnly;
    if (s == "norl" || s == "no-rl") return ExpAlgorithm::NoRL;
    return std::nullopt;
}

struct ScheduleOverrides {
    double buy_peak = 0.30;
    double buy_offpeak = 0.15;
    double sell_flat = 0.05;
    int peak_start = 16;
    int peak_end = 21;
};

struct ExperimentConfig {
    scenario::DiversitySpec scenario_spec;
    ScheduleOverrides schedule;
    ExpAlgorithm algorithm = ExpAlgorithm::LocalOnly;
    ppo::PpoConfig ppo;
    int policy_hidden_layers = 1;
    int policy_hidden_units = 32;
    fed::HypernetConfig hnet;
    int local_steps = 4;    // K
    int rollout_days = 5;   // env days per local PPO step
    int eval_days = 2;
    long horizon_days = 2000;
    long eval_every = 20;   // NoRL metrics window
    int soc_grid = 101;
    double price_cap = 0.0; // 0 -> auto (2 x max utility buy)
    bool soc_carry_over = false;
    scenario::ProfileSource profiles;
    std::vector<std::uint64_t> seeds = {1};
    std::string run_id = "run";
    std::string output_dir = "out";
    std::uint32_t transfer_env_offset = 1000;
    int threads = 0; // 0 -> hardware concurrency; FEDGRID_THREADS caps

    std::vector<nn::LayerSpec> policy_shape() const {
        std::vector<nn::LayerSpec> specs;
        int in = mg::kStateDim;
        for (int k = 0; k < policy_hidden_layers; ++k) {
            specs.push_back({in, policy_hidden_units, nn::Activation::Tanh});
            in = policy_hidden_units;
        }
        specs.push_back({in, mg::kActionDim, nn::Activation::Identity});
        return specs;
    }

    std::vector<nn::LayerSpec> value_shape() const {
        std::vector<nn::LayerSpec> specs;
        int in = mg::kStateDim;
        for (int k = 0; k < policy_hidden_layers; ++k) {
            specs.push_back({in, policy_hidden_units, nn::Activation::Tanh});
            in = policy_hidden_units;
        }
        specs.push_back({in, 1, nn::Activation::Identity});
        return specs;
    }

    long days_per_round() const { return static_cast<long>(local_steps) * rollout_days; }
};

// Sweep-surface bounds. Algorithm-dependent rules (local-step ranges) are
// enforced in validate_config.
struct ParamBounds {
    double lo;
    double hi;
    bool integer;
    bool log_scale;
    bool zero_disables = false;
};

inline const std::map<std::string, ParamBounds>& sweep_bounds() {
    static const std::map<std::string, ParamBounds> bounds = {
        {"ppo.batch_size", {16, 2980, true, false}},           // floor(e^8)
        {"ppo.learning_rate", {std::exp(-8.0), 1.0, false, true}},
        {"policy.hidden_layers", {1, 7, true, false}},
        {"policy.hidden_units", {1, 1096, true, true}},        // floor(e^7)
        {"ppo.clip_param", {0.01, 1.0, false, false}},
        {"ppo.sgd_iters", {1, 30, true, false}},
        {"local_steps", {1, 403, true, false}},                // per-algorithm rule below
        {"hnet.dropout", {std::exp(-10.0), 1.0, false, true, true}},
        {"hnet.embedding_dim", {1, 512, true, false}},
        {"hnet.l2", {std::exp(-10.0), 1.0, false, true, true}},
        {"hnet.lr", {std::exp(-4.0), 1.0, false, true}},
        {"hnet.hidden_layers", {1, 6, true, false}},
        {"hnet.hidden_units", {1, 1024, true, false}},
    };
    return bounds;
}

// Collects every problem instead of stopping at the first one.
inline std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
    std::vector<std::string> errors;
    auto err = [&](const std::string& m) { errors.push_back(m); };

    if (!(cfg.scenario_spec.sigma > 0.0)) err("sigma must be > 0");
    if (cfg.scenario_spec.n_prosumers < 1) err("n_prosumers must be >= 1");
    if (cfg.scenario_spec.n_microgrids < 1) err("n_microgrids must be >= 1");
    if (cfg.seeds.empty()) err("seeds list must not be empty");
    if (cfg.run_id.empty()) err("run_id must not be empty");
    if (cfg.horizon_days < 1) err("horizon_days must be >= 1");
    if (cfg.eval_every < 1) err("eval_every must be >= 1");
    if (cfg.horizon_days < cfg.eval_every) err("horizon_days must be >= eval_every");
    if (cfg.rollout_days < 1) err("rollout_days must be >= 1");
    if (cfg.eval_days < 1) err("eval_days must be >= 1");
    if (cfg.soc_grid < 1) err("env.soc_grid must be >= 1");
    if (cfg.schedule.sell_flat > cfg.schedule.buy_offpeak || cfg.schedule.sell_flat > cfg.schedule.buy_peak)
        err("schedule: sell price must not exceed buy prices");
    if (cfg.schedule.peak_start < 0 || cfg.schedule.peak_end >= mg::kHoursPerDay ||
        cfg.schedule.peak_start > cfg.schedule.peak_end)
        err("schedule: bad peak window");
    if (cfg.profiles.kind == scenario::ProfileSource::Kind::Csv && cfg.profiles.csv_path.empty())
        err("profiles=csv requires profile_csv");
    if (cfg.profiles.kind == scenario::ProfileSource::Kind::Synth && !(cfg.profiles.scale > 0.0))
        err("profile_scale must be > 0");

    auto check = [&](const char* name, double v) {
        const auto& b = sweep_bounds().at(name);
        if (b.zero_disables && v == 0.0) return;
        if (v < b.lo || v > b.hi) {
            std::ostringstream ss;
            ss << name << " = " << v << " outside [" << b.lo << ", " << b.hi << "]";
            err(ss.str());
        }
    };
    check("ppo.batch_size", cfg.ppo.batch_size);
    check("ppo.learning_rate", cfg.ppo.learning_rate);
    check("policy.hidden_layers", cfg.policy_hidden_layers);
    check("policy.hidden_units", cfg.policy_hidden_units);
    check("ppo.clip_param", cfg.ppo.clip_param);
    check("ppo.sgd_iters", cfg.ppo.sgd_iters);
    check("hnet.embedding_dim", cfg.hnet.embedding_dim);
    check("hnet.lr", cfg.hnet.lr);
    check("hnet.dropout", cfg.hnet.dropout);
    check("hnet.l2", cfg.hnet.l2);
    check("hnet.hidden_layers", static_cast<double>(cfg.hnet.hidden.size()));
    for (int w : cfg.hnet.hidden) check("hnet.hidden_units", w);

    // local-step bounds depend on the algorithm's sweep row
    if (cfg.algorithm == ExpAlgorithm::PFH && (cfg.local_steps < 1 || cfg.local_steps > 100))
        err("local_steps outside [1, 100] for PFH");
    else if (cfg.algorithm == ExpAlgorithm::FedAvg && (cfg.local_steps < 2 || cfg.local_steps > 403))
        err("local_steps outside [2, 403] for FedAvg");
    else if (cfg.local_steps < 1)
        err("local_steps must be >= 1");

    if (cfg.algorithm == ExpAlgorithm::NoRL) {
        if (cfg.horizon_days % cfg.eval_every != 0)
            err("horizon_days must be a multiple of eval_every for NoRL");
    } else if (cfg.horizon_days % cfg.days_per_round() != 0) {
        err("horizon_days must be a multiple of local_steps * rollout_days");
    }
    if (cfg.ppo.gamma < 0.0 || cfg.ppo.gamma > 1.0) err("ppo.gamma outside [0, 1]");
    if (cfg.ppo.gae_lambda < 0.0 || cfg.ppo.gae_lambda > 1.0) err("ppo.gae_lambda outside [0, 1]");
    if (!(cfg.ppo.obs_energy_scale > 0.0)) err("ppo.obs_energy_scale must be > 0");
    return errors;
}

struct ConfigError : std::runtime_error {
    std::vector<std::string> problems;
    explicit ConfigError(std::vector<std::string> p)
        : std::runtime_error(join(p)), problems(std::move(p)) {}

    static std::string join(const std::vector<std::string>& p) {
        std::string all = "invalid config:";
        for (const auto& e : p) all += "\n  - " + e;
        return all;
    }
};

// ---------------------------------------------------------------------------
// Flat key=value config files. '#' starts a comment; later keys win.

inline void apply_config_entry(ExperimentConfig& cfg, const std::string& key, const std::string& value);

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    ExperimentConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: " + path + ":" + std::to_string(lineno) +
                                     ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            apply_config_entry(cfg, key, value);
        } catch (const std::exception& e) {
            throw std::runtime_error("config: " + path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

namespace detail {

inline double to_double(const std::string& v) {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("bad number '" + v + "'");
    return d;
}

inline long to_long(const std::string& v) {
    std::size_t pos = 0;
    const long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("bad integer '" + v + "'");
    return d;
}

inline bool to_bool(const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw std::invalid_argument("bad boolean '" + v + "'");
}

} // namespace detail

inline void apply_config_entry(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    using detail::to_bool;
    using detail::to_double;
    using detail::to_long;
    if (key == "mu") cfg.scenario_spec.mu = to_double(value);
    else if (key == "sigma") cfg.scenario_spec.sigma = to_double(value);
    else if (key == "n_prosumers") cfg.scenario_spec.n_prosumers = static_cast<int>(to_long(value));
    else if (key == "n_microgrids") cfg.scenario_spec.n_microgrids = static_cast<int>(to_long(value));
    else if (key == "seed") cfg.scenario_spec.seed = static_cast<std::uint64_t>(to_long(value));
    else if (key == "buy_peak") cfg.schedule.buy_peak = to_double(value);
    else if (key == "buy_offpeak") cfg.schedule.buy_offpeak = to_double(value);
    else if (key == "sell_flat") cfg.schedule.sell_flat = to_double(value);
    else if (key == "peak_start") cfg.schedule.peak_start = static_cast<int>(to_long(value));
    else if (key == "peak_end") cfg.schedule.peak_end = static_cast<int>(to_long(value));
    else if (key == "algorithm") {
        const auto a = parse_algorithm(value);
        if (!a) throw std::invalid_argument("unknown algorithm '" + value + "'");
        cfg.algorithm = *a;
    } else if (key == "horizon_days") cfg.horizon_days = to_long(value);
    else if (key == "eval_every") cfg.eval_every = to_long(value);
    else if (key == "local_steps") cfg.local_steps = static_cast<int>(to_long(value));
    else if (key == "rollout_days") cfg.rollout_days = static_cast<int>(to_long(value));
    else if (key == "eval_days") cfg.eval_days = static_cast<int>(to_long(value));
    else if (key == "run_id") cfg.run_id = value;
    else if (key == "out") cfg.output_dir = value;
    else if (key == "threads") cfg.threads = static_cast<int>(to_long(value));
    else if (key == "seeds") {
        cfg.seeds.clear();
        std::istringstream ss(value);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) cfg.seeds.push_back(static_cast<std::uint64_t>(to_long(tok)));
        if (cfg.seeds.empty()) throw std::invalid_argument("empty seeds list");
    } else if (key == "ppo.learning_rate") cfg.ppo.learning_rate = to_double(value);
    else if (key == "ppo.clip_param") cfg.ppo.clip_param = to_double(value);
    else if (key == "ppo.sgd_iters") cfg.ppo.sgd_iters = static_cast<int>(to_long(value));
    else if (key == "ppo.batch_size") cfg.ppo.batch_size = static_cast<int>(to_long(value));
    else if (key == "ppo.gamma") cfg.ppo.gamma = to_double(value);
    else if (key == "ppo.gae_lambda") cfg.ppo.gae_lambda = to_double(value);
    else if (key == "ppo.entropy_coef") cfg.ppo.entropy_coef = to_double(value);
    else if (key == "ppo.value_coef") cfg.ppo.value_coef = to_double(value);
    else if (key == "ppo.grad_clip") cfg.ppo.grad_clip = to_double(value);
    else if (key == "ppo.normalize_advantages") cfg.ppo.normalize_advantages = to_bool(value);
    else if (key == "ppo.obs_energy_scale") cfg.ppo.obs_energy_scale = to_double(value);
    else if (key == "policy.hidden_layers") cfg.policy_hidden_layers = static_cast<int>(to_long(value));
    else if (key == "policy.hidden_units") cfg.policy_hidden_units = static_cast<int>(to_long(value));
    else if (key == "hnet.embedding_dim") cfg.hnet.embedding_dim = static_cast<int>(to_long(value));
    else if (key == "hnet.hidden_layers") {
        const int n = static_cast<int>(to_long(value));
        if (n < 1) throw std::invalid_argument("hnet.hidden_layers must be >= 1");
        const int w = cfg.hnet.hidden.empty() ? 32 : cfg.hnet.hidden.front();
        cfg.hnet.hidden.assign(static_cast<std::size_t>(n), w);
    } else if (key == "hnet.hidden_units") {
        const int w = static_cast<int>(to_long(value));
        if (cfg.hnet.hidden.empty()) cfg.hnet.hidden = {w};
        else for (int& u : cfg.hnet.hidden) u = w;
    } else if (key == "hnet.lr") cfg.hnet.lr = to_double(value);
    else if (key == "hnet.embedding_lr") cfg.hnet.embedding_lr = to_double(value);
    else if (key == "hnet.dropout") cfg.hnet.dropout = to_double(value);
    else if (key == "hnet.l2") cfg.hnet.l2 = to_double(value);
    else if (key == "env.soc_grid") cfg.soc_grid = static_cast<int>(to_long(value));
    else if (key == "env.price_cap") cfg.price_cap = to_double(value);
    else if (key == "env.carry_over") cfg.soc_carry_over = to_bool(value);
    else if (key == "profiles") {
        if (value == "synth") cfg.profiles.kind = scenario::ProfileSource::Kind::Synth;
        else if (value == "csv") cfg.profiles.kind = scenario::ProfileSource::Kind::Csv;
        else throw std::invalid_argument("profiles must be synth or csv");
    } else if (key == "profile_scale") cfg.profiles.scale = to_double(value);
    else if (key == "profile_csv") cfg.profiles.csv_path = value;
    else if (key == "transfer.env_offset") cfg.transfer_env_offset = static_cast<std::uint32_t>(to_long(value));
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

// Fully resolved config, one key per line, stable order.
inline std::string resolved_config_text(const ExperimentConfig& cfg) {
    std::ostringstream ss;
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    ss << "algorithm=" << algorithm_name(cfg.algorithm) << "\n";
    ss << "buy_offpeak=" << num(cfg.schedule.buy_offpeak) << "\n";
    ss << "buy_peak=" << num(cfg.schedule.buy_peak) << "\n";
    ss << "env.carry_over=" << (cfg.soc_carry_over ? 1 : 0) << "\n";
    ss << "env.price_cap=" << num(cfg.price_cap) << "\n";
    ss << "env.soc_grid=" << cfg.soc_grid << "\n";
    ss << "eval_days=" << cfg.eval_days << "\n";
    ss << "eval_every=" << cfg.eval_every << "\n";
    ss << "hnet.dropout=" << num(cfg.hnet.dropout) << "\n";
    ss << "hnet.embedding_dim=" << cfg.hnet.embedding_dim << "\n";
    ss << "hnet.embedding_lr=" << num(cfg.hnet.embedding_lr) << "\n";
    ss << "hnet.hidden_layers=" << cfg.hnet.hidden.size() << "\n";
    ss << "hnet.hidden_units=" << (cfg.hnet.hidden.empty() ? 0 : cfg.hnet.hidden.front()) << "\n";
    ss << "hnet.l2=" << num(cfg.hnet.l2) << "\n";
    ss << "hnet.lr=" << num(cfg.hnet.lr) << "\n";
    ss << "horizon_days=" << cfg.horizon_days << "\n";
    ss << "local_steps=" << cfg.local_steps << "\n";
    ss << "mu=" << num(cfg.scenario_spec.mu) << "\n";
    ss << "n_microgrids=" << cfg.scenario_spec.n_microgrids << "\n";
    ss << "n_prosumers=" << cfg.scenario_spec.n_prosumers << "\n";
    ss << "out=" << cfg.output_dir << "\n";
    ss << "peak_end=" << cfg.schedule.peak_end << "\n";
    ss << "peak_start=" << cfg.schedule.peak_start << "\n";
    ss << "policy.hidden_layers=" << cfg.policy_hidden_layers << "\n";
    ss << "policy.hidden_units=" << cfg.policy_hidden_units << "\n";
    ss << "ppo.batch_size=" << cfg.ppo.batch_size << "\n";
    ss << "ppo.clip_param=" << num(cfg.ppo.clip_param) << "\n";
    ss << "ppo.entropy_coef=" << num(cfg.ppo.entropy_coef) << "\n";
    ss << "ppo.gae_lambda=" << num(cfg.ppo.gae_lambda) << "\n";
    ss << "ppo.gamma=" << num(cfg.ppo.gamma) << "\n";
    ss << "ppo.grad_clip=" << num(cfg.ppo.grad_clip) << "\n";
    ss << "ppo.learning_rate=" << num(cfg.ppo.learning_rate) << "\n";
    ss << "ppo.normalize_advantages=" << (cfg.ppo.normalize_advantages ? 1 : 0) << "\n";
    ss << "ppo.obs_energy_scale=" << num(cfg.ppo.obs_energy_scale) << "\n";
    ss << "ppo.sgd_iters=" << cfg.ppo.sgd_iters << "\n";
    ss << "ppo.value_coef=" << num(cfg.ppo.value_coef) << "\n";
    ss << "profile_csv=" << cfg.profiles.csv_path << "\n";
    ss << "profile_scale=" << num(cfg.profiles.scale) << "\n";
    ss << "profiles=" << (cfg.profiles.kind == scenario::ProfileSource::Kind::Csv ? "csv" : "synth") << "\n";
    ss << "rollout_days=" << cfg.rollout_days << "\n";
    ss << "run_id=" << cfg.run_id << "\n";
    ss << "seed=" << cfg.scenario_spec.seed << "\n";
    ss << "seeds=";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) ss << (i ? "," : "") << cfg.seeds[i];
    ss << "\n";
    ss << "sell_flat=" << num(cfg.schedule.sell_flat) << "\n";
    ss << "sigma=" << num(cfg.scenario_spec.sigma) << "\n";
    ss << "transfer.env_offset=" << cfg.transfer_env_offset << "\n";
    return ss.str();
}

// ---------------------------------------------------------------------------
// SHA-1 (for the git-style blob hash in the manifest).

namespace detail {

class Sha1 {
public:
    void update(const std::uint8_t* data, std::size_t len) {
        for (std::size_t i = 0; i < len; ++i) {
            block_[blocklen_++] = data[i];
            total_ += 1;
            if (blocklen_ == 64) {
                process();
                blocklen_ = 0;
            }
        }
    }

    std::string hex_digest() {
        const std::uint64_t bitlen = total_ * 8;
        std::uint8_t pad = 0x80;
        update(&pad, 1);
        const std::uint8_t zero = 0;
        while (blocklen_ != 56) update(&zero, 1);
        for (int i = 7; i >= 0; --i) {
            const std::uint8_t b = static_cast<std::uint8_t>(bitlen >> (8 * i));
            block_[blocklen_++] = b;
            if (blocklen_ == 64) {
                process();
                blocklen_ = 0;
            }
        }
        char out[41];
        for (int i = 0; i < 5; ++i) std::snprintf(out + 8 * i, 9, "%08x", h_[i]);
        return std::string(out, 40);
    }

private:
    static std::uint32_t rol(std::uint32_t x, int n) { return (x << n) | (x >> (32 - n)); }

    void process() {
        std::uint32_t w[80];
        for (int i = 0; i < 16; ++i)
            w[i] = (static_cast<std::uint32_t>(block_[4 * i]) << 24) |
                   (static_cast<std::uint32_t>(block_[4 * i + 1]) << 16) |
                   (static_cast<std::uint32_t>(block_[4 * i + 2]) << 8) |
                   static_cast<std::uint32_t>(block_[4 * i + 3]);
        for (int i = 16; i < 80; ++i) w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
        std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
        for (int i = 0; i < 80; ++i) {
            std::uint32_t f, k;
            if (i < 20) { f = (b & c) | (~b & d); k = 0x5A827999; }
            else if (i < 40) { f = b ^ c ^ d; k = 0x6ED9EBA1; }
            else if (i < 60) { f = (b & c) | (b & d) | (c & d); k = 0x8F1BBCDC; }
            else { f = b ^ c ^ d; k = 0xCA62C1D6; }
            const std::uint32_t tmp = rol(a, 5) + f + e + k + w[i];
            e = d; d = c; c = rol(b, 30); b = a; a = tmp;
        }
        h_[0] += a; h_[1] += b; h_[2] += c; h_[3] += d; h_[4] += e;
    }

    std::uint32_t h_[5] = {0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476, 0xC3D2E1F0};
    std::uint8_t block_[64] = {};
    std::size_t blocklen_ = 0;
    std::uint64_t total_ = 0;
};

} // namespace detail

// SHA-1 of "blob <len>\0<content>", i.e. what `git hash-object` prints.
inline std::string git_blob_sha1(const std::string& content) {
    detail::Sha1 sha;
    const std::string header = "blob " + std::to_string(content.size()) + '\0';
    sha.update(reinterpret_cast<const std::uint8_t*>(header.data()), header.size());
    sha.update(reinterpret_cast<const std::uint8_t*>(content.data()), content.size());
    return sha.hex_digest();
}

// ---------------------------------------------------------------------------
// Metrics.

struct MetricsRow {
    std::string run_id;
    std::uint64_t seed = 0;
    long round = 0;
    long day = 0;
    std::uint32_t env_id = 0;
    double mean_daily_profit = 0.0;
    double cumulative_profit = 0.0;
};

inline constexpr const char* kMetricsHeader = "run_id,seed,round,day,env_id,mean_daily_profit,cumulative_profit";

inline std::string metrics_to_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream ss;
    ss << kMetricsHeader << "\n";
    char buf[40];
    for (const auto& r : rows) {
        ss << r.run_id << ',' << r.seed << ',' << r.round << ',' << r.day << ',' << r.env_id << ',';
        std::snprintf(buf, sizeof buf, "%.17g", r.mean_daily_profit);
        ss << buf << ',';
        std::snprintf(buf, sizeof buf, "%.17g", r.cumulative_profit);
        ss << buf << '\n';
    }
    return ss.str();
}

namespace detail {

inline int worker_budget(const ExperimentConfig& cfg) {
    int n = cfg.threads > 0 ? cfg.threads
                            : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("FEDGRID_THREADS")) {
        try {
            const int cap = std::stoi(env);
            if (cap >= 1) n = std::min(n, cap);
        } catch (...) {
            throw std::runtime_error("FEDGRID_THREADS is not an integer");
        }
    }
    return std::max(1, n);
}

inline scenario::UtilitySchedule make_schedule(const ExperimentConfig& cfg) {
    return scenario::UtilitySchedule::default_tou(cfg.schedule.buy_peak, cfg.schedule.buy_offpeak,
                                                  cfg.schedule.sell_flat, cfg.schedule.peak_start,
                                                  cfg.schedule.peak_end);
}

inline std::vector<mg::MicrogridEnv> build_envs(const ExperimentConfig& cfg, std::uint64_t cluster_seed) {
    scenario::DiversitySpec spec = cfg.scenario_spec;
    spec.seed = cluster_seed;
    mg::EnvConfig env_cfg;
    env_cfg.soc_grid = cfg.soc_grid;
    env_cfg.soc_carry_over = cfg.soc_carry_over;
    env_cfg.price_cap = cfg.price_cap;
    return scenario::build_cluster(spec, make_schedule(cfg), cfg.profiles, env_cfg);
}

inline std::vector<fed::Client> build_clients(const ExperimentConfig& cfg,
                                              std::vector<mg::MicrogridEnv> envs,
                                              std::uint64_t run_seed, std::uint32_t id_offset) {
    fed::ClientConfig ccfg;
    ccfg.ppo = cfg.ppo;
    ccfg.rollout_days = cfg.rollout_days;
    ccfg.eval_days = cfg.eval_days;
    std::vector<fed::Client> clients;
    clients.reserve(envs.size());
    for (std::size_t i = 0; i < envs.size(); ++i)
        clients.emplace_back(id_offset + static_cast<std::uint32_t>(i), std::move(envs[i]),
                             cfg.policy_shape(), cfg.value_shape(), ccfg, run_seed);
    return clients;
}

// One seed's worth of simulation; returns its metric rows in order.
inline std::vector<MetricsRow> simulate_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                                             const std::string& run_id,
                                             const fed::HypernetState* pretrained,
                                             std::uint64_t cluster_salt, std::uint32_t id_offset) {
    const std::uint64_t cluster_seed = rng::derive_seed(cfg.scenario_spec.seed, {seed, cluster_salt});
    std::vector<MetricsRow> rows;
    std::map<std::uint32_t, double> cumulative;

    if (cfg.algorithm == ExpAlgorithm::NoRL) {
        auto envs = build_envs(cfg, cluster_seed);
        std::vector<double> window(envs.size(), 0.0);
        for (long d = 1; d <= cfg.horizon_days; ++d) {
            for (std::size_t i = 0; i < envs.size(); ++i) window[i] += envs[i].no_rl_step().reward;
            if (d % cfg.eval_every == 0) {
                for (std::size_t i = 0; i < envs.size(); ++i) {
                    const std::uint32_t env_id = id_offset + static_cast<std::uint32_t>(i);
                    cumulative[env_id] += window[i];
                    rows.push_back({run_id, seed, d / cfg.eval_every, d, env_id,
                                    window[i] / static_cast<double>(cfg.eval_every), cumulative[env_id]});
                    window[i] = 0.0;
                }
            }
        }
        return rows;
    }

    auto clients = build_clients(cfg, build_envs(cfg, cluster_seed), seed, id_offset);
    std::vector<std::uint32_t> ids;
    for (const auto& c : clients) ids.push_back(c.env_id());

    fed::ServerState server;
    switch (cfg.algorithm) {
        case ExpAlgorithm::PFH: {
            server.algorithm = fed::Algorithm::PFH;
            if (pretrained)
                server.hnet = fed::transfer_init(*pretrained, ids, rng::derive_seed(seed, {0x7a45}));
            else
                server.hnet = fed::make_hypernet(cfg.hnet, cfg.policy_shape(), ids,
                                                 rng::derive_seed(seed, {0x43a7}));
            break;
        }
        case ExpAlgorithm::FedAvg:
            server.algorithm = fed::Algorithm::FedAvg;
            server.shared_theta = nn::mlp_init(cfg.policy_shape(), rng::derive_seed(seed, {0xfeda}));
            break;
        case ExpAlgorithm::LocalOnly:
            server.algorithm = fed::Algorithm::LocalOnly;
            break;
        case ExpAlgorithm::NoRL:
            break;
    }

    fed::FedConfig fcfg;
    fcfg.local_steps = cfg.local_steps;
    fcfg.algorithm = server.algorithm;
    const long rounds = cfg.horizon_days / cfg.days_per_round();
    fcfg.rounds = static_cast<int>(rounds);

    for (long r = 1; r <= rounds; ++r) {
        const fed::RoundResult res = fed::run_round(server, clients, fcfg);
        if (res.aborted) throw std::runtime_error("round " + std::to_string(r) + " aborted: " + res.error);
        for (const auto& m : res.per_env) {
            cumulative[m.env_id] += m.train_mean_reward * m.days;
            rows.push_back({run_id, seed, r, r * cfg.days_per_round(), m.env_id, m.train_mean_reward,
                            cumulative[m.env_id]});
        }
    }
    return rows;
}

inline std::vector<std::vector<MetricsRow>> run_seeds_parallel(
    const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
    const std::string& run_id, const fed::HypernetState* pretrained, std::uint64_t cluster_salt,
    std::uint32_t id_offset) {
    const int budget = worker_budget(cfg);
    std::vector<std::vector<MetricsRow>> out(seeds.size());
    std::size_t next = 0;
    while (next < seeds.size()) {
        const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(budget),
                                                        seeds.size() - next);
        std::vector<std::future<std::vector<MetricsRow>>> futs;
        for (std::size_t i = 0; i < batch; ++i) {
            const std::uint64_t s = seeds[next + i];
            futs.push_back(std::async(std::launch::async, [&, s] {
                return simulate_seed(cfg, s, run_id, pretrained, cluster_salt, id_offset);
            }));
        }
        for (std::size_t i = 0; i < batch; ++i) out[next + i] = futs[i].get();
        next += batch;
    }
    return out;
}

inline std::string write_outputs(const ExperimentConfig& cfg, const std::string& run_id,
                                 const std::vector<MetricsRow>& rows) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);
    const std::string csv = metrics_to_csv(rows);
    const fs::path csv_path = fs::path(cfg.output_dir) / (run_id + "_metrics.csv");
    {
        std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + csv_path.string());
        out << csv;
    }
    const fs::path manifest_path = fs::path(cfg.output_dir) / (run_id + "_manifest.txt");
    std::ofstream man(manifest_path, std::ios::binary | std::ios::trunc);
    if (!man) throw std::runtime_error("cannot write " + manifest_path.string());
    man << resolved_config_text(cfg);
    man << "metrics_csv=" << csv_path.filename().string() << "\n";
    man << "metrics_sha1=" << git_blob_sha1(csv) << "\n";
    return csv_path.string();
}

} // namespace detail

// Runs the configured experiment over all seeds and writes the metrics CSV
// and manifest. Returns the CSV path.
inline std::string run_experiment(const ExperimentConfig& cfg) {
    if (auto errors = validate_config(cfg); !errors.empty()) throw ConfigError(std::move(errors));
    const auto per_seed = detail::run_seeds_parallel(cfg, cfg.seeds, cfg.run_id, nullptr, 0x5eed, 0);
    std::vector<MetricsRow> rows;
    for (const auto& block : per_seed) rows.insert(rows.end(), block.begin(), block.end());
    return detail::write_outputs(cfg, cfg.run_id, rows);
}

// Few-shot transfer: trains a pretrained hypernetwork and a randomly
// initialized one on the same fresh cluster, per seed, and writes both arms
// into one metrics file (run_id suffixes _pretrained / _baseline).
inline std::string run_transfer(const ExperimentConfig& cfg, const std::string& state_path) {
    ExperimentConfig tcfg = cfg;
    tcfg.algorithm = ExpAlgorithm::PFH;
    if (auto errors = validate_config(tcfg); !errors.empty()) throw ConfigError(std::move(errors));
    const fed::HypernetState pretrained = fed::load_hypernet(state_path);
    if (pretrained.policy_shape != tcfg.policy_shape())
        throw std::runtime_error("transfer: pretrained policy shape differs from configured policy");

    const auto arm_pre = detail::run_seeds_parallel(tcfg, tcfg.seeds, tcfg.run_id + "_pretrained",
                                                    &pretrained, 0x7a9, tcfg.transfer_env_offset);
    const auto arm_base = detail::run_seeds_parallel(tcfg, tcfg.seeds, tcfg.run_id + "_baseline",
                                                     nullptr, 0x7a9, tcfg.transfer_env_offset);
    std::vector<MetricsRow> rows;
    for (const auto& block : arm_pre) rows.insert(rows.end(), block.begin(), block.end());
    for (const auto& block : arm_base) rows.insert(rows.end(), block.begin(), block.end());
    return detail::write_outputs(tcfg, tcfg.run_id, rows);
}

// Pretrains a PFH hypernetwork on the configured cluster and saves its
// state; companion to run_transfer.
inline std::string pretrain_hypernet(const ExperimentConfig& cfg, const std::string& state_path) {
    ExperimentConfig pcfg = cfg;
    pcfg.algorithm = ExpAlgorithm::PFH;
    if (auto errors = validate_config(pcfg); !errors.empty()) throw ConfigError(std::move(errors));
    if (pcfg.seeds.size() != 1)
        throw std::runtime_error("pretrain: exactly one seed required (got " +
                                 std::to_string(pcfg.seeds.size()) + ")");
    const std::uint64_t seed = pcfg.seeds.front();
    const std::uint64_t cluster_seed = rng::derive_seed(pcfg.scenario_spec.seed, {seed, 0x5eed});
    auto clients = detail::build_clients(pcfg, detail::build_envs(pcfg, cluster_seed), seed, 0);
    std::vector<std::uint32_t> ids;
    for (const auto& c : clients) ids.push_back(c.env_id());

    fed::ServerState server;
    server.algorithm = fed::Algorithm::PFH;
    server.hnet = fed::make_hypernet(pcfg.hnet, pcfg.policy_shape(), ids, rng::derive_seed(seed, {0x43a7}));
    fed::FedConfig fcfg{static_cast<int>(pcfg.horizon_days / pcfg.days_per_round()), pcfg.local_steps,
                        fed::Algorithm::PFH};
    for (int r = 0; r < fcfg.rounds; ++r) {
        const auto res = fed::run_round(server, clients, fcfg);
        if (res.aborted) throw std::runtime_error("pretrain round aborted: " + res.error);
    }
    fed::save_hypernet(*server.hnet, state_path);
    return state_path;
}

// ---------------------------------------------------------------------------
// Deterministic grid sweep over the bounded hyperparameter surface.

struct SweepAxis {
    std::string param;
    int points = 2;
};

inline std::vector<double> sweep_points(const std::string& param, int n) {
    const auto it = sweep_bounds().find(param);
    if (it == sweep_bounds().end())
        throw std::invalid_argument("sweep: unknown parameter '" + param + "'");
    if (n < 1) throw std::invalid_argument("sweep: points must be >= 1");
    const ParamBounds& b = it->second;
    std::vector<double> pts;
    for (int i = 0; i < n; ++i) {
        const double t = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
        double v = b.log_scale ? std::exp(std::log(b.lo) + t * (std::log(b.hi) - std::log(b.lo)))
                               : b.lo + t * (b.hi - b.lo);
        if (b.integer) v = std::llround(v);
        pts.push_back(v);
    }
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    return pts;
}

inline void set_sweep_param(ExperimentConfig& cfg, const std::string& param, double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    apply_config_entry(cfg, param, buf);
}

inline std::vector<std::string> sweep_grid(const ExperimentConfig& base,
                                           const std::vector<SweepAxis>& axes) {
    if (axes.empty()) throw std::invalid_argument("sweep: no axes given");
    std::vector<std::vector<double>> grids;
    for (const auto& ax : axes) grids.push_back(sweep_points(ax.param, ax.points));

    std::vector<std::string> outputs;
    std::vector<std::size_t> idx(axes.size(), 0);
    std::size_t combo = 0;
    while (true) {
        ExperimentConfig cfg = base;
        for (std::size_t a = 0; a < axes.size(); ++a)
            set_sweep_param(cfg, axes[a].param, grids[a][idx[a]]);
        cfg.run_id = base.run_id + "_s" + std::to_string(combo);
        outputs.push_back(run_experiment(cfg));
        ++combo;
        std::size_t a = 0;
        for (; a < axes.size(); ++a) {
            if (++idx[a] < grids[a].size()) break;
            idx[a] = 0;
        }
        if (a == axes.size()) break;
    }
    return outputs;
}

} // namespace fedgrid::harness
